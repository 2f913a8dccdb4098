use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker_id: String,
    pub path: PathBuf,
    pub duration: f64,
}

/// Utterance list; one `utt_id speaker_id path duration` line per entry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub num_utts: usize,
    pub num_speakers: usize,
    pub total_hours: f64,
    pub per_speaker: BTreeMap<String, usize>,
}

impl DatasetStats {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "num_utts={}\nnum_speakers={}\ntotal_hours={:.6}\n",
            self.num_utts, self.num_speakers, self.total_hours
        );
        for (spk, n) in &self.per_speaker {
            let _ = writeln!(s, "speaker {spk} {n}");
        }
        s
    }
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [utt, spk, path, dur] = fields[..] else {
                return Err(Error::Manifest(format!(
                    "line {}: expected 4 fields, got {}",
                    i + 1,
                    fields.len()
                )));
            };
            let duration: f64 = dur
                .parse()
                .map_err(|_| Error::Manifest(format!("line {}: bad duration {dur:?}", i + 1)))?;
            if !(duration >= 0.0) || !duration.is_finite() {
                return Err(Error::Manifest(format!("line {}: bad duration {dur:?}", i + 1)));
            }
            entries.push(ManifestEntry {
                utt_id: utt.to_string(),
                speaker_id: spk.to_string(),
                path: PathBuf::from(path),
                duration,
            });
        }
        Ok(Self { entries })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{} {} {} {}",
                e.utt_id,
                e.speaker_id,
                e.path.display(),
                e.duration
            );
        }
        s
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Non-empty with unique utterance ids.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Manifest("no utterances".into()));
        }
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.utt_id.as_str()) {
                return Err(Error::DuplicateUtterance(e.utt_id.clone()));
            }
        }
        Ok(())
    }

    /// Sorted distinct speaker ids.
    pub fn speakers(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.speaker_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Dense labels `0..C` in sorted speaker order.
    pub fn label_map(&self) -> BTreeMap<String, usize> {
        self.speakers()
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect()
    }
}

pub fn compute_stats(m: &Manifest) -> Result<DatasetStats> {
    m.validate()?;
    let mut per_speaker = BTreeMap::new();
    for e in &m.entries {
        *per_speaker.entry(e.speaker_id.clone()).or_insert(0) += 1;
    }
    let seconds: f64 = m.entries.iter().map(|e| e.duration).sum();
    Ok(DatasetStats {
        num_utts: m.entries.len(),
        num_speakers: per_speaker.len(),
        total_hours: seconds / 3600.0,
        per_speaker,
    })
}
