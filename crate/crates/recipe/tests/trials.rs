use std::collections::BTreeSet;
use std::path::PathBuf;

use spkforge::make_trials;
use spkforge_core::scoring::{format_trials, metrics_report, parse_trials, TrialLabel};
use spkforge_core::trainer::{Manifest, ManifestEntry};

fn manifest(speakers: usize, utts: usize) -> Manifest {
    let mut entries = Vec::new();
    for s in 0..speakers {
        for u in 0..utts {
            entries.push(ManifestEntry {
                utt_id: format!("s{s}-u{u}"),
                speaker_id: format!("s{s}"),
                path: PathBuf::from(format!("/x/s{s}-u{u}.wav")),
                duration: 1.0,
            });
        }
    }
    Manifest::new(entries)
}

fn speaker(utt: &str) -> &str {
    utt.split('-').next().unwrap()
}

#[test]
fn counts_and_labels_over_twenty_by_five() {
    let m = manifest(20, 5);
    let trials = make_trials(&m, 500, 500, 3).unwrap();
    let text = format_trials(&trials);
    assert_eq!(text.lines().count(), 1000);
    assert_eq!(parse_trials(&text).unwrap(), trials);
    let targets = trials.iter().filter(|t| t.label == TrialLabel::Target).count();
    assert_eq!(targets, 500);
    for t in &trials {
        assert_ne!(t.enroll, t.test);
        let same = speaker(&t.enroll) == speaker(&t.test);
        assert_eq!(same, t.label == TrialLabel::Target, "{t:?}");
    }
}

#[test]
fn small_requests_never_repeat_a_pair() {
    let m = manifest(20, 5);
    let trials = make_trials(&m, 200, 500, 9).unwrap();
    let pairs: BTreeSet<(String, String)> = trials
        .iter()
        .map(|t| {
            let (a, b) = (t.enroll.clone(), t.test.clone());
            if a < b { (a, b) } else { (b, a) }
        })
        .collect();
    assert_eq!(pairs.len(), trials.len());
}

#[test]
fn same_seed_same_file() {
    let m = manifest(6, 4);
    let a = format_trials(&make_trials(&m, 30, 40, 1).unwrap());
    let b = format_trials(&make_trials(&m, 30, 40, 1).unwrap());
    let c = format_trials(&make_trials(&m, 30, 40, 2).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn zero_nontargets_is_a_valid_file_that_metrics_reject() {
    let m = manifest(3, 3);
    let trials = make_trials(&m, 5, 0, 0).unwrap();
    assert_eq!(trials.len(), 5);
    let labels: Vec<TrialLabel> = trials.iter().map(|t| t.label).collect();
    let scores = vec![0.5; trials.len()];
    assert!(metrics_report(&scores, &labels, Default::default()).is_err());
}

#[test]
fn missing_pair_class_is_an_error() {
    assert!(make_trials(&manifest(1, 4), 2, 1, 0).is_err());
    assert!(make_trials(&manifest(4, 1), 1, 2, 0).is_err());
    assert!(make_trials(&manifest(4, 1), 0, 2, 0).is_ok());
}
