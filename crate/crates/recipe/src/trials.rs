//! Seeded trial-list generation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spkforge_core::scoring::{Trial, TrialLabel};
use spkforge_core::trainer::{Manifest, ManifestEntry};

use crate::error::{RecipeError, Result};

/// Draws `n_target` same-speaker and `n_nontarget` cross-speaker pairs.
///
/// Pairs are unordered and never pair an utterance with itself. Distinct pairs are used
/// without replacement first; a request larger than the pool cycles through it again.
pub fn make_trials(m: &Manifest, n_target: usize, n_nontarget: usize, seed: u64) -> Result<Vec<Trial>> {
    m.validate()?;
    let mut target = Vec::new();
    let mut nontarget = Vec::new();
    for (i, a) in m.entries.iter().enumerate() {
        for b in &m.entries[i + 1..] {
            if a.speaker_id == b.speaker_id {
                target.push((i, b));
            } else {
                nontarget.push((i, b));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |pool: &mut Vec<(usize, &ManifestEntry)>, n: usize, label: TrialLabel| -> Result<Vec<Trial>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        if pool.is_empty() {
            return Err(RecipeError::Trials(format!(
                "{n} {} trials requested but the manifest has no such pairs",
                if label == TrialLabel::Target { "target" } else { "nontarget" }
            )));
        }
        pool.shuffle(&mut rng);
        Ok(pool
            .iter()
            .cycle()
            .take(n)
            .map(|&(i, b)| Trial {
                enroll: m.entries[i].utt_id.clone(),
                test: b.utt_id.clone(),
                label,
            })
            .collect())
    };
    let mut trials = draw(&mut target, n_target, TrialLabel::Target)?;
    trials.extend(draw(&mut nontarget, n_nontarget, TrialLabel::Nontarget)?);
    trials.shuffle(&mut rng);
    Ok(trials)
}
