#![allow(dead_code)]

use std::path::{Path, PathBuf};

use spkforge::stages::hash_paths;

/// A seconds-scale recipe: 3 speakers, 4 one-second utterances each, a few training steps.
pub fn tiny_config(registry: &Path) -> String {
    format!(
        "\
data.num_speakers: 3
data.utts_per_speaker: 4
data.seconds: 1.0
data.heldout_per_speaker: 2
data.num_target_trials: 3
data.num_nontarget_trials: 6
frontend.n_mels: 24
extractor.channels: 8
extractor.se_bottleneck: 4
extractor.attention_hidden: 8
extractor.embed_dim: 16
loss.topk: 2
trainer.batch_size: 4
trainer.steps: 4
trainer.crop_seconds: 0.5
trainer.warm_steps: 2
trainer.cycle_steps: 10
trainer.checkpoint_every: 2
scoring.cohort_per_speaker: 2
scoring.top_n: 3
registry.name: tiny
registry.dir: {}
",
        registry.display()
    )
}

/// Writes `text` as `dir/recipe.txt` and returns its path.
pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("recipe.txt");
    std::fs::write(&p, text).unwrap();
    p
}

pub fn dir_hash(dir: &Path) -> String {
    hash_paths(dir, &[dir.to_path_buf()]).unwrap()
}
