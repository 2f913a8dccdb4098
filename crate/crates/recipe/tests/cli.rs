mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{tiny_config, write_config};
use spkforge::Registry;

fn spkforge(args: &[&str], registry: Option<&Path>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spkforge"));
    c.args(args).env("RUST_LOG", "warn");
    match registry {
        Some(r) => c.env("SPKFORGE_REGISTRY", r),
        None => c.env_remove("SPKFORGE_REGISTRY"),
    };
    c.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn gen_corpus_and_trials() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    let c = corpus.to_str().unwrap();
    let o = spkforge(
        &["gen-corpus", "--out", c, "--num-speakers", "2", "--utts-per-speaker", "3", "--seconds", "0.5"],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = corpus.join("manifest.txt");
    let m = manifest.to_str().unwrap();
    let o = spkforge(
        &["trials", "--manifest", m, "--num-target", "4", "--num-nontarget", "5"],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 9);
    let o = spkforge(&["trials", "--manifest", m, "--num-target", "4", "--num-nontarget", "0"], None);
    assert!(o.status.success());
}

#[test]
fn stage_failure_exit_code_is_the_stage_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(&dir.path().join("registry")));
    let cfg = cfg.to_str().unwrap();
    let o = spkforge(&["run", "--config", cfg, "--stage", "7", "--stop-stage", "8"], None);
    assert_eq!(o.status.code(), Some(7), "{}", stderr(&o));
    assert!(stderr(&o).contains("stage 7"));
    let o = spkforge(&["run", "--config", cfg, "--stage", "4", "--stop-stage", "2"], None);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("start 4 is after stop 2"));
}

#[test]
fn config_error_names_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "data.seed: 1\ntrainer.stpes: 3\n");
    let o = spkforge(&["run", "--config", cfg.to_str().unwrap()], None);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("line 2") && err.contains("trainer.stpes"), "{err}");
}

#[test]
fn registered_model_embeds_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let registry = dir.path().join("registry");
    let env_registry = dir.path().join("env-registry");
    let cfg = write_config(dir.path(), &tiny_config(&registry));
    let o = spkforge(&["run", "--config", cfg.to_str().unwrap(), "--stop-stage", "9"], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let package = dir.path().join("exp/package/tiny");

    let o = spkforge(&["registry", "register", package.to_str().unwrap()], Some(&env_registry));
    assert!(o.status.success(), "{}", stderr(&o));
    let o = spkforge(&["registry", "list"], Some(&env_registry));
    assert_eq!(stdout(&o), "tiny\n");
    let o = spkforge(&["registry", "info", "tiny"], Some(&env_registry));
    assert!(stdout(&o).contains("embed_dim=16"));

    let wav = dir.path().join("exp/corpus/wav/spk001/spk001-utt003.wav");
    let o = spkforge(&["embed", "--model", "tiny", "--wav", wav.to_str().unwrap()], Some(&env_registry));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let fields: Vec<&str> = text.trim_end().split(' ').collect();
    assert_eq!(fields.len(), 16);
    for f in &fields {
        assert_eq!(f.split('.').nth(1).map(str::len), Some(6), "{f}");
    }
    let printed: Vec<f64> = fields.iter().map(|f| f.parse().unwrap()).collect();
    let model = Registry::open(&env_registry).load_by_name("tiny").unwrap();
    let direct = model.embed_file(&wav).unwrap();
    for (p, d) in printed.iter().zip(direct.as_slice()) {
        assert!((p - d).abs() <= 5e-7, "{p} vs {d}");
    }

    let o = spkforge(&["embed", "--model", "missing", "--wav", wav.to_str().unwrap()], Some(&env_registry));
    assert!(!o.status.success());
    assert!(stderr(&o).contains("available models: tiny"));
    let o = spkforge(
        &["embed", "--model", "tiny", "--wav", wav.to_str().unwrap(), "--registry", registry.to_str().unwrap()],
        Some(&env_registry),
    );
    assert!(!o.status.success(), "explicit flag points at an empty registry");
}
