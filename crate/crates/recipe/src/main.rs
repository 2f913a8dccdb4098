use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spkforge::registry::registry_dir;
use spkforge::{gen_synthetic_corpus, make_trials, Recipe, RecipeError, Registry, Result};
use spkforge_core::scoring::format_trials;
use spkforge_core::trainer::Manifest;

#[derive(Parser)]
#[command(name = "spkforge", version, about = "Speaker-embedding recipe runner and model registry")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run recipe stages `--stage` through `--stop-stage`.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        stage: u8,
        #[arg(long, default_value_t = 10)]
        stop_stage: u8,
        /// Defaults to `exp/` next to the config file.
        #[arg(long)]
        exp_dir: Option<PathBuf>,
    },
    /// Write a synthetic multi-speaker corpus and its manifest.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        num_speakers: usize,
        #[arg(long, default_value_t = 50)]
        utts_per_speaker: usize,
        #[arg(long, default_value_t = 3.0)]
        seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample a trial list from a manifest.
    Trials {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 500)]
        num_target: usize,
        #[arg(long, default_value_t = 500)]
        num_nontarget: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Writes to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Manage the local model registry.
    Registry {
        /// Overrides SPKFORGE_REGISTRY and the default location.
        #[arg(long)]
        registry: Option<PathBuf>,
        #[command(subcommand)]
        op: RegistryOp,
    },
    /// Print the embedding of a wav file under a registered model.
    Embed {
        #[arg(long)]
        model: String,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        registry: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum RegistryOp {
    /// Register a package directory.
    Register { package: PathBuf },
    /// List registered model names.
    List,
    /// Show the metadata of a model.
    Info { name: String },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run {
            config,
            stage,
            stop_stage,
            exp_dir,
        } => {
            if stage > stop_stage {
                return Err(RecipeError::StageRange {
                    start: stage,
                    stop: stop_stage,
                });
            }
            let recipe = Recipe::from_config_file(&config, exp_dir.as_deref())?;
            for (k, outcome) in recipe.run(stage, stop_stage)? {
                println!("stage {k}: {outcome:?}");
            }
        }
        Cmd::GenCorpus {
            out,
            num_speakers,
            utts_per_speaker,
            seconds,
            seed,
        } => {
            let m = gen_synthetic_corpus(num_speakers, utts_per_speaker, seconds, seed, &out)?;
            println!("wrote {} utterances to {}", m.len(), out.display());
        }
        Cmd::Trials {
            manifest,
            num_target,
            num_nontarget,
            seed,
            out,
        } => {
            let m = Manifest::read(&manifest)?;
            let text = format_trials(&make_trials(&m, num_target, num_nontarget, seed)?);
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
        Cmd::Registry { registry, op } => {
            let reg = Registry::open(registry_dir(registry.as_deref(), None));
            match op {
                RegistryOp::Register { package } => {
                    let name = reg.register(&package)?;
                    println!("registered {name} in {}", reg.root().display());
                }
                RegistryOp::List => {
                    for name in reg.list()? {
                        println!("{name}");
                    }
                }
                RegistryOp::Info { name } => print!("{}", reg.info(&name)?.to_text()),
            }
        }
        Cmd::Embed { model, wav, registry } => {
            let reg = Registry::open(registry_dir(registry.as_deref(), None));
            let m = reg.load_by_name(&model)?;
            let e = m.embed_file(&wav)?;
            let parts: Vec<String> = e.as_slice().iter().map(|v| format!("{v:.6}")).collect();
            println!("{}", parts.join(" "));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
