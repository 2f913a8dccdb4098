//! Model packages and the local name-keyed registry.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use spkforge_core::dsp::load_waveform;
use spkforge_core::extractor::{Extractor, ExtractorInput, FrontendKind, SpeakerEmbedding};
use spkforge_core::nn::ParamStore;

use crate::config::RecipeConfig;
use crate::error::{RecipeError, Result};

pub const REGISTRY_ENV: &str = "SPKFORGE_REGISTRY";
pub const CONFIG_FILE: &str = "config.txt";
pub const PARAMS_FILE: &str = "model.params";
pub const META_FILE: &str = "meta.txt";

/// Resolves the registry directory: explicit flag, then the environment, then the fallback.
pub fn registry_dir(explicit: Option<&Path>, fallback: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(v) = std::env::var_os(REGISTRY_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(v);
    }
    if let Some(p) = fallback {
        return p.to_path_buf();
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".spkforge").join("registry")
}

/// SHA-256 over the config text and parameter bytes of a package.
pub fn content_hash(config_text: &[u8], params: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(b"config\0");
    h.update((config_text.len() as u64).to_le_bytes());
    h.update(config_text);
    h.update(b"params\0");
    h.update((params.len() as u64).to_le_bytes());
    h.update(params);
    hex::encode(h.finalize())
}

/// Package metadata as ordered `key=value` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PackageMeta(pub BTreeMap<String, String>);

impl PackageMeta {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .filter_map(|l| l.split_once('='))
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .collect(),
        )
    }

    pub fn name(&self) -> &str {
        self.get("name").unwrap_or("")
    }
}

fn package_err(path: &Path, msg: impl Into<String>) -> RecipeError {
    RecipeError::Package {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| package_err(path, e.to_string()))
}

/// Writes a self-describing package for `params` (which must exclude the training head).
pub fn write_package(
    dir: &Path,
    cfg: &RecipeConfig,
    params: &ParamStore<f64>,
    extra: &[(&str, String)],
) -> Result<PackageMeta> {
    std::fs::create_dir_all(dir)?;
    let config_text = cfg.canonical_text();
    let bytes = params.to_bytes();
    let ext = cfg.extractor();
    let mut meta = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        meta.insert(k.to_string(), v);
    };
    put("name", cfg.registry.name.clone());
    put("embed_dim", ext.embed_dim.to_string());
    put("frontend", ext.frontend.to_string());
    put("encoder", ext.encoder.to_string());
    put("pooling", ext.pooling.to_string());
    put("sample_rate", ext.sample_rate.to_string());
    put("config_hash", cfg.hash());
    put("created_by", format!("spkforge {}", env!("CARGO_PKG_VERSION")));
    put("content_hash", content_hash(config_text.as_bytes(), &bytes));
    for (k, v) in extra {
        put(k, v.clone());
    }
    let meta = PackageMeta(meta);
    std::fs::write(dir.join(CONFIG_FILE), &config_text)?;
    std::fs::write(dir.join(PARAMS_FILE), &bytes)?;
    std::fs::write(dir.join(META_FILE), meta.to_text())?;
    Ok(meta)
}

/// A loaded, hash-verified model.
#[derive(Clone)]
pub struct LoadedModel {
    pub meta: PackageMeta,
    pub config: RecipeConfig,
    pub extractor: Extractor<f64>,
}

impl LoadedModel {
    pub fn name(&self) -> &str {
        self.meta.name()
    }

    /// Embeds a wav file, or a `.spkf` feature file for precomputed-feature models.
    pub fn embed_file(&self, path: &Path) -> Result<SpeakerEmbedding<f64>> {
        let input = if self.config.extractor().frontend == FrontendKind::PrecomputedFile {
            ExtractorInput::FeatureFile(path.to_path_buf())
        } else {
            ExtractorInput::Wave(load_waveform(path)?)
        };
        Ok(self.extractor.extract(&input)?)
    }
}

/// Reads a package directory and checks its content hash.
pub fn load_package(dir: &Path) -> Result<LoadedModel> {
    let meta_path = dir.join(META_FILE);
    let meta = PackageMeta::parse(
        &String::from_utf8(read(&meta_path)?).map_err(|_| package_err(&meta_path, "not UTF-8"))?,
    );
    let config_bytes = read(&dir.join(CONFIG_FILE))?;
    let params_bytes = read(&dir.join(PARAMS_FILE))?;
    let expected = meta
        .get("content_hash")
        .ok_or_else(|| package_err(&meta_path, "missing content_hash"))?;
    let found = content_hash(&config_bytes, &params_bytes);
    if found != expected {
        return Err(RecipeError::HashMismatch {
            name: meta.name().to_string(),
            expected: expected.to_string(),
            found,
        });
    }
    let text = String::from_utf8(config_bytes).map_err(|_| package_err(dir, "config is not UTF-8"))?;
    let config = RecipeConfig::parse(&text)?;
    let params = ParamStore::from_bytes(&params_bytes)?;
    let extractor = Extractor::with_params(config.extractor(), &params)?;
    Ok(LoadedModel {
        meta,
        config,
        extractor,
    })
}

/// A directory of packages keyed by model name.
#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
}

impl Registry {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Sorted names of registered models.
    pub fn list(&self) -> Result<Vec<String>> {
        let Ok(rd) = std::fs::read_dir(&self.root) else {
            return Ok(Vec::new());
        };
        let mut names = Vec::new();
        for e in rd {
            let e = e?;
            if e.path().join(META_FILE).is_file() {
                names.push(e.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        Ok(names)
    }

    fn entry(&self, name: &str) -> Result<PathBuf> {
        let dir = self.root.join(name);
        if name.is_empty() || name.contains(['/', '\\']) || !dir.join(META_FILE).is_file() {
            let names = self.list()?;
            return Err(RecipeError::UnknownModel {
                name: name.to_string(),
                available: if names.is_empty() {
                    "(none)".into()
                } else {
                    names.join(", ")
                },
            });
        }
        Ok(dir)
    }

    pub fn info(&self, name: &str) -> Result<PackageMeta> {
        let dir = self.entry(name)?;
        let text = std::fs::read_to_string(dir.join(META_FILE))?;
        Ok(PackageMeta::parse(&text))
    }

    pub fn load_by_name(&self, name: &str) -> Result<LoadedModel> {
        load_package(&self.entry(name)?)
    }

    /// Copies a verified package in. Re-registering identical content is a no-op.
    pub fn register(&self, package_dir: &Path) -> Result<String> {
        let model = load_package(package_dir)?;
        let name = model.name().to_string();
        if name.is_empty() {
            return Err(package_err(package_dir, "meta has no name"));
        }
        let dest = self.root.join(&name);
        if dest.join(META_FILE).is_file() {
            let old = PackageMeta::parse(&std::fs::read_to_string(dest.join(META_FILE))?);
            if old == model.meta {
                return Ok(name);
            }
            return Err(RecipeError::DuplicateModel { name });
        }
        std::fs::create_dir_all(&self.root)?;
        let tmp = self.root.join(format!(".{name}.tmp"));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;
        for f in [CONFIG_FILE, PARAMS_FILE, META_FILE] {
            std::fs::copy(package_dir.join(f), tmp.join(f))?;
        }
        std::fs::rename(&tmp, &dest)?;
        Ok(name)
    }
}
