//! Per-command TOML configuration. Every config carries a seed and an
//! output directory; `--seed` and `--out` override the file, and the
//! resolved values are serialized back into the output directory as
//! `run_config.toml` so a run can be reproduced from its artifacts alone.

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use glotta_core::error::{Error, Result};
use glotta_core::profiler::{AbsConvention, ImportanceMethod};
use glotta_core::training::TrainConfig;
use glotta_core::{fsio, ModelConfig};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerTrainConfig {
    /// Newline-delimited JSON documents ({"lang", "text"}).
    pub corpus: PathBuf,
    pub n_merges: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FertilityConfig {
    pub tokenizer: PathBuf,
    /// Tab-separated parallel corpus, language codes in the header.
    pub parallel: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub corpus: PathBuf,
    pub tokenizer: PathBuf,
    /// Checkpoint prefix to resume from. The new schedule in `[train]`
    /// applies from the restored step on, so mid-run adjustments are a
    /// resume with an edited config.
    #[serde(default)]
    pub resume: Option<PathBuf>,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_method() -> ImportanceMethod {
    ImportanceMethod::FirstOrder
}

fn default_convention() -> AbsConvention {
    AbsConvention::SumThenAbs
}

fn default_sample() -> usize {
    500
}

fn default_rows() -> usize {
    1
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    /// Checkpoint prefix (the part before `.manifest.txt`).
    pub checkpoint: PathBuf,
    pub tokenizer: PathBuf,
    pub parallel: PathBuf,
    #[serde(default = "default_method")]
    pub method: ImportanceMethod,
    #[serde(default = "default_convention")]
    pub convention: AbsConvention,
    /// Neurons sampled by `--validate`.
    #[serde(default = "default_sample")]
    pub validate_sample: usize,
    /// Corpus rows per language fed to `--validate`.
    #[serde(default = "default_rows")]
    pub validate_rows: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReprConfig {
    pub checkpoint: PathBuf,
    pub tokenizer: PathBuf,
    pub parallel: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fsio::read_to_string(path)?;
    toml::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Fold `--seed` / `--out` into the config and return the output directory.
pub fn resolve_run(
    seed_flag: Option<u64>,
    out_flag: Option<PathBuf>,
    seed: &mut u64,
    out: &mut Option<PathBuf>,
) -> Result<PathBuf> {
    if let Some(s) = seed_flag {
        *seed = s;
    }
    if let Some(o) = out_flag {
        *out = Some(o);
    }
    out.clone().ok_or_else(|| {
        Error::InvalidConfig("no output directory: set `out` in the config or pass --out".into())
    })
}

#[derive(Serialize)]
struct Provenance<'a, T: Serialize> {
    command: &'a str,
    config: &'a T,
}

/// Write the fully resolved configuration next to the results.
pub fn write_provenance<T: Serialize>(command: &str, cfg: &T, out: &Path) -> Result<()> {
    let text = toml::to_string_pretty(&Provenance {
        command,
        config: cfg,
    })
    .map_err(|e| Error::InvalidInput(format!("unencodable run config: {e}")))?;
    fsio::atomic_write(&out.join("run_config.toml"), text.as_bytes())
}

/// Create the output directory, refusing to reuse a non-empty one unless
/// forced.
pub fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let mut entries = std::fs::read_dir(out).map_err(|e| Error::io(out, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::InvalidInput(format!(
                "output directory {} is not empty; pass --force to write into it",
                out.display()
            )));
        }
    } else {
        fsio::create_dir_all(out)?;
    }
    Ok(())
}
