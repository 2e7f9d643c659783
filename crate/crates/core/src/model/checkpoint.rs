//! Checkpoint serialization: a text manifest plus a raw weight blob.
//!
//! `<prefix>.manifest.txt` is line oriented and human inspectable:
//!
//! ```text
//! glotta-checkpoint v1
//! step 200
//! config.n_layers 4
//! ...
//! tensor input_embed 4096x128 0
//! tensor output_embed 4096x128 4194304
//! ```
//!
//! `<prefix>.weights.bin` holds every tensor's f64 values, little endian, at
//! the byte offsets the manifest declares. Floats in the config lines use
//! the shortest decimal form that parses back to the identical bits, so a
//! save/load cycle is exact. Optimizer state rides along as extra tensors
//! under an `opt.` prefix; loaders that only want model weights ignore them.

use std::collections::HashSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::fsio;

use super::{ModelConfig, Parameters};

pub const CHECKPOINT_VERSION: &str = "glotta-checkpoint v1";

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".manifest.txt")
}

pub fn weights_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".weights.bin")
}

fn config_fields(cfg: &ModelConfig) -> [(&'static str, String); 8] {
    [
        ("n_layers", cfg.n_layers.to_string()),
        ("d_model", cfg.d_model.to_string()),
        ("n_heads", cfg.n_heads.to_string()),
        ("d_ff", cfg.d_ff.to_string()),
        ("vocab_size", cfg.vocab_size.to_string()),
        ("context_len", cfg.context_len.to_string()),
        ("rope_theta", cfg.rope_theta.to_string()),
        ("norm_eps", cfg.norm_eps.to_string()),
    ]
}

/// Write `<prefix>.manifest.txt` and `<prefix>.weights.bin`. Tensors land in
/// the blob in the order given, densely packed.
pub fn save_checkpoint(
    prefix: &Path,
    step: u64,
    cfg: &ModelConfig,
    tensors: &[(String, &Array)],
) -> Result<()> {
    cfg.validate()?;
    let mut manifest = String::new();
    manifest.push_str(CHECKPOINT_VERSION);
    manifest.push('\n');
    manifest.push_str(&format!("step {step}\n"));
    for (key, value) in config_fields(cfg) {
        manifest.push_str(&format!("config.{key} {value}\n"));
    }

    let mut seen = HashSet::new();
    let mut offset = 0usize;
    for (name, a) in tensors {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::InvalidInput(format!(
                "tensor name {name:?} is not manifest-safe"
            )));
        }
        if !seen.insert(name.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate tensor name {name:?}")));
        }
        let dims = a
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        manifest.push_str(&format!("tensor {name} {dims} {offset}\n"));
        offset += a.len() * 8;
    }

    let mut blob = Vec::with_capacity(offset);
    for (_, a) in tensors {
        for v in a.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }

    fsio::atomic_write(&manifest_path(prefix), manifest.as_bytes())?;
    fsio::atomic_write(&weights_path(prefix), &blob)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub step: u64,
    pub config: ModelConfig,
    /// Tensors in manifest order, optimizer state included.
    pub tensors: Vec<(String, Array)>,
}

impl LoadedCheckpoint {
    pub fn tensor(&self, name: &str) -> Option<&Array> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

pub fn load_checkpoint(prefix: &Path) -> Result<LoadedCheckpoint> {
    let manifest = fsio::read_to_string(&manifest_path(prefix))?;
    let blob = fsio::read_bytes(&weights_path(prefix))?;

    let mut lines = manifest.lines().enumerate();
    let (_, version) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty manifest"))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::SchemaMismatch(format!(
            "expected {CHECKPOINT_VERSION:?}, found {version:?}"
        )));
    }

    let mut step: Option<u64> = None;
    let mut config_kv: Vec<(String, String, usize)> = Vec::new();
    let mut tensor_lines: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let head = parts.next().unwrap();
        if head == "step" {
            let value = parts
                .next()
                .ok_or_else(|| parse_err(lineno, "step needs a value"))?;
            let parsed = value
                .parse::<u64>()
                .map_err(|e| parse_err(lineno, format!("bad step {value:?}: {e}")))?;
            if step.replace(parsed).is_some() {
                return Err(parse_err(lineno, "duplicate step line"));
            }
        } else if let Some(key) = head.strip_prefix("config.") {
            let value = parts
                .next()
                .ok_or_else(|| parse_err(lineno, format!("config.{key} needs a value")))?;
            config_kv.push((key.to_string(), value.to_string(), lineno));
        } else if head == "tensor" {
            let name = parts
                .next()
                .ok_or_else(|| parse_err(lineno, "tensor needs a name"))?;
            let dims_str = parts
                .next()
                .ok_or_else(|| parse_err(lineno, "tensor needs dims"))?;
            let offset_str = parts
                .next()
                .ok_or_else(|| parse_err(lineno, "tensor needs an offset"))?;
            let dims = dims_str
                .split('x')
                .map(|d| {
                    d.parse::<usize>()
                        .map_err(|e| parse_err(lineno, format!("bad dim {d:?}: {e}")))
                })
                .collect::<Result<Vec<usize>>>()?;
            let offset = offset_str
                .parse::<usize>()
                .map_err(|e| parse_err(lineno, format!("bad offset {offset_str:?}: {e}")))?;
            tensor_lines.push((name.to_string(), dims, offset, lineno));
        } else {
            return Err(parse_err(lineno, format!("unrecognized line {line:?}")));
        }
        if parts.next().is_some() {
            return Err(parse_err(lineno, format!("trailing fields in {line:?}")));
        }
    }

    let step = step.ok_or_else(|| Error::SchemaMismatch("manifest has no step line".into()))?;
    let config = config_from_kv(&config_kv)?;

    let mut tensors = Vec::with_capacity(tensor_lines.len());
    let mut names = HashSet::new();
    let mut end_max = 0usize;
    for (name, dims, offset, lineno) in tensor_lines {
        if !names.insert(name.clone()) {
            return Err(parse_err(lineno, format!("duplicate tensor {name:?}")));
        }
        let count: usize = dims.iter().product();
        let bytes = count * 8;
        let end = offset
            .checked_add(bytes)
            .ok_or_else(|| parse_err(lineno, "tensor extent overflows"))?;
        if end > blob.len() {
            return Err(Error::SchemaMismatch(format!(
                "tensor {name} needs bytes {offset}..{end} but the blob holds {}",
                blob.len()
            )));
        }
        end_max = end_max.max(end);
        let mut data = Vec::with_capacity(count);
        for chunk in blob[offset..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        tensors.push((name, Array::from_vec(data, &dims)?));
    }
    if end_max != blob.len() {
        return Err(Error::SchemaMismatch(format!(
            "blob holds {} bytes but tensors cover {end_max}",
            blob.len()
        )));
    }

    Ok(LoadedCheckpoint {
        step,
        config,
        tensors,
    })
}

fn config_from_kv(kv: &[(String, String, usize)]) -> Result<ModelConfig> {
    fn take<T: std::str::FromStr>(kv: &[(String, String, usize)], key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let (_, value, lineno) = kv
            .iter()
            .find(|(k, _, _)| k == key)
            .ok_or_else(|| Error::SchemaMismatch(format!("manifest lacks config.{key}")))?;
        value
            .parse::<T>()
            .map_err(|e| parse_err(*lineno, format!("bad config.{key} {value:?}: {e}")))
    }
    for (key, _, lineno) in kv {
        if ![
            "n_layers",
            "d_model",
            "n_heads",
            "d_ff",
            "vocab_size",
            "context_len",
            "rope_theta",
            "norm_eps",
        ]
        .contains(&key.as_str())
        {
            return Err(parse_err(*lineno, format!("unknown config key {key:?}")));
        }
    }
    Ok(ModelConfig {
        n_layers: take(kv, "n_layers")?,
        d_model: take(kv, "d_model")?,
        n_heads: take(kv, "n_heads")?,
        d_ff: take(kv, "d_ff")?,
        vocab_size: take(kv, "vocab_size")?,
        context_len: take(kv, "context_len")?,
        rope_theta: take(kv, "rope_theta")?,
        norm_eps: take(kv, "norm_eps")?,
    })
}

/// Load just the model weights, ignoring optimizer tensors. Returns the
/// parameters, the stored config, and the step the checkpoint was taken at.
pub fn load_parameters(prefix: &Path) -> Result<(Parameters, ModelConfig, u64)> {
    let ck = load_checkpoint(prefix)?;
    ck.config.validate()?;
    let mut params = Parameters::zeros(&ck.config);
    for (name, slot) in params.tensors_mut() {
        let found = ck
            .tensor(&name)
            .ok_or_else(|| Error::SchemaMismatch(format!("checkpoint lacks tensor {name}")))?;
        if found.shape() != slot.shape() {
            return Err(Error::SchemaMismatch(format!(
                "tensor {name} has dims {:?}, expected {:?}",
                found.shape(),
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(found.data());
    }
    Ok((params, ck.config, ck.step))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 50,
            context_len: 12,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("step-000042");
        let cfg = cfg();
        let params = Parameters::init(&cfg, 99);
        save_checkpoint(&prefix, 42, &cfg, &params.tensors()).unwrap();
        let (loaded, loaded_cfg, step) = load_parameters(&prefix).unwrap();
        assert_eq!(step, 42);
        assert_eq!(loaded_cfg, cfg);
        for ((na, ta), (nb, tb)) in params.tensors().iter().zip(loaded.tensors().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            for (x, y) in ta.iter().zip(tb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{na}");
            }
        }
    }

    #[test]
    fn manifest_is_human_readable() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ck");
        let cfg = cfg();
        let params = Parameters::zeros(&cfg);
        save_checkpoint(&prefix, 7, &cfg, &params.tensors()).unwrap();
        let text = std::fs::read_to_string(manifest_path(&prefix)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CHECKPOINT_VERSION);
        assert_eq!(lines.next().unwrap(), "step 7");
        assert!(text.contains("config.d_model 16"));
        assert!(text.contains("config.norm_eps 0.00001"));
        assert!(text.contains("tensor input_embed 50x16 0"));
        assert!(text.contains("tensor layer0.wq 16x16 "));
        assert!(text.contains("tensor final_norm_gain 16 "));
    }

    #[test]
    fn ugly_floats_survive_the_config_lines() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ck");
        let mut cfg = cfg();
        cfg.rope_theta = 0.1 + 0.2; // not representable, shortest form roundtrips
        cfg.norm_eps = 1.0 / 3.0;
        let params = Parameters::zeros(&cfg);
        save_checkpoint(&prefix, 0, &cfg, &params.tensors()).unwrap();
        let (_, loaded_cfg, _) = load_parameters(&prefix).unwrap();
        assert_eq!(loaded_cfg.rope_theta.to_bits(), cfg.rope_theta.to_bits());
        assert_eq!(loaded_cfg.norm_eps.to_bits(), cfg.norm_eps.to_bits());
    }

    #[test]
    fn optimizer_tensors_ride_along() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ck");
        let cfg = cfg();
        let params = Parameters::init(&cfg, 1);
        let moment = Array::from_vec(vec![0.5, -0.25, 1e-300], &[3]).unwrap();
        let mut tensors = params.tensors();
        tensors.push(("opt.m.final_norm_gain".into(), &moment));
        save_checkpoint(&prefix, 10, &cfg, &tensors).unwrap();

        let ck = load_checkpoint(&prefix).unwrap();
        let side = ck.tensor("opt.m.final_norm_gain").unwrap();
        assert_eq!(side.data(), moment.data());
        // Plain weight loading ignores the extra tensor.
        let (_, _, step) = load_parameters(&prefix).unwrap();
        assert_eq!(step, 10);
    }

    #[test]
    fn rejects_wrong_version() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ck");
        let cfg = cfg();
        let params = Parameters::zeros(&cfg);
        save_checkpoint(&prefix, 0, &cfg, &params.tensors()).unwrap();
        let path = manifest_path(&prefix);
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("v1", "v9")).unwrap();
        assert!(matches!(
            load_checkpoint(&prefix),
            Err(Error::SchemaMismatch(_))
        ));
    }

    #[test]
    fn rejects_truncated_blob() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ck");
        let cfg = cfg();
        let params = Parameters::init(&cfg, 2);
        save_checkpoint(&prefix, 0, &cfg, &params.tensors()).unwrap();
        let path = weights_path(&prefix);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(&prefix).is_err());
    }

    #[test]
    fn rejects_missing_model_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ck");
        let cfg = cfg();
        let params = Parameters::init(&cfg, 3);
        let tensors: Vec<(String, &Array)> = params
            .tensors()
            .into_iter()
            .filter(|(n, _)| n != "layer1.wo")
            .collect();
        save_checkpoint(&prefix, 0, &cfg, &tensors).unwrap();
        assert!(load_checkpoint(&prefix).is_ok());
        assert!(matches!(
            load_parameters(&prefix),
            Err(Error::SchemaMismatch(_))
        ));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ck");
        let cfg = cfg();
        let params = Parameters::zeros(&cfg);
        save_checkpoint(&prefix, 0, &cfg, &params.tensors()).unwrap();
        let path = manifest_path(&prefix);
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("gibberish here\n");
        let added_line = text.lines().count();
        std::fs::write(&path, text).unwrap();
        match load_checkpoint(&prefix) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, added_line),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
