//! Training loop: document packing, cosine schedule, AdamW, checkpoints.
//!
//! The loop is deterministic from one seed and bit-identical across worker
//! counts: batch members are evaluated possibly in parallel but accumulated
//! in sequence order, and the optimizer itself is single-threaded. Steps are
//! numbered from 1; a checkpoint taken at step N restarts exactly where an
//! uninterrupted run would have been, because data order and learning rate
//! are pure functions of the step index.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::model::{
    load_checkpoint, loss_and_backward, save_checkpoint, ModelConfig, Parameters,
};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_lr: f64,
    /// Final learning rate as a fraction of `max_lr`.
    pub min_lr_ratio: f64,
    /// Fraction of `total_steps` spent in linear warmup.
    pub warmup_fraction: f64,
    pub total_steps: u64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    /// Decoupled decay, applied to weight matrices only.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled when their global norm exceeds this.
    pub clip_norm: f64,
    pub seed: u64,
    /// Periodic checkpoint interval in steps; 0 disables periodic saves.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_lr: 3e-4,
            min_lr_ratio: 0.1,
            warmup_fraction: 0.01,
            total_steps: 200,
            batch_size: 8,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if !(self.max_lr > 0.0) {
            return bad("max_lr must be positive");
        }
        if !(self.min_lr_ratio > 0.0 && self.min_lr_ratio <= 1.0) {
            return bad("min_lr_ratio must be in (0, 1]");
        }
        if !(self.warmup_fraction >= 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must be in [0, 1)");
        }
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return bad("betas must be in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).floor() as u64
    }
}

/// Shuffle documents by seed, encode each, join with the end-of-document
/// token between documents, and slice into chunks of exactly `context_len`
/// tokens. The trailing partial chunk is dropped.
pub fn pack_documents(
    docs: &[Document],
    tok: &Tokenizer,
    context_len: usize,
    seed: u64,
) -> Result<Vec<Vec<u32>>> {
    if docs.is_empty() {
        return Err(Error::InvalidInput("no documents to pack".into()));
    }
    if context_len < 2 {
        return Err(Error::InvalidConfig(format!(
            "context_len {context_len} too small to form a training pair"
        )));
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let eod = tok.eod_id();
    let mut stream: Vec<u32> = Vec::new();
    for (i, &doc_idx) in order.iter().enumerate() {
        if i > 0 {
            stream.push(eod);
        }
        stream.extend(tok.encode(docs[doc_idx].text.as_bytes()));
    }

    let chunks = stream
        .chunks_exact(context_len)
        .map(|c| c.to_vec())
        .collect();
    Ok(chunks)
}

/// Learning rate at a 1-based step: linear warmup to `max_lr` over
/// `floor(warmup_fraction * total_steps)` steps, then cosine decay to
/// `min_lr_ratio * max_lr`. Steps beyond `total_steps` clamp to the floor.
pub fn cosine_lr(step: u64, cfg: &TrainConfig) -> f64 {
    let max = cfg.max_lr;
    let min = cfg.min_lr_ratio * cfg.max_lr;
    let warmup = cfg.warmup_steps();
    if step < warmup {
        return max * step as f64 / warmup as f64;
    }
    // Both boundaries are exact: the warmup end returns max directly rather
    // than through min + (max - min), which can land one ulp off, and the
    // floor is exact because cos(PI) is exactly -1.0 in f64.
    if step == warmup {
        return max;
    }
    if step >= cfg.total_steps {
        return min;
    }
    let progress = (step - warmup) as f64 / (cfg.total_steps - warmup) as f64;
    min + 0.5 * (max - min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam moments, shaped like the parameters they track.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Parameters,
    pub v: Parameters,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(cfg: &ModelConfig) -> OptimizerState {
        OptimizerState {
            m: Parameters::zeros(cfg),
            v: Parameters::zeros(cfg),
            t: 0,
        }
    }
}

/// One bias-corrected AdamW update. Decay is decoupled and multiplicative,
/// `theta <- theta * (1 - lr*lambda)`, computed against the pre-update value
/// and applied only to tensors [`Parameters::is_decayable`] admits.
pub fn adamw_step(
    params: &mut Parameters,
    grads: &Parameters,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    let mut p_t = params.tensors_mut();
    let g_t = grads.tensors();
    let mut m_t = state.m.tensors_mut();
    let mut v_t = state.v.tensors_mut();
    if p_t.len() != g_t.len() {
        return Err(Error::ShapeMismatch {
            op: "adamw_step",
            lhs: vec![p_t.len()],
            rhs: vec![g_t.len()],
        });
    }
    for i in 0..p_t.len() {
        let (name, p) = &mut p_t[i];
        let g = g_t[i].1;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let decay = if Parameters::is_decayable(name) {
            1.0 - lr * cfg.weight_decay
        } else {
            1.0
        };
        let m = m_t[i].1.data_mut();
        let v = v_t[i].1.data_mut();
        for (j, pv) in p.data_mut().iter_mut().enumerate() {
            let gv = g.data()[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gv;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *pv = *pv * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Global L2 norm over every gradient tensor; rescales in place when it
/// exceeds `max_norm`. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut Parameters, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, g) in grads.tensors() {
        for v in g.iter() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.tensors_mut() {
            g.scale(scale);
        }
    }
    norm
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where checkpoints and `metrics.jsonl` go; no files when absent.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint prefix to resume from; the step counter continues.
    pub resume: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainResult {
    pub params: Parameters,
    pub opt: OptimizerState,
    pub records: Vec<StepRecord>,
    /// Checkpoint prefixes written, final one last.
    pub checkpoints: Vec<PathBuf>,
}

fn checkpoint_tensors<'a>(
    params: &'a Parameters,
    opt: &'a OptimizerState,
) -> Vec<(String, &'a crate::array::Array)> {
    let mut tensors = params.tensors();
    for (name, a) in opt.m.tensors() {
        tensors.push((format!("opt.m.{name}"), a));
    }
    for (name, a) in opt.v.tensors() {
        tensors.push((format!("opt.v.{name}"), a));
    }
    tensors
}

fn load_resume(prefix: &Path, cfg: &ModelConfig) -> Result<(Parameters, OptimizerState, u64)> {
    let ck = load_checkpoint(prefix)?;
    if &ck.config != cfg {
        return Err(Error::SchemaMismatch(format!(
            "checkpoint config {:?} does not match the requested model config",
            ck.config
        )));
    }
    let mut params = Parameters::zeros(cfg);
    let mut opt = OptimizerState::new(cfg);
    for (dst, kind) in [(&mut params, ""), (&mut opt.m, "opt.m."), (&mut opt.v, "opt.v.")] {
        for (name, slot) in dst.tensors_mut() {
            let full = format!("{kind}{name}");
            let found = ck.tensor(&full).ok_or_else(|| {
                Error::SchemaMismatch(format!("checkpoint lacks tensor {full}, cannot resume"))
            })?;
            if found.shape() != slot.shape() {
                return Err(Error::SchemaMismatch(format!(
                    "tensor {full} has dims {:?}, expected {:?}",
                    found.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(found.data());
        }
    }
    opt.t = ck.step;
    Ok((params, opt, ck.step))
}

/// Run the training loop over pre-packed chunks.
///
/// Batch members are drawn cyclically from the chunk list in step order, so
/// the data stream is a pure function of the step index and resuming from a
/// checkpoint replays exactly what an uninterrupted run would have seen.
pub fn train_on_chunks(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    chunks: &[Vec<u32>],
    opts: &TrainOptions,
) -> Result<TrainResult> {
    model_cfg.validate()?;
    cfg.validate()?;
    if chunks.is_empty() {
        return Err(Error::InvalidInput(
            "no training chunks; corpus too small for the context length".into(),
        ));
    }
    for c in chunks {
        if c.len() < 2 || c.len() > model_cfg.context_len {
            return Err(Error::InvalidInput(format!(
                "chunk length {} outside 2..={}",
                c.len(),
                model_cfg.context_len
            )));
        }
        if let Some(&t) = c.iter().find(|&&t| t as usize >= model_cfg.vocab_size) {
            return Err(Error::IndexOutOfRange {
                what: "token id",
                index: t as usize,
                size: model_cfg.vocab_size,
            });
        }
    }

    let (mut params, mut opt, start_step) = match &opts.resume {
        Some(prefix) => load_resume(prefix, model_cfg)?,
        None => (
            Parameters::init(model_cfg, cfg.seed),
            OptimizerState::new(model_cfg),
            0,
        ),
    };
    if start_step >= cfg.total_steps {
        return Err(Error::InvalidConfig(format!(
            "resume step {start_step} is already at or past total_steps {}",
            cfg.total_steps
        )));
    }

    let mut metrics: Option<std::fs::File> = match &opts.out_dir {
        Some(dir) => {
            crate::fsio::create_dir_all(dir)?;
            let path = dir.join("metrics.jsonl");
            Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?,
            )
        }
        None => None,
    };

    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let save = |params: &Parameters,
                    opt: &OptimizerState,
                    step: u64,
                    name: String,
                    checkpoints: &mut Vec<PathBuf>|
     -> Result<()> {
        if let Some(dir) = &opts.out_dir {
            let prefix = dir.join(name);
            save_checkpoint(&prefix, step, model_cfg, &checkpoint_tensors(params, opt))?;
            checkpoints.push(prefix);
        }
        Ok(())
    };

    for step in (start_step + 1)..=cfg.total_steps {
        let lr = cosine_lr(step, cfg);
        let base = (step - 1) as usize * cfg.batch_size;
        let batch: Vec<&[u32]> = (0..cfg.batch_size)
            .map(|j| chunks[(base + j) % chunks.len()].as_slice())
            .collect();

        // Fan out across the batch; accumulation below is strictly in batch
        // order, so the result is independent of the worker count.
        let outs: Vec<_> = {
            use rayon::prelude::*;
            batch
                .par_iter()
                .map(|seq| loss_and_backward(&params, model_cfg, seq))
                .collect::<Result<Vec<_>>>()?
        };

        let inv_b = 1.0 / cfg.batch_size as f64;
        let mut loss = 0.0;
        let mut grads = Parameters::zeros(model_cfg);
        {
            let mut acc = grads.tensors_mut();
            for out in &outs {
                loss += out.loss;
                for (slot, (_, g)) in acc.iter_mut().zip(out.param_grads.tensors()) {
                    for (av, gv) in slot.1.data_mut().iter_mut().zip(g.iter()) {
                        *av += gv;
                    }
                }
            }
            for (_, a) in acc.iter_mut() {
                a.scale(inv_b);
            }
        }
        loss *= inv_b;

        let grad_norm = clip_gradients(&mut grads, cfg.clip_norm);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                loss,
                lr,
                grad_norm,
            });
        }

        adamw_step(&mut params, &grads, &mut opt, lr, cfg)?;

        let record = StepRecord {
            step,
            loss,
            lr,
            grad_norm,
        };
        if let Some(f) = metrics.as_mut() {
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::InvalidInput(format!("metrics serialization: {e}")))?;
            writeln!(f, "{line}").map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        records.push(record);

        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            save(&params, &opt, step, format!("step-{step:06}"), &mut checkpoints)?;
        }
    }
    if let Some(f) = metrics.as_mut() {
        f.flush().map_err(|e| Error::io("metrics.jsonl", e))?;
    }

    save(
        &params,
        &opt,
        cfg.total_steps,
        "final".into(),
        &mut checkpoints,
    )?;

    Ok(TrainResult {
        params,
        opt,
        records,
        checkpoints,
    })
}

/// Pack a document corpus and train on it.
pub fn train_on_documents(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    docs: &[Document],
    tok: &Tokenizer,
    opts: &TrainOptions,
) -> Result<TrainResult> {
    if tok.vocab_size() > model_cfg.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "tokenizer vocab {} exceeds model vocab {}",
            tok.vocab_size(),
            model_cfg.vocab_size
        )));
    }
    let chunks = pack_documents(docs, tok, model_cfg.context_len, cfg.seed)?;
    if chunks.is_empty() {
        return Err(Error::InvalidInput(format!(
            "corpus packs to zero chunks of {} tokens",
            model_cfg.context_len
        )));
    }
    train_on_chunks(model_cfg, cfg, &chunks, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;

    fn doc(lang: &str, text: &str) -> Document {
        Document {
            lang: lang.into(),
            text: text.into(),
        }
    }

    fn micro_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 300,
            context_len: 8,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
        }
    }

    #[test]
    fn packing_oracle_three_docs() {
        // Encoded lengths 5, 3, 4 plus 2 separators = 14 tokens; context 4
        // gives 3 chunks with 2 tokens dropped.
        let tok = Tokenizer::byte_level();
        let docs = vec![doc("en", "aaaaa"), doc("en", "bbb"), doc("en", "cccc")];
        let chunks = pack_documents(&docs, &tok, 4, 7).unwrap();
        assert_eq!(chunks.len(), 3);
        assert!(chunks.iter().all(|c| c.len() == 4));
        let eod = tok.eod_id();
        let eods = chunks.iter().flatten().filter(|&&t| t == eod).count();
        assert_eq!(eods, 2, "separators go between documents, not after");
        let total: usize = chunks.iter().map(|c| c.len()).sum();
        assert_eq!(total, 12);
    }

    #[test]
    fn packing_is_seeded() {
        let tok = Tokenizer::byte_level();
        let docs: Vec<Document> = (0..20)
            .map(|i| doc("en", &format!("document number {i} with some text")))
            .collect();
        let a = pack_documents(&docs, &tok, 16, 1).unwrap();
        let b = pack_documents(&docs, &tok, 16, 1).unwrap();
        let c = pack_documents(&docs, &tok, 16, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c, "different seed should shuffle differently");
    }

    #[test]
    fn packing_conserves_tokens() {
        let tok = Tokenizer::byte_level();
        for n_docs in [1usize, 3, 7] {
            for ctx in [2usize, 5, 16] {
                let docs: Vec<Document> = (0..n_docs)
                    .map(|i| doc("en", &"x".repeat(i * 3 + 1)))
                    .collect();
                let total: usize =
                    docs.iter().map(|d| d.text.len()).sum::<usize>() + (n_docs - 1);
                let chunks = pack_documents(&docs, &tok, ctx, 0).unwrap();
                assert_eq!(chunks.len(), total / ctx);
                let kept: usize = chunks.iter().map(|c| c.len()).sum();
                assert!(total - kept < ctx, "remainder must be less than context");
            }
        }
    }

    #[test]
    fn packing_rejects_empty() {
        let tok = Tokenizer::byte_level();
        assert!(pack_documents(&[], &tok, 8, 0).is_err());
    }

    #[test]
    fn schedule_boundaries_are_exact() {
        let cfg = TrainConfig {
            max_lr: 3e-4,
            min_lr_ratio: 0.1,
            warmup_fraction: 0.1,
            total_steps: 1000,
            ..TrainConfig::default()
        };
        let w = cfg.warmup_steps();
        assert_eq!(w, 100);
        assert_eq!(cosine_lr(0, &cfg), 0.0);
        assert_eq!(cosine_lr(w, &cfg).to_bits(), cfg.max_lr.to_bits());
        let floor = cfg.min_lr_ratio * cfg.max_lr;
        assert_eq!(cosine_lr(1000, &cfg).to_bits(), floor.to_bits());
        assert_eq!(cosine_lr(5000, &cfg).to_bits(), floor.to_bits(), "clamps past the end");
    }

    #[test]
    fn schedule_halfway_value() {
        let cfg = TrainConfig {
            max_lr: 3e-4,
            min_lr_ratio: 0.1,
            warmup_fraction: 0.0,
            total_steps: 1000,
            ..TrainConfig::default()
        };
        // min 3e-5; halfway through decay the cosine term is 0.
        let lr = cosine_lr(500, &cfg);
        assert!((lr - 1.65e-4).abs() < 1e-12, "{lr}");
    }

    #[test]
    fn schedule_is_piecewise_monotone() {
        let cfg = TrainConfig {
            warmup_fraction: 0.05,
            total_steps: 400,
            ..TrainConfig::default()
        };
        let w = cfg.warmup_steps();
        for s in 0..w {
            assert!(cosine_lr(s, &cfg) < cosine_lr(s + 1, &cfg));
        }
        for s in w..cfg.total_steps {
            assert!(cosine_lr(s, &cfg) >= cosine_lr(s + 1, &cfg));
        }
    }

    #[test]
    fn adamw_zero_grads_no_decay_is_identity() {
        let mcfg = micro_cfg();
        let mut params = Parameters::init(&mcfg, 5);
        let before = params.clone();
        let grads = Parameters::zeros(&mcfg);
        let mut state = OptimizerState::new(&mcfg);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        adamw_step(&mut params, &grads, &mut state, 1e-3, &cfg).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adamw_zero_grads_decay_scales_matrices_exactly() {
        let mcfg = micro_cfg();
        let mut params = Parameters::init(&mcfg, 6);
        let before = params.clone();
        let grads = Parameters::zeros(&mcfg);
        let mut state = OptimizerState::new(&mcfg);
        let cfg = TrainConfig::default();
        let lr = 1e-3;
        adamw_step(&mut params, &grads, &mut state, lr, &cfg).unwrap();
        let factor = 1.0 - lr * cfg.weight_decay;
        for ((name, after), (_, orig)) in params.tensors().iter().zip(before.tensors()) {
            for (a, o) in after.iter().zip(orig.iter()) {
                let expect = if Parameters::is_decayable(name) {
                    o * factor
                } else {
                    *o
                };
                assert_eq!(a.to_bits(), expect.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn adamw_first_step_closed_form() {
        let mcfg = micro_cfg();
        let mut params = Parameters::init(&mcfg, 7);
        let before = params.final_norm_gain.data()[3];
        let mut grads = Parameters::zeros(&mcfg);
        let g = 0.37;
        grads.final_norm_gain.data_mut()[3] = g;
        let mut state = OptimizerState::new(&mcfg);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let lr = 1e-2;
        adamw_step(&mut params, &grads, &mut state, lr, &cfg).unwrap();
        // Bias correction cancels at t=1: update is -lr * g / (|g| + eps).
        let expect = before - lr * g / (g.abs() + cfg.eps);
        let got = params.final_norm_gain.data()[3];
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mcfg = micro_cfg();
        let mut grads = Parameters::zeros(&mcfg);
        grads.final_norm_gain.data_mut()[0] = 3.0;
        grads.final_norm_gain.data_mut()[1] = 4.0;
        let norm = clip_gradients(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let sq: f64 = grads.final_norm_gain.iter().map(|v| v * v).sum();
        assert!((sq.sqrt() - 1.0).abs() < 1e-12);

        let mut small = Parameters::zeros(&mcfg);
        small.final_norm_gain.data_mut()[0] = 0.5;
        let norm = clip_gradients(&mut small, 1.0);
        assert!((norm - 0.5).abs() < 1e-15);
        assert_eq!(small.final_norm_gain.data()[0], 0.5, "untouched below threshold");
    }

    #[test]
    fn overfits_one_repeated_chunk() {
        let mcfg = micro_cfg();
        let cfg = TrainConfig {
            max_lr: 1e-2,
            total_steps: 200,
            batch_size: 1,
            warmup_fraction: 0.05,
            seed: 3,
            ..TrainConfig::default()
        };
        let chunk: Vec<u32> = vec![5, 250, 17, 99, 3, 250, 17, 42];
        let result = train_on_chunks(&mcfg, &cfg, &[chunk], &TrainOptions::default()).unwrap();
        let first = result.records.first().unwrap().loss;
        let last = result.records.last().unwrap().loss;
        assert!(
            last < 0.1 * first,
            "expected overfit: first loss {first}, last loss {last}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let mcfg = micro_cfg();
        let cfg = TrainConfig {
            total_steps: 12,
            batch_size: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let chunks: Vec<Vec<u32>> = (0..5)
            .map(|i| (0..8).map(|j| (i * 31 + j * 7) % 300).collect())
            .collect();
        let a = train_on_chunks(&mcfg, &cfg, &chunks, &TrainOptions::default()).unwrap();
        let b = train_on_chunks(&mcfg, &cfg, &chunks, &TrainOptions::default()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn checkpoint_series_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mcfg = micro_cfg();
        let cfg = TrainConfig {
            total_steps: 200,
            batch_size: 1,
            checkpoint_every: 50,
            seed: 1,
            ..TrainConfig::default()
        };
        let chunk: Vec<u32> = (0..8).collect();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: None,
        };
        let result = train_on_chunks(&mcfg, &cfg, &[chunk], &opts).unwrap();
        assert_eq!(result.checkpoints.len(), 5, "4 periodic + final");
        for name in ["step-000050", "step-000100", "step-000150", "step-000200", "final"] {
            let manifest = dir.path().join(format!("{name}.manifest.txt"));
            assert!(manifest.exists(), "{name} missing");
        }
        let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(metrics.lines().count(), 200);
        let first: StepRecord = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
        assert_eq!(first.step, 1);
        assert!(metrics
            .lines()
            .next()
            .unwrap()
            .starts_with("{\"step\":1,\"loss\":"));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let mcfg = micro_cfg();
        let cfg = TrainConfig {
            total_steps: 40,
            batch_size: 2,
            checkpoint_every: 20,
            seed: 11,
            ..TrainConfig::default()
        };
        let chunks: Vec<Vec<u32>> = (0..7)
            .map(|i| (0..8).map(|j| (i * 13 + j * 5) % 300).collect())
            .collect();

        let full_opts = TrainOptions {
            out_dir: Some(dir.path().join("full")),
            resume: None,
        };
        let full = train_on_chunks(&mcfg, &cfg, &chunks, &full_opts).unwrap();

        // Restart from the mid-run checkpoint under the same schedule; the
        // tail must replay bit for bit.
        let resumed = train_on_chunks(
            &mcfg,
            &cfg,
            &chunks,
            &TrainOptions {
                out_dir: Some(dir.path().join("resumed")),
                resume: Some(dir.path().join("full").join("step-000020")),
            },
        )
        .unwrap();

        assert_eq!(resumed.records.first().unwrap().step, 21);
        assert_eq!(resumed.records.last().unwrap().step, 40);
        assert_eq!(full.params, resumed.params, "resume must replay the same run");
        assert_eq!(&full.records[20..], &resumed.records[..]);
    }

    #[test]
    fn resume_with_wrong_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mcfg = micro_cfg();
        let cfg = TrainConfig {
            total_steps: 4,
            batch_size: 1,
            checkpoint_every: 2,
            ..TrainConfig::default()
        };
        let chunk: Vec<u32> = (0..8).collect();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: None,
        };
        train_on_chunks(&mcfg, &cfg, &[chunk.clone()], &opts).unwrap();

        let mut other = micro_cfg();
        other.d_ff = 64;
        let err = train_on_chunks(
            &other,
            &TrainConfig {
                total_steps: 8,
                ..cfg
            },
            &[chunk],
            &TrainOptions {
                out_dir: None,
                resume: Some(dir.path().join("step-000002")),
            },
        );
        assert!(matches!(err, Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn divergence_aborts_with_diagnostics_and_keeps_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mcfg = micro_cfg();
        let cfg = TrainConfig {
            max_lr: 1e308,
            warmup_fraction: 0.0,
            total_steps: 50,
            batch_size: 1,
            checkpoint_every: 1,
            ..TrainConfig::default()
        };
        let chunk: Vec<u32> = (0..8).collect();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: None,
        };
        match train_on_chunks(&mcfg, &cfg, &[chunk], &opts) {
            Err(Error::Diverged { step, .. }) => {
                assert!(step >= 2, "first step starts from a sane init");
                let last = dir.path().join(format!("step-{:06}.manifest.txt", step - 1));
                assert!(last.exists(), "checkpoint before divergence survives");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let mcfg = micro_cfg();
        let cfg = TrainConfig {
            total_steps: 6,
            batch_size: 4,
            seed: 21,
            ..TrainConfig::default()
        };
        let chunks: Vec<Vec<u32>> = (0..9)
            .map(|i| (0..8).map(|j| (i * 17 + j * 3) % 300).collect())
            .collect();
        let pool1 = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let a = pool1
            .install(|| train_on_chunks(&mcfg, &cfg, &chunks, &TrainOptions::default()))
            .unwrap();
        let b = pool4
            .install(|| train_on_chunks(&mcfg, &cfg, &chunks, &TrainOptions::default()))
            .unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn train_on_documents_end_to_end() {
        let mcfg = ModelConfig {
            vocab_size: 300,
            ..micro_cfg()
        };
        let tok = Tokenizer::byte_level();
        let docs: Vec<Document> = (0..12)
            .map(|i| doc("en", &format!("the quick brown fox {i} jumps")))
            .collect();
        let cfg = TrainConfig {
            total_steps: 5,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let result =
            train_on_documents(&mcfg, &cfg, &docs, &tok, &TrainOptions::default()).unwrap();
        assert_eq!(result.records.len(), 5);
        assert!(result.records.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn rejects_vocab_overflow() {
        let mcfg = ModelConfig {
            vocab_size: 100,
            ..micro_cfg()
        };
        let tok = Tokenizer::byte_level(); // 258 ids
        let docs = vec![doc("en", "hello world")];
        let cfg = TrainConfig {
            total_steps: 1,
            ..TrainConfig::default()
        };
        assert!(train_on_documents(&mcfg, &cfg, &docs, &tok, &TrainOptions::default()).is_err());
    }
}
