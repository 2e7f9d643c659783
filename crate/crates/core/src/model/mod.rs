//! Decoder-only transformer in plain f64 with hand-written backprop.
//!
//! Architecture, in forward order per layer: RMSNorm, Q/K/V projections with
//! biases, rotary position embedding on Q and K, causal scaled dot-product
//! attention, output projection, residual add; RMSNorm, up projection,
//! exact-erf GeLU, down projection, residual add. Input and output embeddings
//! are untied; a final RMSNorm sits before the logit matmul. Attention is the
//! explicit O(T^2) form.
//!
//! Every projection and norm output is cached during the forward pass and
//! given a matching gradient slot by the backward pass, so ablation studies
//! and first-order importance read from the same coordinates.

mod backward;
mod checkpoint;
mod forward;

pub use backward::{loss_and_backward, ActivationGrads, BackwardOutput, LayerGrads};
pub use checkpoint::{
    load_checkpoint, load_parameters, manifest_path, save_checkpoint, weights_path,
    LoadedCheckpoint, CHECKPOINT_VERSION,
};
pub use forward::{
    ablate_forward, forward, forward_opts, loss, loss_opts, ActivationCache, AddDelta, Component,
    ForwardHook, ForwardOpts, ForwardOutput, HookPoint, LayerCache, NeuronRef, ScaleChannel,
    ZeroChannels,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_rope_theta() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Desk-scale default: trains in minutes on one core.
    pub fn toy() -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: 4096,
            context_len: 256,
            rope_theta: default_rope_theta(),
            norm_eps: default_norm_eps(),
        }
    }

    /// Metadata-only preset mirroring the 8B reference configuration. Useful
    /// for parameter accounting; never instantiate it.
    pub fn reference_8b() -> ModelConfig {
        ModelConfig {
            n_layers: 30,
            d_model: 4096,
            n_heads: 32,
            d_ff: 16_384,
            vocab_size: 250_752,
            context_len: 4096,
            rope_theta: default_rope_theta(),
            norm_eps: default_norm_eps(),
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.vocab_size == 0
            || self.context_len < 2
        {
            return bad(format!("all dimensions must be positive: {self:?}"));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_head() % 2 != 0 {
            return bad(format!(
                "head width {} must be even for rotary pairs",
                self.d_head()
            ));
        }
        if !(self.rope_theta > 0.0) || !(self.norm_eps > 0.0) {
            return bad("rope_theta and norm_eps must be positive".into());
        }
        Ok(())
    }
}

/// Closed-form parameter count: untied embeddings, biased projections, two
/// RMSNorm gains per layer plus the final one.
pub fn param_count(cfg: &ModelConfig) -> u64 {
    let (d, ff, v, l) = (
        cfg.d_model as u64,
        cfg.d_ff as u64,
        cfg.vocab_size as u64,
        cfg.n_layers as u64,
    );
    let per_layer = 4 * d * d + 4 * d      // q,k,v,o weights and biases
        + 2 * d * ff + ff + d              // up/down weights and biases
        + 2 * d;                           // two norm gains
    2 * v * d + l * per_layer + d
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm_gain: Array,
    pub wq: Array,
    pub bq: Array,
    pub wk: Array,
    pub bk: Array,
    pub wv: Array,
    pub bv: Array,
    pub wo: Array,
    pub bo: Array,
    pub mlp_norm_gain: Array,
    pub w_up: Array,
    pub b_up: Array,
    pub w_down: Array,
    pub b_down: Array,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub input_embed: Array,
    pub output_embed: Array,
    pub layers: Vec<LayerParams>,
    pub final_norm_gain: Array,
}

impl Parameters {
    pub fn zeros(cfg: &ModelConfig) -> Parameters {
        let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let layer = || LayerParams {
            attn_norm_gain: Array::zeros(&[d]),
            wq: Array::zeros(&[d, d]),
            bq: Array::zeros(&[d]),
            wk: Array::zeros(&[d, d]),
            bk: Array::zeros(&[d]),
            wv: Array::zeros(&[d, d]),
            bv: Array::zeros(&[d]),
            wo: Array::zeros(&[d, d]),
            bo: Array::zeros(&[d]),
            mlp_norm_gain: Array::zeros(&[d]),
            w_up: Array::zeros(&[d, ff]),
            b_up: Array::zeros(&[ff]),
            w_down: Array::zeros(&[ff, d]),
            b_down: Array::zeros(&[d]),
        };
        Parameters {
            input_embed: Array::zeros(&[v, d]),
            output_embed: Array::zeros(&[v, d]),
            layers: (0..cfg.n_layers).map(|_| layer()).collect(),
            final_norm_gain: Array::zeros(&[d]),
        }
    }

    /// Seeded init: weights N(0, 0.02^2); the residual-writing projections
    /// (attention output, MLP down) are further scaled by 1/sqrt(2*n_layers);
    /// biases zero, norm gains one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Parameters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let residual_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let mut p = Parameters::zeros(cfg);
        let mut fill = |a: &mut Array, scale: f64| {
            for v in a.data_mut() {
                *v = normal.sample(&mut rng) * scale;
            }
        };
        fill(&mut p.input_embed, 1.0);
        fill(&mut p.output_embed, 1.0);
        for l in &mut p.layers {
            fill(&mut l.wq, 1.0);
            fill(&mut l.wk, 1.0);
            fill(&mut l.wv, 1.0);
            fill(&mut l.wo, residual_scale);
            fill(&mut l.w_up, 1.0);
            fill(&mut l.w_down, residual_scale);
            for g in l.attn_norm_gain.data_mut() {
                *g = 1.0;
            }
            for g in l.mlp_norm_gain.data_mut() {
                *g = 1.0;
            }
        }
        for g in p.final_norm_gain.data_mut() {
            *g = 1.0;
        }
        p
    }

    /// Canonical (name, tensor) walk; checkpoint layout and optimizer order
    /// both follow it.
    pub fn tensors(&self) -> Vec<(String, &Array)> {
        let mut out: Vec<(String, &Array)> = vec![
            ("input_embed".into(), &self.input_embed),
            ("output_embed".into(), &self.output_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, a) in l.named() {
                out.push((format!("layer{i}.{suffix}"), a));
            }
        }
        out.push(("final_norm_gain".into(), &self.final_norm_gain));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array)> {
        let mut out: Vec<(String, &mut Array)> = vec![
            ("input_embed".into(), &mut self.input_embed),
            ("output_embed".into(), &mut self.output_embed),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (suffix, a) in l.named_mut() {
                out.push((format!("layer{i}.{suffix}"), a));
            }
        }
        out.push(("final_norm_gain".into(), &mut self.final_norm_gain));
        out
    }

    pub fn n_params(&self) -> u64 {
        self.tensors().iter().map(|(_, a)| a.len() as u64).sum()
    }

    /// Weight decay applies to the 2-d weight matrices only, never to biases
    /// or norm gains.
    pub fn is_decayable(name: &str) -> bool {
        let last = name.rsplit('.').next().unwrap_or(name);
        matches!(
            last,
            "input_embed" | "output_embed" | "wq" | "wk" | "wv" | "wo" | "w_up" | "w_down"
        )
    }
}

impl LayerParams {
    fn named(&self) -> [(&'static str, &Array); 14] {
        [
            ("attn_norm_gain", &self.attn_norm_gain),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("mlp_norm_gain", &self.mlp_norm_gain),
            ("w_up", &self.w_up),
            ("b_up", &self.b_up),
            ("w_down", &self.w_down),
            ("b_down", &self.b_down),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Array); 14] {
        [
            ("attn_norm_gain", &mut self.attn_norm_gain),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("mlp_norm_gain", &mut self.mlp_norm_gain),
            ("w_up", &mut self.w_up),
            ("b_up", &mut self.b_up),
            ("w_down", &mut self.w_down),
            ("b_down", &mut self.b_down),
        ]
    }
}
