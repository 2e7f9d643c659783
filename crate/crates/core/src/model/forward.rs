//! Forward pass with full activation caching and intervention hooks.
//!
//! Eight components per layer expose their direct output as a cached,
//! hookable tensor: the two norm outputs, the Q/K/V projections (pre-rotary),
//! the attention output projection, and the MLP up (pre-GeLU) and down
//! projections. Hooks run right after a tensor is produced and before
//! anything consumes it, which is exactly the semantics channel ablation
//! needs. The embedding output, each layer's post-residual state, and the
//! final norm output are hookable too, so gradient checks can probe every
//! cached coordinate.
//!
//! The causal mask is structural: scores for future positions are never
//! computed, so a suffix perturbation cannot change earlier logits even at
//! the bit level.

use crate::array::{self, Array};
use crate::error::{Error, Result};

use super::{ModelConfig, Parameters};

/// The eight per-layer component outputs tracked by the instruments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    PreAttnNorm,
    QProj,
    KProj,
    VProj,
    OProj,
    PreMlpNorm,
    UpProj,
    DownProj,
}

impl Component {
    pub const ALL: [Component; 8] = [
        Component::PreAttnNorm,
        Component::QProj,
        Component::KProj,
        Component::VProj,
        Component::OProj,
        Component::PreMlpNorm,
        Component::UpProj,
        Component::DownProj,
    ];

    pub fn index(self) -> usize {
        Component::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::PreAttnNorm => "pre_attn_norm",
            Component::QProj => "q_proj",
            Component::KProj => "k_proj",
            Component::VProj => "v_proj",
            Component::OProj => "o_proj",
            Component::PreMlpNorm => "pre_mlp_norm",
            Component::UpProj => "up_proj",
            Component::DownProj => "down_proj",
        }
    }

    /// Channel count of this component's output.
    pub fn width(self, cfg: &ModelConfig) -> usize {
        match self {
            Component::UpProj => cfg.d_ff,
            _ => cfg.d_model,
        }
    }
}

/// One tracked channel: (layer, component, channel index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NeuronRef {
    pub layer: usize,
    pub comp: Component,
    pub channel: usize,
}

/// A site in the forward pass where a cached tensor is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookPoint {
    Embedding,
    Comp { layer: usize, comp: Component },
    LayerOut { layer: usize },
    FinalNorm,
}

/// Intervention applied to a tensor at its hook point, before any consumer
/// sees it.
pub trait ForwardHook {
    fn apply(&self, point: HookPoint, values: &mut Array);
}

/// Zero the named channels at every position: exact ablation.
pub struct ZeroChannels<'a> {
    pub targets: &'a [NeuronRef],
}

impl ForwardHook for ZeroChannels<'_> {
    fn apply(&self, point: HookPoint, values: &mut Array) {
        let HookPoint::Comp { layer, comp } = point else {
            return;
        };
        for t in self.targets {
            if t.layer == layer && t.comp == comp {
                let cols = values.cols();
                let rows = values.rows();
                for r in 0..rows {
                    values.data_mut()[r * cols + t.channel] = 0.0;
                }
            }
        }
    }
}

/// Add `delta` to a single coordinate: finite-difference probe.
pub struct AddDelta {
    pub point: HookPoint,
    pub channel: usize,
    pub pos: usize,
    pub delta: f64,
}

impl ForwardHook for AddDelta {
    fn apply(&self, point: HookPoint, values: &mut Array) {
        if point == self.point {
            let cols = values.cols();
            values.data_mut()[self.pos * cols + self.channel] += self.delta;
        }
    }
}

/// Scale one channel at every position: directional probe for the
/// first-order consistency check.
pub struct ScaleChannel {
    pub target: NeuronRef,
    pub factor: f64,
}

impl ForwardHook for ScaleChannel {
    fn apply(&self, point: HookPoint, values: &mut Array) {
        let HookPoint::Comp { layer, comp } = point else {
            return;
        };
        if layer == self.target.layer && comp == self.target.comp {
            let cols = values.cols();
            let rows = values.rows();
            for r in 0..rows {
                values.data_mut()[r * cols + self.target.channel] *= self.factor;
            }
        }
    }
}

#[derive(Clone, Copy, Default)]
pub struct ForwardOpts<'a> {
    /// Added to every token position before rotary embedding; attention is
    /// invariant to it.
    pub pos_offset: usize,
    pub hook: Option<&'a dyn ForwardHook>,
}

/// Everything one layer produced, component outputs first.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Direct outputs indexed by [`Component::index`].
    pub comps: [Array; 8],
    /// Post-attention residual state (input to the MLP half).
    pub x_attn: Array,
    /// Post-residual layer output.
    pub out: Array,
    pub(crate) rms1_inv: Vec<f64>,
    pub(crate) rms2_inv: Vec<f64>,
    pub(crate) q_rot: Array,
    pub(crate) k_rot: Array,
    /// Per-head attention weights, each [T x T], rows summing to 1 over the
    /// causal prefix.
    pub(crate) attn: Vec<Array>,
    /// Concatenated head contexts, input to the output projection.
    pub(crate) ctx: Array,
}

#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub tokens: Vec<u32>,
    pub pos_offset: usize,
    /// Embedding-layer output, the "emb" row of layerwise reports.
    pub embedding: Array,
    pub layers: Vec<LayerCache>,
    /// Output of the final RMSNorm, used as the last layer's hidden state.
    pub final_norm: Array,
    pub(crate) final_rms_inv: Vec<f64>,
}

impl ActivationCache {
    pub fn component(&self, layer: usize, comp: Component) -> &Array {
        &self.layers[layer].comps[comp.index()]
    }

    /// Attention weights of one head: lower-triangular [T x T].
    pub fn attention_weights(&self, layer: usize, head: usize) -> &Array {
        &self.layers[layer].attn[head]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Array,
    pub cache: ActivationCache,
}

fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Err(Error::InvalidInput("empty token sequence".into()));
    }
    if tokens.len() > cfg.context_len {
        return Err(Error::InvalidInput(format!(
            "sequence length {} exceeds context {}",
            tokens.len(),
            cfg.context_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::IndexOutOfRange {
            what: "token id",
            index: t as usize,
            size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// `x [T x in] . w [in x out] + b`.
fn linear(x: &Array, w: &Array, b: &Array) -> Array {
    let mut out = array::matmul(x, w).expect("projection shapes fixed by config");
    let cols = out.cols();
    for r in 0..out.rows() {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    out
}

/// Copy head `h` (columns h*dh..(h+1)*dh) into a dense [T x dh] array.
pub(crate) fn head_slice(x: &Array, h: usize, dh: usize) -> Array {
    let t = x.rows();
    let mut out = Array::zeros(&[t, dh]);
    for r in 0..t {
        let src = &x.row(r)[h * dh..(h + 1) * dh];
        out.row_mut(r).copy_from_slice(src);
    }
    out
}

pub(crate) fn head_scatter(dst: &mut Array, src: &Array, h: usize, dh: usize) {
    for r in 0..dst.rows() {
        let cols = dst.cols();
        dst.data_mut()[r * cols + h * dh..r * cols + (h + 1) * dh].copy_from_slice(src.row(r));
    }
}

pub fn forward(params: &Parameters, cfg: &ModelConfig, tokens: &[u32]) -> Result<ForwardOutput> {
    forward_opts(params, cfg, tokens, &ForwardOpts::default())
}

pub fn forward_opts(
    params: &Parameters,
    cfg: &ModelConfig,
    tokens: &[u32],
    opts: &ForwardOpts,
) -> Result<ForwardOutput> {
    check_tokens(cfg, tokens)?;
    let t_len = tokens.len();
    let (d, h_count, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head());
    let positions: Vec<usize> = (0..t_len).map(|t| t + opts.pos_offset).collect();
    let run_hook = |point: HookPoint, values: &mut Array| {
        if let Some(hook) = opts.hook {
            hook.apply(point, values);
        }
    };

    let mut x = Array::zeros(&[t_len, d]);
    for (t, &tok) in tokens.iter().enumerate() {
        x.row_mut(t).copy_from_slice(params.input_embed.row(tok as usize));
    }
    run_hook(HookPoint::Embedding, &mut x);
    let embedding = x.clone();

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, lp) in params.layers.iter().enumerate() {
        let comp_hook = |comp: Component, values: &mut Array| {
            run_hook(HookPoint::Comp { layer: l, comp }, values);
        };

        let (mut a_in, rms1_inv) =
            array::rmsnorm_fwd(&x, lp.attn_norm_gain.data(), cfg.norm_eps)?;
        comp_hook(Component::PreAttnNorm, &mut a_in);

        let mut q = linear(&a_in, &lp.wq, &lp.bq);
        comp_hook(Component::QProj, &mut q);
        let mut k = linear(&a_in, &lp.wk, &lp.bk);
        comp_hook(Component::KProj, &mut k);
        let mut v = linear(&a_in, &lp.wv, &lp.bv);
        comp_hook(Component::VProj, &mut v);

        // Rotary embedding per head, shared frequencies across heads.
        let mut q_rot = Array::zeros(&[t_len, d]);
        let mut k_rot = Array::zeros(&[t_len, d]);
        for h in 0..h_count {
            let qh = array::rope(&head_slice(&q, h, dh), &positions, cfg.rope_theta)?;
            let kh = array::rope(&head_slice(&k, h, dh), &positions, cfg.rope_theta)?;
            head_scatter(&mut q_rot, &qh, h, dh);
            head_scatter(&mut k_rot, &kh, h, dh);
        }

        // Causal attention: scores only for s <= t, softmax over the prefix.
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn = Vec::with_capacity(h_count);
        let mut ctx = Array::zeros(&[t_len, d]);
        for h in 0..h_count {
            let mut a = Array::zeros(&[t_len, t_len]);
            for t in 0..t_len {
                let q_row = &q_rot.row(t)[h * dh..(h + 1) * dh];
                let mut max = f64::NEG_INFINITY;
                for s in 0..=t {
                    let k_row = &k_rot.row(s)[h * dh..(h + 1) * dh];
                    let dot: f64 = q_row.iter().zip(k_row).map(|(a, b)| a * b).sum();
                    let score = dot * scale;
                    a.set2(t, s, score);
                    max = max.max(score);
                }
                let mut sum = 0.0;
                for s in 0..=t {
                    let e = (a.get2(t, s) - max).exp();
                    a.set2(t, s, e);
                    sum += e;
                }
                for s in 0..=t {
                    a.set2(t, s, a.get2(t, s) / sum);
                }
                let ctx_row = &mut ctx.row_mut(t)[h * dh..(h + 1) * dh];
                for s in 0..=t {
                    let w = a.get2(t, s);
                    let v_row = &v.row(s)[h * dh..(h + 1) * dh];
                    for (c, vv) in ctx_row.iter_mut().zip(v_row) {
                        *c += w * vv;
                    }
                }
            }
            attn.push(a);
        }

        let mut attn_out = linear(&ctx, &lp.wo, &lp.bo);
        comp_hook(Component::OProj, &mut attn_out);

        let mut x_attn = x;
        x_attn.add_assign(&attn_out)?;

        let (mut m_in, rms2_inv) =
            array::rmsnorm_fwd(&x_attn, lp.mlp_norm_gain.data(), cfg.norm_eps)?;
        comp_hook(Component::PreMlpNorm, &mut m_in);

        let mut up = linear(&m_in, &lp.w_up, &lp.b_up);
        comp_hook(Component::UpProj, &mut up);

        let g = array::gelu_array(&up);
        let mut down = linear(&g, &lp.w_down, &lp.b_down);
        comp_hook(Component::DownProj, &mut down);

        let mut out = x_attn.clone();
        out.add_assign(&down)?;
        run_hook(HookPoint::LayerOut { layer: l }, &mut out);

        x = out.clone();
        layers.push(LayerCache {
            comps: [a_in, q, k, v, attn_out, m_in, up, down],
            x_attn,
            out,
            rms1_inv,
            rms2_inv,
            q_rot,
            k_rot,
            attn,
            ctx,
        });
    }

    let (mut final_norm, final_rms_inv) =
        array::rmsnorm_fwd(&x, params.final_norm_gain.data(), cfg.norm_eps)?;
    run_hook(HookPoint::FinalNorm, &mut final_norm);

    // logits[t, v] = final_norm[t] . output_embed[v]
    let vocab = cfg.vocab_size;
    let mut logits = Array::zeros(&[t_len, vocab]);
    for t in 0..t_len {
        let f_row = final_norm.row(t);
        let l_row = logits.row_mut(t);
        for (vi, lv) in l_row.iter_mut().enumerate() {
            let e_row = params.output_embed.row(vi);
            *lv = f_row.iter().zip(e_row).map(|(a, b)| a * b).sum();
        }
    }

    Ok(ForwardOutput {
        logits,
        cache: ActivationCache {
            tokens: tokens.to_vec(),
            pos_offset: opts.pos_offset,
            embedding,
            layers,
            final_norm,
            final_rms_inv,
        },
    })
}

/// Next-token cross-entropy: logits at positions 0..T-1 predict tokens
/// 1..T, averaged over the T-1 predicted positions.
pub fn loss(params: &Parameters, cfg: &ModelConfig, tokens: &[u32]) -> Result<f64> {
    loss_opts(params, cfg, tokens, &ForwardOpts::default())
}

pub fn loss_opts(
    params: &Parameters,
    cfg: &ModelConfig,
    tokens: &[u32],
    opts: &ForwardOpts,
) -> Result<f64> {
    let out = forward_opts(params, cfg, tokens, opts)?;
    loss_from_logits(&out.logits, tokens)
}

pub(crate) fn loss_from_logits(logits: &Array, tokens: &[u32]) -> Result<f64> {
    let (pred, targets) = shift_targets(logits, tokens)?;
    array::cross_entropy(&pred, &targets)
}

pub(crate) fn shift_targets(logits: &Array, tokens: &[u32]) -> Result<(Array, Vec<usize>)> {
    if tokens.len() < 2 {
        return Err(Error::InvalidInput(
            "need at least two tokens to score next-token loss".into(),
        ));
    }
    let p = tokens.len() - 1;
    let v = logits.cols();
    let mut pred = Array::zeros(&[p, v]);
    for t in 0..p {
        pred.row_mut(t).copy_from_slice(logits.row(t));
    }
    let targets = tokens[1..].iter().map(|&t| t as usize).collect();
    Ok((pred, targets))
}

/// Loss with the named channels zeroed at every position before downstream
/// consumption. An empty target list reproduces the baseline bit for bit.
pub fn ablate_forward(
    params: &Parameters,
    cfg: &ModelConfig,
    tokens: &[u32],
    targets: &[NeuronRef],
) -> Result<f64> {
    for t in targets {
        if t.layer >= cfg.n_layers || t.channel >= t.comp.width(cfg) {
            return Err(Error::IndexOutOfRange {
                what: "neuron reference",
                index: t.channel,
                size: t.comp.width(cfg),
            });
        }
    }
    let hook = ZeroChannels { targets };
    loss_opts(
        params,
        cfg,
        tokens,
        &ForwardOpts {
            pos_offset: 0,
            hook: Some(&hook),
        },
    )
}
