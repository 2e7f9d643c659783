//! Reverse-mode gradients for the full model.
//!
//! One call produces three things from a single forward/backward sweep: the
//! scalar loss, gradients for every parameter tensor, and gradients of the
//! loss with respect to every cached activation (the same tensors the
//! forward hooks can touch). The activation gradients are what the
//! first-order importance estimate consumes, so they are stored per
//! component in the same [T x width] layout as the cache.
//!
//! The backward pass never runs hooks; it assumes the cache came from an
//! unhooked forward.

use crate::array::{self, Array};
use crate::error::Result;

use super::forward::{head_scatter, head_slice, shift_targets};
use super::{
    ActivationCache, Component, ForwardOutput, LayerCache, LayerParams, ModelConfig, Parameters,
};

/// Gradients of the loss with respect to one layer's cached activations.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    /// Indexed by [`Component::index`], same shapes as the cached outputs.
    pub comps: [Array; 8],
    /// Gradient at the post-residual layer output.
    pub out: Array,
}

/// Gradients at every hookable activation site.
#[derive(Debug, Clone)]
pub struct ActivationGrads {
    pub embedding: Array,
    pub layers: Vec<LayerGrads>,
    pub final_norm: Array,
}

impl ActivationGrads {
    pub fn component(&self, layer: usize, comp: Component) -> &Array {
        &self.layers[layer].comps[comp.index()]
    }
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub loss: f64,
    pub param_grads: Parameters,
    pub act_grads: ActivationGrads,
    /// The forward cache the gradients were computed against.
    pub cache: ActivationCache,
}

/// dx for `out = x . w + b`, accumulating dw and db in place.
fn linear_grads(x: &Array, w: &Array, d_out: &Array, dw: &mut Array, db: &mut Array) -> Array {
    let t_len = x.rows();
    let d_in = w.rows();
    let mut dx = Array::zeros(&[t_len, d_in]);
    for t in 0..t_len {
        let dy = d_out.row(t);
        let dx_row = dx.row_mut(t);
        for (i, slot) in dx_row.iter_mut().enumerate() {
            *slot = dy.iter().zip(w.row(i)).map(|(a, b)| a * b).sum();
        }
        let x_row = x.row(t);
        for (i, &xi) in x_row.iter().enumerate() {
            for (dwv, dyv) in dw.row_mut(i).iter_mut().zip(dy) {
                *dwv += xi * dyv;
            }
        }
        for (dbv, dyv) in db.data_mut().iter_mut().zip(dy) {
            *dbv += dyv;
        }
    }
    dx
}

/// dx for `y[t] = inv[t] * x[t] (*) gain`, accumulating dgain in place.
///
/// With r = inv[t], d = lane count:
///   dgain_j += dy[t,j] * x[t,j] * r
///   dx[t,j]  = r*g_j*dy[t,j] - (r^3/d) * x[t,j] * sum_i dy[t,i]*g_i*x[t,i]
fn rmsnorm_grads(x: &Array, gain: &Array, inv: &[f64], dy: &Array, dgain: &mut Array) -> Array {
    let t_len = x.rows();
    let d = x.cols();
    let g = gain.data();
    let mut dx = Array::zeros(&[t_len, d]);
    for t in 0..t_len {
        let r = inv[t];
        let xr = x.row(t);
        let dyr = dy.row(t);
        let s: f64 = (0..d).map(|i| dyr[i] * g[i] * xr[i]).sum();
        let c = r * r * r * s / d as f64;
        let dxr = dx.row_mut(t);
        for j in 0..d {
            dxr[j] = r * g[j] * dyr[j] - c * xr[j];
        }
        for (j, dgv) in dgain.data_mut().iter_mut().enumerate() {
            *dgv += dyr[j] * xr[j] * r;
        }
    }
    dx
}

/// Backward through one attention block: from d(ctx) to gradients at the
/// pre-rotary Q/K and at V.
fn attention_grads(
    cfg: &ModelConfig,
    lc: &LayerCache,
    d_ctx: &Array,
    positions: &[usize],
) -> Result<(Array, Array, Array)> {
    let t_len = d_ctx.rows();
    let (d, dh) = (cfg.d_model, cfg.d_head());
    let scale = 1.0 / (dh as f64).sqrt();
    let v = &lc.comps[Component::VProj.index()];

    let mut d_q_rot = Array::zeros(&[t_len, d]);
    let mut d_k_rot = Array::zeros(&[t_len, d]);
    let mut d_v = Array::zeros(&[t_len, d]);
    for h in 0..cfg.n_heads {
        let a = &lc.attn[h];
        for t in 0..t_len {
            let dctx = &d_ctx.row(t)[h * dh..(h + 1) * dh];
            let a_row = a.row(t);
            // ctx[t] = sum_s A[t,s] v[s]: dA[t,s] = dctx . v[s], dv[s] += A[t,s] dctx.
            let mut da = vec![0.0; t + 1];
            for (s, slot) in da.iter_mut().enumerate() {
                let v_row = &v.row(s)[h * dh..(h + 1) * dh];
                *slot = dctx.iter().zip(v_row).map(|(a, b)| a * b).sum();
            }
            for (s, &w) in a_row[..=t].iter().enumerate() {
                let dv_row = &mut d_v.row_mut(s)[h * dh..(h + 1) * dh];
                for (dvv, dc) in dv_row.iter_mut().zip(dctx) {
                    *dvv += w * dc;
                }
            }
            // Softmax over the causal prefix.
            let dot_sum: f64 = a_row[..=t].iter().zip(&da).map(|(w, g)| w * g).sum();
            for s in 0..=t {
                let ds = a_row[s] * (da[s] - dot_sum) * scale;
                let k_row = &lc.k_rot.row(s)[h * dh..(h + 1) * dh];
                let dq_row = &mut d_q_rot.row_mut(t)[h * dh..(h + 1) * dh];
                for (dqv, kv) in dq_row.iter_mut().zip(k_row) {
                    *dqv += ds * kv;
                }
                let q_row = &lc.q_rot.row(t)[h * dh..(h + 1) * dh];
                let dk_row = &mut d_k_rot.row_mut(s)[h * dh..(h + 1) * dh];
                for (dkv, qv) in dk_row.iter_mut().zip(q_row) {
                    *dkv += ds * qv;
                }
            }
        }
    }

    // Rotation is orthogonal, so its transpose is the inverse rotation.
    let mut d_q = Array::zeros(&[t_len, d]);
    let mut d_k = Array::zeros(&[t_len, d]);
    for h in 0..cfg.n_heads {
        let dqh = array::rope_backward(&head_slice(&d_q_rot, h, dh), positions, cfg.rope_theta)?;
        let dkh = array::rope_backward(&head_slice(&d_k_rot, h, dh), positions, cfg.rope_theta)?;
        head_scatter(&mut d_q, &dqh, h, dh);
        head_scatter(&mut d_k, &dkh, h, dh);
    }
    Ok((d_q, d_k, d_v))
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    cfg: &ModelConfig,
    lp: &LayerParams,
    lc: &LayerCache,
    x_in: &Array,
    d_out: Array,
    lg: &mut LayerParams,
    positions: &[usize],
) -> Result<(LayerGrads, Array)> {
    use Component::*;

    // MLP half: out = x_attn + down(gelu(up(m_in))).
    let d_down = d_out.clone();
    let up = &lc.comps[UpProj.index()];
    let gelu_out = array::gelu_array(up);
    let d_g = linear_grads(&gelu_out, &lp.w_down, &d_down, &mut lg.w_down, &mut lg.b_down);
    let mut d_up = d_g;
    for (dv, &uv) in d_up.data_mut().iter_mut().zip(up.data()) {
        *dv *= array::gelu_grad(uv);
    }
    let d_m_in = linear_grads(
        &lc.comps[PreMlpNorm.index()],
        &lp.w_up,
        &d_up,
        &mut lg.w_up,
        &mut lg.b_up,
    );
    let mut d_x_attn = d_out.clone();
    d_x_attn.add_assign(&rmsnorm_grads(
        &lc.x_attn,
        &lp.mlp_norm_gain,
        &lc.rms2_inv,
        &d_m_in,
        &mut lg.mlp_norm_gain,
    ))?;

    // Attention half: x_attn = x + o(attn(q, k, v)).
    let d_attn_out = d_x_attn.clone();
    let d_ctx = linear_grads(&lc.ctx, &lp.wo, &d_attn_out, &mut lg.wo, &mut lg.bo);
    let (d_q, d_k, d_v) = attention_grads(cfg, lc, &d_ctx, positions)?;

    let a_in = &lc.comps[PreAttnNorm.index()];
    let mut d_a_in = linear_grads(a_in, &lp.wq, &d_q, &mut lg.wq, &mut lg.bq);
    d_a_in.add_assign(&linear_grads(a_in, &lp.wk, &d_k, &mut lg.wk, &mut lg.bk))?;
    d_a_in.add_assign(&linear_grads(a_in, &lp.wv, &d_v, &mut lg.wv, &mut lg.bv))?;

    let mut d_x = d_x_attn.clone();
    d_x.add_assign(&rmsnorm_grads(
        x_in,
        &lp.attn_norm_gain,
        &lc.rms1_inv,
        &d_a_in,
        &mut lg.attn_norm_gain,
    ))?;

    let grads = LayerGrads {
        comps: [d_a_in, d_q, d_k, d_v, d_attn_out, d_m_in, d_up, d_down],
        out: d_out,
    };
    Ok((grads, d_x))
}

/// Loss plus gradients for every parameter and every cached activation.
pub fn loss_and_backward(
    params: &Parameters,
    cfg: &ModelConfig,
    tokens: &[u32],
) -> Result<BackwardOutput> {
    let ForwardOutput { logits, cache } = super::forward(params, cfg, tokens)?;
    let (pred, targets) = shift_targets(&logits, tokens)?;
    let (loss, d_pred) = array::cross_entropy_grad(&pred, &targets)?;

    let t_len = tokens.len();
    let d = cfg.d_model;
    let mut grads = Parameters::zeros(cfg);

    // Last position is never scored, so its logit gradient is zero.
    let d_fin_scored = array::matmul(&d_pred, &params.output_embed)?;
    let mut d_fin = Array::zeros(&[t_len, d]);
    for t in 0..t_len - 1 {
        d_fin.row_mut(t).copy_from_slice(d_fin_scored.row(t));
    }
    for t in 0..t_len - 1 {
        let dl = d_pred.row(t);
        let f_row = cache.final_norm.row(t);
        for (v, &dlv) in dl.iter().enumerate() {
            for (ev, fv) in grads.output_embed.row_mut(v).iter_mut().zip(f_row) {
                *ev += dlv * fv;
            }
        }
    }

    let last_out = cache
        .layers
        .last()
        .map(|lc| &lc.out)
        .unwrap_or(&cache.embedding);
    let mut d_cur = rmsnorm_grads(
        last_out,
        &params.final_norm_gain,
        &cache.final_rms_inv,
        &d_fin,
        &mut grads.final_norm_gain,
    );

    let positions: Vec<usize> = (0..t_len).map(|t| t + cache.pos_offset).collect();
    let mut act_layers: Vec<LayerGrads> = Vec::with_capacity(cfg.n_layers);
    for l in (0..cfg.n_layers).rev() {
        let x_in = if l == 0 {
            &cache.embedding
        } else {
            &cache.layers[l - 1].out
        };
        let (lg_act, d_x) = layer_backward(
            cfg,
            &params.layers[l],
            &cache.layers[l],
            x_in,
            d_cur,
            &mut grads.layers[l],
            &positions,
        )?;
        act_layers.push(lg_act);
        d_cur = d_x;
    }
    act_layers.reverse();

    for (t, &tok) in tokens.iter().enumerate() {
        let src = d_cur.row(t);
        for (ev, sv) in grads.input_embed.row_mut(tok as usize).iter_mut().zip(src) {
            *ev += sv;
        }
    }

    Ok(BackwardOutput {
        loss,
        param_grads: grads,
        act_grads: ActivationGrads {
            embedding: d_cur,
            layers: act_layers,
            final_norm: d_fin,
        },
        cache,
    })
}
