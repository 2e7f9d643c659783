//! Dense f64 arrays and the handful of kernels the model is built from.
//!
//! Storage is row-major, loops are explicit, and every reduction runs in a
//! fixed order. That last point is the contract the rest of the crate leans
//! on: results are bit-identical across runs and across worker counts, so
//! nothing in here is allowed to reduce in thread-dependent order.
//!
//! All math is f64 throughout. The models this crate trains are small enough
//! that we buy exact reproducibility and clean gradient checks instead of
//! speed.

use crate::error::{Error, Result};

/// Row-major n-dimensional array of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn zeros(shape: &[usize]) -> Array {
        let len = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Array> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: vec![data.len()],
                rhs: shape.to_vec(),
            });
        }
        Ok(Array {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros_like(other: &Array) -> Array {
        Array::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows of a 2-d array.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Number of columns of a 2-d array.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    /// Row `i` of a 2-d array as a contiguous slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.cols();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    /// Elementwise `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Array) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }
}

/// `[m x k] . [k x n] -> [m x n]`. Inner loop runs over contiguous rows of
/// `b` so the compiler can vectorize it.
pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Array::zeros(&[m, n]);
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (p, &a_ip) in a_row.iter().enumerate().take(k) {
            let b_row = b.row(p);
            for j in 0..n {
                out_row[j] += a_ip * b_row[j];
            }
        }
    }
    Ok(out)
}

/// Softmax along `axis`, stabilized by subtracting the lane max.
pub fn softmax(x: &Array, axis: usize) -> Result<Array> {
    if axis >= x.shape.len() {
        return Err(Error::IndexOutOfRange {
            what: "softmax axis",
            index: axis,
            size: x.shape.len(),
        });
    }
    let lane = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut max = f64::NEG_INFINITY;
            for s in 0..lane {
                max = max.max(out.data[base + s * inner]);
            }
            let mut sum = 0.0;
            for s in 0..lane {
                let e = (out.data[base + s * inner] - max).exp();
                out.data[base + s * inner] = e;
                sum += e;
            }
            for s in 0..lane {
                out.data[base + s * inner] /= sum;
            }
        }
    }
    Ok(out)
}

/// Standard normal CDF, via the exact erf rather than a tanh fit.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal PDF.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// GeLU: `x * Phi(x)` with the exact Gaussian CDF.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// d/dx GeLU = `Phi(x) + x * phi(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn gelu_array(x: &Array) -> Array {
    let mut out = x.clone();
    for v in &mut out.data {
        *v = gelu(*v);
    }
    out
}

/// RMS-normalize the last axis: `y_i = g_i * x_i / sqrt(mean(x^2) + eps)`.
pub fn rmsnorm(x: &Array, gain: &[f64], eps: f64) -> Result<Array> {
    Ok(rmsnorm_fwd(x, gain, eps)?.0)
}

/// Like [`rmsnorm`] but also returns the per-lane `1/sqrt(mean(x^2)+eps)`
/// factors the backward pass needs.
pub fn rmsnorm_fwd(x: &Array, gain: &[f64], eps: f64) -> Result<(Array, Vec<f64>)> {
    let d = *x.shape.last().ok_or(Error::ShapeMismatch {
        op: "rmsnorm",
        lhs: x.shape.clone(),
        rhs: vec![gain.len()],
    })?;
    if d != gain.len() || d == 0 {
        return Err(Error::ShapeMismatch {
            op: "rmsnorm",
            lhs: x.shape.clone(),
            rhs: vec![gain.len()],
        });
    }
    let lanes = x.data.len() / d;
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(lanes);
    for l in 0..lanes {
        let row = &mut out.data[l * d..(l + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + eps).sqrt();
        inv.push(r);
        for (v, g) in row.iter_mut().zip(gain) {
            *v *= r * g;
        }
    }
    Ok((out, inv))
}

/// Rotary position embedding over `[T x d]` with d even. Channel pair
/// `(2j, 2j+1)` at position `positions[t]` is rotated by
/// `positions[t] * theta^(-2j/d)`.
pub fn rope(x: &Array, positions: &[usize], theta: f64) -> Result<Array> {
    rope_rotate(x, positions, theta, 1.0)
}

/// Inverse rotation; applying `rope` then `rope_backward` to a gradient
/// implements the transpose of the (orthogonal) forward map.
pub fn rope_backward(x: &Array, positions: &[usize], theta: f64) -> Result<Array> {
    rope_rotate(x, positions, theta, -1.0)
}

fn rope_rotate(x: &Array, positions: &[usize], theta: f64, sign: f64) -> Result<Array> {
    if x.shape.len() != 2 || x.shape[1] % 2 != 0 || x.shape[0] != positions.len() {
        return Err(Error::ShapeMismatch {
            op: "rope",
            lhs: x.shape.clone(),
            rhs: vec![positions.len()],
        });
    }
    let d = x.shape[1];
    let mut out = x.clone();
    for (t, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(t);
        for j in 0..d / 2 {
            let freq = theta.powf(-((2 * j) as f64) / d as f64);
            let angle = sign * pos as f64 * freq;
            let (sin, cos) = angle.sin_cos();
            let a = row[2 * j];
            let b = row[2 * j + 1];
            row[2 * j] = a * cos - b * sin;
            row[2 * j + 1] = a * sin + b * cos;
        }
    }
    Ok(out)
}

/// Mean cross-entropy of `logits [P x V]` against `targets` (length P),
/// computed through a stable log-sum-exp.
pub fn cross_entropy(logits: &Array, targets: &[usize]) -> Result<f64> {
    Ok(ce_inner(logits, targets, false)?.0)
}

/// Cross-entropy plus its gradient `(softmax - onehot) / P`.
pub fn cross_entropy_grad(logits: &Array, targets: &[usize]) -> Result<(f64, Array)> {
    let (loss, grad) = ce_inner(logits, targets, true)?;
    Ok((loss, grad.expect("grad requested")))
}

fn ce_inner(logits: &Array, targets: &[usize], want_grad: bool) -> Result<(f64, Option<Array>)> {
    if logits.shape.len() != 2 || logits.shape[0] != targets.len() || targets.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape.clone(),
            rhs: vec![targets.len()],
        });
    }
    let (p, v) = (logits.shape[0], logits.shape[1]);
    for (i, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::IndexOutOfRange {
                what: "cross_entropy target",
                index: t,
                size: v,
            });
        }
        let _ = i;
    }
    let mut grad = if want_grad {
        Some(Array::zeros(&[p, v]))
    } else {
        None
    };
    let scale = 1.0 / p as f64;
    let mut loss = 0.0;
    for i in 0..p {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &l in row {
            sum += (l - max).exp();
        }
        let lse = max + sum.ln();
        loss += (lse - row[targets[i]]) * scale;
        if let Some(g) = grad.as_mut() {
            let g_row = g.row_mut(i);
            for (j, &l) in row.iter().enumerate() {
                g_row[j] = (l - lse).exp() * scale;
            }
            g_row[targets[i]] -= scale;
        }
    }
    Ok((loss, grad))
}

/// Outcome of a finite-difference sweep. The error metric per coordinate is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`: relative for large
/// gradients, absolute near zero, so finite-difference noise on dead
/// coordinates does not drown the check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
    pub tol: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Central-difference check of `analytic` against `f` around `x`:
/// `(f(x+h e_i) - f(x-h e_i)) / 2h` per coordinate.
pub fn grad_check(
    f: &mut dyn FnMut(&Array) -> Result<f64>,
    x: &Array,
    analytic: &Array,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if x.shape != analytic.shape {
        return Err(Error::ShapeMismatch {
            op: "grad_check",
            lhs: x.shape.clone(),
            rhs: analytic.shape.clone(),
        });
    }
    let mut probe = x.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        tol,
        checked: x.len(),
    };
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe)?;
        probe.data[i] = orig - h;
        let down = f(&probe)?;
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data[i];
        if !numeric.is_finite() {
            return Err(Error::NonFinite("grad_check probe"));
        }
        let abs = (a - numeric).abs();
        let rel = abs / 1.0_f64.max(a.abs()).max(numeric.abs());
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
        report.max_abs_err = report.max_abs_err.max(abs);
    }
    Ok(report)
}
