//! Grad-CAM channel importance and the guidance loss built on it.
//!
//! For the predicted class `k`, `β_c` is the spatial mean of `∂y^k/∂A_c`
//! (taken through the whole attention pathway). A sigmoid squashes it to
//! `β̃`, which is normalized onto the simplex as `β̂` and used as a fixed
//! target for the channel weights `S` through a symmetric KL divergence.

use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::tensor::{sigmoid, Tensor, Var};

/// Smoothing constant inside every logarithm of the KL divergence.
pub const KL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceTarget {
    pub beta: Vec<f64>,
    pub beta_squashed: Vec<f64>,
    pub beta_normalized: Vec<f64>,
    pub class_index: usize,
}

impl GuidanceTarget {
    pub fn from_beta(beta: Vec<f64>, class_index: usize) -> Self {
        let beta_squashed: Vec<f64> = beta.iter().map(|&b| sigmoid(b)).collect();
        let total: f64 = beta_squashed.iter().sum();
        let beta_normalized = beta_squashed.iter().map(|v| v / total).collect();
        GuidanceTarget { beta, beta_squashed, beta_normalized, class_index }
    }

    pub fn channels(&self) -> usize {
        self.beta.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub ggam: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Pre-softmax score `y^k`, still attached to the trace's graph.
pub fn class_score<'g>(trace: &ForwardTrace<'g>, k: usize) -> Result<Var<'g>> {
    let classes = trace.logits.numel();
    if k >= classes {
        return Err(Error::Index { what: "class", index: k, len: classes });
    }
    trace.logits.select(k)
}

/// Grad-CAM weights for the trace's predicted class. Gradients produced
/// along the way are cleared before returning.
pub fn gradcam_weights(trace: &ForwardTrace<'_>) -> Result<GuidanceTarget> {
    if !trace.graph_retained() {
        return Err(Error::contract("Grad-CAM needs a trace recorded with retain_graph"));
    }
    let k = trace.predicted;
    let y = class_score(trace, k)?;
    let graph = trace.a.graph();
    y.backward_to(trace.a)?;
    let grad = trace.a.grad();
    graph.zero_grad();
    let shape = trace.a.shape();
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let beta = match grad {
        Some(g) => g.data().chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect(),
        None => vec![0.0; c],
    };
    Ok(GuidanceTarget::from_beta(beta, k))
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::contract(format!("{name} has negative or non-finite entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

/// `KL(p‖q) = Σ p_c ln((p_c+ε)/(q_c+ε))`.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::contract(format!("KL between lengths {} and {}", p.len(), q.len())));
    }
    check_distribution("p", p)?;
    check_distribution("q", q)?;
    Ok(p.iter().zip(q).map(|(&a, &b)| a * ((a + KL_EPS) / (b + KL_EPS)).ln()).sum())
}

/// Symmetric KL, `½(KL(p‖q) + KL(q‖p))`.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    Ok(0.5 * (kl(p, q)? + kl(q, p)?))
}

/// Guidance loss between the channel weights `S` and the normalized
/// Grad-CAM target. The target is a constant; gradient reaches `S` only.
pub fn ggam_loss<'g>(s: Var<'g>, target: &GuidanceTarget) -> Result<Var<'g>> {
    let c = target.channels();
    if s.shape() != [c] {
        return Err(Error::shape(format!("channel weights {:?} against a {c}-channel target", s.shape())));
    }
    let graph = s.graph();
    let q = graph.constant(Tensor::from_vec(&[c], target.beta_normalized.clone())?);
    let log_q = graph.constant(Tensor::from_vec(
        &[c],
        target.beta_normalized.iter().map(|v| (v + KL_EPS).ln()).collect(),
    )?);
    let log_s = s.add_scalar(KL_EPS).log()?;
    let forward = s.mul(log_s.sub(log_q)?)?.sum();
    let reverse = q.mul(log_q.sub(log_s)?)?.sum();
    Ok(forward.add(reverse)?.scale(0.5))
}

/// `−ln softmax(logits)_label`, max-shifted.
pub fn cross_entropy<'g>(logits: Var<'g>, label: usize) -> Result<Var<'g>> {
    let values = logits.data();
    if label >= values.len() {
        return Err(Error::Index { what: "label", index: label, len: values.len() });
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit at class {i}")));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Subtracting a constant does not change the loss or its gradient.
    let shifted = logits.add_scalar(-max);
    let log_sum = shifted.exp().sum().log()?;
    log_sum.sub(shifted.select(label)?)
}

/// `total = ce + λ·ggam`.
pub fn total_loss(ce: f64, ggam: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::contract(format!("guidance multiplier must be nonnegative, got {lambda}")));
    }
    Ok(LossBreakdown { ce, ggam, lambda, total: ce + lambda * ggam })
}

/// Row-major heatmap with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// `relu(Σ_c β_c a_c)`, min-max normalized, bilinearly resized.
///
/// A constant map normalizes to all ones when positive and stays all zeros
/// otherwise.
pub fn heatmap(a: &Tensor, target: &GuidanceTarget, out_rows: usize, out_cols: usize) -> Result<Heatmap> {
    let &[c, rows, cols] = a.shape() else {
        return Err(Error::shape(format!("feature maps must be [C, rows, cols], got {:?}", a.shape())));
    };
    if target.channels() != c {
        return Err(Error::shape(format!("{} Grad-CAM weights for {c} channels", target.channels())));
    }
    if out_rows < rows || out_cols < cols {
        return Err(Error::shape(format!("heatmap {out_rows}x{out_cols} smaller than feature maps {rows}x{cols}")));
    }
    let hw = rows * cols;
    let mut cam = vec![0.0; hw];
    for (ch, &w) in a.data().chunks(hw).zip(&target.beta) {
        for (m, v) in cam.iter_mut().zip(ch) {
            *m += w * v;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let (lo, hi) = cam.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi > lo {
        cam.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        let fill = if hi > 0.0 { 1.0 } else { 0.0 };
        cam.iter_mut().for_each(|v| *v = fill);
    }
    Ok(Heatmap { rows: out_rows, cols: out_cols, values: bilinear(&cam, rows, cols, out_rows, out_cols) })
}

/// Half-pixel-centered bilinear resize with edge clamping.
pub fn bilinear(src: &[f64], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Vec<f64> {
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = x.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, x - lo as f64)
            })
            .collect()
    };
    let rt = taps(out_rows, rows);
    let ct = taps(out_cols, cols);
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for &(r0, r1, fr) in &rt {
        for &(c0, c1, fc) in &ct {
            let top = src[r0 * cols + c0] * (1.0 - fc) + src[r0 * cols + c1] * fc;
            let bottom = src[r1 * cols + c0] * (1.0 - fc) + src[r1 * cols + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}
