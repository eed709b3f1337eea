//! Built-in verification: randomized finite-difference checks of every
//! differentiable operation and of the full training loss, plus oracle
//! checks of the forward computations against plain loops.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, SpatialMode};
use crate::error::Result;
use crate::guidance::{self, GuidanceTarget};
use crate::model::{AblationFlags, Model, ModelConfig};
use crate::rng::rng_for;
use crate::tensor::{grad_check, Graph, ReduceKind, Tensor, Var};

pub const GRAD_EPS: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), pass, detail: detail.into() }
    }
}

type Builder = Box<dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>> + Sync + Send>;

struct Case {
    builder: Builder,
    inputs: Vec<Tensor>,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("sized")
}

/// Values bounded away from zero with random signs, so kinks at 0 stay far
/// from every finite-difference probe.
fn signed_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, v).expect("sized")
}

fn simplex(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(floor..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=4)
}

/// `Σ w ⊙ y`, turning any output into a scalar with a non-trivial gradient.
fn project<'g>(y: Var<'g>, w: &Tensor) -> Result<Var<'g>> {
    Ok(y.mul(y.graph().constant(w.clone()))?.sum())
}

fn unary_case(rng: &mut ChaCha8Rng, f: fn(Var<'_>) -> Result<Var<'_>>, lo: f64, hi: f64, signed: bool) -> Case {
    let shape = [dim(rng), dim(rng)];
    let x = if signed { signed_tensor(rng, &shape) } else { rand_tensor(rng, &shape, lo, hi) };
    let w = rand_tensor(rng, &shape, -1.0, 1.0);
    Case { builder: Box::new(move |_, v| project(f(v[0])?, &w)), inputs: vec![x] }
}

fn binary_case(rng: &mut ChaCha8Rng, f: for<'g> fn(Var<'g>, Var<'g>) -> Result<Var<'g>>, positive_rhs: bool) -> Case {
    let shape = [dim(rng), dim(rng), dim(rng)];
    let rhs_shape: Vec<usize> = match rng.gen_range(0..3) {
        0 => shape.to_vec(),
        1 => vec![shape[1], 1],
        _ => vec![shape[2]],
    };
    let x = rand_tensor(rng, &shape, -1.0, 1.0);
    let y = if positive_rhs { rand_tensor(rng, &rhs_shape, 0.5, 2.0) } else { rand_tensor(rng, &rhs_shape, -1.0, 1.0) };
    let w = rand_tensor(rng, &shape, -1.0, 1.0);
    Case { builder: Box::new(move |_, v| project(f(v[0], v[1])?, &w)), inputs: vec![x, y] }
}

fn op_cases(name: &str, rng: &mut ChaCha8Rng) -> Case {
    match name {
        "relu" => unary_case(rng, |x| Ok(x.relu()), 0.0, 0.0, true),
        "sigmoid" => unary_case(rng, |x| Ok(x.sigmoid()), -3.0, 3.0, false),
        "exp" => unary_case(rng, |x| Ok(x.exp()), -2.0, 2.0, false),
        "log" => unary_case(rng, |x| x.log(), 0.2, 3.0, false),
        "neg" => unary_case(rng, |x| Ok(x.neg()), -1.0, 1.0, false),
        "scale-shift" => unary_case(rng, |x| Ok(x.scale(-1.7).add_scalar(0.3)), -1.0, 1.0, false),
        "add" => binary_case(rng, |x, y| x.add(y), false),
        "sub" => binary_case(rng, |x, y| x.sub(y), false),
        "mul" => binary_case(rng, |x, y| x.mul(y), false),
        "div" => binary_case(rng, |x, y| x.div(y), true),
        "matmul" => {
            let (m, k, n) = (dim(rng), dim(rng), dim(rng));
            let a = rand_tensor(rng, &[m, k], -1.0, 1.0);
            let b = rand_tensor(rng, &[k, n], -1.0, 1.0);
            let w = rand_tensor(rng, &[m, n], -1.0, 1.0);
            Case { builder: Box::new(move |_, v| project(v[0].matmul(v[1])?, &w)), inputs: vec![a, b] }
        }
        "conv2d" => {
            let (cin, cout) = (dim(rng), dim(rng));
            let kh = *[1usize, 3].choose(rng).expect("non-empty");
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=1);
            let (h, wd) = (rng.gen_range(kh..kh + 4), rng.gen_range(kh..kh + 4));
            let x = rand_tensor(rng, &[cin, h, wd], -1.0, 1.0);
            let k = rand_tensor(rng, &[cout, cin, kh, kh], -1.0, 1.0);
            let oh = (h + 2 * pad - kh) / stride + 1;
            let ow = (wd + 2 * pad - kh) / stride + 1;
            let w = rand_tensor(rng, &[cout, oh, ow], -1.0, 1.0);
            Case { builder: Box::new(move |_, v| project(v[0].conv2d(v[1], stride, pad)?, &w)), inputs: vec![x, k] }
        }
        "maxpool2d" => {
            let (c, h, wd) = (dim(rng), 2 * dim(rng), 2 * dim(rng));
            // Well-separated distinct values keep each window's argmax fixed under the probes.
            let mut vals: Vec<f64> = (0..c * h * wd).map(|i| i as f64 * 0.05).collect();
            vals.shuffle(rng);
            let x = Tensor::from_vec(&[c, h, wd], vals).expect("sized");
            let w = rand_tensor(rng, &[c, h / 2, wd / 2], -1.0, 1.0);
            Case { builder: Box::new(move |_, v| project(v[0].maxpool2d(2)?, &w)), inputs: vec![x] }
        }
        "reduce-sum" | "reduce-mean" => {
            let kind = if name == "reduce-sum" { ReduceKind::Sum } else { ReduceKind::Mean };
            let shape = [dim(rng), dim(rng), dim(rng)];
            let axes: Vec<usize> = (0..3).filter(|_| rng.gen()).collect();
            let axes = if axes.is_empty() { vec![rng.gen_range(0..3)] } else { axes };
            let out: Vec<usize> = (0..3).filter(|a| !axes.contains(a)).map(|a| shape[a]).collect();
            let x = rand_tensor(rng, &shape, -1.0, 1.0);
            let w = rand_tensor(rng, &out, -1.0, 1.0);
            Case { builder: Box::new(move |_, v| project(v[0].reduce(kind, &axes)?, &w)), inputs: vec![x] }
        }
        "softmax" => {
            let shape = [dim(rng) + 1, dim(rng) + 1];
            let axis = rng.gen_range(0..2);
            let x = rand_tensor(rng, &shape, -2.0, 2.0);
            let w = rand_tensor(rng, &shape, -1.0, 1.0);
            Case { builder: Box::new(move |_, v| project(v[0].softmax(axis)?, &w)), inputs: vec![x] }
        }
        "reshape-select" => {
            let (a, b) = (dim(rng), dim(rng));
            let idx = rng.gen_range(0..a * b);
            let x = rand_tensor(rng, &[a, b], -1.0, 1.0);
            let w = rand_tensor(rng, &[b * a], -1.0, 1.0);
            Case {
                builder: Box::new(move |_, v| {
                    let flat = v[0].reshape(&[a * b])?;
                    project(flat, &w)?.add(flat.select(idx)?.scale(3.0))
                }),
                inputs: vec![x],
            }
        }
        "channel-weights" => {
            let r = rng.gen_range(1..=2);
            let c = r * dim(rng) + r;
            let shape = [c, dim(rng), dim(rng)];
            let a = rand_tensor(rng, &shape, 0.0, 1.0);
            let fc1 = signed_tensor(rng, &[c, c / r]);
            let fc2 = rand_tensor(rng, &[c / r, c], -1.0, 1.0);
            let w = rand_tensor(rng, &[c], -1.0, 1.0);
            Case {
                builder: Box::new(move |_, v| project(attention::channel_weights(v[0], v[1], v[2])?, &w)),
                inputs: vec![a, fc1, fc2],
            }
        }
        "channel-apply" => {
            let shape = [dim(rng), dim(rng), dim(rng)];
            let a = rand_tensor(rng, &shape, -1.0, 1.0);
            let s = Tensor::from_vec(&[shape[0]], simplex(rng, shape[0], 0.1)).expect("sized");
            let w = rand_tensor(rng, &shape, -1.0, 1.0);
            Case { builder: Box::new(move |_, v| project(attention::apply_channel(v[0], v[1])?, &w)), inputs: vec![a, s] }
        }
        "spatial-sum" | "spatial-exp" => {
            let mode = if name == "spatial-sum" { SpatialMode::SumNormalized } else { SpatialMode::ExpNormalized };
            let shape = [dim(rng), dim(rng) + 1, dim(rng)];
            let b = rand_tensor(rng, &shape, 0.1, 1.0);
            let w = rand_tensor(rng, &shape[1..], -1.0, 1.0);
            Case { builder: Box::new(move |_, v| project(attention::spatial_map(v[0], mode)?, &w)), inputs: vec![b] }
        }
        "spatial-apply" => {
            let shape = [dim(rng), dim(rng), dim(rng)];
            let a = rand_tensor(rng, &shape, -1.0, 1.0);
            let t = rand_tensor(rng, &shape[1..], 0.0, 1.0);
            let w = rand_tensor(rng, &shape, -1.0, 1.0);
            Case { builder: Box::new(move |_, v| project(attention::apply_spatial(v[0], v[1])?, &w)), inputs: vec![a, t] }
        }
        "ggam-loss" => {
            let c = dim(rng) + 1;
            let s = Tensor::from_vec(&[c], simplex(rng, c, 0.05)).expect("sized");
            let beta: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let target = GuidanceTarget::from_beta(beta, 0);
            Case { builder: Box::new(move |_, v| guidance::ggam_loss(v[0], &target)), inputs: vec![s] }
        }
        "cross-entropy" => {
            let k = dim(rng) + 1;
            let label = rng.gen_range(0..k);
            let logits = rand_tensor(rng, &[k], -3.0, 3.0);
            Case { builder: Box::new(move |_, v| guidance::cross_entropy(v[0], label)), inputs: vec![logits] }
        }
        "end-to-end" => end_to_end_case(rng),
        other => unreachable!("no gradient case named {other}"),
    }
}

/// Total training loss of a small model against every parameter, with the
/// guidance target held fixed at the unperturbed point.
fn end_to_end_case(rng: &mut ChaCha8Rng) -> Case {
    let mode = if rng.gen() { SpatialMode::SumNormalized } else { SpatialMode::ExpNormalized };
    let config = ModelConfig {
        input_rows: 8,
        input_cols: 8,
        backbone_channels: vec![3, 4],
        reduction: 2,
        classes: 3,
        head_hidden: if rng.gen() { vec![3] } else { vec![] },
        flags: AblationFlags::FULL,
        spatial_mode: mode,
        seed: rng.gen(),
        ..ModelConfig::default()
    };
    let model = Model::build(config).expect("valid config");
    let image = rand_tensor(rng, &[3, 8, 8], 0.0, 1.0);
    let label = rng.gen_range(0..3);
    let lambda = rng.gen_range(0.5..3.0);
    let target = {
        let g = Graph::new();
        guidance::gradcam_weights(&model.forward(&g, &image, true).expect("forward")).expect("gradcam")
    };
    let inputs: Vec<Tensor> = model.parameters().into_iter().cloned().collect();
    Case {
        builder: Box::new(move |g, v| {
            let trace = model.forward_with(g, v.to_vec(), &image, true)?;
            let ce = guidance::cross_entropy(trace.logits, label)?;
            ce.add(guidance::ggam_loss(trace.s, &target)?.scale(lambda))
        }),
        inputs,
    }
}

pub const GRADIENT_OPS: &[&str] = &[
    "relu",
    "sigmoid",
    "exp",
    "log",
    "neg",
    "scale-shift",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "conv2d",
    "maxpool2d",
    "reduce-sum",
    "reduce-mean",
    "softmax",
    "reshape-select",
    "channel-weights",
    "channel-apply",
    "spatial-sum",
    "spatial-exp",
    "spatial-apply",
    "ggam-loss",
    "cross-entropy",
    "end-to-end",
];

/// `cases_per_op` randomized finite-difference checks per operation.
pub fn gradient_suite(cases_per_op: usize, seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::with_capacity(GRADIENT_OPS.len() * cases_per_op);
    for op in GRADIENT_OPS {
        let mut rng = rng_for(seed, &format!("grad/{op}"));
        for i in 0..cases_per_op {
            let case = op_cases(op, &mut rng);
            let report = grad_check(case.builder, &case.inputs, GRAD_EPS, GRAD_TOL)?;
            out.push(Check::new(
                format!("grad {op} #{i}"),
                report.pass,
                format!("max relative error {:.2e}", report.max_rel_error()),
            ));
        }
    }
    Ok(out)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> (bool, f64) {
    let worst = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    (a.len() == b.len() && worst <= tol, worst)
}

fn oracle_matmul(rng: &mut ChaCha8Rng) -> Result<Check> {
    let (m, k, n) = (rng.gen_range(1..8), rng.gen_range(1..8), rng.gen_range(1..8));
    let a = rand_tensor(rng, &[m, k], -1.0, 1.0);
    let b = rand_tensor(rng, &[k, n], -1.0, 1.0);
    let g = Graph::new();
    let got = g.constant(a.clone()).matmul(g.constant(b.clone()))?.data();
    let mut want = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                want[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    let (pass, worst) = close(&got, &want, 1e-12);
    Ok(Check::new("oracle matmul vs triple loop", pass, format!("max abs diff {worst:.2e}")))
}

fn oracle_conv(rng: &mut ChaCha8Rng) -> Result<Check> {
    let (cin, cout, kh) = (rng.gen_range(1..4), rng.gen_range(1..4), 3);
    let (h, w, stride, pad) = (rng.gen_range(3..9), rng.gen_range(3..9), rng.gen_range(1..3), rng.gen_range(0..2));
    let x = rand_tensor(rng, &[cin, h, w], -1.0, 1.0);
    let k = rand_tensor(rng, &[cout, cin, kh, kh], -1.0, 1.0);
    let g = Graph::new();
    let got = g.constant(x.clone()).conv2d(g.constant(k.clone()), stride, pad)?.data();
    let (oh, ow) = ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kh) / stride + 1);
    let mut want = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for r in 0..oh {
            for c in 0..ow {
                let mut acc = 0.0;
                for i in 0..cin {
                    for dr in 0..kh {
                        for dc in 0..kh {
                            let (sr, sc) = ((r * stride + dr) as isize - pad as isize, (c * stride + dc) as isize - pad as isize);
                            if sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w {
                                acc += x.data()[(i * h + sr as usize) * w + sc as usize]
                                    * k.data()[((o * cin + i) * kh + dr) * kh + dc];
                            }
                        }
                    }
                }
                want[(o * oh + r) * ow + c] = acc;
            }
        }
    }
    let (pass, worst) = close(&got, &want, 1e-12);
    Ok(Check::new("oracle conv2d vs sliding window", pass, format!("max abs diff {worst:.2e}")))
}

fn oracle_maxpool(rng: &mut ChaCha8Rng) -> Result<Check> {
    let (c, h, w) = (rng.gen_range(1..4), 2 * rng.gen_range(1..5), 2 * rng.gen_range(1..5));
    let x = rand_tensor(rng, &[c, h, w], -1.0, 1.0);
    let g = Graph::new();
    let got = g.constant(x.clone()).maxpool2d(2)?.data();
    let mut want = Vec::new();
    for ch in 0..c {
        for r in (0..h).step_by(2) {
            for col in (0..w).step_by(2) {
                let mut m = f64::NEG_INFINITY;
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    m = m.max(x.data()[(ch * h + r + dr) * w + col + dc]);
                }
                want.push(m);
            }
        }
    }
    let (pass, worst) = close(&got, &want, 0.0);
    Ok(Check::new("oracle maxpool vs window scan", pass, format!("max abs diff {worst:.2e}")))
}

fn small_model(rng: &mut ChaCha8Rng, flags: AblationFlags) -> Result<Model> {
    Model::build(ModelConfig {
        input_rows: 16,
        input_cols: 16,
        backbone_channels: vec![4, 8],
        reduction: 2,
        classes: 4,
        flags,
        seed: rng.gen(),
        ..ModelConfig::default()
    })
}

fn oracle_gradcam_bypass(rng: &mut ChaCha8Rng) -> Result<Check> {
    let model = small_model(rng, AblationFlags { ggam: true, ..AblationFlags::BASELINE })?;
    let image = rand_tensor(rng, &[3, 16, 16], 0.0, 1.0);
    let g = Graph::new();
    let trace = model.forward(&g, &image, true)?;
    let target = guidance::gradcam_weights(&trace)?;
    let [c, rows, cols] = model.config.feature_shape();
    let k = target.class_index;
    let classes = model.config.classes;
    let w = model.head[0].weight.data();
    let want: Vec<f64> = (0..c).map(|ch| w[ch * classes + k] / (rows * cols) as f64).collect();
    let (pass, worst) = close(&target.beta, &want, 1e-10);
    Ok(Check::new("oracle Grad-CAM on linear head equals w/(HW)", pass, format!("max abs diff {worst:.2e}")))
}

fn oracle_gradcam_fd(rng: &mut ChaCha8Rng) -> Result<Check> {
    let model = small_model(rng, AblationFlags::FULL)?;
    let image = rand_tensor(rng, &[3, 16, 16], 0.0, 1.0);
    let g = Graph::new();
    let trace = model.forward(&g, &image, true)?;
    let target = guidance::gradcam_weights(&trace)?;
    let a = trace.a.value();
    let k = target.class_index;
    let score = |a: &Tensor| -> Result<f64> {
        let g = Graph::new();
        let t = model.forward_from_features(model.leaves(&g, false), g.constant(a.clone()), false)?;
        Ok(t.logits.with_value(|l| l.data()[k]))
    };
    let [c, rows, cols] = model.config.feature_shape();
    let hw = rows * cols;
    let mut numeric = vec![0.0; c];
    let mut work = a.clone();
    for ch in 0..c {
        for i in 0..hw {
            let j = ch * hw + i;
            let x = a.data()[j];
            work.data_mut()[j] = x + GRAD_EPS;
            let up = score(&work)?;
            work.data_mut()[j] = x - GRAD_EPS;
            let down = score(&work)?;
            work.data_mut()[j] = x;
            numeric[ch] += (up - down) / (2.0 * GRAD_EPS) / hw as f64;
        }
    }
    let scale = target.beta.iter().chain(&numeric).fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let (_, worst) = close(&target.beta, &numeric, f64::INFINITY);
    let rel = worst / scale;
    Ok(Check::new("oracle Grad-CAM vs finite differences", rel < GRAD_TOL, format!("max relative error {rel:.2e}")))
}

fn oracle_ggam_fixture() -> Result<Check> {
    let g = Graph::new();
    let target = GuidanceTarget {
        beta: vec![0.0; 2],
        beta_squashed: vec![0.8, 0.2],
        beta_normalized: vec![0.8, 0.2],
        class_index: 0,
    };
    let s = g.constant(Tensor::from_vec(&[2], vec![0.5, 0.5])?);
    let v = guidance::ggam_loss(s, &target)?.item()?;
    // ½(½ln(5/8) + ½ln(5/2) + 0.8ln(8/5) + 0.2ln(2/5)).
    let want = 0.5 * (0.5 * (0.625_f64).ln() + 0.5 * 2.5_f64.ln() + 0.8 * 1.6_f64.ln() + 0.2 * 0.4_f64.ln());
    Ok(Check::new("oracle guidance loss fixture", (v - want).abs() < 1e-9 && (v - 0.207944).abs() < 1e-5, format!("{v:.6}")))
}

fn oracle_kl_properties(rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut worst_self = 0.0_f64;
    let mut min_sym = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.gen_range(2..10);
        let p = simplex(rng, n, 0.0);
        let q = simplex(rng, n, 0.0);
        worst_self = worst_self.max(guidance::kl(&p, &p)?.abs());
        min_sym = min_sym.min(guidance::symmetric_kl(&p, &q)?);
    }
    Ok(Check::new(
        "oracle KL(p,p)=0 and symmetric KL >= 0",
        worst_self < 1e-12 && min_sym >= 0.0,
        format!("max |KL(p,p)| {worst_self:.1e}, min symmetric {min_sym:.2e}"),
    ))
}

fn oracle_attention(rng: &mut ChaCha8Rng) -> Result<Check> {
    let model = small_model(rng, AblationFlags::FULL)?;
    let mut worst = 0.0_f64;
    let mut shapes_ok = true;
    for _ in 0..100 {
        let image = rand_tensor(rng, &[3, 16, 16], 0.0, 1.0);
        let g = Graph::new();
        let trace = model.forward(&g, &image, false)?;
        let (s, b, t) = (trace.s.value(), trace.b.value(), trace.t.value());
        shapes_ok &= trace.d.shape() == trace.a.shape() && s.data().iter().all(|&v| v >= 0.0);
        worst = worst.max((s.sum() - 1.0).abs()).max((t.sum() - 1.0).abs());
        let factor = rng.gen_range(0.1..10.0);
        let scaled = Tensor::from_vec(b.shape(), b.data().iter().map(|v| v * factor).collect())?;
        let g2 = Graph::new();
        let t2 = attention::spatial_map(g2.constant(scaled), model.config.spatial_mode)?.value();
        worst = worst.max(close(t.data(), t2.data(), f64::INFINITY).1);
    }
    Ok(Check::new(
        "oracle attention invariants over 100 images",
        shapes_ok && worst < 1e-9,
        format!("max deviation {worst:.2e}"),
    ))
}

pub fn oracle_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = rng_for(seed, "oracles");
    let mut out = Vec::new();
    for _ in 0..5 {
        out.push(oracle_matmul(&mut rng)?);
        out.push(oracle_conv(&mut rng)?);
        out.push(oracle_maxpool(&mut rng)?);
    }
    out.push(oracle_gradcam_bypass(&mut rng)?);
    out.push(oracle_gradcam_fd(&mut rng)?);
    out.push(oracle_ggam_fixture()?);
    out.push(oracle_kl_properties(&mut rng)?);
    out.push(oracle_attention(&mut rng)?);
    Ok(out)
}

/// Both suites; four gradient cases per operation.
pub fn run(seed: u64) -> Result<Vec<Check>> {
    let mut out = gradient_suite(4, seed)?;
    out.extend(oracle_suite(seed)?);
    Ok(out)
}
