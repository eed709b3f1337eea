//! Library results against straight-line reference implementations written
//! here with plain loops.

use ggam_core::attention::{self, SpatialMode};
use ggam_core::data::{self, DatasetSpec, Mask};
use ggam_core::exec::Exec;
use ggam_core::guidance::{self, GuidanceTarget};
use ggam_core::model::{AblationFlags, Model, ModelConfig};
use ggam_core::tensor::{Graph, ReduceKind, Tensor};
use ggam_core::trainer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * m + j];
            }
            out[i * m + j] = s;
        }
    }
    out
}

/// 3×3 cross-correlation, stride 1, zero padding 1.
fn naive_conv(x: &[f64], cin: usize, rows: usize, cols: usize, w: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * rows * cols];
    for o in 0..cout {
        for r in 0..rows {
            for c in 0..cols {
                let mut s = 0.0;
                for i in 0..cin {
                    for dr in 0..3 {
                        for dc in 0..3 {
                            let (rr, cc) = (r as isize + dr as isize - 1, c as isize + dc as isize - 1);
                            if rr < 0 || cc < 0 || rr >= rows as isize || cc >= cols as isize {
                                continue;
                            }
                            s += x[(i * rows + rr as usize) * cols + cc as usize] * w[((o * cin + i) * 3 + dr) * 3 + dc];
                        }
                    }
                }
                out[(o * rows + r) * cols + c] = s;
            }
        }
    }
    out
}

fn naive_maxpool(x: &[f64], ch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let (orow, ocol) = (rows / 2, cols / 2);
    let mut out = vec![f64::NEG_INFINITY; ch * orow * ocol];
    for c in 0..ch {
        for r in 0..orow * 2 {
            for k in 0..ocol * 2 {
                let o = &mut out[(c * orow + r / 2) * ocol + k / 2];
                *o = o.max(x[(c * rows + r) * cols + k]);
            }
        }
    }
    out
}

fn naive_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

struct Reference {
    a: Vec<f64>,
    s: Vec<f64>,
    t: Vec<f64>,
    d: Vec<f64>,
    logits: Vec<f64>,
}

/// The whole model, one loop nest per stage.
fn reference_forward(model: &Model, image: &Tensor) -> Reference {
    let cfg = &model.config;
    let (mut x, mut ch, mut rows, mut cols) = (image.data().to_vec(), cfg.input_channels, cfg.input_rows, cfg.input_cols);
    for k in &model.backbone {
        let cout = k.shape()[0];
        let mut y = naive_conv(&x, ch, rows, cols, k.data(), cout);
        y.iter_mut().for_each(|v| *v = v.max(0.0));
        x = naive_maxpool(&y, cout, rows, cols);
        ch = cout;
        rows /= 2;
        cols /= 2;
    }
    let a = x;
    let hw = rows * cols;
    let gap = |m: &[f64]| -> Vec<f64> { (0..ch).map(|c| m[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64).collect() };

    let s = if cfg.flags.channel_attention {
        let hidden = model.attention.fc1.shape()[1];
        let mut z = naive_matmul(&gap(&a), model.attention.fc1.data(), 1, ch, hidden);
        z.iter_mut().for_each(|v| *v = v.max(0.0));
        naive_softmax(&naive_matmul(&z, model.attention.fc2.data(), 1, hidden, ch))
    } else {
        vec![1.0 / ch as f64; ch]
    };
    let b: Vec<f64> = if cfg.flags.channel_attention {
        (0..ch * hw).map(|i| s[i / hw] * a[i]).collect()
    } else {
        a.clone()
    };
    let (t, d) = if cfg.flags.spatial_attention {
        let summed: Vec<f64> = (0..hw).map(|p| (0..ch).map(|c| b[c * hw + p]).sum()).collect();
        let t = match cfg.spatial_mode {
            SpatialMode::SumNormalized => {
                let total: f64 = summed.iter().sum();
                summed.iter().map(|v| v / total).collect()
            }
            SpatialMode::ExpNormalized => naive_softmax(&summed),
        };
        let d = (0..ch * hw).map(|i| a[i] * t[i % hw]).collect();
        (t, d)
    } else {
        (vec![1.0; hw], b)
    };

    let mut h = gap(&d);
    let mut width = ch;
    for (i, layer) in model.head.iter().enumerate() {
        let out = layer.weight.shape()[1];
        h = naive_matmul(&h, layer.weight.data(), 1, width, out);
        h.iter_mut().zip(layer.bias.data()).for_each(|(v, b)| *v += b);
        if i + 1 < model.head.len() {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        width = out;
    }
    Reference { a, s, t, d, logits: h }
}

fn small_config(flags: AblationFlags, mode: SpatialMode, seed: u64) -> ModelConfig {
    ModelConfig {
        input_rows: 16,
        input_cols: 16,
        backbone_channels: vec![4, 8],
        reduction: 2,
        classes: 5,
        head_hidden: vec![6],
        flags,
        spatial_mode: mode,
        seed,
        ..ModelConfig::default()
    }
}

fn random_image(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Tensor {
    let shape = cfg.image_shape();
    Tensor::from_vec(&shape, random(rng, shape.iter().product(), 0.0, 1.0)).unwrap()
}

fn assert_all_close(what: &str, got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(close(*g, *w, tol), "{what}[{i}]: {g} vs {w}");
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for _ in 0..20 {
        let (n, k, m) = (r.gen_range(1..9), r.gen_range(1..9), r.gen_range(1..9));
        let (a, b) = (random(&mut r, n * k, -2.0, 2.0), random(&mut r, k * m, -2.0, 2.0));
        let g = Graph::new();
        let out = g.constant(Tensor::from_vec(&[n, k], a.clone()).unwrap())
            .matmul(g.constant(Tensor::from_vec(&[k, m], b.clone()).unwrap()))
            .unwrap();
        assert_all_close("matmul", &out.data(), &naive_matmul(&a, &b, n, k, m), 1e-12);
    }
}

#[test]
fn conv_and_pool_match_window_scans() {
    let mut r = rng(2);
    for _ in 0..10 {
        let (cin, cout, rows, cols) = (r.gen_range(1..4), r.gen_range(1..4), 2 * r.gen_range(1..6), 2 * r.gen_range(1..6));
        let x = random(&mut r, cin * rows * cols, -1.0, 1.0);
        let w = random(&mut r, cout * cin * 9, -1.0, 1.0);
        let g = Graph::new();
        let conv = g.constant(Tensor::from_vec(&[cin, rows, cols], x.clone()).unwrap())
            .conv2d(g.constant(Tensor::from_vec(&[cout, cin, 3, 3], w.clone()).unwrap()), 1, 1)
            .unwrap();
        let want = naive_conv(&x, cin, rows, cols, &w, cout);
        assert_all_close("conv", &conv.data(), &want, 1e-12);
        let pooled = conv.maxpool2d(2).unwrap();
        assert_all_close("maxpool", &pooled.data(), &naive_maxpool(&want, cout, rows, cols), 1e-12);
    }
}

#[test]
fn reductions_match_loops() {
    let mut r = rng(3);
    let (a, b, c) = (3, 4, 5);
    let x = random(&mut r, a * b * c, -1.0, 1.0);
    let g = Graph::new();
    let v = g.constant(Tensor::from_vec(&[a, b, c], x.clone()).unwrap());
    let sum0 = v.reduce(ReduceKind::Sum, &[0]).unwrap().data();
    let mean12 = v.reduce(ReduceKind::Mean, &[1, 2]).unwrap().data();
    for j in 0..b * c {
        let s: f64 = (0..a).map(|i| x[i * b * c + j]).sum();
        assert!(close(sum0[j], s, 1e-12));
    }
    for i in 0..a {
        let m = x[i * b * c..(i + 1) * b * c].iter().sum::<f64>() / (b * c) as f64;
        assert!(close(mean12[i], m, 1e-12));
    }
}

#[test]
fn model_forward_matches_reference_for_every_flag_combination() {
    let mut r = rng(4);
    for (i, flags) in AblationFlags::grid().into_iter().enumerate() {
        for mode in [SpatialMode::SumNormalized, SpatialMode::ExpNormalized] {
            let model = Model::build(small_config(flags, mode, i as u64)).unwrap();
            for _ in 0..3 {
                let image = random_image(&mut r, &model.config);
                let g = Graph::new();
                let trace = model.forward(&g, &image, false).unwrap();
                let want = reference_forward(&model, &image);
                assert_all_close("A", &trace.a.data(), &want.a, 1e-10);
                assert_all_close("S", &trace.s.data(), &want.s, 1e-10);
                assert_all_close("T", &trace.t.data(), &want.t, 1e-10);
                assert_all_close("D", &trace.d.data(), &want.d, 1e-10);
                assert_all_close("logits", &trace.logits.data(), &want.logits, 1e-10);
            }
        }
    }
}

#[test]
fn bypass_head_is_a_plain_cnn_bit_for_bit() {
    let mut r = rng(5);
    let model = Model::build(small_config(AblationFlags::BASELINE, SpatialMode::SumNormalized, 3)).unwrap();
    for _ in 0..5 {
        let image = random_image(&mut r, &model.config);
        let g = Graph::new();
        let trace = model.forward(&g, &image, false).unwrap();
        let mut x = g.constant(image.clone());
        for k in &model.backbone {
            x = x.conv2d(g.constant(k.clone()), 1, 1).unwrap().relu().maxpool2d(2).unwrap();
        }
        let c = x.shape()[0];
        let mut h = attention::global_avg_pool(x).unwrap().reshape(&[1, c]).unwrap();
        for (i, layer) in model.head.iter().enumerate() {
            h = h.matmul(g.constant(layer.weight.clone())).unwrap().add(g.constant(layer.bias.clone())).unwrap();
            if i + 1 < model.head.len() {
                h = h.relu();
            }
        }
        assert_eq!(trace.logits.data(), h.data());
    }
}

/// `β_c` by central differences of `y^k` with respect to each feature value.
fn finite_difference_beta(model: &Model, a: &Tensor, k: usize) -> Vec<f64> {
    let eps = 1e-6;
    let score = |a: &Tensor| -> f64 {
        let g = Graph::new();
        let params = model.leaves(&g, false);
        let trace = model.forward_from_features(params, g.constant(a.clone()), false).unwrap();
        trace.logits.data()[k]
    };
    let [c, rows, cols] = a.shape().try_into().unwrap();
    let hw = rows * cols;
    let mut beta = vec![0.0; c];
    let mut work = a.clone();
    for i in 0..c * hw {
        let x = a.data()[i];
        work.data_mut()[i] = x + eps;
        let up = score(&work);
        work.data_mut()[i] = x - eps;
        let down = score(&work);
        work.data_mut()[i] = x;
        beta[i / hw] += (up - down) / (2.0 * eps) / hw as f64;
    }
    beta
}

#[test]
fn gradcam_weights_match_finite_differences_on_the_full_model() {
    let mut r = rng(6);
    for seed in 0..3 {
        let model = Model::build(small_config(AblationFlags::FULL, SpatialMode::SumNormalized, seed)).unwrap();
        let image = random_image(&mut r, &model.config);
        let g = Graph::new();
        let trace = model.forward(&g, &image, true).unwrap();
        let target = guidance::gradcam_weights(&trace).unwrap();
        let numeric = finite_difference_beta(&model, &trace.a.value(), target.class_index);
        let scale = numeric.iter().chain(&target.beta).fold(0.0_f64, |m, v| m.max(v.abs()));
        for (got, want) in target.beta.iter().zip(&numeric) {
            assert!((got - want).abs() <= 1e-4 * scale, "beta {got} vs {want}");
        }
    }
}

#[test]
fn gradcam_on_the_bypass_head_is_the_scaled_class_row() {
    let mut r = rng(7);
    let cfg = ModelConfig { head_hidden: vec![], ..small_config(AblationFlags::BASELINE, SpatialMode::SumNormalized, 1) };
    let model = Model::build(cfg).unwrap();
    let [c, rows, cols] = model.config.feature_shape();
    for _ in 0..5 {
        let image = random_image(&mut r, &model.config);
        let g = Graph::new();
        let trace = model.forward(&g, &image, true).unwrap();
        let target = guidance::gradcam_weights(&trace).unwrap();
        let w = &model.head[0].weight;
        let classes = w.shape()[1];
        for ch in 0..c {
            let want = w.data()[ch * classes + target.class_index] / (rows * cols) as f64;
            assert!((target.beta[ch] - want).abs() <= 1e-10);
        }
    }
}

#[test]
fn ggam_fixture_from_hand_derivation() {
    // ½(KL([.5,.5]‖[.8,.2]) + KL([.8,.2]‖[.5,.5])) = ½(0.2231436 + 0.1927448).
    let target = GuidanceTarget {
        beta: vec![0.0, 0.0],
        beta_squashed: vec![0.8, 0.2],
        beta_normalized: vec![0.8, 0.2],
        class_index: 0,
    };
    let g = Graph::new();
    let s = g.constant(Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap());
    let v = guidance::ggam_loss(s, &target).unwrap().item().unwrap();
    let hand = 0.5 * (0.5 * (0.5f64 / 0.8).ln() + 0.5 * (0.5f64 / 0.2).ln() + 0.8 * (0.8f64 / 0.5).ln() + 0.2 * (0.2f64 / 0.5).ln());
    assert!((v - 0.207944).abs() < 1e-5, "{v}");
    assert!((v - hand).abs() < 1e-9);
}

#[test]
fn squashed_target_normalizes_sigmoid_of_beta() {
    let beta = vec![-1.0, 0.0, 2.0];
    let t = GuidanceTarget::from_beta(beta.clone(), 0);
    let sq: Vec<f64> = beta.iter().map(|b| 1.0 / (1.0 + (-b).exp())).collect();
    let total: f64 = sq.iter().sum();
    for i in 0..3 {
        assert!(close(t.beta_squashed[i], sq[i], 1e-15));
        assert!(close(t.beta_normalized[i], sq[i] / total, 1e-15));
    }
}

#[test]
fn mask_overlap_matches_pixel_loop() {
    let mut r = rng(8);
    for _ in 0..20 {
        let n = 16;
        let bits: Vec<bool> = (0..n * n).map(|_| r.gen_bool(0.2)).collect();
        let mask = Mask { rows: n, cols: n, bits: bits.clone() };
        let raw = random(&mut r, 16, 0.0, 1.0);
        let total: f64 = raw.iter().sum();
        let t = Tensor::from_vec(&[4, 4], raw.iter().map(|v| v / total).collect()).unwrap();
        // Each pixel carries 1/16 of its 4×4 cell's attention.
        let mut want = 0.0;
        for row in 0..n {
            for col in 0..n {
                if bits[row * n + col] {
                    want += t.data()[(row / 4) * 4 + col / 4] / 16.0;
                }
            }
        }
        assert!(close(trainer::mask_overlap(&t, &mask).unwrap(), want, 1e-12));
    }
}

#[test]
fn uniform_map_scores_the_mask_area_fraction() {
    let spec = DatasetSpec { train_per_class: 2, test_per_class: 2, ..DatasetSpec::default() };
    let ds = data::generate(&spec, Exec::Sequential).unwrap();
    for s in &ds.test {
        let t = Tensor::full(&[8, 8], 1.0 / 64.0);
        let v = trainer::mask_overlap(&t, &s.part_mask).unwrap();
        assert!(close(v, s.part_mask.area_fraction(), 1e-12));
    }
}

#[test]
fn spatial_map_is_scale_invariant_and_sums_to_one() {
    let mut r = rng(9);
    for _ in 0..50 {
        let b = Tensor::from_vec(&[6, 3, 4], random(&mut r, 72, 0.0, 2.0)).unwrap();
        let factor = r.gen_range(0.01..100.0);
        let scaled = Tensor::from_vec(&[6, 3, 4], b.data().iter().map(|v| v * factor).collect()).unwrap();
        let g = Graph::new();
        let t1 = attention::spatial_map(g.constant(b), SpatialMode::SumNormalized).unwrap().data();
        let t2 = attention::spatial_map(g.constant(scaled), SpatialMode::SumNormalized).unwrap().data();
        assert!((t1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_all_close("T", &t1, &t2, 1e-9);
    }
}
