//! Optimization loop, evaluation, localization metric, ablation grid and
//! λ sweep.
//!
//! One graph is recorded per sample. Per-sample gradients come back in
//! sample order and are summed sequentially, so a run is bit-identical
//! under either execution policy.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::time::Instant;

use crate::attention;
use crate::config::KvMap;
use crate::data::{self, Dataset, Sample};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::guidance;
use crate::model::{AblationFlags, Model, ModelConfig, ParamGroup};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base rate η₀ of the head (attention and classifier layers).
    pub lr: f64,
    /// Backbone rate as a fraction of `lr`.
    pub backbone_lr_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Guidance loss multiplier λ.
    pub lambda: f64,
    /// Drives batch shuffling.
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            epochs: 60,
            batch_size: 16,
            lr: 0.1,
            backbone_lr_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda: 1.0,
            seed: 0,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.backbone_lr_factor",
    "train.momentum",
    "train.weight_decay",
    "train.lambda",
    "train.seed",
];

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        for (name, v) in [
            ("learning rate", self.lr),
            ("backbone lr factor", self.backbone_lr_factor),
            ("weight decay", self.weight_decay),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }

    pub fn rate_for(&self, group: ParamGroup, head_rate: f64) -> f64 {
        match group {
            ParamGroup::Backbone => head_rate * self.backbone_lr_factor,
            ParamGroup::Head => head_rate,
        }
    }

    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.set("train.epochs", self.epochs);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.lr", self.lr);
        kv.set("train.backbone_lr_factor", self.backbone_lr_factor);
        kv.set("train.momentum", self.momentum);
        kv.set("train.weight_decay", self.weight_decay);
        kv.set("train.lambda", self.lambda);
        kv.set("train.seed", self.seed);
    }

    pub fn from_kv(kv: &KvMap, base: &Hyperparams) -> Result<Self> {
        let h = Hyperparams {
            epochs: kv.get_or("train.epochs", base.epochs)?,
            batch_size: kv.get_or("train.batch_size", base.batch_size)?,
            lr: kv.get_or("train.lr", base.lr)?,
            backbone_lr_factor: kv.get_or("train.backbone_lr_factor", base.backbone_lr_factor)?,
            momentum: kv.get_or("train.momentum", base.momentum)?,
            weight_decay: kv.get_or("train.weight_decay", base.weight_decay)?,
            lambda: kv.get_or("train.lambda", base.lambda)?,
            seed: kv.get_or("train.seed", base.seed)?,
        };
        h.validate()?;
        Ok(h)
    }
}

/// `η(t) = ½·η₀·(1 + cos(π·t/T))`.
pub fn cosine_lr(t: usize, total: usize, base: f64) -> Result<f64> {
    if t > total || total == 0 {
        return Err(Error::contract(format!("cosine schedule at epoch {t} of {total}")));
    }
    if t == total {
        return Ok(0.0);
    }
    Ok(0.5 * base * (1.0 + (PI * t as f64 / total as f64).cos()))
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(params: &[&Tensor]) -> Self {
        SgdState { velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect() }
    }
}

/// `v ← m·v + g + wd·θ`, `θ ← θ − η·v`, with a rate per tensor.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut SgdState,
    rates: &[f64],
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.velocity.len() != n || rates.len() != n {
        return Err(Error::contract(format!(
            "sgd step over {n} parameters with {} gradients, {} velocities, {} rates",
            grads.len(),
            state.velocity.len(),
            rates.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if grads[i].len() != p.numel() || state.velocity[i].len() != p.numel() {
            return Err(Error::contract(format!("parameter {i}: gradient or velocity length mismatch")));
        }
    }
    for ((p, g), (v, &rate)) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut().zip(rates)) {
        for ((theta, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *theta;
            *theta -= rate * *vi;
        }
    }
    Ok(())
}

/// One sample's contribution to a batch.
#[derive(Debug, Clone)]
struct SampleStep {
    grads: Vec<Vec<f64>>,
    ce: f64,
    ggam: f64,
    correct: bool,
}

fn sample_step(model: &Model, sample: &Sample, lambda: f64) -> Result<SampleStep> {
    let graph = Graph::new();
    let trace = model.forward(&graph, &sample.image, true)?;
    // λ = 0 behaves exactly like guidance off, including the logged ggam column.
    let guided = model.config.flags.ggam && lambda > 0.0;
    let target = if guided { Some(guidance::gradcam_weights(&trace)?) } else { None };
    let ce = guidance::cross_entropy(trace.logits, sample.label)?;
    let (loss, ggam) = match &target {
        Some(t) => {
            let g = guidance::ggam_loss(trace.s, t)?;
            let value = g.item()?;
            (ce.add(g.scale(lambda))?, value)
        }
        None => (ce, 0.0),
    };
    loss.backward()?;
    let grads = trace
        .params
        .iter()
        .map(|p| p.grad().map_or_else(|| vec![0.0; p.numel()], Tensor::into_data))
        .collect();
    Ok(SampleStep { grads, ce: ce.item()?, ggam, correct: trace.predicted == sample.label })
}

/// Mean-reduced loss terms and parameter gradients of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub loss: guidance::LossBreakdown,
    pub grads: Vec<Vec<f64>>,
    pub correct: usize,
}

pub fn batch_gradients(model: &Model, samples: &[&Sample], lambda: f64, exec: Exec) -> Result<BatchResult> {
    if samples.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let steps = exec.map(samples, |s| sample_step(model, s, lambda));
    let n = samples.len() as f64;
    let mut grads: Vec<Vec<f64>> = model.parameters().iter().map(|p| vec![0.0; p.numel()]).collect();
    let (mut ce, mut ggam, mut correct) = (0.0, 0.0, 0);
    for step in steps {
        let step = step?;
        for (acc, g) in grads.iter_mut().zip(&step.grads) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        ce += step.ce;
        ggam += step.ggam;
        correct += usize::from(step.correct);
    }
    grads.iter_mut().flatten().for_each(|g| *g /= n);
    let loss = guidance::total_loss(ce / n, ggam / n, lambda)?;
    Ok(BatchResult { loss, grads, correct })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub ggam: f64,
    pub total: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub localization: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub wall_clock_secs: f64,
    /// Where the trained parameters were saved, when they were.
    pub checkpoint: Option<String>,
}

pub const CSV_HEADER: &str = "epoch,lr,ce,ggam,total,train_acc,test_acc,localization";

impl RunMetrics {
    pub fn last(&self) -> &EpochMetrics {
        self.epochs.last().expect("a run records at least one epoch")
    }

    /// Per-epoch table. Wall-clock time is left out so reruns compare equal.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                e.epoch, e.lr, e.ce, e.ggam, e.total, e.train_acc, e.test_acc, e.localization
            )
            .expect("writing to a String");
        }
        out
    }
}

pub fn train(model: &mut Model, dataset: &Dataset, h: &Hyperparams, exec: Exec) -> Result<RunMetrics> {
    train_with(model, dataset, h, exec, |_| {})
}

/// [`train`], calling `on_epoch` after each epoch's metrics are recorded.
pub fn train_with(
    model: &mut Model,
    dataset: &Dataset,
    h: &Hyperparams,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<RunMetrics> {
    h.validate()?;
    model.validate()?;
    check_compatible(model, dataset)?;
    let start = Instant::now();
    let groups = model.parameter_groups();
    let mut state = SgdState::new(&model.parameters());
    let mut epochs = Vec::with_capacity(h.epochs);
    for epoch in 0..h.epochs {
        let lr = cosine_lr(epoch, h.epochs, h.lr)?;
        let rates: Vec<f64> = groups.iter().map(|&g| h.rate_for(g, lr)).collect();
        let order = data::batches(dataset.train.len(), h.batch_size, data::epoch_seed(h.seed, epoch));
        let (mut ce, mut ggam, mut total, mut correct) = (0.0, 0.0, 0.0, 0);
        for (b, idx) in order.iter().enumerate() {
            let samples: Vec<&Sample> = idx.iter().map(|&i| &dataset.train[i]).collect();
            let r = batch_gradients(model, &samples, h.lambda, exec)?;
            for (term, value) in [("ce", r.loss.ce), ("ggam", r.loss.ggam), ("total", r.loss.total)] {
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, batch: b, term, value });
                }
            }
            if let Some(i) = r.grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Numeric(format!(
                    "epoch {epoch} batch {b}: non-finite gradient for {}",
                    model.parameter_names()[i]
                )));
            }
            let m = samples.len() as f64;
            ce += r.loss.ce * m;
            ggam += r.loss.ggam * m;
            total += r.loss.total * m;
            correct += r.correct;
            sgd_step(&mut model.parameters_mut(), &r.grads, &mut state, &rates, h.momentum, h.weight_decay)?;
        }
        let n = dataset.train.len() as f64;
        let test = assess(model, &dataset.test, exec)?;
        let metrics = EpochMetrics {
            epoch,
            lr,
            ce: ce / n,
            ggam: ggam / n,
            total: total / n,
            train_acc: correct as f64 / n,
            test_acc: test.accuracy,
            localization: test.localization,
        };
        on_epoch(&metrics);
        epochs.push(metrics);
    }
    Ok(RunMetrics { epochs, wall_clock_secs: start.elapsed().as_secs_f64(), checkpoint: None })
}

/// Image geometry and class count of `model` must match the dataset.
pub fn check_compatible(model: &Model, dataset: &Dataset) -> Result<()> {
    let spec = &dataset.spec;
    let want = [data::DatasetSpec::CHANNELS, spec.size, spec.size];
    if model.config.image_shape() != want {
        return Err(Error::Config(format!(
            "model expects images {:?} but the dataset holds {want:?}",
            model.config.image_shape()
        )));
    }
    if model.config.classes != spec.classes {
        return Err(Error::Config(format!(
            "model has {} classes but the dataset has {}",
            model.config.classes, spec.classes
        )));
    }
    Ok(())
}

/// Accuracy and localization over a split, from one inference pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assessment {
    pub accuracy: f64,
    pub localization: f64,
}

pub fn assess(model: &Model, samples: &[Sample], exec: Exec) -> Result<Assessment> {
    if samples.is_empty() {
        return Err(Error::contract("cannot assess an empty split"));
    }
    let per = exec.map(samples, |s| -> Result<(bool, f64)> {
        let graph = Graph::new();
        let trace = model.forward(&graph, &s.image, false)?;
        let t = attention_map(model, &trace)?;
        Ok((trace.predicted == s.label, mask_overlap(&t, &s.part_mask)?))
    });
    let (mut correct, mut loc) = (0usize, 0.0);
    for p in per {
        let (c, l) = p?;
        correct += usize::from(c);
        loc += l;
    }
    let n = samples.len() as f64;
    Ok(Assessment { accuracy: correct as f64 / n, localization: loc / n })
}

pub fn evaluate(model: &Model, samples: &[Sample], exec: Exec) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let hits = exec.map(samples, |s| model.predict(&s.image).map(|k| k == s.label));
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / samples.len() as f64)
}

pub fn localization_score(model: &Model, samples: &[Sample], exec: Exec) -> Result<f64> {
    Ok(assess(model, samples, exec)?.localization)
}

/// The spatial map whose mass is scored: `T` itself, or when spatial
/// attention is off the map the module would have produced from `B`.
fn attention_map(model: &Model, trace: &crate::model::ForwardTrace<'_>) -> Result<Tensor> {
    if model.config.flags.spatial_attention {
        Ok(trace.t.value())
    } else {
        Ok(attention::spatial_map(trace.b, model.config.spatial_mode)?.value())
    }
}

/// `Σ T·mask` with the mask area-averaged onto `T`'s grid.
pub fn mask_overlap(t: &Tensor, mask: &data::Mask) -> Result<f64> {
    let &[rows, cols] = t.shape() else {
        return Err(Error::shape(format!("spatial map must be 2-D, got {:?}", t.shape())));
    };
    let m = mask.downscale(rows, cols)?;
    Ok(t.data().iter().zip(&m).map(|(a, b)| a * b).sum())
}

/// Median, averaging the middle pair for even counts.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Final-epoch outcome of one training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOutcome {
    pub seed: u64,
    pub accuracy: f64,
    pub localization: f64,
}

/// Builds a model from `config` with `seed`, trains it, and reports the
/// final test metrics.
pub fn run_once(config: &ModelConfig, dataset: &Dataset, h: &Hyperparams, seed: u64, exec: Exec) -> Result<RunOutcome> {
    let mut model = Model::build(ModelConfig { seed, ..config.clone() })?;
    let metrics = train(&mut model, dataset, &Hyperparams { seed, ..h.clone() }, exec)?;
    let last = metrics.last();
    Ok(RunOutcome { seed, accuracy: last.test_acc, localization: last.localization })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub flags: AblationFlags,
    pub accuracy: f64,
    pub localization: f64,
    pub runs: Vec<RunOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub accuracy: f64,
    pub localization: f64,
    pub runs: Vec<RunOutcome>,
}

fn run_seeds(config: &ModelConfig, dataset: &Dataset, h: &Hyperparams, seeds: &[u64], exec: Exec) -> Result<Vec<RunOutcome>> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    exec.map(seeds, |&s| run_once(config, dataset, h, s, exec)).into_iter().collect()
}

/// All eight flag combinations, medians over `seeds`.
pub fn ablation_grid(
    config: &ModelConfig,
    dataset: &Dataset,
    h: &Hyperparams,
    seeds: &[u64],
    exec: Exec,
) -> Result<Vec<GridRow>> {
    AblationFlags::grid()
        .iter()
        .map(|&flags| {
            let runs = run_seeds(&ModelConfig { flags, ..config.clone() }, dataset, h, seeds, exec)?;
            Ok(summarize_grid(flags, runs))
        })
        .collect()
}

fn summarize_grid(flags: AblationFlags, runs: Vec<RunOutcome>) -> GridRow {
    let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let loc: Vec<f64> = runs.iter().map(|r| r.localization).collect();
    GridRow { flags, accuracy: median(&acc), localization: median(&loc), runs }
}

pub const GRID_CSV_HEADER: &str = "channel_attention,spatial_attention,ggam,accuracy,localization";

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = format!("{GRID_CSV_HEADER}\n");
    for r in rows {
        let f = r.flags;
        writeln!(
            out,
            "{},{},{},{},{}",
            u8::from(f.channel_attention),
            u8::from(f.spatial_attention),
            u8::from(f.ggam),
            r.accuracy,
            r.localization
        )
        .expect("writing to a String");
    }
    out
}

/// One training run per λ (medians over `seeds`), with the guidance loss on.
pub fn lambda_sweep(
    config: &ModelConfig,
    dataset: &Dataset,
    h: &Hyperparams,
    lambdas: &[f64],
    seeds: &[u64],
    exec: Exec,
) -> Result<Vec<SweepRow>> {
    if let Some(&bad) = lambdas.iter().find(|&&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(Error::Config(format!("lambda values must be nonnegative, got {bad}")));
    }
    let config = ModelConfig { flags: AblationFlags { ggam: true, ..config.flags }, ..config.clone() };
    lambdas
        .iter()
        .map(|&lambda| {
            let runs = run_seeds(&config, dataset, &Hyperparams { lambda, ..h.clone() }, seeds, exec)?;
            let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
            let loc: Vec<f64> = runs.iter().map(|r| r.localization).collect();
            Ok(SweepRow { lambda, accuracy: median(&acc), localization: median(&loc), runs })
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "lambda,accuracy,localization";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.lambda, r.accuracy, r.localization).expect("writing to a String");
    }
    out
}

/// `1, 2, …, 9`.
pub fn default_lambdas() -> Vec<f64> {
    (1..=9).map(f64::from).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetSpec, Mask};

    #[test]
    fn cosine_endpoints_and_errors() {
        assert_eq!(cosine_lr(0, 10, 0.1).unwrap(), 0.1);
        assert!((cosine_lr(5, 10, 0.1).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(cosine_lr(10, 10, 0.1).unwrap(), 0.0);
        assert!(cosine_lr(11, 10, 0.1).is_err());
        let rates: Vec<f64> = (0..=60).map(|t| cosine_lr(t, 60, 0.3).unwrap()).collect();
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
    }

    fn one(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn sgd_vanilla_and_fixed_point() {
        let mut p = one(1.0);
        let mut st = SgdState::new(&[&p]);
        sgd_step(&mut [&mut p], &[vec![1.0]], &mut st, &[0.1], 0.0, 0.0).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);

        let mut q = one(3.0);
        let mut st = SgdState::new(&[&q]);
        sgd_step(&mut [&mut q], &[vec![0.0]], &mut st, &[0.1], 0.9, 0.0).unwrap();
        assert_eq!(q.data()[0], 3.0);
    }

    #[test]
    fn sgd_momentum_matches_unrolled_recurrence() {
        let (lr, m, wd, g) = (0.1, 0.9, 0.01, 0.5);
        let mut p = one(2.0);
        let mut st = SgdState::new(&[&p]);
        for _ in 0..2 {
            sgd_step(&mut [&mut p], &[vec![g]], &mut st, &[lr], m, wd).unwrap();
        }
        let v1 = g + wd * 2.0;
        let t1 = 2.0 - lr * v1;
        let v2 = m * v1 + g + wd * t1;
        let t2 = t1 - lr * v2;
        assert!((p.data()[0] - t2).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_mismatch() {
        let mut p = one(1.0);
        let mut st = SgdState::new(&[&p]);
        assert!(sgd_step(&mut [&mut p], &[vec![1.0, 2.0]], &mut st, &[0.1], 0.0, 0.0).is_err());
        assert!(sgd_step(&mut [&mut p], &[], &mut st, &[0.1], 0.0, 0.0).is_err());
    }

    #[test]
    fn overlap_rules() {
        let mut bits = vec![false; 16];
        bits[..2].fill(true);
        bits[4..6].fill(true);
        let mask = Mask { rows: 4, cols: 4, bits };
        let uniform = Tensor::full(&[2, 2], 0.25);
        assert!((mask_overlap(&uniform, &mask).unwrap() - mask.area_fraction()).abs() < 1e-15);
        let inside = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(mask_overlap(&inside, &mask).unwrap(), 1.0);
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn hyperparams_validation_and_kv() {
        assert!(Hyperparams { momentum: 1.0, ..Hyperparams::default() }.validate().is_err());
        assert!(Hyperparams { lambda: -1.0, ..Hyperparams::default() }.validate().is_err());
        assert!(Hyperparams { epochs: 0, ..Hyperparams::default() }.validate().is_err());
        let h = Hyperparams { lambda: 2.5, seed: 7, ..Hyperparams::default() };
        let mut kv = KvMap::new();
        h.to_kv(&mut kv);
        assert_eq!(Hyperparams::from_kv(&kv, &Hyperparams::default()).unwrap(), h);
    }

    fn tiny() -> (ModelConfig, Dataset) {
        let spec = DatasetSpec {
            classes: 2,
            train_per_class: 4,
            test_per_class: 2,
            size: 16,
            body_radii: [5, 6],
            patch_size: 4,
            cell_size: 2,
            clutter: 1,
            ..DatasetSpec::default()
        };
        let ds = data::generate(&spec, Exec::default()).unwrap();
        let cfg = ModelConfig {
            input_rows: 16,
            input_cols: 16,
            backbone_channels: vec![4, 8],
            reduction: 2,
            classes: 2,
            ..ModelConfig::default()
        };
        (cfg, ds)
    }

    #[test]
    fn smoke_run_is_finite_and_deterministic() {
        let (cfg, ds) = tiny();
        let h = Hyperparams { epochs: 2, batch_size: 4, ..Hyperparams::default() };
        let mut a = Model::build(cfg.clone()).unwrap();
        let mut b = Model::build(cfg).unwrap();
        let ra = train(&mut a, &ds, &h, Exec::Sequential).unwrap();
        let rb = train(&mut b, &ds, &h, Exec::Parallel).unwrap();
        assert_eq!(ra.epochs.len(), 2);
        assert!(ra.epochs.iter().all(|e| e.total.is_finite() && (0.0..=1.0).contains(&e.test_acc)));
        assert_eq!(ra.to_csv(), rb.to_csv());
        assert_eq!(a, b);
    }

    #[test]
    fn lambda_zero_matches_guidance_off() {
        let (cfg, ds) = tiny();
        let h = Hyperparams { epochs: 2, batch_size: 4, lambda: 0.0, ..Hyperparams::default() };
        let mut on = Model::build(cfg.clone()).unwrap();
        let mut off = Model::build(ModelConfig { flags: AblationFlags { ggam: false, ..cfg.flags }, ..cfg }).unwrap();
        let a = train(&mut on, &ds, &h, Exec::default()).unwrap();
        let b = train(&mut off, &ds, &h, Exec::default()).unwrap();
        assert_eq!(on.parameters(), off.parameters());
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn lambda_does_not_change_first_batch_ce() {
        let (cfg, ds) = tiny();
        let model = Model::build(cfg).unwrap();
        let batch: Vec<&Sample> = ds.train.iter().take(4).collect();
        let one = batch_gradients(&model, &batch, 1.0, Exec::default()).unwrap();
        let two = batch_gradients(&model, &batch, 2.0, Exec::default()).unwrap();
        assert_eq!(one.loss.ce, two.loss.ce);
        assert_eq!(one.loss.ggam, two.loss.ggam);
        assert!(two.loss.total >= one.loss.total);
    }

    #[test]
    fn evaluate_and_empty_split() {
        let (cfg, ds) = tiny();
        let model = Model::build(cfg).unwrap();
        let acc = evaluate(&model, &ds.test, Exec::default()).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(acc, assess(&model, &ds.test, Exec::default()).unwrap().accuracy);
        assert!(evaluate(&model, &[], Exec::default()).is_err());
    }

    #[test]
    fn incompatible_model_is_rejected() {
        let (cfg, ds) = tiny();
        let mut model = Model::build(ModelConfig { classes: 3, ..cfg }).unwrap();
        assert!(matches!(train(&mut model, &ds, &Hyperparams::default(), Exec::default()), Err(Error::Config(_))));
    }
}
