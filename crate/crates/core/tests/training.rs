use ggam_core::data::{self, DatasetSpec};
use ggam_core::exec::Exec;
use ggam_core::model::{AblationFlags, Model, ModelConfig};
use ggam_core::tensor::Tensor;
use ggam_core::trainer::{self, Hyperparams, SgdState};

fn tiny_spec() -> DatasetSpec {
    DatasetSpec { classes: 4, train_per_class: 4, test_per_class: 2, ..DatasetSpec::default() }
}

fn tiny_model(flags: AblationFlags, seed: u64) -> ModelConfig {
    ModelConfig { backbone_channels: vec![4, 8, 8], reduction: 2, classes: 4, flags, seed, ..ModelConfig::default() }
}

#[test]
fn sgd_matches_hand_unrolled_recurrence() {
    let (lr, m, wd, g) = (0.1, 0.9, 1e-4, 0.5);
    let mut p = Tensor::from_vec(&[1], vec![2.0]).unwrap();
    let mut state = SgdState::new(&[&p]);
    let (mut theta, mut v) = (2.0_f64, 0.0_f64);
    for _ in 0..2 {
        trainer::sgd_step(&mut [&mut p], &[vec![g]], &mut state, &[lr], m, wd).unwrap();
        v = m * v + g + wd * theta;
        theta -= lr * v;
    }
    assert!((p.data()[0] - theta).abs() < 1e-12);
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(trainer::cosine_lr(0, 10, 0.1).unwrap(), 0.1);
    assert!((trainer::cosine_lr(5, 10, 0.1).unwrap() - 0.05).abs() < 1e-15);
    assert_eq!(trainer::cosine_lr(10, 10, 0.1).unwrap(), 0.0);
}

#[test]
fn untrained_models_sit_at_chance() {
    let spec = DatasetSpec { train_per_class: 1, test_per_class: 16, ..DatasetSpec::default() };
    let ds = data::generate(&spec, Exec::default()).unwrap();
    let seeds: Vec<u64> = (0..6).collect();
    let mean = seeds
        .iter()
        .map(|&seed| {
            let model = Model::build(ModelConfig { seed, ..ModelConfig::default() }).unwrap();
            trainer::evaluate(&model, &ds.test, Exec::default()).unwrap()
        })
        .sum::<f64>()
        / seeds.len() as f64;
    let chance = 1.0 / spec.classes as f64;
    assert!((mean - chance).abs() < 0.06, "mean untrained accuracy {mean}");
}

#[test]
fn one_epoch_smoke_run_is_finite_and_policy_independent() {
    let ds = data::generate(&tiny_spec(), Exec::default()).unwrap();
    let h = Hyperparams { epochs: 1, batch_size: 8, ..Hyperparams::default() };
    let mut runs = Vec::new();
    for exec in [Exec::Sequential, Exec::Parallel] {
        let mut model = Model::build(tiny_model(AblationFlags::FULL, 1)).unwrap();
        let metrics = trainer::train(&mut model, &ds, &h, exec).unwrap();
        let last = metrics.last();
        assert!(last.total.is_finite() && last.ce.is_finite());
        runs.push((model, metrics.to_csv()));
    }
    assert_eq!(runs[0].0, runs[1].0);
    assert_eq!(runs[0].1, runs[1].1);
}

#[test]
fn zero_lambda_equals_guidance_off() {
    let ds = data::generate(&tiny_spec(), Exec::default()).unwrap();
    let h = Hyperparams { epochs: 5, batch_size: 8, lambda: 0.0, ..Hyperparams::default() };
    let flags_on = AblationFlags::FULL;
    let flags_off = AblationFlags { ggam: false, ..flags_on };
    let mut a = Model::build(tiny_model(flags_on, 2)).unwrap();
    let mut b = Model::build(tiny_model(flags_off, 2)).unwrap();
    let ma = trainer::train(&mut a, &ds, &h, Exec::default()).unwrap();
    let mb = trainer::train(&mut b, &ds, &h, Exec::default()).unwrap();
    assert_eq!(a.parameters(), b.parameters());
    assert_eq!(ma.to_csv(), mb.to_csv());
}
