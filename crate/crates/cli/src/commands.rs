use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ggam_core::config::KvMap;
use ggam_core::data::{self, Dataset, Split};
use ggam_core::model::Model;
use ggam_core::tensor::Graph;
use ggam_core::{checkpoint, guidance, pnm, selftest, sha256_hex, trainer, Error, Result};

use crate::settings::Settings;
use crate::{Command, Common};

/// Files written under the output directory, with their digests.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, String)>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Outputs { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.files.push((name.to_string(), sha256_hex(bytes)));
        Ok(path)
    }

    /// Echoes the resolved config and writes the manifest last.
    fn finish(mut self, settings: &Settings, seed: &str) -> Result<()> {
        let config = settings.render();
        self.write("config.txt", config.as_bytes())?;
        let mut kv = KvMap::new();
        kv.set("config_sha256", sha256_hex(config.as_bytes()));
        kv.set("seed", seed);
        for (name, digest) in &self.files {
            kv.set(format!("file.{name}"), digest);
        }
        fs::write(self.dir.join("manifest.txt"), kv.render())?;
        println!("wrote {} files to {}", self.files.len() + 1, self.dir.display());
        Ok(())
    }
}

/// A path that does not exist is a usage error; other I/O failures are not.
fn name_flag(flag: &str, path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::Config(format!("{flag} {}: no such file", path.display()))
        }
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{flag} {}: {io}", path.display()))),
        other => other,
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    data::load(path).map_err(|e| name_flag("--data", path, e))
}

fn load_checkpoint(path: &Path) -> Result<Model> {
    checkpoint::load(path).map_err(|e| name_flag("--checkpoint", path, e))
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, seed, export } => {
            let mut flags = KvMap::new();
            if let Some(s) = seed {
                flags.set("data.seed", s);
            }
            gen_data(&common, &flags, export)
        }
        Command::Train { common, data, train } => train_cmd(&common, &train.to_kv(), &data),
        Command::Eval { common, data, checkpoint, split } => eval(&common, &data, &checkpoint, Split::parse(&split)?),
        Command::Heatmap { common, data, checkpoint, index, split } => {
            heatmap(&common, &data, &checkpoint, index, Split::parse(&split)?)
        }
        Command::Ablate { common, data, seeds, train } => {
            let mut flags = train.to_kv();
            if let Some(s) = seeds {
                flags.set("run.seeds", s);
            }
            ablate(&common, &flags, &data)
        }
        Command::SweepLambda { common, data, lambdas, seeds, train } => {
            let mut flags = train.to_kv();
            if let Some(s) = seeds {
                flags.set("run.seeds", s);
            }
            if let Some(l) = lambdas {
                flags.set("run.lambdas", l);
            }
            sweep(&common, &flags, &data)
        }
        Command::Selftest { seed } => run_selftest(seed),
    }
}

fn gen_data(common: &Common, flags: &KvMap, export: usize) -> Result<()> {
    let settings = Settings::resolve(common, flags)?;
    let ds = data::generate(&settings.data, settings.exec)?;
    let mut out = Outputs::create(&common.out)?;
    out.write("dataset.ggds", &data::to_bytes(&ds)?)?;
    for (i, s) in ds.train.iter().take(export).enumerate() {
        let &[_, rows, cols] = s.image.shape() else { unreachable!("samples are [3, rows, cols]") };
        let rgb = pnm::planar_to_rgb(s.image.data(), rows, cols);
        out.write(&format!("samples/train_{i:03}_class{}.ppm", s.label), &pnm::encode_ppm(cols, rows, &rgb)?)?;
    }
    println!(
        "dataset: {} train / {} test samples, {} classes, mask area fraction {:.4}",
        ds.train.len(),
        ds.test.len(),
        ds.spec.classes,
        ds.chance_localization(Split::Test)
    );
    out.finish(&settings, &settings.data.seed.to_string())
}

fn train_cmd(common: &Common, flags: &KvMap, data_path: &Path) -> Result<()> {
    let mut settings = Settings::resolve(common, flags)?;
    let ds = load_dataset(data_path)?;
    settings.fit_model_to(&ds.spec)?;
    let mut model = Model::build(settings.model.clone())?;
    let epochs = settings.train.epochs;
    let mut metrics = trainer::train_with(&mut model, &ds, &settings.train, settings.exec, |e| {
        println!(
            "epoch {}/{epochs} lr={:.5} ce={:.4} ggam={:.3e} train_acc={:.3} test_acc={:.3} localization={:.4}",
            e.epoch + 1,
            e.lr,
            e.ce,
            e.ggam,
            e.train_acc,
            e.test_acc,
            e.localization
        );
    })?;
    let mut out = Outputs::create(&common.out)?;
    out.write("model.ggck", &checkpoint::to_bytes(&model)?)?;
    metrics.checkpoint = Some("model.ggck".into());
    out.write("metrics.csv", metrics.to_csv().as_bytes())?;
    let last = metrics.last();
    println!(
        "final test accuracy {} localization {} ({:.1}s)",
        last.test_acc, last.localization, metrics.wall_clock_secs
    );
    out.finish(&settings, &settings.train.seed.to_string())
}

fn eval(common: &Common, data_path: &Path, ckpt: &Path, split: Split) -> Result<()> {
    let settings = Settings::resolve(common, &KvMap::new())?;
    let ds = load_dataset(data_path)?;
    let model = load_checkpoint(ckpt)?;
    trainer::check_compatible(&model, &ds)?;
    let a = trainer::assess(&model, ds.split(split), settings.exec)?;
    println!("{} accuracy {} localization {}", split.as_str(), a.accuracy, a.localization);
    let mut out = Outputs::create(&common.out)?;
    let csv = format!("split,accuracy,localization\n{},{},{}\n", split.as_str(), a.accuracy, a.localization);
    out.write("eval.csv", csv.as_bytes())?;
    out.finish(&settings, &model.config.seed.to_string())
}

fn heatmap(common: &Common, data_path: &Path, ckpt: &Path, index: usize, split: Split) -> Result<()> {
    let settings = Settings::resolve(common, &KvMap::new())?;
    let ds = load_dataset(data_path)?;
    let model = load_checkpoint(ckpt)?;
    trainer::check_compatible(&model, &ds)?;
    let samples = ds.split(split);
    let sample = samples.get(index).ok_or(Error::Index { what: "sample (--index)", index, len: samples.len() })?;
    let &[_, rows, cols] = sample.image.shape() else { unreachable!("samples are [3, rows, cols]") };

    let graph = Graph::new();
    let trace = model.forward(&graph, &sample.image, true)?;
    let target = guidance::gradcam_weights(&trace)?;
    let map = guidance::heatmap(&trace.a.value(), &target, rows, cols)?;
    let gray: Vec<u8> = map.values.iter().map(|&v| pnm::to_byte(v)).collect();

    let rgb = pnm::planar_to_rgb(sample.image.data(), rows, cols);
    let mut composite = Vec::with_capacity(6 * rows * cols);
    for r in 0..rows {
        composite.extend_from_slice(&rgb[3 * r * cols..3 * (r + 1) * cols]);
        for &g in &gray[r * cols..(r + 1) * cols] {
            composite.extend_from_slice(&[g, g, g]);
        }
    }

    let stem = format!("{}_{index:04}", split.as_str());
    let mut out = Outputs::create(&common.out)?;
    out.write(&format!("heatmap_{stem}.pgm"), &pnm::encode_pgm(cols, rows, &gray)?)?;
    out.write(&format!("composite_{stem}.ppm"), &pnm::encode_ppm(2 * cols, rows, &composite)?)?;
    println!("label {} predicted {}", sample.label, target.class_index);
    out.finish(&settings, &model.config.seed.to_string())
}

fn runs_csv<'a>(rows: impl Iterator<Item = (String, &'a [trainer::RunOutcome])>, key: &str) -> String {
    let mut out = format!("{key},seed,accuracy,localization\n");
    for (label, runs) in rows {
        for r in runs {
            writeln!(out, "{label},{},{},{}", r.seed, r.accuracy, r.localization).expect("writing to a String");
        }
    }
    out
}

fn ablate(common: &Common, flags: &KvMap, data_path: &Path) -> Result<()> {
    let mut settings = Settings::resolve(common, flags)?;
    let ds = load_dataset(data_path)?;
    settings.fit_model_to(&ds.spec)?;
    let start = Instant::now();
    let rows = trainer::ablation_grid(&settings.model, &ds, &settings.train, &settings.seeds, settings.exec)?;
    let mut out = Outputs::create(&common.out)?;
    let grid = trainer::grid_csv(&rows);
    print!("{grid}");
    out.write("ablation.csv", grid.as_bytes())?;
    let labelled = rows.iter().map(|r| {
        let f = r.flags;
        (
            format!("{}{}{}", u8::from(f.channel_attention), u8::from(f.spatial_attention), u8::from(f.ggam)),
            r.runs.as_slice(),
        )
    });
    out.write("runs.csv", runs_csv(labelled, "flags").as_bytes())?;
    println!("{:.1}s", start.elapsed().as_secs_f64());
    out.finish(&settings, &ggam_core::config::join_list(&settings.seeds))
}

fn sweep(common: &Common, flags: &KvMap, data_path: &Path) -> Result<()> {
    let mut settings = Settings::resolve(common, flags)?;
    let ds = load_dataset(data_path)?;
    settings.fit_model_to(&ds.spec)?;
    let start = Instant::now();
    let rows =
        trainer::lambda_sweep(&settings.model, &ds, &settings.train, &settings.lambdas, &settings.seeds, settings.exec)?;
    let mut out = Outputs::create(&common.out)?;
    let csv = trainer::sweep_csv(&rows);
    print!("{csv}");
    out.write("sweep.csv", csv.as_bytes())?;
    out.write("runs.csv", runs_csv(rows.iter().map(|r| (r.lambda.to_string(), r.runs.as_slice())), "lambda").as_bytes())?;
    println!("{:.1}s", start.elapsed().as_secs_f64());
    out.finish(&settings, &ggam_core::config::join_list(&settings.seeds))
}

fn run_selftest(seed: u64) -> Result<()> {
    let checks = selftest::run(seed)?;
    for c in &checks {
        println!("{} {} ({})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} self-test checks failed")));
    }
    Ok(())
}
