//! Resolved run configuration: built-in defaults, then the config file,
//! then `--set` pairs, then dedicated flags.

use std::fs;

use ggam_core::config::KvMap;
use ggam_core::data::{DatasetSpec, DATA_KEYS};
use ggam_core::exec::Exec;
use ggam_core::model::{ModelConfig, MODEL_KEYS};
use ggam_core::trainer::{self, Hyperparams, TRAIN_KEYS};
use ggam_core::{Error, Result};

use crate::{Common, TrainFlags};

pub const RUN_KEYS: &[&str] = &["run.seeds", "run.lambdas"];

#[derive(Debug, Clone)]
pub struct Settings {
    /// Keys the user supplied, by any route.
    pub explicit: KvMap,
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub train: Hyperparams,
    pub seeds: Vec<u64>,
    pub lambdas: Vec<f64>,
    pub exec: Exec,
}

fn known() -> Vec<&'static str> {
    DATA_KEYS.iter().chain(MODEL_KEYS).chain(TRAIN_KEYS).chain(RUN_KEYS).copied().collect()
}

fn parse_list<T: std::str::FromStr>(key: &str, text: &str) -> Result<Vec<T>> {
    let items = text
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("{key}: bad list item {p:?}"))))
        .collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    Ok(items)
}

impl Settings {
    /// `flags` are the subcommand's dedicated options, already as keys.
    pub fn resolve(common: &Common, flags: &KvMap) -> Result<Self> {
        let mut explicit = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("--config {}: {e}", path.display())))?;
                KvMap::parse(&text)?
            }
            None => KvMap::new(),
        };
        for pair in &common.set {
            let Some((k, v)) = pair.split_once('=') else {
                return Err(Error::Config(format!("--set expects KEY=VALUE, got {pair:?}")));
            };
            explicit.set(k.trim(), v.trim());
        }
        explicit.overlay(flags);
        explicit.check_known(&known())?;

        let seeds = match explicit.get("run.seeds") {
            Some(s) => parse_list("run.seeds", s)?,
            None => vec![0, 1, 2],
        };
        let lambdas = match explicit.get("run.lambdas") {
            Some(s) => parse_list("run.lambdas", s)?,
            None => trainer::default_lambdas(),
        };
        Ok(Settings {
            data: DatasetSpec::from_kv(&explicit, &DatasetSpec::default())?,
            model: ModelConfig::from_kv(&explicit, &ModelConfig::default())?,
            train: Hyperparams::from_kv(&explicit, &Hyperparams::default())?,
            seeds,
            lambdas,
            exec: if common.sequential { Exec::Sequential } else { Exec::default() },
            explicit,
        })
    }

    /// Takes image geometry and class count from the dataset unless the
    /// user pinned them, in which case they must agree.
    pub fn fit_model_to(&mut self, spec: &DatasetSpec) -> Result<()> {
        let derived = [
            ("model.input_channels", DatasetSpec::CHANNELS),
            ("model.input_rows", spec.size),
            ("model.input_cols", spec.size),
            ("model.classes", spec.classes),
        ];
        for (key, value) in derived {
            if let Some(v) = self.explicit.get(key) {
                if v.parse::<usize>().ok() != Some(value) {
                    return Err(Error::Config(format!("{key}={v} disagrees with the dataset ({value})")));
                }
            }
        }
        self.model.input_channels = DatasetSpec::CHANNELS;
        self.model.input_rows = spec.size;
        self.model.input_cols = spec.size;
        self.model.classes = spec.classes;
        self.model.validate()
    }

    /// Every resolved value as `key=value` text.
    pub fn render(&self) -> String {
        let mut kv = KvMap::new();
        self.data.to_kv(&mut kv);
        self.model.to_kv(&mut kv);
        self.train.to_kv(&mut kv);
        kv.set("run.seeds", ggam_core::config::join_list(&self.seeds));
        kv.set("run.lambdas", ggam_core::config::join_list(&self.lambdas));
        kv.render()
    }
}

impl TrainFlags {
    /// `--seed` drives both model initialization and batch order.
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        if let Some(s) = self.seed {
            kv.set("train.seed", s);
            kv.set("model.seed", s);
        }
        if let Some(e) = self.epochs {
            kv.set("train.epochs", e);
        }
        if let Some(l) = self.lambda {
            kv.set("train.lambda", l);
        }
        kv
    }
}
