//! Run configuration, experiment execution, result bundles and plot data.
//!
//! A run writes `<out>/<name>/` containing `manifest.txt`, `rounds.csv`,
//! `fairness.csv` and `summary.csv` (plus `mi_series.csv` for Gaussian
//! calibration runs). Every file is written to a temporary sibling and
//! renamed into place.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::calibration::{calibrate_mi, CalibrationConfig};
use crate::datagen::{
    default_attributes, load_cifar10, partition_iid_indices, partition_label_skew_indices, synthetic_blobs,
    AttributeMap, LabeledDataset,
};
use crate::engine::{FederatedData, Simulation, SimulationConfig, StrategyConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::fairness::{ClientRecord, FairnessReport, RoundFairness, RoundRecord, ShapleyMode, COMPONENT_NAMES};
use crate::mi_losses::{LossKind, MiLossConfig};
use crate::models::{ClassifierConfig, ModelSpec};
use crate::ndmath::AdamConfig;
use crate::seeding::{derive_seed, stream_rng};

pub const MANIFEST: &str = "manifest.txt";
pub const ROUNDS: &str = "rounds.csv";
pub const FAIRNESS: &str = "fairness.csv";
pub const SUMMARY: &str = "summary.csv";
pub const MI_SERIES: &str = "mi_series.csv";

const TAG_DATA: u64 = 11;
const TAG_HOLDOUT: u64 = 12;
const TAG_PARTITION: u64 = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    CrossSilo,
    CrossDevice,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::CrossSilo => "cross-silo",
            Scenario::CrossDevice => "cross-device",
        }
    }

    /// Client count and participation rate.
    pub fn defaults(self) -> (usize, f64) {
        match self {
            Scenario::CrossSilo => (10, 1.0),
            Scenario::CrossDevice => (100, 0.05),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distribution {
    Iid,
    LabelSkew { concentration: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Cifar10 {
        dir: PathBuf,
        max_samples: Option<usize>,
    },
    Blobs {
        classes: usize,
        dims: usize,
        per_class: usize,
        spread: f64,
    },
    GaussianCalib {
        rho: f64,
        dims: usize,
        steps: usize,
        batch: usize,
        window: usize,
    },
}

impl DatasetSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::Cifar10 { .. } => "cifar10",
            DatasetSpec::Blobs { .. } => "blobs",
            DatasetSpec::GaussianCalib { .. } => "gaussian-calib",
        }
    }
}

/// Fully resolved and validated run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub scenario: Scenario,
    pub clients: usize,
    pub participation: f64,
    pub distribution: Distribution,
    pub strategy: StrategyConfig,
    pub loss: MiLossConfig,
    pub rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub local_split: f64,
    pub validation_fraction: f64,
    pub dataset: DatasetSpec,
    pub attributes_file: Option<PathBuf>,
    pub shapley: Option<ShapleyMode>,
    pub hidden: [usize; 2],
    pub embed_width: usize,
    pub seed: u64,
    pub threads: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: Option<String>,
    scenario: Option<String>,
    clients: Option<i64>,
    participation: Option<f64>,
    distribution: Option<String>,
    concentration: Option<f64>,
    strategy: Option<String>,
    q: Option<f64>,
    qfed_step: Option<f64>,
    lambda: Option<f64>,
    personal_epochs: Option<i64>,
    loss: Option<String>,
    alpha: Option<f64>,
    beta: Option<f64>,
    tau: Option<f64>,
    tuba_a: Option<f64>,
    rounds: Option<i64>,
    epochs: Option<i64>,
    batch_size: Option<i64>,
    lr: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    adam_eps: Option<f64>,
    local_split: Option<f64>,
    validation_fraction: Option<f64>,
    dataset: Option<String>,
    cifar_dir: Option<PathBuf>,
    cifar_max_samples: Option<i64>,
    blob_classes: Option<i64>,
    blob_dims: Option<i64>,
    blob_per_class: Option<i64>,
    blob_spread: Option<f64>,
    calib_rho: Option<f64>,
    calib_dims: Option<i64>,
    calib_steps: Option<i64>,
    calib_batch: Option<i64>,
    calib_window: Option<i64>,
    attributes_file: Option<PathBuf>,
    shapley: Option<String>,
    shapley_permutations: Option<i64>,
    hidden1: Option<i64>,
    hidden2: Option<i64>,
    embed_width: Option<i64>,
    seed: Option<i64>,
    threads: Option<i64>,
}

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn count(key: &str, v: Option<i64>, default: usize) -> Result<usize> {
    match v {
        None => Ok(default),
        Some(n) if n >= 0 => Ok(n as usize),
        Some(n) => Err(config_err(key, format!("{n} is negative"))),
    }
}

fn positive(key: &str, v: Option<i64>, default: usize) -> Result<usize> {
    let n = count(key, v, default)?;
    if n == 0 {
        return Err(config_err(key, "must be at least 1"));
    }
    Ok(n)
}

fn real(key: &str, v: Option<f64>, default: f64, ok: impl Fn(f64) -> bool, rule: &str) -> Result<f64> {
    let x = v.unwrap_or(default);
    if !x.is_finite() || !ok(x) {
        return Err(config_err(key, format!("{x} violates {rule}")));
    }
    Ok(x)
}

/// Loads `key = value` overrides into `table`; values parse as TOML and fall
/// back to plain strings.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| config_err(o, "override must look like key=value"))?;
        let key = key.trim();
        let value = value.trim();
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
    }
    Ok(())
}

fn read_table(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| config_err(&path.display().to_string(), e.to_string()))
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cross-silo" | "silo" => Ok(Scenario::CrossSilo),
            "cross-device" | "device" => Ok(Scenario::CrossDevice),
            other => Err(config_err("scenario", format!("unknown scenario '{other}'"))),
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides, fills defaults and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => read_table(p)?,
            None => toml::Table::new(),
        };
        apply_overrides(&mut table, overrides)?;
        Self::from_table(table)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| config_err("config", e.to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        for (key, value) in &table {
            if value.is_table() {
                return Err(config_err(key, "nested tables are not supported"));
            }
        }
        let raw: RawConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err("config", e.to_string()))?;
        Self::resolve(raw)
    }

    fn resolve(r: RawConfig) -> Result<Self> {
        let scenario: Scenario = r.scenario.as_deref().unwrap_or("cross-silo").parse()?;
        let (default_clients, default_rate) = scenario.defaults();
        let clients = positive("clients", r.clients, default_clients)?;
        let participation = real("participation", r.participation, default_rate, |x| x > 0.0 && x <= 1.0, "0 < participation <= 1")?;
        let distribution = match r.distribution.as_deref().unwrap_or("iid").to_ascii_lowercase().as_str() {
            "iid" => {
                if r.concentration.is_some() {
                    return Err(config_err("concentration", "only valid with distribution = \"label-skew\""));
                }
                Distribution::Iid
            }
            "label-skew" | "non-iid" | "noniid" => Distribution::LabelSkew {
                concentration: real("concentration", r.concentration, 0.5, |x| x > 0.0, "concentration > 0")?,
            },
            other => return Err(config_err("distribution", format!("unknown distribution '{other}'"))),
        };
        let rounds = count("rounds", r.rounds, 30)?;
        let epochs = count("epochs", r.epochs, 10)?;
        let batch_size = positive("batch_size", r.batch_size, 32)?;
        let adam = AdamConfig {
            lr: real("lr", r.lr, 1e-3, |x| x > 0.0, "lr > 0")?,
            beta1: real("beta1", r.beta1, 0.9, |x| (0.0..1.0).contains(&x), "0 <= beta1 < 1")?,
            beta2: real("beta2", r.beta2, 0.999, |x| (0.0..1.0).contains(&x), "0 <= beta2 < 1")?,
            eps: real("adam_eps", r.adam_eps, 1e-8, |x| x > 0.0, "adam_eps > 0")?,
        };

        let strategy_name = r.strategy.as_deref().unwrap_or("fedavg").to_ascii_lowercase();
        let strategy = match strategy_name.as_str() {
            "fedavg" => StrategyConfig::FedAvg,
            "qfedavg" | "q-fedavg" => StrategyConfig::QFedAvg {
                q: real("q", r.q, 0.1, |x| x >= 0.0, "q >= 0")?,
                step: real("qfed_step", r.qfed_step, 1.0 / adam.lr, |x| x > 0.0, "qfed_step > 0")?,
            },
            "ditto" => StrategyConfig::Ditto {
                lambda: real("lambda", r.lambda, 0.1, |x| x >= 0.0, "lambda >= 0")?,
                personal_epochs: count("personal_epochs", r.personal_epochs, epochs)?,
            },
            other => return Err(config_err("strategy", format!("unknown strategy '{other}'"))),
        };
        for (key, set, needs) in [
            ("q", r.q.is_some(), "qfedavg"),
            ("qfed_step", r.qfed_step.is_some(), "qfedavg"),
            ("lambda", r.lambda.is_some(), "ditto"),
            ("personal_epochs", r.personal_epochs.is_some(), "ditto"),
        ] {
            if set && strategy.name() != needs {
                return Err(config_err(key, format!("only valid with strategy = \"{needs}\"")));
            }
        }

        let kind: LossKind = r
            .loss
            .as_deref()
            .unwrap_or("ce")
            .parse()
            .map_err(|e: Error| config_err("loss", e.to_string()))?;
        let defaults = MiLossConfig::new(kind);
        let loss = MiLossConfig {
            kind,
            alpha: real("alpha", r.alpha, defaults.alpha, |_| true, "a finite value")?,
            beta: real("beta", r.beta, defaults.beta, |x| x >= 0.0, "beta >= 0")?,
            tau: real("tau", r.tau, defaults.tau, |x| x > 0.0, "tau > 0")?,
            tuba_a: real("tuba_a", r.tuba_a, defaults.tuba_a, |x| x > 0.0, "tuba_a > 0")?,
        };
        if batch_size < kind.min_batch() {
            return Err(config_err("batch_size", format!("{kind} needs at least {}", kind.min_batch())));
        }

        let dataset = match r.dataset.as_deref().unwrap_or("blobs").to_ascii_lowercase().as_str() {
            "cifar10" | "cifar-10" => {
                let dir = r.cifar_dir.clone().ok_or_else(|| config_err("cifar_dir", "required for dataset = \"cifar10\""))?;
                if !dir.is_dir() {
                    return Err(config_err("cifar_dir", format!("{} is not a directory", dir.display())));
                }
                DatasetSpec::Cifar10 {
                    dir,
                    max_samples: r.cifar_max_samples.map(|n| positive("cifar_max_samples", Some(n), 1)).transpose()?,
                }
            }
            "blobs" => DatasetSpec::Blobs {
                classes: positive("blob_classes", r.blob_classes, 10)?,
                dims: positive("blob_dims", r.blob_dims, 16)?,
                per_class: positive("blob_per_class", r.blob_per_class, 60)?,
                spread: real("blob_spread", r.blob_spread, 0.3, |x| x >= 0.0, "blob_spread >= 0")?,
            },
            "gaussian-calib" | "gaussian" => {
                let steps = positive("calib_steps", r.calib_steps, 3000)?;
                let window = positive("calib_window", r.calib_window, 500)?;
                if window > steps {
                    return Err(config_err("calib_window", format!("{window} exceeds calib_steps {steps}")));
                }
                if !kind.is_mi() {
                    return Err(config_err("loss", "gaussian-calib needs an MI loss"));
                }
                DatasetSpec::GaussianCalib {
                    rho: real("calib_rho", r.calib_rho, 0.5, |x| x.abs() < 1.0, "|calib_rho| < 1")?,
                    dims: positive("calib_dims", r.calib_dims, 1)?,
                    steps,
                    batch: positive("calib_batch", r.calib_batch, 64)?.max(2),
                    window,
                }
            }
            other => return Err(config_err("dataset", format!("unknown dataset '{other}'"))),
        };
        let prefixes: [(&str, &[bool]); 3] = [
            ("cifar10", &[r.cifar_dir.is_some(), r.cifar_max_samples.is_some()]),
            (
                "blobs",
                &[r.blob_classes.is_some(), r.blob_dims.is_some(), r.blob_per_class.is_some(), r.blob_spread.is_some()],
            ),
            (
                "gaussian-calib",
                &[
                    r.calib_rho.is_some(),
                    r.calib_dims.is_some(),
                    r.calib_steps.is_some(),
                    r.calib_batch.is_some(),
                    r.calib_window.is_some(),
                ],
            ),
        ];
        for (name, set) in prefixes {
            if name != dataset.name() && set.iter().any(|&b| b) {
                return Err(config_err("dataset", format!("{name} keys given for dataset = \"{}\"", dataset.name())));
            }
        }

        if let Some(p) = &r.attributes_file {
            if !p.is_file() {
                return Err(config_err("attributes_file", format!("{} does not exist", p.display())));
            }
        }
        let shapley = match r.shapley.as_deref().unwrap_or("auto").to_ascii_lowercase().as_str() {
            "auto" => None,
            "exact" => Some(ShapleyMode::Exact),
            "mc" | "monte-carlo" => Some(ShapleyMode::MonteCarlo {
                permutations: positive("shapley_permutations", r.shapley_permutations, 200 * clients)?,
            }),
            other => return Err(config_err("shapley", format!("unknown mode '{other}'"))),
        };
        let seed = match r.seed {
            None => 0,
            Some(s) if s >= 0 => s as u64,
            Some(s) => return Err(config_err("seed", format!("{s} is negative"))),
        };
        let cfg = RunConfig {
            name: r.name.unwrap_or_else(|| "run".to_string()),
            scenario,
            clients,
            participation,
            distribution,
            strategy,
            loss,
            rounds,
            epochs,
            batch_size,
            adam,
            local_split: real("local_split", r.local_split, 0.9, |x| x > 0.0 && x < 1.0, "0 < local_split < 1")?,
            validation_fraction: real(
                "validation_fraction",
                r.validation_fraction,
                0.05,
                |x| x > 0.0 && x < 1.0,
                "0 < validation_fraction < 1",
            )?,
            dataset,
            attributes_file: r.attributes_file,
            shapley,
            hidden: [positive("hidden1", r.hidden1, 64)?, positive("hidden2", r.hidden2, 32)?],
            embed_width: positive("embed_width", r.embed_width, 16)?,
            seed,
            threads: r.threads.map(|t| positive("threads", Some(t), 1)).transpose()?,
        };
        if cfg.name.is_empty() || cfg.name.contains(['/', '\\']) || cfg.name.starts_with('.') {
            return Err(config_err("name", format!("'{}' is not a usable directory name", cfg.name)));
        }
        Ok(cfg)
    }

    /// Every resolved key with its TOML-formatted value, sorted by key.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        let q = |s: &str| toml::Value::String(s.to_string()).to_string();
        let f = |x: f64| toml::Value::Float(x).to_string();
        put("name", q(&self.name));
        put("scenario", q(self.scenario.name()));
        put("clients", self.clients.to_string());
        put("participation", f(self.participation));
        match self.distribution {
            Distribution::Iid => put("distribution", q("iid")),
            Distribution::LabelSkew { concentration } => {
                put("distribution", q("label-skew"));
                put("concentration", f(concentration));
            }
        }
        put("strategy", q(self.strategy.name()));
        match self.strategy {
            StrategyConfig::FedAvg => {}
            StrategyConfig::QFedAvg { q, step } => {
                put("q", f(q));
                put("qfed_step", f(step));
            }
            StrategyConfig::Ditto { lambda, personal_epochs } => {
                put("lambda", f(lambda));
                put("personal_epochs", personal_epochs.to_string());
            }
        }
        put("loss", q(self.loss.kind.name()));
        put("alpha", f(self.loss.alpha));
        put("beta", f(self.loss.beta));
        put("tau", f(self.loss.tau));
        put("tuba_a", f(self.loss.tuba_a));
        put("rounds", self.rounds.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", f(self.adam.lr));
        put("beta1", f(self.adam.beta1));
        put("beta2", f(self.adam.beta2));
        put("adam_eps", f(self.adam.eps));
        put("local_split", f(self.local_split));
        put("validation_fraction", f(self.validation_fraction));
        put("dataset", q(self.dataset.name()));
        match &self.dataset {
            DatasetSpec::Cifar10 { dir, max_samples } => {
                put("cifar_dir", q(&dir.display().to_string()));
                if let Some(n) = max_samples {
                    put("cifar_max_samples", n.to_string());
                }
            }
            DatasetSpec::Blobs {
                classes,
                dims,
                per_class,
                spread,
            } => {
                put("blob_classes", classes.to_string());
                put("blob_dims", dims.to_string());
                put("blob_per_class", per_class.to_string());
                put("blob_spread", f(*spread));
            }
            DatasetSpec::GaussianCalib {
                rho,
                dims,
                steps,
                batch,
                window,
            } => {
                put("calib_rho", f(*rho));
                put("calib_dims", dims.to_string());
                put("calib_steps", steps.to_string());
                put("calib_batch", batch.to_string());
                put("calib_window", window.to_string());
            }
        }
        if let Some(p) = &self.attributes_file {
            put("attributes_file", q(&p.display().to_string()));
        }
        match self.shapley {
            None => put("shapley", q("auto")),
            Some(ShapleyMode::Exact) => put("shapley", q("exact")),
            Some(ShapleyMode::MonteCarlo { permutations }) => {
                put("shapley", q("mc"));
                put("shapley_permutations", permutations.to_string());
            }
        }
        put("hidden1", self.hidden[0].to_string());
        put("hidden2", self.hidden[1].to_string());
        put("embed_width", self.embed_width.to_string());
        put("seed", self.seed.to_string());
        m
    }

    /// `key = value` lines of [`RunConfig::echo`].
    pub fn canonical(&self) -> String {
        canonical_text(&self.echo())
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }

    pub fn model_spec(&self, dataset: &LabeledDataset) -> ModelSpec {
        let classifier = match self.dataset {
            DatasetSpec::Cifar10 { .. } => ClassifierConfig::cifar10(),
            _ => ClassifierConfig::mlp(dataset.sample_width(), self.hidden, dataset.classes()),
        };
        ModelSpec::new(classifier, self.embed_width)
    }

    pub fn simulation_config(&self) -> SimulationConfig {
        SimulationConfig {
            rounds: self.rounds,
            participation: self.participation,
            train: TrainConfig {
                epochs: self.epochs,
                batch_size: self.batch_size,
                adam: self.adam,
                loss: self.loss,
            },
            strategy: self.strategy,
            local_split: self.local_split,
            shapley: self.shapley,
            seed: self.seed,
            threads: self.threads,
        }
    }

    /// Loads or generates the dataset, holds out the server validation split
    /// and partitions the rest across clients.
    pub fn federated_data(&self) -> Result<FederatedData> {
        let dataset = match &self.dataset {
            DatasetSpec::Cifar10 { dir, max_samples } => {
                let mut ds = load_cifar10(dir)?;
                if let Some(n) = max_samples {
                    ds.truncate(*n);
                }
                ds
            }
            DatasetSpec::Blobs {
                classes,
                dims,
                per_class,
                spread,
            } => synthetic_blobs(*classes, *dims, *per_class, *spread, derive_seed(self.seed, &[TAG_DATA]))?,
            DatasetSpec::GaussianCalib { .. } => {
                return Err(config_err("dataset", "gaussian-calib runs have no federated data"));
            }
        };
        let attributes = match &self.attributes_file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                AttributeMap::parse(&text, dataset.classes())?
            }
            None => default_attributes(dataset.classes())?,
        };
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut stream_rng(self.seed, &[TAG_HOLDOUT]));
        let n_val = ((self.validation_fraction * dataset.len() as f64).round() as usize).clamp(1, dataset.len() - 1);
        let mut validation = order[..n_val].to_vec();
        validation.sort_unstable();
        let mut pool = order[n_val..].to_vec();
        pool.sort_unstable();
        let seed = derive_seed(self.seed, &[TAG_PARTITION]);
        let plan = match self.distribution {
            Distribution::Iid => partition_iid_indices(&pool, self.clients, seed)?,
            Distribution::LabelSkew { concentration } => {
                partition_label_skew_indices(&dataset, &pool, self.clients, concentration, seed)?
            }
        };
        if let Some(c) = plan.clients.iter().position(|c| c.len() < 2) {
            return Err(config_err("clients", format!("client {c} holds fewer than 2 samples; use fewer clients")));
        }
        Ok(FederatedData {
            dataset,
            plan,
            validation,
            attributes,
        })
    }
}

fn canonical_text(echo: &BTreeMap<String, String>) -> String {
    echo.iter().fold(String::new(), |mut s, (k, v)| {
        let _ = writeln!(s, "{k} = {v}");
        s
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_bytes(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Bundle {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn rounds_csv(attributes: &[String], records: &[RoundRecord]) -> Result<Vec<u8>> {
    let mut header: Vec<String> = ["round", "client_id", "accuracy", "reward", "shapley"].map(String::from).to_vec();
    header.extend(attributes.iter().map(|a| format!("eo_{a}")));
    let rows = records.iter().flat_map(|r| {
        r.clients.iter().map(move |c| {
            let mut row = vec![
                r.round.to_string(),
                c.client_id.to_string(),
                c.accuracy.to_string(),
                c.reward.to_string(),
                c.shapley.to_string(),
            ];
            row.extend(c.equalized_odds.iter().map(|&e| fmt_opt(e)));
            row
        })
    });
    csv_bytes(Path::new(ROUNDS), &header, rows)
}

pub fn fairness_csv(report: &FairnessReport) -> Result<Vec<u8>> {
    let mut header = vec!["round".to_string()];
    header.extend(COMPONENT_NAMES.map(String::from));
    let rows = report.rounds.iter().map(|r| {
        let mut row = vec![r.round.to_string()];
        row.extend(r.components().iter().map(|&c| fmt_opt(c)));
        row
    });
    csv_bytes(Path::new(FAIRNESS), &header, rows)
}

fn summary_csv(records: &[RoundRecord], report: &FairnessReport) -> Result<Vec<u8>> {
    let header = ["metric", "mean", "variance", "count"].map(String::from);
    let mut rows: Vec<Vec<String>> = report
        .stats()
        .iter()
        .zip(COMPONENT_NAMES)
        .map(|(s, name)| match s {
            Some(s) => vec![name.to_string(), s.mean.to_string(), s.variance.to_string(), s.count.to_string()],
            None => vec![name.to_string(), String::new(), String::new(), "0".to_string()],
        })
        .collect();
    for (name, pick) in [
        ("accuracy", (|c: &ClientRecord| c.accuracy) as fn(&ClientRecord) -> f64),
        ("reward", |c: &ClientRecord| c.reward),
    ] {
        let vals: Vec<f64> = records.iter().flat_map(|r| r.clients.iter().map(pick)).collect();
        rows.push(mean_var_row(name, &vals));
    }
    csv_bytes(Path::new(SUMMARY), &header, rows)
}

fn mean_var_row(name: &str, vals: &[f64]) -> Vec<String> {
    if vals.is_empty() {
        return vec![name.to_string(), String::new(), String::new(), "0".to_string()];
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    vec![name.to_string(), mean.to_string(), var.to_string(), vals.len().to_string()]
}

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Stored contents of `manifest.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub version: String,
    pub timestamp: u64,
    pub status: String,
    pub config_sha256: String,
    pub records_sha256: String,
    pub config: BTreeMap<String, String>,
}

impl Manifest {
    fn render(&self) -> String {
        let q = |s: &str| toml::Value::String(s.to_string()).to_string();
        let mut out = String::new();
        let _ = writeln!(out, "version = {}", q(&self.version));
        let _ = writeln!(out, "timestamp = {}", self.timestamp);
        let _ = writeln!(out, "status = {}", q(&self.status));
        let _ = writeln!(out, "config_sha256 = {}", q(&self.config_sha256));
        let _ = writeln!(out, "records_sha256 = {}", q(&self.records_sha256));
        out.push_str("\n[config]\n");
        out.push_str(&canonical_text(&self.config));
        out
    }

    fn parse(path: &Path, text: &str) -> Result<Self> {
        let bad = |reason: String| Error::Bundle {
            path: path.to_path_buf(),
            reason,
        };
        let table: toml::Table = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        let text_field = |k: &str| -> Result<String> {
            table
                .get(k)
                .and_then(|v| v.as_str())
                .map(str::to_string)
                .ok_or_else(|| bad(format!("missing '{k}'")))
        };
        let config = table
            .get("config")
            .and_then(|v| v.as_table())
            .ok_or_else(|| bad("missing [config] table".into()))?
            .iter()
            .map(|(k, v)| (k.clone(), v.to_string()))
            .collect();
        Ok(Manifest {
            version: text_field("version")?,
            timestamp: table
                .get("timestamp")
                .and_then(|v| v.as_integer())
                .ok_or_else(|| bad("missing 'timestamp'".into()))? as u64,
            status: text_field("status")?,
            config_sha256: text_field("config_sha256")?,
            records_sha256: text_field("records_sha256")?,
            config,
        })
    }
}

fn records_hash(rounds: &[u8], fairness: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(rounds);
    h.update(b"\0");
    h.update(fairness);
    hex::encode(h.finalize())
}

/// A run directory loaded back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultsBundle {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub attributes: Vec<String>,
    pub records: Vec<RoundRecord>,
    pub report: FairnessReport,
}

impl ResultsBundle {
    pub fn config_value(&self, key: &str) -> Option<String> {
        self.manifest.config.get(key).map(|v| v.trim_matches('"').to_string())
    }

    pub fn is_calibration(&self) -> bool {
        self.config_value("dataset").as_deref() == Some("gaussian-calib")
    }
}

struct BundleWriter {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl BundleWriter {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.written.push(path);
        Ok(())
    }

    fn discard(&self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn persist(
    cfg: &RunConfig,
    dir: &Path,
    attributes: &[String],
    records: &[RoundRecord],
    status: &str,
    extra: Option<(&str, Vec<u8>)>,
) -> Result<()> {
    let report = FairnessReport::from_records(records)?;
    let rounds = rounds_csv(attributes, records)?;
    let fairness = fairness_csv(&report)?;
    let summary = summary_csv(records, &report)?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: now_unix(),
        status: status.to_string(),
        config_sha256: cfg.config_hash(),
        records_sha256: records_hash(&rounds, &fairness),
        config: cfg.echo(),
    };
    let mut w = BundleWriter {
        dir: dir.to_path_buf(),
        written: Vec::new(),
    };
    let result = (|| {
        w.write(ROUNDS, &rounds)?;
        w.write(FAIRNESS, &fairness)?;
        w.write(SUMMARY, &summary)?;
        if let Some((name, bytes)) = &extra {
            w.write(name, bytes)?;
        }
        w.write(MANIFEST, manifest.render().as_bytes())
    })();
    if result.is_err() {
        w.discard();
    }
    result
}

fn calibration_config(cfg: &RunConfig) -> Option<CalibrationConfig> {
    let DatasetSpec::GaussianCalib {
        rho,
        dims,
        steps,
        batch,
        window,
    } = cfg.dataset
    else {
        return None;
    };
    Some(CalibrationConfig {
        rho,
        dims,
        batch,
        steps,
        window,
        adam: cfg.adam,
        loss: cfg.loss,
        seed: cfg.seed,
        ..CalibrationConfig::new(cfg.loss.kind, rho, cfg.seed)
    })
}

/// Runs `cfg` and persists its bundle under `out/<name>`. A failed
/// simulation still writes the rounds completed so far, marked failed in
/// the manifest, and then returns the error.
pub fn run_experiment(cfg: &RunConfig, out: &Path) -> Result<ResultsBundle> {
    let dir = out.join(&cfg.name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    if let Some(cal) = calibration_config(cfg) {
        let result = calibrate_mi(&cal)?;
        let header = ["step", "estimate"].map(String::from);
        let rows = result.series.iter().enumerate().map(|(i, v)| vec![i.to_string(), v.to_string()]);
        let series = csv_bytes(Path::new(MI_SERIES), &header, rows)?;
        persist(cfg, &dir, &[], &[], "ok", Some((MI_SERIES, series)))?;
        log::info!("calibration {}: estimate {:.4} vs true {:.4}", result.kind, result.estimate, result.true_mi);
        return load_bundle(&dir);
    }
    let data = cfg.federated_data()?;
    let spec = cfg.model_spec(&data.dataset);
    let attributes: Vec<String> = data.attributes.names().map(str::to_string).collect();
    let mut records = Vec::new();
    let outcome = Simulation::new(&spec, &data, cfg.simulation_config())?.run(|r| {
        log::info!("{}: round {} done", cfg.name, r.round);
        records.push(r);
        Ok(())
    });
    match outcome {
        Ok(()) => {
            persist(cfg, &dir, &attributes, &records, "ok", None)?;
            load_bundle(&dir)
        }
        Err(e) => {
            persist(cfg, &dir, &attributes, &records, &format!("failed: {e}"), None)?;
            Err(e)
        }
    }
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)?;
    Ok((header, rows))
}

fn parse_field<T: FromStr>(path: &Path, column: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Bundle {
        path: path.to_path_buf(),
        reason: format!("column {column}: cannot parse '{v}'"),
    })
}

fn parse_opt(path: &Path, column: &str, v: &str) -> Result<Option<f64>> {
    if v.is_empty() {
        Ok(None)
    } else {
        parse_field(path, column, v).map(Some)
    }
}

fn expect_header(path: &Path, header: &[String], expected: &[&str]) -> Result<()> {
    if header.len() < expected.len() || header.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(Error::Bundle {
            path: path.to_path_buf(),
            reason: format!("header {header:?} does not start with {expected:?}"),
        });
    }
    Ok(())
}

/// Loads a bundle and checks its manifest hashes against the stored files.
pub fn load_bundle(dir: &Path) -> Result<ResultsBundle> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = Manifest::parse(&mpath, &text)?;
    let config_hash = sha256_hex(canonical_text(&manifest.config).as_bytes());
    if config_hash != manifest.config_sha256 {
        return Err(Error::Bundle {
            path: mpath,
            reason: "config does not match its recorded hash".into(),
        });
    }
    let rpath = dir.join(ROUNDS);
    let fpath = dir.join(FAIRNESS);
    let rbytes = fs::read(&rpath).map_err(|e| Error::io(&rpath, e))?;
    let fbytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
    if records_hash(&rbytes, &fbytes) != manifest.records_sha256 {
        return Err(Error::Bundle {
            path: mpath,
            reason: "round records do not match their recorded hash".into(),
        });
    }

    let (header, rows) = read_csv(&rpath)?;
    let base = ["round", "client_id", "accuracy", "reward", "shapley"];
    expect_header(&rpath, &header, &base)?;
    let attributes: Vec<String> = header[base.len()..]
        .iter()
        .map(|h| h.strip_prefix("eo_").unwrap_or(h).to_string())
        .collect();
    let mut records: Vec<RoundRecord> = Vec::new();
    for row in &rows {
        let round: usize = parse_field(&rpath, "round", &row[0])?;
        let client = ClientRecord {
            client_id: parse_field(&rpath, "client_id", &row[1])?,
            accuracy: parse_field(&rpath, "accuracy", &row[2])?,
            reward: parse_field(&rpath, "reward", &row[3])?,
            shapley: parse_field(&rpath, "shapley", &row[4])?,
            equalized_odds: row[base.len()..]
                .iter()
                .zip(&header[base.len()..])
                .map(|(v, h)| parse_opt(&rpath, h, v))
                .collect::<Result<_>>()?,
        };
        match records.last_mut() {
            Some(r) if r.round == round => r.clients.push(client),
            _ => records.push(RoundRecord {
                round,
                attributes: attributes.clone(),
                clients: vec![client],
            }),
        }
    }

    let (header, rows) = read_csv(&fpath)?;
    let mut expected = vec!["round"];
    expected.extend(COMPONENT_NAMES);
    expect_header(&fpath, &header, &expected)?;
    let rounds = rows
        .iter()
        .map(|row| {
            let get = |i: usize| parse_opt(&fpath, expected[i], &row[i]);
            Ok(RoundFairness {
                round: parse_field(&fpath, "round", &row[0])?,
                f_j: get(1)?.unwrap_or(f64::NAN),
                f_g: get(2)?,
                f_r: get(3)?.unwrap_or(f64::NAN),
                f_o: get(4)?.unwrap_or(f64::NAN),
                f_t: get(5)?.unwrap_or(f64::NAN),
            })
        })
        .collect::<Result<_>>()?;
    Ok(ResultsBundle {
        dir: dir.to_path_buf(),
        manifest,
        attributes,
        records,
        report: FairnessReport { rounds },
    })
}

/// Axes file: a `[base]` table of run keys and an `[axes]` table mapping
/// keys to lists of values.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixConfig {
    pub base: toml::Table,
    pub axes: Vec<(String, Vec<toml::Value>)>,
}

impl MatrixConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| config_err("matrix", e.to_string()))?;
        let base = match table.remove("base") {
            Some(toml::Value::Table(t)) => t,
            None => toml::Table::new(),
            Some(_) => return Err(config_err("base", "must be a table")),
        };
        let axes_table = match table.remove("axes") {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(config_err("axes", "missing [axes] table")),
        };
        if let Some(k) = table.keys().next() {
            return Err(config_err(k, "unknown top-level key; expected [base] and [axes]"));
        }
        let mut axes = Vec::new();
        for (k, v) in axes_table {
            match v {
                toml::Value::Array(vals) if !vals.is_empty() => axes.push((k, vals)),
                _ => return Err(config_err(&format!("axes.{k}"), "must be a non-empty list")),
            }
        }
        if axes.is_empty() {
            return Err(config_err("axes", "no axes given"));
        }
        Ok(MatrixConfig { base, axes })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Cartesian product of the axes as (cell name, merged table), with the
    /// first axis varying slowest.
    pub fn cells(&self) -> Vec<(String, toml::Table)> {
        let mut cells = vec![(Vec::<String>::new(), self.base.clone())];
        for (key, vals) in &self.axes {
            let mut next = Vec::with_capacity(cells.len() * vals.len());
            for (parts, table) in &cells {
                for v in vals {
                    let mut t = table.clone();
                    t.insert(key.clone(), v.clone());
                    let label = match v {
                        toml::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    };
                    let mut p = parts.clone();
                    p.push(format!("{key}-{label}"));
                    next.push((p, t));
                }
            }
            cells = next;
        }
        cells
            .into_iter()
            .map(|(parts, t)| {
                let name: String = parts
                    .join("__")
                    .chars()
                    .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
                    .collect();
                (name, t)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellOutcome {
    pub name: String,
    pub seed: u64,
    pub error: Option<String>,
}

/// Runs every cell with its seed derived from (`master`, cell index) and
/// writes `matrix_summary.csv` under `out`. Failures do not stop other cells.
pub fn run_matrix(matrix: &MatrixConfig, master: u64, overrides: &[String], out: &Path) -> Result<Vec<CellOutcome>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut outcomes = Vec::new();
    for (i, (name, mut table)) in matrix.cells().into_iter().enumerate() {
        let seed = derive_seed(master, &[i as u64]) >> 1;
        apply_overrides(&mut table, overrides)?;
        table.insert("name".into(), toml::Value::String(name.clone()));
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
        let result = RunConfig::from_table(table).and_then(|cfg| run_experiment(&cfg, out));
        if let Err(e) = &result {
            log::error!("cell {name} failed: {e}");
        }
        outcomes.push(CellOutcome {
            name,
            seed,
            error: result.err().map(|e| e.to_string()),
        });
    }
    let header = ["cell", "seed", "status", "error"].map(String::from);
    let rows = outcomes.iter().map(|o| {
        vec![
            o.name.clone(),
            o.seed.to_string(),
            if o.error.is_some() { "failed" } else { "ok" }.to_string(),
            o.error.clone().unwrap_or_default(),
        ]
    });
    let path = out.join("matrix_summary.csv");
    write_atomic(&path, &csv_bytes(&path, &header, rows)?)?;
    Ok(outcomes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    Scatter,
    ComponentsBar,
    ComponentsTimeseries,
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scatter" => Ok(PlotKind::Scatter),
            "components-bar" | "bar" => Ok(PlotKind::ComponentsBar),
            "components-timeseries" | "timeseries" => Ok(PlotKind::ComponentsTimeseries),
            other => Err(Error::invalid("kind", format!("unknown plot kind '{other}'"))),
        }
    }
}

fn bundle_label(b: &ResultsBundle) -> String {
    b.config_value("name")
        .unwrap_or_else(|| b.dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
}

/// Plot-ready CSV bytes for `kind` over the given bundles.
///
/// * scatter: `strategy,loss,F_t,f_o,bundles`, one row per (strategy, loss)
///   averaging run-level means across bundles.
/// * components-bar: `cell,strategy,loss,component,mean,std` over rounds.
/// * components-timeseries: `cell,round,f_j,f_g,f_r,f_o,F_t`.
pub fn emit_plot_data(bundles: &[ResultsBundle], kind: PlotKind) -> Result<Vec<u8>> {
    if bundles.is_empty() {
        return Err(Error::invalid("bundles", "no bundles given"));
    }
    if let Some(b) = bundles.iter().find(|b| b.is_calibration() || b.report.rounds.is_empty()) {
        return Err(Error::Bundle {
            path: b.dir.clone(),
            reason: "bundle holds no fairness rounds for plotting".into(),
        });
    }
    let key = |b: &ResultsBundle, k: &str| b.config_value(k).unwrap_or_default();
    let path = Path::new("plot.csv");
    match kind {
        PlotKind::Scatter => {
            let mut groups: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
            for b in bundles {
                let stats = b.report.stats();
                let ft = stats[4].map(|s| s.mean).unwrap_or(f64::NAN);
                let fo = stats[3].map(|s| s.mean).unwrap_or(f64::NAN);
                groups.entry((key(b, "strategy"), key(b, "loss"))).or_default().push((ft, fo));
            }
            let header = ["strategy", "loss", "F_t", "f_o", "bundles"].map(String::from);
            let rows = groups.into_iter().map(|((s, l), v)| {
                let n = v.len() as f64;
                let ft = v.iter().map(|p| p.0).sum::<f64>() / n;
                let fo = v.iter().map(|p| p.1).sum::<f64>() / n;
                vec![s, l, ft.to_string(), fo.to_string(), v.len().to_string()]
            });
            csv_bytes(path, &header, rows)
        }
        PlotKind::ComponentsBar => {
            let header = ["cell", "strategy", "loss", "component", "mean", "std"].map(String::from);
            let mut rows = Vec::new();
            for b in bundles {
                for (s, name) in b.report.stats().iter().zip(COMPONENT_NAMES) {
                    if let Some(s) = s {
                        rows.push(vec![
                            bundle_label(b),
                            key(b, "strategy"),
                            key(b, "loss"),
                            name.to_string(),
                            s.mean.to_string(),
                            s.variance.sqrt().to_string(),
                        ]);
                    }
                }
            }
            csv_bytes(path, &header, rows)
        }
        PlotKind::ComponentsTimeseries => {
            let mut header = vec!["cell".to_string(), "round".to_string()];
            header.extend(COMPONENT_NAMES.map(String::from));
            let mut rows = Vec::new();
            for b in bundles {
                for r in &b.report.rounds {
                    let mut row = vec![bundle_label(b), r.round.to_string()];
                    row.extend(r.components().iter().map(|&c| fmt_opt(c)));
                    rows.push(row);
                }
            }
            csv_bytes(path, &header, rows)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(extra: &[&str]) -> RunConfig {
        let mut o: Vec<String> = [
            "blob_classes=4",
            "blob_dims=4",
            "blob_per_class=30",
            "hidden1=8",
            "hidden2=8",
            "embed_width=4",
            "rounds=2",
            "epochs=1",
            "clients=3",
            "lr=0.01",
        ]
        .map(String::from)
        .to_vec();
        o.extend(extra.iter().map(|s| s.to_string()));
        RunConfig::load(None, &o).unwrap()
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::parse("scenario = \"cross-silo\"\nstrategy = \"fedavg\"\nloss = \"ce\"\ndataset = \"blobs\"\n").unwrap();
        assert_eq!((cfg.rounds, cfg.epochs, cfg.batch_size), (30, 10, 32));
        assert_eq!((cfg.clients, cfg.participation), (10, 1.0));
        let dev = RunConfig::parse("scenario = \"cross-device\"").unwrap();
        assert_eq!((dev.clients, dev.participation), (100, 0.05));
        let echo = cfg.echo();
        assert_eq!(echo["rounds"], "30");
        assert_eq!(echo["loss"], "\"ce\"");
    }

    #[test]
    fn invalid_values_name_their_key() {
        let err = RunConfig::parse("rounds = -1").unwrap_err().to_string();
        assert!(err.contains("rounds"), "{err}");
        let err = RunConfig::parse("roundz = 3").unwrap_err().to_string();
        assert!(err.contains("roundz"), "{err}");
        let err = RunConfig::parse("epochs = \"many\"").unwrap_err().to_string();
        assert!(err.contains("epochs") || err.contains("integer"), "{err}");
        let err = RunConfig::parse("strategy = \"fedavg\"\nlambda = 0.5").unwrap_err().to_string();
        assert!(err.contains("lambda"), "{err}");
        let err = RunConfig::parse("dataset = \"cifar10\"\ncifar_dir = \"/nonexistent/dir\"").unwrap_err().to_string();
        assert!(err.contains("cifar_dir"), "{err}");
        assert!(RunConfig::parse("participation = 0").is_err());
        assert!(RunConfig::parse("loss = \"mine\"\nbatch_size = 1").is_err());
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "rounds = 4\nloss = \"ce\"\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &["rounds=7".into(), "loss=infonce".into()]).unwrap();
        assert_eq!(cfg.rounds, 7);
        assert_eq!(cfg.loss.kind, LossKind::InfoNce);
        assert_eq!(cfg.echo()["rounds"], "7");
        assert!(RunConfig::load(Some(&path), &["noequals".into()]).is_err());
    }

    #[test]
    fn strategy_defaults() {
        let q = RunConfig::parse("strategy = \"qfedavg\"\nlr = 0.01").unwrap();
        assert_eq!(q.strategy, StrategyConfig::QFedAvg { q: 0.1, step: 100.0 });
        let d = RunConfig::parse("strategy = \"ditto\"\nepochs = 3").unwrap();
        assert_eq!(d.strategy, StrategyConfig::Ditto { lambda: 0.1, personal_epochs: 3 });
    }

    #[test]
    fn experiment_writes_reloadable_bundle() {
        let out = tempfile::tempdir().unwrap();
        let cfg = tiny(&[]);
        let bundle = run_experiment(&cfg, out.path()).unwrap();
        assert_eq!(bundle.records.len(), 2);
        assert_eq!(bundle.report.rounds.len(), 2);
        let dir = out.path().join("run");
        for f in [MANIFEST, ROUNDS, FAIRNESS, SUMMARY] {
            assert!(dir.join(f).is_file(), "{f}");
        }
        assert!(fs::read_dir(&dir).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
        let recomputed = FairnessReport::from_records(&bundle.records).unwrap();
        assert_eq!(recomputed, bundle.report);
        let rounds = fs::read(dir.join(ROUNDS)).unwrap();
        run_experiment(&cfg, out.path()).unwrap();
        assert_eq!(fs::read(dir.join(ROUNDS)).unwrap(), rounds);
    }

    #[test]
    fn tampering_is_detected() {
        let out = tempfile::tempdir().unwrap();
        run_experiment(&tiny(&[]), out.path()).unwrap();
        let dir = out.path().join("run");
        let m = fs::read_to_string(dir.join(MANIFEST)).unwrap();
        fs::write(dir.join(MANIFEST), m.replace("rounds = 2", "rounds = 3")).unwrap();
        assert!(load_bundle(&dir).unwrap_err().to_string().contains("config"));
        fs::write(dir.join(MANIFEST), &m).unwrap();
        load_bundle(&dir).unwrap();
        let mut f = fs::read_to_string(dir.join(FAIRNESS)).unwrap();
        f.push_str("9,1,1,1,1,1\n");
        fs::write(dir.join(FAIRNESS), f).unwrap();
        assert!(load_bundle(&dir).unwrap_err().to_string().contains("records"));
    }

    #[test]
    fn calibration_run_writes_series() {
        let out = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(
            None,
            &["dataset=gaussian-calib", "loss=mine", "calib_steps=40", "calib_window=10", "name=cal"].map(String::from),
        )
        .unwrap();
        let b = run_experiment(&cfg, out.path()).unwrap();
        assert!(b.is_calibration());
        let (header, rows) = read_csv(&out.path().join("cal").join(MI_SERIES)).unwrap();
        assert_eq!(header, vec!["step", "estimate"]);
        assert_eq!(rows.len(), 40);
        assert!(emit_plot_data(&[b], PlotKind::Scatter).is_err());
    }

    #[test]
    fn matrix_runs_every_cell_and_isolates_failures() {
        let out = tempfile::tempdir().unwrap();
        let text = r#"
[base]
blob_classes = 4
blob_dims = 4
blob_per_class = 20
hidden1 = 8
hidden2 = 8
embed_width = 4
rounds = 1
epochs = 1
clients = 3

[axes]
loss = ["ce", "infonce"]
strategy = ["fedavg", "ditto"]
"#;
        let m = MatrixConfig::parse(text).unwrap();
        let res = run_matrix(&m, 9, &[], out.path()).unwrap();
        assert_eq!(res.len(), 4);
        assert!(res.iter().all(|c| c.error.is_none()));
        let seeds: std::collections::BTreeSet<u64> = res.iter().map(|c| c.seed).collect();
        assert_eq!(seeds.len(), 4);
        assert!(out.path().join("loss-ce__strategy-fedavg").join(ROUNDS).is_file());

        let failing = text.replace("strategy = [\"fedavg\", \"ditto\"]", "clients = [3, 1000]");
        let out2 = tempfile::tempdir().unwrap();
        let res = run_matrix(&MatrixConfig::parse(&failing).unwrap(), 9, &[], out2.path()).unwrap();
        assert_eq!(res.iter().filter(|c| c.error.is_some()).count(), 2);
        let summary = fs::read_to_string(out2.path().join("matrix_summary.csv")).unwrap();
        assert_eq!(summary.matches("failed").count(), 2);
    }

    #[test]
    fn plot_data_matches_bundles() {
        let out = tempfile::tempdir().unwrap();
        let b = run_experiment(&tiny(&["rounds=3"]), out.path()).unwrap();
        let scatter = String::from_utf8(emit_plot_data(&[b.clone()], PlotKind::Scatter).unwrap()).unwrap();
        let lines: Vec<&str> = scatter.lines().collect();
        assert_eq!(lines.len(), 2);
        let ft: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(ft, b.report.mean_general_fairness().unwrap());

        let bar = String::from_utf8(emit_plot_data(&[b.clone()], PlotKind::ComponentsBar).unwrap()).unwrap();
        let stats = FairnessReport::from_records(&b.records).unwrap().stats();
        for line in bar.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            let idx = COMPONENT_NAMES.iter().position(|n| *n == cols[3]).unwrap();
            assert_eq!(cols[4].parse::<f64>().unwrap(), stats[idx].unwrap().mean);
        }
        let ts = String::from_utf8(emit_plot_data(&[b], PlotKind::ComponentsTimeseries).unwrap()).unwrap();
        assert_eq!(ts.lines().count(), 1 + 3);
        assert!(emit_plot_data(&[], PlotKind::Scatter).is_err());
        assert!("pie".parse::<PlotKind>().is_err());
    }

    #[test]
    fn attributes_file_overrides_default() {
        let dir = tempfile::tempdir().unwrap();
        let attrs = dir.path().join("attrs.txt");
        fs::write(&attrs, "[low]\n0=0\n1=0\n2=1\n3=1\n").unwrap();
        let cfg = tiny(&[&format!("attributes_file={}", toml::Value::String(attrs.display().to_string()))]);
        let data = cfg.federated_data().unwrap();
        assert_eq!(data.attributes.names().collect::<Vec<_>>(), vec!["low"]);
        let b = run_experiment(&cfg, dir.path()).unwrap();
        assert_eq!(b.attributes, vec!["low"]);
    }
}
