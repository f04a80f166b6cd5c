//! Federated simulation: sampling, local training, aggregation and evaluation.

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::datagen::{split_local, AttributeMap, LabeledDataset, PartitionPlan};
use crate::error::{Error, Result};
use crate::fairness::{equalized_odds, shapley_contributions, ClientRecord, GroupRates, RoundRecord, ShapleyMode};
use crate::mi_losses::{regularized_loss_on_tape, LossKind, MiLossConfig};
use crate::models::ModelSpec;
use crate::ndmath::{AdamConfig, AdamState, Params, Tape, Tensor};
use crate::seeding::{derive_seed, stream_rng};
use crate::Real;

const EVAL_CHUNK: usize = 256;
/// Floor applied to local losses before q-FedAvg's fractional powers.
pub const QFED_LOSS_FLOOR: f64 = 1e-10;

// Stream tags, mixed with the master seed and client/round ids.
pub const TAG_INIT: u64 = 1;
pub const TAG_SPLIT: u64 = 2;
pub const TAG_SAMPLE: u64 = 3;
pub const TAG_TRAIN: u64 = 4;
pub const TAG_PERSONAL: u64 = 5;
pub const TAG_SHAPLEY: u64 = 6;

pub type Model = Params<Real>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StrategyConfig {
    FedAvg,
    QFedAvg { q: f64, step: f64 },
    Ditto { lambda: f64, personal_epochs: usize },
}

impl StrategyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyConfig::FedAvg => "fedavg",
            StrategyConfig::QFedAvg { .. } => "qfedavg",
            StrategyConfig::Ditto { .. } => "ditto",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StrategyConfig::FedAvg => Ok(()),
            StrategyConfig::QFedAvg { q, step } => {
                if !(q >= 0.0 && q.is_finite()) {
                    return Err(Error::invalid("q", format!("{q} must be a finite non-negative number")));
                }
                if !(step > 0.0 && step.is_finite()) {
                    return Err(Error::invalid("step", format!("{step} must be positive")));
                }
                Ok(())
            }
            StrategyConfig::Ditto { lambda, .. } => {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(Error::invalid("lambda", format!("{lambda} must be a finite non-negative number")));
                }
                Ok(())
            }
        }
    }
}

/// Local optimization settings shared by every client.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: MiLossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            adam: AdamConfig::default(),
            loss: MiLossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if self.batch_size < self.loss.kind.min_batch() {
            return Err(Error::invalid(
                "batch_size",
                format!("{} needs batches of at least {}", self.loss.kind, self.loss.kind.min_batch()),
            ));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("{} must be positive", self.adam.lr)));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Ditto's personalized model.
    pub personal: Option<Model>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub params: Model,
    pub n_samples: usize,
    /// Mean cross-entropy of the decision rows at the start parameters.
    pub start_loss: f64,
}

/// `max(1, round(rate·n))` distinct clients in ascending order.
pub fn sample_clients(n: usize, rate: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::invalid("participation", format!("{rate} must lie in (0, 1]")));
    }
    if n == 0 {
        return Err(Error::invalid("clients", "no clients"));
    }
    let k = ((rate * n as f64).round() as usize).clamp(1, n);
    let mut picked = index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Proximal pull `λ/2·‖v − anchor‖²` added during Ditto's personal steps.
#[derive(Clone, Copy, Debug)]
pub struct Proximal<'a> {
    pub anchor: &'a Model,
    pub lambda: f64,
}

fn batch_loss(
    spec: &ModelSpec,
    tape: &mut Tape<Real>,
    vars: &[crate::ndmath::Var],
    x: Tensor<Real>,
    labels: &[usize],
    loss: &MiLossConfig,
) -> Result<crate::ndmath::Var> {
    let xv = tape.leaf(x);
    let out = spec.forward(tape, vars, xv)?;
    if loss.kind.is_mi() {
        let s = spec.pair_scores(tape, vars, &out, labels)?;
        regularized_loss_on_tape(tape, loss, s)
    } else {
        tape.softmax_cross_entropy(out.logits, labels)
    }
}

/// Mean cross-entropy of the decision rows of `params` over `indices`.
pub fn decision_loss(
    spec: &ModelSpec,
    params: &Model,
    data: &LabeledDataset,
    indices: &[usize],
    kind: LossKind,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, labels) = data.batch::<Real>(chunk)?;
        let mut tape = Tape::new();
        let vars = spec.bind(&mut tape, params);
        let xv = tape.leaf(x);
        let out = spec.forward(&mut tape, &vars, xv)?;
        let rows = spec.decision_rows(&mut tape, &vars, &out, kind)?;
        let ce = tape.softmax_cross_entropy(rows, &labels)?;
        total += tape.value(ce).item()? as f64 * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

/// `epochs` passes of mini-batch Adam over `train`, reshuffled each epoch.
/// Batches smaller than the loss's minimum are skipped.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    spec: &ModelSpec,
    data: &LabeledDataset,
    client: usize,
    train: &[usize],
    start: &Model,
    cfg: &TrainConfig,
    proximal: Option<Proximal<'_>>,
    rng: &mut impl Rng,
) -> Result<ClientUpdate> {
    if train.is_empty() {
        return Err(Error::invalid("train", format!("client {client} has no training samples")));
    }
    let start_loss = decision_loss(spec, start, data, train, cfg.loss.kind)?;
    let mut params = start.clone();
    let mut adam = AdamState::new(&params, cfg.adam);
    let mut order = train.to_vec();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < cfg.loss.kind.min_batch() {
                continue;
            }
            let fail = |e: Error| {
                log::error!("client {client} epoch {epoch} batch {b}: {e}");
                Error::Training { client, epoch, batch: b }
            };
            let (x, labels) = data.batch::<Real>(chunk)?;
            let mut tape = Tape::new();
            let vars = spec.bind(&mut tape, &params);
            let loss = batch_loss(spec, &mut tape, &vars, x, &labels, &cfg.loss).map_err(fail)?;
            if !tape.value(loss).is_finite() {
                return Err(fail(Error::NonFinite("loss".into())));
            }
            let g = tape.backward(loss).map_err(fail)?;
            let mut grads = Params::new(vars.iter().map(|&v| g.wrt(v)).collect());
            if let Some(p) = proximal.filter(|p| p.lambda != 0.0) {
                for ((gt, vt), at) in grads.tensors_mut().iter_mut().zip(params.tensors()).zip(p.anchor.tensors()) {
                    for ((gv, &v), &a) in gt.data_mut().iter_mut().zip(vt.data()).zip(at.data()) {
                        *gv += (p.lambda * (v as f64 - a as f64)) as Real;
                    }
                }
            }
            adam.step(&mut params, &grads).map_err(fail)?;
        }
    }
    Ok(ClientUpdate {
        client,
        params,
        n_samples: train.len(),
        start_loss,
    })
}

/// Sample-weighted parameter mean.
pub fn aggregate_fedavg(updates: &[ClientUpdate]) -> Result<Model> {
    let first = updates.first().ok_or_else(|| Error::invalid("updates", "no updates to aggregate"))?;
    let total: f64 = updates.iter().map(|u| u.n_samples as f64).sum();
    if total <= 0.0 {
        return Err(Error::invalid("updates", "total sample count is zero"));
    }
    let mut acc: Vec<f64> = vec![0.0; first.params.numel()];
    for u in updates {
        first.params.check_layout(&u.params, "aggregate_fedavg")?;
        let w = u.n_samples as f64 / total;
        for (a, &v) in acc.iter_mut().zip(u.params.iter()) {
            *a += w * v as f64;
        }
    }
    let flat: Vec<Real> = acc.into_iter().map(|v| v as Real).collect();
    first.params.with_flat(&flat)
}

/// q-FedAvg step from `global` using the clients' start losses.
pub fn aggregate_qfedavg(global: &Model, updates: &[ClientUpdate], q: f64, step: f64) -> Result<Model> {
    StrategyConfig::QFedAvg { q, step }.validate()?;
    if updates.is_empty() {
        return Err(Error::invalid("updates", "no updates to aggregate"));
    }
    let w: Vec<f64> = global.iter().map(|&v| v as f64).collect();
    let mut num = vec![0.0f64; w.len()];
    let mut den = 0.0f64;
    for u in updates {
        global.check_layout(&u.params, "aggregate_qfedavg")?;
        if !u.start_loss.is_finite() {
            return Err(Error::NonFinite(format!("start loss of client {}", u.client)));
        }
        let f = u.start_loss.max(QFED_LOSS_FLOOR);
        let delta: Vec<f64> = w.iter().zip(u.params.iter()).map(|(&a, &b)| step * (a - b as f64)).collect();
        let norm_sq: f64 = delta.iter().map(|d| d * d).sum();
        let fq = f.powf(q);
        den += q * f.powf(q - 1.0) * norm_sq + step * fq;
        for (n, d) in num.iter_mut().zip(&delta) {
            *n += fq * d;
        }
    }
    if !(den > 0.0 && den.is_finite()) {
        return Err(Error::NonFinite("q-FedAvg normalizer".into()));
    }
    let flat: Vec<Real> = w.iter().zip(&num).map(|(a, n)| (a - n / den) as Real).collect();
    global.with_flat(&flat)
}

/// Accuracy and per-attribute group rates on a test split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    /// `None` for an attribute whose groups are not both present.
    pub group_rates: Vec<Option<GroupRates>>,
}

impl EvalMetrics {
    pub fn equalized_odds(&self) -> Vec<Option<f64>> {
        self.group_rates.iter().map(|r| r.as_ref().map(equalized_odds)).collect()
    }
}

pub fn predict_indices(
    spec: &ModelSpec,
    params: &Model,
    data: &LabeledDataset,
    indices: &[usize],
    kind: LossKind,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, _) = data.batch::<Real>(chunk)?;
        out.extend(spec.predict(params, &x, kind)?);
    }
    Ok(out)
}

/// Macro-averaged one-vs-rest TPR and FPR over the samples of one group.
/// A class enters the TPR average when the group holds one of its samples,
/// and the FPR average when the group holds a sample of another class.
fn macro_rates(labels: &[usize], preds: &[usize], classes: usize) -> (f64, f64) {
    let (mut tpr, mut nt, mut fpr, mut nf) = (0.0, 0, 0.0, 0);
    for c in 0..classes {
        let (mut tp, mut pos, mut fp, mut neg) = (0usize, 0usize, 0usize, 0usize);
        for (&y, &p) in labels.iter().zip(preds) {
            if y == c {
                pos += 1;
                tp += usize::from(p == c);
            } else {
                neg += 1;
                fp += usize::from(p == c);
            }
        }
        if pos > 0 {
            tpr += tp as f64 / pos as f64;
            nt += 1;
        }
        if neg > 0 {
            fpr += fp as f64 / neg as f64;
            nf += 1;
        }
    }
    (tpr / nt.max(1) as f64, fpr / nf.max(1) as f64)
}

/// Metrics from labels and predictions.
pub fn metrics_from_predictions(labels: &[usize], preds: &[usize], classes: usize, attrs: &AttributeMap) -> Result<EvalMetrics> {
    if labels.is_empty() {
        return Err(Error::invalid("test", "empty test set"));
    }
    if labels.len() != preds.len() {
        return Err(Error::shape("evaluate", &[labels.len()], &[preds.len()]));
    }
    let wrong = labels.iter().zip(preds).filter(|(a, b)| a != b).count();
    let group_rates = (0..attrs.len())
        .map(|a| {
            let mut split: [(Vec<usize>, Vec<usize>); 2] = Default::default();
            for (&y, &p) in labels.iter().zip(preds) {
                let g = attrs.value(a, y) as usize;
                split[g].0.push(y);
                split[g].1.push(p);
            }
            if split.iter().any(|(ys, _)| ys.is_empty()) {
                return None;
            }
            let r0 = macro_rates(&split[0].0, &split[0].1, classes);
            let r1 = macro_rates(&split[1].0, &split[1].1, classes);
            Some(GroupRates {
                tpr: [r0.0, r1.0],
                fpr: [r0.1, r1.1],
            })
        })
        .collect();
    Ok(EvalMetrics {
        accuracy: 1.0 - wrong as f64 / labels.len() as f64,
        group_rates,
    })
}

pub fn evaluate(
    spec: &ModelSpec,
    params: &Model,
    data: &LabeledDataset,
    test: &[usize],
    kind: LossKind,
    attrs: &AttributeMap,
) -> Result<EvalMetrics> {
    if test.is_empty() {
        return Err(Error::invalid("test", "empty test set"));
    }
    let preds = predict_indices(spec, params, data, test, kind)?;
    let labels: Vec<usize> = test.iter().map(|&i| data.labels()[i]).collect();
    metrics_from_predictions(&labels, &preds, data.classes(), attrs)
}

pub fn accuracy(spec: &ModelSpec, params: &Model, data: &LabeledDataset, idx: &[usize], kind: LossKind) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::invalid("indices", "empty evaluation set"));
    }
    let preds = predict_indices(spec, params, data, idx, kind)?;
    let wrong = idx.iter().zip(&preds).filter(|(&i, &p)| data.labels()[i] != p).count();
    Ok(1.0 - wrong as f64 / idx.len() as f64)
}

/// Dataset, client partition, server validation split and attributes.
#[derive(Clone, Debug)]
pub struct FederatedData {
    pub dataset: LabeledDataset,
    pub plan: PartitionPlan,
    pub validation: Vec<usize>,
    pub attributes: AttributeMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationConfig {
    pub rounds: usize,
    pub participation: f64,
    pub train: TrainConfig,
    pub strategy: StrategyConfig,
    /// Fraction of each client's samples used for training.
    pub local_split: f64,
    /// `None` picks per round via [`ShapleyMode::default_for`].
    pub shapley: Option<ShapleyMode>,
    pub seed: u64,
    /// Worker threads for client training; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::invalid("participation", format!("{} must lie in (0, 1]", self.participation)));
        }
        if !(self.local_split > 0.0 && self.local_split < 1.0) {
            return Err(Error::invalid("local_split", format!("{} must lie in (0, 1)", self.local_split)));
        }
        if self.threads == Some(0) {
            return Err(Error::invalid("threads", "must be at least 1"));
        }
        self.train.validate()?;
        self.strategy.validate()
    }
}

/// The federated run; rounds advance through [`Simulation::step`].
pub struct Simulation<'a> {
    spec: &'a ModelSpec,
    data: &'a FederatedData,
    cfg: SimulationConfig,
    clients: Vec<ClientState>,
    global: Model,
    round: usize,
}

impl<'a> Simulation<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a FederatedData, cfg: SimulationConfig) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        if data.validation.is_empty() {
            return Err(Error::invalid("validation", "server validation split is empty"));
        }
        if data.attributes.classes() != data.dataset.classes() {
            return Err(Error::invalid(
                "attributes",
                format!("cover {} classes, dataset has {}", data.attributes.classes(), data.dataset.classes()),
            ));
        }
        data.plan.validate(data.dataset.len())?;
        let global = spec.init::<Real>(derive_seed(cfg.seed, &[TAG_INIT]))?;
        let ditto = matches!(cfg.strategy, StrategyConfig::Ditto { .. });
        let clients = data
            .plan
            .clients
            .iter()
            .enumerate()
            .map(|(id, idx)| {
                let (train, test) = split_local(idx, cfg.local_split, derive_seed(cfg.seed, &[TAG_SPLIT, id as u64]))?;
                Ok(ClientState {
                    id,
                    train,
                    test,
                    personal: ditto.then(|| global.clone()),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Simulation {
            spec,
            data,
            cfg,
            clients,
            global,
            round: 0,
        })
    }

    pub fn global(&self) -> &Model {
        &self.global
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn round(&self) -> usize {
        self.round
    }

    fn in_pool<R: Send>(&self, f: impl FnOnce() -> R + Send) -> Result<R> {
        match self.cfg.threads {
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::invalid("threads", e.to_string()))?;
                Ok(pool.install(f))
            }
            None => Ok(f()),
        }
    }

    /// Runs one round and returns its record.
    pub fn step(&mut self) -> Result<RoundRecord> {
        let k = self.round;
        let (spec, data, cfg) = (self.spec, self.data, &self.cfg);
        let kind = cfg.train.loss.kind;
        let sampled = sample_clients(
            self.clients.len(),
            cfg.participation,
            &mut stream_rng(cfg.seed, &[TAG_SAMPLE, k as u64]),
        )?;
        let global = &self.global;
        let clients = &self.clients;
        let updates: Vec<ClientUpdate> = self.in_pool(|| {
            sampled
                .par_iter()
                .map(|&n| {
                    let mut rng = stream_rng(cfg.seed, &[TAG_TRAIN, n as u64, k as u64]);
                    local_train(spec, &data.dataset, n, &clients[n].train, global, &cfg.train, None, &mut rng)
                })
                .collect::<Result<_>>()
        })??;

        let before = accuracy(spec, global, &data.dataset, &data.validation, kind)?;
        let mode = cfg.shapley.unwrap_or_else(|| ShapleyMode::default_for(updates.len()));
        let value = |coalition: &[usize]| -> Result<f64> {
            if coalition.is_empty() {
                return Ok(before);
            }
            let subset: Vec<ClientUpdate> = coalition.iter().map(|&i| updates[i].clone()).collect();
            accuracy(spec, &aggregate_fedavg(&subset)?, &data.dataset, &data.validation, kind)
        };
        let shapley =
            self.in_pool(|| shapley_contributions(updates.len(), value, mode, derive_seed(cfg.seed, &[TAG_SHAPLEY, k as u64])))??;

        let new_global = match cfg.strategy {
            StrategyConfig::FedAvg | StrategyConfig::Ditto { .. } => aggregate_fedavg(&updates)?,
            StrategyConfig::QFedAvg { q, step } => aggregate_qfedavg(global, &updates, q, step)?,
        };

        let personal: Option<Vec<Model>> = match cfg.strategy {
            StrategyConfig::Ditto { lambda, personal_epochs } => {
                let personal_cfg = TrainConfig {
                    epochs: personal_epochs,
                    ..cfg.train
                };
                let anchor = &new_global;
                let trained: Vec<Model> = self.in_pool(|| {
                    sampled
                        .par_iter()
                        .map(|&n| {
                            let v = clients[n].personal.as_ref().expect("ditto clients carry a personal model");
                            let mut rng = stream_rng(cfg.seed, &[TAG_PERSONAL, n as u64, k as u64]);
                            let prox = Proximal { anchor, lambda };
                            local_train(spec, &data.dataset, n, &clients[n].train, v, &personal_cfg, Some(prox), &mut rng)
                                .map(|u| u.params)
                        })
                        .collect::<Result<_>>()
                })??;
                Some(trained)
            }
            _ => None,
        };

        let attrs = &data.attributes;
        let records: Vec<ClientRecord> = self.in_pool(|| {
            sampled
                .par_iter()
                .enumerate()
                .zip(&shapley)
                .map(|((i, &n), &s)| {
                    let test = &clients[n].test;
                    let global_metrics = evaluate(spec, &new_global, &data.dataset, test, kind, attrs)?;
                    let own_metrics = match &personal {
                        Some(models) => evaluate(spec, &models[i], &data.dataset, test, kind, attrs)?,
                        None => global_metrics.clone(),
                    };
                    Ok(ClientRecord {
                        client_id: n,
                        accuracy: own_metrics.accuracy,
                        reward: global_metrics.accuracy,
                        shapley: s,
                        equalized_odds: own_metrics.equalized_odds(),
                    })
                })
                .collect::<Result<_>>()
        })??;

        if let Some(models) = personal {
            for (&n, v) in sampled.iter().zip(models) {
                self.clients[n].personal = Some(v);
            }
        }
        self.global = new_global;
        self.round += 1;
        Ok(RoundRecord {
            round: k,
            attributes: data.attributes.names().map(str::to_string).collect(),
            clients: records,
        })
    }

    /// Runs every configured round, handing each record to `sink` as soon
    /// as it exists. Records already handed over survive a later failure.
    pub fn run(&mut self, mut sink: impl FnMut(RoundRecord) -> Result<()>) -> Result<()> {
        while self.round < self.cfg.rounds {
            let record = self.step()?;
            sink(record)?;
        }
        Ok(())
    }
}

/// All round records of a run.
pub fn run_simulation(spec: &ModelSpec, data: &FederatedData, cfg: SimulationConfig) -> Result<Vec<RoundRecord>> {
    let mut out = Vec::new();
    Simulation::new(spec, data, cfg)?.run(|r| {
        out.push(r);
        Ok(())
    })?;
    Ok(out)
}
