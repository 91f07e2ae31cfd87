//! Optimizer, training loop and evaluation.

use crate::autodiff::{AutodiffError, Tape};
use crate::data::{GraphDataset, Split};
use crate::model::{argmax_rows, forward, predict, Dropout, ModelConfig, ModelError, ModelParams, Prepared, Task};
use crate::params::{flatten, ParamKind, ParamTree};
use crate::seed::{streams, SeedSplitter};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },
    #[error("epoch {epoch}: {source}")]
    Gradient {
        epoch: usize,
        #[source]
        source: AutodiffError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dataset has no training examples")]
    NoTrainingData,
    #[error("invalid training configuration: field `{field}`: {msg}")]
    Config { field: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied to weight matrices only.
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adaptive-moment optimizer with bias correction and decoupled decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: OptimConfig,
    pub step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    decay: Vec<bool>,
}

impl Adam {
    pub fn new<P: ParamTree<Array2<f64>>>(params: &P, cfg: OptimConfig) -> Self {
        let leaves = flatten(params);
        Self {
            cfg,
            step: 0,
            m: leaves.iter().map(|(_, _, a)| Array2::zeros(a.dim())).collect(),
            v: leaves.iter().map(|(_, _, a)| Array2::zeros(a.dim())).collect(),
            decay: leaves.iter().map(|(_, k, _)| *k == ParamKind::Matrix).collect(),
        }
    }

    /// One update; `grads` are in traversal order.
    pub fn update<P: ParamTree<Array2<f64>>>(&mut self, params: &mut P, grads: &[Array2<f64>]) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut i = 0;
        params.visit_mut(&mut |p| {
            let g = &grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let wd = if self.decay[i] { c.weight_decay } else { 0.0 };
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= c.lr * (mhat / (vhat.sqrt() + c.eps) + wd * *p);
            });
            i += 1;
        });
    }
}

/// How node-task training examples are grouped into optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeBatching {
    /// Shuffled mini-batches of `batch_size` training nodes.
    MiniBatch,
    /// One step per epoch over every training node.
    FullGraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub node_batching: NodeBatching,
    /// Coefficient of an explicit squared-norm penalty on weight matrices
    /// in the loss (decay is otherwise decoupled in the optimizer).
    pub l2_penalty: f64,
    pub optimizer: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            node_batching: NodeBatching::MiniBatch,
            l2_penalty: 0.0,
            optimizer: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, msg: &str| {
            Err(TrainError::Config {
                field,
                msg: msg.to_string(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("beta1", "betas must lie in [0, 1)");
        }
        if !(o.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if !(o.weight_decay >= 0.0) || !(self.l2_penalty >= 0.0) {
            return bad("weight_decay", "decay coefficients must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    /// Wall-clock seconds spent in the epoch; kept out of the main CSV.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (highest validation accuracy).
    pub best_epoch: usize,
}

impl TrainReport {
    /// Deterministic metrics CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,train_acc,val_acc,test_acc\n");
        for r in &self.records {
            writeln!(s, "{},{},{},{},{}", r.epoch, r.loss, r.train_acc, r.val_acc, r.test_acc).expect("string write");
        }
        s
    }

    /// Wall-clock CSV (varies between runs).
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,seconds\n");
        for r in &self.records {
            writeln!(s, "{},{}", r.epoch, r.seconds).expect("string write");
        }
        s
    }

    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("at least one record")
    }

    pub fn best(&self) -> &EpochRecord {
        self.records
            .iter()
            .find(|r| r.epoch == self.best_epoch)
            .unwrap_or_else(|| self.last())
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub best: ModelParams<Array2<f64>>,
    pub last: ModelParams<Array2<f64>>,
}

/// Fills dataset-derived fields of `cfg`.
pub fn fit_config(cfg: &ModelConfig, d: &GraphDataset) -> ModelConfig {
    let mut c = cfg.clone();
    if c.num_classes == 0 {
        c.num_classes = d.num_classes();
    }
    if c.input_dim == 0 {
        c.input_dim = d.feature_dim();
    }
    c.task = match d {
        GraphDataset::Node(_) => Task::Node,
        GraphDataset::Graph(_) => Task::Graph,
    };
    c
}

const EVAL_CHUNK: usize = 256;

/// Fraction of `indices` whose argmax prediction equals the label; `0` for
/// an empty set.
pub fn evaluate(params: &ModelParams<Array2<f64>>, cfg: &ModelConfig, data: &Prepared, indices: &[usize]) -> Result<f64> {
    if data.feature_dim() != cfg.input_dim {
        return Err(ModelError::Dimension(format!(
            "dataset has {} features, model expects {}",
            data.feature_dim(),
            cfg.input_dim
        ))
        .into());
    }
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = data.batch(chunk);
        let logits = predict(params, cfg, &batch)?;
        if logits.ncols() <= *batch.labels.iter().max().unwrap_or(&0) {
            return Err(ModelError::Dimension(format!(
                "model has {} classes but labels reach {}",
                logits.ncols(),
                batch.labels.iter().max().unwrap_or(&0)
            ))
            .into());
        }
        correct += argmax_rows(&logits)
            .iter()
            .zip(batch.labels.iter())
            .filter(|(a, b)| a == b)
            .count();
    }
    Ok(correct as f64 / indices.len() as f64)
}

fn eval_loss(params: &ModelParams<Array2<f64>>, cfg: &ModelConfig, data: &Prepared, indices: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = data.batch(chunk);
        let mut tape = Tape::new();
        let p = params.map(&mut |a| tape.constant(a.clone()));
        let out = forward(&mut tape, &p, cfg, &batch, None)?;
        let ce = tape.cross_entropy(out.logits, batch.labels.clone());
        total += tape.scalar(ce) * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

struct Splits {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

fn record(
    params: &ModelParams<Array2<f64>>,
    cfg: &ModelConfig,
    data: &Prepared,
    s: &Splits,
    epoch: usize,
    loss: f64,
    seconds: f64,
) -> Result<EpochRecord> {
    Ok(EpochRecord {
        epoch,
        loss,
        train_acc: evaluate(params, cfg, data, &s.train)?,
        val_acc: evaluate(params, cfg, data, &s.val)?,
        test_acc: evaluate(params, cfg, data, &s.test)?,
        seconds,
    })
}

/// Capsules leaving the manifold mid-training mean the numbers blew up.
fn at_epoch(e: ModelError, epoch: usize) -> TrainError {
    match e {
        ModelError::OffManifold { .. } => TrainError::Divergence { epoch },
        other => TrainError::Model(other),
    }
}

/// Trains from a seeded initialization and keeps the best-validation
/// parameters. With `epochs = 0` the report holds the initial metrics only;
/// otherwise it holds one row per epoch `1..=epochs`.
pub fn train(dataset: &GraphDataset, model: &ModelConfig, tc: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    tc.validate()?;
    let cfg = fit_config(model, dataset);
    let data = Prepared::new(dataset)?;
    let splits = Splits {
        train: dataset.indices(Split::Train),
        val: dataset.indices(Split::Val),
        test: dataset.indices(Split::Test),
    };
    if splits.train.is_empty() {
        return Err(TrainError::NoTrainingData);
    }
    let mut params = ModelParams::init(&cfg, seed)?;
    let mut opt = Adam::new(&params, tc.optimizer);
    let seeds = SeedSplitter::new(seed);
    let mut shuffle_rng = seeds.rng(streams::SHUFFLE);
    let mut drop_rng = seeds.rng(streams::DROPOUT);
    let decay_mask: Vec<bool> = flatten(&params).iter().map(|(_, k, _)| *k == ParamKind::Matrix).collect();

    let mut records = Vec::new();
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_val = f64::NEG_INFINITY;
    if tc.epochs == 0 {
        let t0 = Instant::now();
        let loss = eval_loss(&params, &cfg, &data, &splits.train)?;
        records.push(record(&params, &cfg, &data, &splits, 0, loss, t0.elapsed().as_secs_f64())?);
    }
    let full = cfg.task == Task::Node && tc.node_batching == NodeBatching::FullGraph;
    let mut order = splits.train.clone();
    for epoch in 1..=tc.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let step = if full { order.len() } else { tc.batch_size };
        let mut loss_sum = 0.0;
        for chunk in order.chunks(step) {
            let batch = data.batch(chunk);
            let mut tape = Tape::new();
            let p = params.bind(&mut tape);
            let drop = (cfg.dropout > 0.0).then(|| Dropout {
                rate: cfg.dropout,
                rng: &mut drop_rng,
            });
            let out = forward(&mut tape, &p, &cfg, &batch, drop).map_err(|e| at_epoch(e, epoch))?;
            let mut objective = tape.cross_entropy(out.logits, batch.labels.clone());
            if tc.l2_penalty > 0.0 {
                let leaves = flatten(&p);
                for ((_, _, &v), &dec) in leaves.iter().zip(&decay_mask) {
                    if dec {
                        let sq = tape.square(v);
                        let s = tape.sum_all(sq);
                        let s = tape.scale(s, tc.l2_penalty);
                        objective = tape.add(objective, s);
                    }
                }
            }
            let value = tape.scalar(objective);
            if !value.is_finite() {
                return Err(TrainError::Divergence { epoch });
            }
            loss_sum += value * chunk.len() as f64;
            let grads = tape
                .backward(objective)
                .map_err(|source| TrainError::Gradient { epoch, source })?;
            let flat: Vec<_> = flatten(&p)
                .into_iter()
                .map(|(_, _, &v)| grads.get_or_zeros(v, tape.shape(v)))
                .collect();
            opt.update(&mut params, &flat);
        }
        if !params.all_finite() {
            return Err(TrainError::Divergence { epoch });
        }
        let rec = record(
            &params,
            &cfg,
            &data,
            &splits,
            epoch,
            loss_sum / order.len() as f64,
            t0.elapsed().as_secs_f64(),
        )
        .map_err(|e| match e {
            TrainError::Model(m) => at_epoch(m, epoch),
            other => other,
        })?;
        let score = if splits.val.is_empty() { rec.train_acc } else { rec.val_acc };
        if score > best_val {
            best_val = score;
            best_epoch = epoch;
            best = params.clone();
        }
        records.push(rec);
    }
    Ok(TrainOutcome {
        report: TrainReport {
            seed,
            records,
            best_epoch,
        },
        best,
        last: params,
    })
}
