//! Run orchestration behind the command-line tool: training runs, evaluation,
//! embedding export, synthetic data generation and ablation grids.
//!
//! Output directory of a training run:
//!
//! ```text
//! report.csv            epoch,loss,train_acc,val_acc,test_acc (deterministic)
//! timing.csv            epoch,seconds
//! resolved_config.toml  every setting, with dataset-derived fields filled
//! checkpoint.prcaps     parameters of the best-validation epoch
//! ```

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, Grid, RunConfig};
use crate::data::io::{load_any, save_node_dataset};
use crate::data::synthetic::{generate_synthetic, SyntheticSpec};
use crate::data::{stratified_split, DataError, GraphDataset, Split};
use crate::model::{embed, ClassifierKind, ModelConfig, ModelError, Prepared};
use crate::policy::NumericPolicy;
use crate::routing::RoutingMode;
use crate::seed::{streams, SeedSplitter};
use crate::training::{evaluate, fit_config, train, TrainError, TrainOutcome, TrainReport};
use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const REPORT_FILE: &str = "report.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const SNAPSHOT_FILE: &str = "resolved_config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.prcaps";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RUNS_FILE: &str = "runs.csv";
pub const SPEC_FILE: &str = "synthetic.toml";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("output directory {0} is not empty; pass --overwrite to reuse it")]
    OutputExists(PathBuf),
    #[error("checkpoint does not match the dataset: {0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, RunError>;

fn model_exit_code(e: &ModelError) -> i32 {
    match e {
        ModelError::OffManifold { .. } | ModelError::Geometry(_) => 3,
        _ => 2,
    }
}

impl RunError {
    /// Process exit code: 2 configuration or validation, 3 numeric
    /// divergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(ConfigError::Io { .. }) => 4,
            RunError::Config(_) => 2,
            RunError::Data(DataError::MissingFile(_) | DataError::Io { .. }) => 4,
            RunError::Data(_) => 2,
            RunError::Train(TrainError::Divergence { .. } | TrainError::Gradient { .. }) => 3,
            RunError::Train(TrainError::Model(m)) => model_exit_code(m),
            RunError::Train(_) => 2,
            RunError::Model(m) => model_exit_code(m),
            RunError::Checkpoint(CheckpointError::Io { .. }) => 4,
            RunError::Checkpoint(_) => 2,
            RunError::Io { .. } => 4,
            RunError::OutputExists(_) | RunError::Mismatch(_) => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

/// Creates `dir`, refusing a non-empty existing directory unless
/// `overwrite` is set. Files written later replace their namesakes.
pub fn prepare_output(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(io_err(dir))?;
        if entries.next().is_some() && !overwrite {
            return Err(RunError::OutputExists(dir.to_path_buf()));
        }
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Installs the configured numeric policy, which must agree with any policy
/// already active in the process.
pub fn install_policy(p: &NumericPolicy) -> Result<()> {
    if NumericPolicy::install(*p) || NumericPolicy::global() == p {
        Ok(())
    } else {
        Err(ConfigError::invalid("policy", "differs from the policy already active in this process").into())
    }
}

/// Loads or generates the configured dataset and assigns a stratified split
/// (from the run seed's `split` stream) when it has none.
pub fn load_dataset(cfg: &RunConfig) -> Result<GraphDataset> {
    let mut d = match (&cfg.data.path, &cfg.data.synthetic) {
        (Some(p), _) => load_any(p)?,
        (None, Some(spec)) => GraphDataset::Node(generate_synthetic(spec)?),
        (None, None) => return Err(ConfigError::invalid("data.path", "no dataset given").into()),
    };
    if !d.has_splits() {
        let mut rng = SeedSplitter::new(cfg.seed).rng(streams::SPLIT);
        let s = stratified_split(
            d.labels(),
            d.num_classes(),
            cfg.data.train_fraction,
            cfg.data.val_fraction,
            &mut rng,
        );
        *d.splits_mut() = s;
    }
    if cfg.data.l2_normalize {
        d.l2_normalize_features();
    }
    Ok(d)
}

/// `cfg` with dataset-derived model fields filled and validated.
pub fn resolve(cfg: &RunConfig, d: &GraphDataset) -> Result<RunConfig> {
    let mut r = cfg.clone();
    r.model = fit_config(&cfg.model, d);
    r.model.validate().map_err(|e| match e {
        ModelError::Config { field, msg } => ConfigError::invalid(format!("model.{field}"), msg),
        other => ConfigError::invalid("model", other.to_string()),
    })?;
    Ok(r)
}

/// Trains the resolved configuration on `d`.
pub fn train_resolved(cfg: &RunConfig, d: &GraphDataset) -> Result<TrainOutcome> {
    Ok(train(d, &cfg.model, &cfg.train, cfg.seed)?)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub report: TrainReport,
}

/// Trains and writes report, timing, snapshot and checkpoint to the output
/// directory.
pub fn run_train(cfg: &RunConfig, overwrite: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = cfg
        .output_dir
        .clone()
        .ok_or_else(|| ConfigError::invalid("output_dir", "no output directory given"))?;
    install_policy(&cfg.policy)?;
    let d = load_dataset(cfg)?;
    let resolved = resolve(cfg, &d)?;
    prepare_output(&out, overwrite)?;
    write_file(&out.join(SNAPSHOT_FILE), resolved.to_toml_string()?)?;
    let outcome = train_resolved(&resolved, &d)?;
    write_file(&out.join(REPORT_FILE), outcome.report.to_csv())?;
    write_file(&out.join(TIMING_FILE), outcome.report.timing_csv())?;
    Checkpoint {
        model: resolved.model.clone(),
        policy: resolved.policy,
        seed: resolved.seed,
        epoch: outcome.report.best_epoch,
        params: outcome.best,
    }
    .save(&out.join(CHECKPOINT_FILE))?;
    Ok(TrainSummary {
        output_dir: out,
        report: outcome.report,
    })
}

fn check_compatible(ck: &Checkpoint, d: &GraphDataset) -> Result<()> {
    let fitted = fit_config(
        &ModelConfig {
            num_classes: 0,
            input_dim: 0,
            ..ck.model.clone()
        },
        d,
    );
    if fitted.input_dim != ck.model.input_dim {
        return Err(RunError::Mismatch(format!(
            "dataset has {} features, checkpoint expects {}",
            fitted.input_dim, ck.model.input_dim
        )));
    }
    if fitted.num_classes > ck.model.num_classes {
        return Err(RunError::Mismatch(format!(
            "dataset has {} classes, checkpoint has {}",
            fitted.num_classes, ck.model.num_classes
        )));
    }
    if fitted.task != ck.model.task {
        return Err(RunError::Mismatch(format!(
            "dataset is a {:?} task, checkpoint was trained for {:?}",
            fitted.task, ck.model.task
        )));
    }
    Ok(())
}

fn load_for_inference(cfg: &RunConfig, checkpoint: &Path) -> Result<(Checkpoint, GraphDataset)> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    install_policy(&ck.policy)?;
    let d = load_dataset(cfg)?;
    check_compatible(&ck, &d)?;
    Ok((ck, d))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalSummary {
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

/// Accuracy of a checkpoint on each split of the configured dataset.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalSummary> {
    let (ck, d) = load_for_inference(cfg, checkpoint)?;
    let data = Prepared::new(&d)?;
    let acc = |s| evaluate(&ck.params, &ck.model, &data, &d.indices(s));
    Ok(EvalSummary {
        train_acc: acc(Split::Train)?,
        val_acc: acc(Split::Val)?,
        test_acc: acc(Split::Test)?,
    })
}

/// Embedding CSV: `id,label,z0,..` with one row per node (node tasks) or per
/// graph (graph tasks). `z` is the classifier input of the predicted class:
/// the class-capsule tangent vector for pseudo-Riemannian models.
pub fn embeddings_csv(ck: &Checkpoint, d: &GraphDataset) -> Result<String> {
    let data = Prepared::new(d)?;
    let labels = d.labels();
    let all: Vec<usize> = (0..labels.len()).collect();
    let mut out = String::new();
    for chunk in all.chunks(256) {
        let (_, z) = embed(&ck.params, &ck.model, &data.batch(chunk))?;
        if out.is_empty() {
            out.push_str("id,label");
            for c in 0..z.ncols() {
                write!(out, ",z{c}").expect("string write");
            }
            out.push('\n');
        }
        for (row, &i) in z.rows().into_iter().zip(chunk) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Dimension(format!("non-finite embedding for example {i}")).into());
            }
            write!(out, "{i},{}", labels[i]).expect("string write");
            for v in row {
                write!(out, ",{v}").expect("string write");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Writes `embeddings.csv` into `out_dir`; returns the number of rows.
pub fn run_export(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path, overwrite: bool) -> Result<usize> {
    let (ck, d) = load_for_inference(cfg, checkpoint)?;
    let csv = embeddings_csv(&ck, &d)?;
    prepare_output(out_dir, overwrite)?;
    write_file(&out_dir.join(EMBEDDINGS_FILE), &csv)?;
    Ok(csv.lines().count() - 1)
}

/// Generates a synthetic node dataset into `out_dir`; returns the summary
/// line `"<n> nodes <m> edges <c> classes"`.
pub fn run_gen_synthetic(spec: &SyntheticSpec, out_dir: &Path, overwrite: bool) -> Result<String> {
    spec.validate()?;
    let d = generate_synthetic(spec)?;
    prepare_output(out_dir, overwrite)?;
    save_node_dataset(&d, out_dir)?;
    let toml = toml::to_string(spec).map_err(|e| ConfigError::Parse(e.to_string()))?;
    write_file(&out_dir.join(SPEC_FILE), toml)?;
    Ok(format!(
        "{} nodes {} edges {} classes",
        d.graph.node_count,
        d.graph.edges.len(),
        d.num_classes
    ))
}

/// One configuration of an ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub model: ModelConfig,
}

fn cell(name: impl Into<String>, base: &ModelConfig, f: impl FnOnce(&mut ModelConfig)) -> Cell {
    let mut model = base.clone();
    f(&mut model);
    Cell {
        name: name.into(),
        model,
    }
}

/// Cells of the configured grid, in output order.
pub fn grid_cells(cfg: &RunConfig) -> Vec<Cell> {
    let base = &cfg.model;
    let set = |mode, cls| {
        move |m: &mut ModelConfig| {
            m.routing.mode = mode;
            m.classifier = cls;
        }
    };
    match cfg.ablation.grid {
        Grid::RoutingClassifier => {
            let mut cells = Vec::new();
            for mode in [RoutingMode::Euclidean, RoutingMode::Pcr, RoutingMode::Acr] {
                for cls in [ClassifierKind::Linear, ClassifierKind::Prcc] {
                    let name = format!("{}+{}", mode_name(mode), cls);
                    cells.push(cell(name, base, set(mode, cls)));
                }
            }
            cells
        }
        Grid::Components => vec![
            cell("pr+caps", base, set(RoutingMode::Acr, ClassifierKind::Prcc)),
            cell("pr_only", base, set(RoutingMode::None, ClassifierKind::Prcc)),
            cell("caps_only", base, set(RoutingMode::Euclidean, ClassifierKind::Linear)),
            cell("neither", base, set(RoutingMode::None, ClassifierKind::Linear)),
        ],
        Grid::KSweep => cfg
            .ablation
            .k_values
            .iter()
            .map(|&k| cell(format!("K={k}"), base, |m| m.routing.perspectives = k))
            .collect(),
        Grid::TSweep => cfg
            .ablation
            .t_values
            .iter()
            .map(|&t| cell(format!("T={t}"), base, |m| m.routing.iterations = t))
            .collect(),
        Grid::DimSweep => cfg
            .ablation
            .dim_values
            .iter()
            .map(|&[s, t]| {
                cell(format!("s={s},t={t}"), base, |m| {
                    m.space_dim = s;
                    m.time_dim = t;
                })
            })
            .collect(),
    }
}

fn mode_name(m: RoutingMode) -> &'static str {
    match m {
        RoutingMode::Euclidean => "euclidean",
        RoutingMode::Pcr => "pcr",
        RoutingMode::Acr => "acr",
        RoutingMode::None => "none",
    }
}

/// Configuration of run `i` of a grid: seed `seed + i`, and the synthetic
/// generator reseeded the same way when `vary_data` is set.
pub fn run_config(cfg: &RunConfig, model: &ModelConfig, i: usize) -> RunConfig {
    let mut r = cfg.clone();
    r.seed = cfg.seed.wrapping_add(i as u64) & (i64::MAX as u64);
    r.model = model.clone();
    if cfg.ablation.vary_data {
        if let Some(spec) = &mut r.data.synthetic {
            spec.seed = spec.seed.wrapping_add(i as u64) & (i64::MAX as u64);
        }
    }
    r
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub cell: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub name: String,
    pub model: ModelConfig,
    pub runs: usize,
    pub mean_test: f64,
    pub std_test: f64,
    pub mean_val: f64,
    pub std_val: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    pub runs: Vec<RunRow>,
    pub cells: Vec<CellSummary>,
    /// Per-run resolved configuration and report, in `runs` order.
    pub details: Vec<(RunConfig, TrainReport)>,
}

impl AblationOutcome {
    pub fn cell(&self, name: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.name == name)
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "cell,routing,classifier,perspectives,iterations,space_dim,time_dim,runs,mean_test_acc,std_test_acc,mean_val_acc,std_val_acc\n",
        );
        for c in &self.cells {
            let m = &c.model;
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                c.name,
                mode_name(m.routing.mode),
                m.classifier,
                m.routing.perspectives,
                m.routing.iterations,
                m.space_dim,
                m.time_dim,
                c.runs,
                c.mean_test,
                c.std_test,
                c.mean_val,
                c.std_val
            )
            .expect("string write");
        }
        s
    }

    pub fn runs_csv(&self) -> String {
        let mut s = String::from("cell,seed,best_epoch,train_acc,val_acc,test_acc\n");
        for r in &self.runs {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.cell, r.seed, r.best_epoch, r.train_acc, r.val_acc, r.test_acc
            )
            .expect("string write");
        }
        s
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every cell of the configured grid for `ablation.seeds` seeds.
/// Runs execute on up to `threads` workers (all cores when `None`); results
/// are identical for any thread count.
pub fn run_ablation(cfg: &RunConfig, threads: Option<usize>) -> Result<AblationOutcome> {
    cfg.validate()?;
    install_policy(&cfg.policy)?;
    let cells = grid_cells(cfg);
    let seeds = cfg.ablation.seeds;
    let datasets = (0..seeds)
        .map(|i| load_dataset(&run_config(cfg, &cfg.model, i)))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..seeds).map(move |i| (c, i))).collect();
    let run = |&(c, i): &(usize, usize)| -> Result<(RunConfig, TrainReport)> {
        let r = resolve(&run_config(cfg, &cells[c].model, i), &datasets[i])?;
        let outcome = train_resolved(&r, &datasets[i])?;
        Ok((r, outcome.report))
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| ConfigError::invalid("PRCAPS_NUM_THREADS", e.to_string()))?;
    let details = pool.install(|| jobs.par_iter().map(run).collect::<Result<Vec<_>>>())?;

    let runs: Vec<RunRow> = jobs
        .iter()
        .zip(&details)
        .map(|(&(c, _), (r, rep))| {
            let b = rep.best();
            RunRow {
                cell: cells[c].name.clone(),
                seed: r.seed,
                best_epoch: rep.best_epoch,
                train_acc: b.train_acc,
                val_acc: b.val_acc,
                test_acc: b.test_acc,
            }
        })
        .collect();
    let summaries = cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let rows: Vec<&RunRow> = jobs.iter().zip(&runs).filter(|((k, _), _)| *k == c).map(|(_, r)| r).collect();
            let (mean_test, std_test) = mean_std(&rows.iter().map(|r| r.test_acc).collect::<Vec<_>>());
            let (mean_val, std_val) = mean_std(&rows.iter().map(|r| r.val_acc).collect::<Vec<_>>());
            CellSummary {
                name: cell.name.clone(),
                model: cell.model.clone(),
                runs: rows.len(),
                mean_test,
                std_test,
                mean_val,
                std_val,
            }
        })
        .collect();
    Ok(AblationOutcome {
        runs,
        cells: summaries,
        details,
    })
}

/// Runs the grid and writes `summary.csv`, `runs.csv`, the grid snapshot,
/// and one `runs/<cell>/seed<i>/` directory per run holding its report and
/// snapshot.
pub fn run_ablate(cfg: &RunConfig, threads: Option<usize>, overwrite: bool) -> Result<AblationOutcome> {
    cfg.validate()?;
    let out = cfg
        .output_dir
        .clone()
        .ok_or_else(|| ConfigError::invalid("output_dir", "no output directory given"))?;
    prepare_output(&out, overwrite)?;
    let outcome = run_ablation(cfg, threads)?;
    write_file(&out.join(SNAPSHOT_FILE), cfg.to_toml_string()?)?;
    write_file(&out.join(SUMMARY_FILE), outcome.summary_csv())?;
    write_file(&out.join(RUNS_FILE), outcome.runs_csv())?;
    for (row, (r, rep)) in outcome.runs.iter().zip(&outcome.details) {
        let dir = out.join("runs").join(sanitize(&row.cell)).join(format!("seed{}", row.seed));
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut snap = r.clone();
        snap.output_dir = Some(dir.clone());
        write_file(&dir.join(SNAPSHOT_FILE), snap.to_toml_string()?)?;
        write_file(&dir.join(REPORT_FILE), rep.to_csv())?;
    }
    Ok(outcome)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::io::load_node_dataset;
    use tempfile::tempdir;

    fn tiny(out: &Path) -> RunConfig {
        let mut c = RunConfig::default();
        c.data.synthetic = Some(SyntheticSpec::cycle_clique(2, 2, 4, 4));
        c.model.encoder_dim = 8;
        c.model.space_dim = 2;
        c.model.time_dim = 2;
        c.model.capsule_layers = 2;
        c.model.primary_capsules = 3;
        c.model.hidden_capsules = 3;
        c.model.routing.perspectives = 2;
        c.model.routing.iterations = 2;
        c.train.epochs = 3;
        c.output_dir = Some(out.to_path_buf());
        c
    }

    #[test]
    fn train_writes_artifacts_and_refuses_to_clobber() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = tiny(&out);
        let s = run_train(&cfg, false).unwrap();
        assert_eq!(s.report.records.len(), 3);
        for f in [REPORT_FILE, TIMING_FILE, SNAPSHOT_FILE, CHECKPOINT_FILE] {
            assert!(out.join(f).exists(), "{f}");
        }
        let err = run_train(&cfg, false).unwrap_err();
        assert!(matches!(err, RunError::OutputExists(_)));
        assert_eq!(err.exit_code(), 2);
        let before = std::fs::read(out.join(REPORT_FILE)).unwrap();
        run_train(&cfg, true).unwrap();
        assert_eq!(std::fs::read(out.join(REPORT_FILE)).unwrap(), before);
    }

    #[test]
    fn snapshot_reproduces_the_report() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a");
        run_train(&tiny(&a), false).unwrap();
        let mut snap = RunConfig::from_file(&a.join(SNAPSHOT_FILE)).unwrap();
        let b = dir.path().join("b");
        snap.output_dir = Some(b.clone());
        run_train(&snap, false).unwrap();
        assert_eq!(
            std::fs::read(a.join(REPORT_FILE)).unwrap(),
            std::fs::read(b.join(REPORT_FILE)).unwrap()
        );
    }

    #[test]
    fn eval_and_export_agree_with_the_checkpoint() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = tiny(&out);
        let s = run_train(&cfg, false).unwrap();
        let ck = out.join(CHECKPOINT_FILE);
        let e = run_eval(&cfg, &ck).unwrap();
        let best = s.report.best();
        assert_eq!((e.train_acc, e.val_acc, e.test_acc), (best.train_acc, best.val_acc, best.test_acc));
        let exp = dir.path().join("emb");
        let rows = run_export(&cfg, &ck, &exp, false).unwrap();
        let d = generate_synthetic(cfg.data.synthetic.as_ref().unwrap()).unwrap();
        assert_eq!(rows, d.graph.node_count);
        let text = std::fs::read_to_string(exp.join(EMBEDDINGS_FILE)).unwrap();
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 2 + 4);
            assert!(cols[2..].iter().all(|v| v.parse::<f64>().unwrap().is_finite()));
        }
    }

    #[test]
    fn export_rejects_a_mismatched_dataset() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("run");
        run_train(&tiny(&out), false).unwrap();
        let mut other = tiny(&out);
        other.data.synthetic = Some(SyntheticSpec::tree(3, 3));
        let err = run_export(&other, &out.join(CHECKPOINT_FILE), &dir.path().join("e"), false).unwrap_err();
        assert!(matches!(err, RunError::Mismatch(_)), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn gen_synthetic_summary_and_reload() {
        let dir = tempdir().unwrap();
        let spec = SyntheticSpec::tree(3, 2).with_seed(4);
        let line = run_gen_synthetic(&spec, dir.path(), false).unwrap();
        assert_eq!(line, "15 nodes 14 edges 2 classes");
        let back = load_node_dataset(dir.path()).unwrap();
        assert_eq!(back, generate_synthetic(&spec).unwrap());
    }

    #[test]
    fn routing_classifier_grid_has_six_cells_and_components_four() {
        let mut c = RunConfig::default();
        assert_eq!(grid_cells(&c).len(), 6);
        c.ablation.grid = Grid::Components;
        let cells = grid_cells(&c);
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[0].model.routing.mode, RoutingMode::Acr);
        assert_eq!(cells[3].model.routing.mode, RoutingMode::None);
        c.ablation.grid = Grid::KSweep;
        let ks: Vec<usize> = grid_cells(&c).iter().map(|c| c.model.routing.perspectives).collect();
        assert_eq!(ks, vec![1, 2, 4, 8]);
    }

    #[test]
    fn ablation_is_thread_count_independent() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.ablation.seeds = 2;
        cfg.train.epochs = 2;
        let a = run_ablation(&cfg, Some(1)).unwrap();
        let b = run_ablation(&cfg, Some(3)).unwrap();
        assert_eq!(a.summary_csv(), b.summary_csv());
        assert_eq!(a.runs.len(), 12);
        assert!(a.cells.iter().all(|c| (0.0..=1.0).contains(&c.mean_test)));
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
