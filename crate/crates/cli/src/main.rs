//! `prcaps`: train, evaluate and ablate pseudo-Riemannian capsule networks.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 numeric
//! divergence, 4 I/O error.

use clap::{Args, Parser, Subcommand};
use prcaps_core::config::{ConfigError, Grid, Overrides, RunConfig};
use prcaps_core::data::synthetic::{Family, Motif, SyntheticSpec};
use prcaps_core::experiment::{
    run_ablate, run_eval, run_export, run_gen_synthetic, run_train, RunError, EMBEDDINGS_FILE, SNAPSHOT_FILE,
};
use prcaps_core::model::ClassifierKind;
use prcaps_core::routing::RoutingMode;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const THREADS_VAR: &str = "PRCAPS_NUM_THREADS";

#[derive(Parser)]
#[command(name = "prcaps", version, about = "Pseudo-Riemannian capsule networks for graph classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write report, checkpoint and config snapshot.
    Train(RunArgs),
    /// Report split accuracies of a checkpoint.
    Eval(InferArgs),
    /// Run an ablation grid over several seeds.
    Ablate(AblateArgs),
    /// Generate a synthetic node-classification dataset.
    GenSynthetic(GenArgs),
    /// Write per-node tangent embeddings of a checkpoint to CSV.
    ExportEmbeddings(InferArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_routing)]
    routing: Option<RoutingMode>,
    #[arg(long)]
    classifier: Option<ClassifierKind>,
    /// Routing perspectives.
    #[arg(long = "K")]
    k: Option<usize>,
    /// Routing iterations.
    #[arg(long = "T")]
    t: Option<usize>,
    /// Space and time dimensions, as `s,t`.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<(usize, usize)>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
    /// Dataset path; replaces any dataset named in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Scale feature rows to unit L2 norm.
    #[arg(long)]
    l2_normalize: bool,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// routing_classifier, components, k_sweep, t_sweep or dim_sweep.
    #[arg(long)]
    grid: Option<Grid>,
    /// Seeds per cell.
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run configuration naming the dataset; defaults to the snapshot next
    /// to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (export only).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct GenArgs {
    /// Start from the `[data.synthetic]` table of this configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// TREE, CYCLE_CLIQUE or MIXED.
    #[arg(long)]
    family: Option<Family>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    branching: Option<usize>,
    #[arg(long)]
    clique_size: Option<usize>,
    #[arg(long)]
    cycle_length: Option<usize>,
    #[arg(long)]
    cycles: Option<usize>,
    #[arg(long)]
    cliques: Option<usize>,
    /// Comma-separated MIXED motif pattern (clique, cycle, none).
    #[arg(long, value_delimiter = ',')]
    motifs: Option<Vec<Motif>>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overwrite: bool,
}

fn parse_routing(s: &str) -> Result<RoutingMode, String> {
    match s.parse()? {
        RoutingMode::None => Err("routing must be one of euclidean, pcr, acr".into()),
        m => Ok(m),
    }
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected `s,t`")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(a)?, p(b)?))
}

fn base_config(path: Option<&Path>) -> Result<RunConfig, RunError> {
    Ok(match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    })
}

fn run_config(a: &RunArgs, grid: Option<Grid>, seeds: Option<usize>) -> Result<RunConfig, RunError> {
    let mut cfg = base_config(a.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: a.seed,
        routing: a.routing,
        classifier: a.classifier,
        perspectives: a.k,
        iterations: a.t,
        dims: a.dims,
        output_dir: a.out.clone(),
        data_path: a.data.clone(),
        l2_normalize: a.l2_normalize,
        epochs: a.epochs,
        grid,
        seeds,
    });
    Ok(cfg)
}

fn infer_config(a: &InferArgs) -> Result<RunConfig, RunError> {
    let snapshot = a.checkpoint.parent().map(|d| d.join(SNAPSHOT_FILE));
    let path = match (&a.config, snapshot) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(s)) if s.exists() => Some(s),
        _ => None,
    };
    let mut cfg = base_config(path.as_deref())?;
    cfg.apply(&Overrides {
        data_path: a.data.clone(),
        ..Overrides::default()
    });
    Ok(cfg)
}

fn threads() -> Result<Option<usize>, RunError> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(ConfigError::invalid(THREADS_VAR, format!("expected a positive integer, got `{v}`")).into()),
        },
    }
}

fn gen_spec(a: &GenArgs) -> Result<SyntheticSpec, RunError> {
    let mut spec = match &a.config {
        Some(p) => RunConfig::from_file(p)?.data.synthetic.unwrap_or_default(),
        None => SyntheticSpec::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => {$(if let Some(v) = a.$f.clone() { spec.$f = v; })*};
    }
    set!(
        family,
        depth,
        branching,
        clique_size,
        cycle_length,
        cycles,
        cliques,
        motifs,
        noise,
        seed,
        train_fraction,
        val_fraction
    );
    Ok(spec)
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Train(a) => {
            let s = run_train(&run_config(&a, None, None)?, a.overwrite)?;
            let b = s.report.best();
            println!(
                "best epoch {}: train {:.4} val {:.4} test {:.4}; wrote {}",
                b.epoch,
                b.train_acc,
                b.val_acc,
                b.test_acc,
                s.output_dir.display()
            );
        }
        Command::Eval(a) => {
            let e = run_eval(&infer_config(&a)?, &a.checkpoint)?;
            println!("train_acc={} val_acc={} test_acc={}", e.train_acc, e.val_acc, e.test_acc);
        }
        Command::Ablate(a) => {
            let cfg = run_config(&a.run, a.grid, a.seeds)?;
            let outcome = run_ablate(&cfg, threads()?, a.run.overwrite)?;
            for c in &outcome.cells {
                println!("{:<20} {:.4} ± {:.4} ({} runs)", c.name, c.mean_test, c.std_test, c.runs);
            }
        }
        Command::GenSynthetic(a) => {
            println!("{}", run_gen_synthetic(&gen_spec(&a)?, &a.out, a.overwrite)?);
        }
        Command::ExportEmbeddings(a) => {
            let cfg = infer_config(&a)?;
            let out = a
                .out
                .clone()
                .ok_or_else(|| ConfigError::invalid("out", "export-embeddings needs --out"))?;
            let rows = run_export(&cfg, &a.checkpoint, &out, a.overwrite)?;
            println!("wrote {rows} rows to {}", out.join(EMBEDDINGS_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
