//! Command-line surface: dataset generation, training, evaluation,
//! class-prior estimation, diagnostics, and report emission.
//!
//! Every command accepts `--config <path>` (JSON); command-line flags
//! override config-file values, which override built-in defaults. All
//! commands taking `--seed` fall back to the `CSMPU_SEED` environment
//! variable and are run-to-run deterministic in their file outputs.
//! Exit codes: 0 success, 2 usage/config error, 1 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Axis};
use serde::Deserialize;

use csmpu::data::{
    self, gen_synthetic, load_csv, load_idx, minmax_apply, minmax_fit, mpu_split,
    oracle_margins, polygon_means, synthetic_labeled, train_test_split, LabeledDataset,
    MpuDataset, NormStats,
};
use csmpu::model::{init_scorer, Architecture, Mode, Scorer};
use csmpu::prior::{bootstrap_priors, estimate_priors, PipelineConfig};
use csmpu::risk::{empirical_risk, Correction, Estimator, RiskConfig};
use csmpu::surrogate::{LossFamily, SurrogateSpec, SymClip};
use csmpu::train::{
    evaluate, margin_support_heatmaps, misspecification_sweep, reproduce_loss_table,
    select_learning_rate, train, write_loss_table_csv, write_margin_csv, write_support_csv,
    LossTableTraining, SweepMode, SweepScheme, TrainConfig, LEARNING_RATE_SWEEP,
};

#[derive(Parser)]
#[command(name = "csmpu", version, about = "Cost-sensitive multi-class PU learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit constant-sum diagnostics across the loss-variant table
    CheckLosses(CheckLossesCmd),
    /// Materialize an MPU dataset directory with a manifest
    GenData(GenDataCmd),
    /// Train a scorer with the configured risk estimator
    Train(TrainCmd),
    /// Evaluate a checkpoint: metrics plus margin/support heatmaps
    Eval(EvalCmd),
    /// Estimate class priors from margins
    EstimatePrior(EstimatePriorCmd),
    /// Class-prior misspecification sweep
    Sweep(SweepCmd),
}

#[derive(Args, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CommonOpts {
    /// JSON config file; flags override its values
    #[arg(long, global = true)]
    #[serde(skip)]
    config: Option<PathBuf>,

    /// Output directory for every file this command writes
    #[arg(long)]
    out_dir: Option<PathBuf>,

    /// Master seed (falls back to CSMPU_SEED, then 0)
    #[arg(long, env = "CSMPU_SEED")]
    seed: Option<u64>,
}

#[derive(Args, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataOpts {
    /// Dataset source: synthetic | csv | idx | dir
    #[arg(long)]
    dataset: Option<String>,
    /// Class count including the negative meta-class
    #[arg(long)]
    k: Option<usize>,
    /// Meta-class fraction of the unlabeled pool
    #[arg(long)]
    pi_k: Option<f64>,
    /// Full prior vector (overrides --pi-k for synthetic data)
    #[arg(long, value_delimiter = ',')]
    priors: Option<Vec<f64>>,
    /// Labeled samples per observed class (synthetic)
    #[arg(long)]
    n_labeled: Option<usize>,
    /// Unlabeled pool size (synthetic)
    #[arg(long)]
    n_unlabeled: Option<usize>,
    /// Circumradius of the synthetic class-mean polygon
    #[arg(long)]
    separation: Option<f64>,
    /// Fraction of each observed class kept labeled by the split
    #[arg(long)]
    labeled_fraction: Option<f64>,
    /// CSV file (dataset=csv) or dataset directory (dataset=dir)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Label column name or index for CSV data
    #[arg(long)]
    label_column: Option<String>,
    /// IDX image file (dataset=idx)
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX label file (dataset=idx)
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Held-out test fraction for file datasets
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Synthetic test-set size
    #[arg(long)]
    test_size: Option<usize>,
    /// Feature-wise min-max normalization for file datasets
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    normalize: Option<bool>,
}

#[derive(Args, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainOpts {
    /// Risk estimator: csmpu | ure_ovr | biased_super | area
    #[arg(long)]
    estimator: Option<String>,
    /// Non-negativity correction: none | nn | abs
    #[arg(long)]
    correction: Option<String>,
    /// Base loss family
    #[arg(long)]
    loss: Option<String>,
    /// Sharpness for sigmoid_prob / tanh_smooth / logistic
    #[arg(long)]
    gamma: Option<f64>,
    /// Use the symmetrized-and-clipped loss variant
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    sym: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Fixed learning rate; omitted means validation sweep
    #[arg(long)]
    lr: Option<f64>,
    /// Hidden layer widths
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Batch normalization on hidden layers
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    batch_norm: Option<bool>,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PriorOpts {
    /// CSV of pool margins (one column per observed class)
    #[arg(long)]
    pool_margins: Option<PathBuf>,
    /// CSVs of per-class positive margins, in class order
    #[arg(long, value_delimiter = ',')]
    pos_margins: Option<Vec<PathBuf>>,
    /// Score margins with this checkpoint instead of the synthetic oracle
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    top_q: Option<f64>,
    /// Bootstrap replicate count (omitted: no interval)
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
}

#[derive(Args, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepOpts {
    /// Perturbation scheme: scalar_last | adversarial
    #[arg(long)]
    scheme: Option<String>,
    /// L1 magnitudes of the prior perturbation
    #[arg(long, value_delimiter = ',')]
    l1: Option<Vec<f64>>,
    /// reevaluate | retrain
    #[arg(long)]
    mode: Option<String>,
    /// Trained scorer checkpoint (omitted: train one first)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct CheckLossesCmd {
    #[command(flatten)]
    common: CommonOpts,
    /// Margin grid bounds
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
    grid: Option<Vec<f64>>,
    #[arg(long)]
    points: Option<usize>,
    /// Restrict to these loss families
    #[arg(long, value_delimiter = ',')]
    losses: Option<Vec<String>>,
    /// Also train per variant and fill the F1/Acc columns
    #[arg(long)]
    with_training: bool,
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args)]
struct GenDataCmd {
    #[command(flatten)]
    common: CommonOpts,
    #[command(flatten)]
    data: DataOpts,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    common: CommonOpts,
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args)]
struct EvalCmd {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Min-max statistics saved by `train` (for file datasets)
    #[arg(long)]
    norm_stats: Option<PathBuf>,
    #[command(flatten)]
    data: DataOpts,
}

#[derive(Args)]
struct EstimatePriorCmd {
    #[command(flatten)]
    common: CommonOpts,
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    prior: PriorOpts,
}

#[derive(Args)]
struct SweepCmd {
    #[command(flatten)]
    common: CommonOpts,
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    train: TrainOpts,
    #[command(flatten)]
    sweep: SweepOpts,
}

/// Config-file mirror of the flag groups.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    data: Option<DataOpts>,
    train: Option<TrainOpts>,
    prior: Option<PriorOpts>,
    sweep: Option<SweepOpts>,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

impl From<csmpu::Error> for CliError {
    fn from(e: csmpu::Error) -> Self {
        match e {
            csmpu::Error::InvalidConfig(_)
            | csmpu::Error::Infeasible(_)
            | csmpu::Error::Parse { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CmdResult = Result<(), CliError>;

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::CheckLosses(cmd) => cmd_check_losses(cmd),
        Command::GenData(cmd) => cmd_gen_data(cmd),
        Command::Train(cmd) => cmd_train(cmd),
        Command::Eval(cmd) => cmd_eval(cmd),
        Command::EstimatePrior(cmd) => cmd_estimate_prior(cmd),
        Command::Sweep(cmd) => cmd_sweep(cmd),
    };
    match result {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}

macro_rules! merge_opts {
    ($flags:expr, $file:expr; $($field:ident),* $(,)?) => {{
        let mut merged = $flags;
        if let Some(mut file) = $file {
            $( merged.$field = merged.$field.take().or(file.$field.take()); )*
        }
        merged
    }};
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("bad config {}: {e}", path.display())))
}

fn merge_data(flags: DataOpts, file: Option<DataOpts>) -> DataOpts {
    merge_opts!(flags, file;
        dataset, k, pi_k, priors, n_labeled, n_unlabeled, separation, labeled_fraction,
        data, label_column, images, labels, test_fraction, test_size, normalize)
}

fn merge_train(flags: TrainOpts, file: Option<TrainOpts>) -> TrainOpts {
    merge_opts!(flags, file;
        estimator, correction, loss, gamma, sym, epochs, batch_size, lr, hidden,
        batch_norm, eval_every)
}

fn merge_prior(flags: PriorOpts, file: Option<PriorOpts>) -> PriorOpts {
    merge_opts!(flags, file;
        pool_margins, pos_margins, checkpoint, alphas, bins, lambda, step, iters,
        top_q, bootstrap, delta)
}

fn merge_sweep(flags: SweepOpts, file: Option<SweepOpts>) -> SweepOpts {
    merge_opts!(flags, file; scheme, l1, mode, checkpoint)
}

/// Resolved dataset settings with defaults applied.
struct DataConfig {
    source: String,
    k: usize,
    pi_k: f64,
    priors: Vec<f64>,
    n_labeled: usize,
    n_unlabeled: usize,
    separation: f64,
    labeled_fraction: f64,
    data: Option<PathBuf>,
    label_column: String,
    images: Option<PathBuf>,
    labels: Option<PathBuf>,
    test_fraction: f64,
    test_size: usize,
    normalize: bool,
}

fn resolve_data(opts: &DataOpts) -> Result<DataConfig, CliError> {
    let source = opts.dataset.clone().unwrap_or_else(|| "synthetic".into());
    if !["synthetic", "csv", "idx", "dir"].contains(&source.as_str()) {
        return Err(CliError::usage(format!(
            "unknown dataset source {source:?} (expected synthetic, csv, idx, or dir)"
        )));
    }
    let k = opts.k.unwrap_or(4);
    if k < 2 {
        return Err(CliError::usage(format!("k must be >= 2, got {k}")));
    }
    let pi_k = opts.pi_k.unwrap_or(0.5);
    if !(pi_k > 0.0 && pi_k < 1.0) {
        return Err(CliError::usage(format!(
            "pi_k must lie in (0, 1), got {pi_k}"
        )));
    }
    let priors = match &opts.priors {
        Some(p) => {
            if p.len() != k {
                return Err(CliError::usage(format!(
                    "{} priors given for k = {k}",
                    p.len()
                )));
            }
            p.clone()
        }
        None => {
            let mut p = vec![(1.0 - pi_k) / (k - 1) as f64; k];
            p[k - 1] = pi_k;
            p
        }
    };
    for path in [&opts.data, &opts.images, &opts.labels].into_iter().flatten() {
        if !path.exists() {
            return Err(CliError::usage(format!(
                "referenced file does not exist: {}",
                path.display()
            )));
        }
    }
    Ok(DataConfig {
        source,
        k,
        pi_k: priors[k - 1],
        priors,
        n_labeled: opts.n_labeled.unwrap_or(100),
        n_unlabeled: opts.n_unlabeled.unwrap_or(500),
        separation: opts.separation.unwrap_or(2.5),
        labeled_fraction: opts.labeled_fraction.unwrap_or(0.5),
        data: opts.data.clone(),
        label_column: opts.label_column.clone().unwrap_or_else(|| "label".into()),
        images: opts.images.clone(),
        labels: opts.labels.clone(),
        test_fraction: opts.test_fraction.unwrap_or(0.2),
        test_size: opts.test_size.unwrap_or(1000),
        normalize: opts.normalize.unwrap_or(true),
    })
}

/// Seeds derived from the master seed, one stream per concern.
struct Seeds {
    data: u64,
    scorer: u64,
    train: u64,
    test: u64,
    prior: u64,
}

fn seeds(master: u64) -> Seeds {
    Seeds {
        data: master,
        scorer: master.wrapping_add(1),
        train: master.wrapping_add(2),
        test: master.wrapping_add(3),
        prior: master.wrapping_add(4),
    }
}

/// Builds the MPU dataset (plus a labeled test set and normalization stats
/// where the source provides them).
fn build_dataset(
    cfg: &DataConfig,
    seeds: &Seeds,
) -> Result<(MpuDataset, Option<LabeledDataset>, Option<NormStats>), CliError> {
    match cfg.source.as_str() {
        "synthetic" => {
            let ds = gen_synthetic(
                cfg.k,
                &cfg.priors,
                cfg.n_labeled,
                cfg.n_unlabeled,
                cfg.separation,
                seeds.data,
            )?;
            let test =
                synthetic_labeled(cfg.k, &cfg.priors, cfg.test_size, cfg.separation, seeds.test)?;
            Ok((ds, Some(test), None))
        }
        "dir" => {
            let dir = cfg
                .data
                .as_ref()
                .ok_or_else(|| CliError::usage("dataset=dir needs --data <dir>"))?;
            Ok((data::load_dataset(dir)?, None, None))
        }
        "csv" | "idx" => {
            let full = if cfg.source == "csv" {
                let path = cfg
                    .data
                    .as_ref()
                    .ok_or_else(|| CliError::usage("dataset=csv needs --data <file>"))?;
                load_csv(path, &cfg.label_column)?
            } else {
                let images = cfg
                    .images
                    .as_ref()
                    .ok_or_else(|| CliError::usage("dataset=idx needs --images <file>"))?;
                let labels = cfg
                    .labels
                    .as_ref()
                    .ok_or_else(|| CliError::usage("dataset=idx needs --labels <file>"))?;
                load_idx(images, labels)?
            };
            let (train_split, test_split) = train_test_split(&full, cfg.test_fraction, seeds.data)?;
            let (train_split, test_split, stats) = if cfg.normalize {
                let stats = minmax_fit(&train_split.features.view())?;
                let train_norm = LabeledDataset {
                    features: minmax_apply(&stats, &train_split.features.view())?,
                    labels: train_split.labels.clone(),
                    n_classes: train_split.n_classes,
                };
                let test_norm = LabeledDataset {
                    features: minmax_apply(&stats, &test_split.features.view())?,
                    labels: test_split.labels.clone(),
                    n_classes: test_split.n_classes,
                };
                (train_norm, test_norm, Some(stats))
            } else {
                (train_split, test_split, None)
            };
            let ds = mpu_split(
                &train_split,
                cfg.k,
                cfg.pi_k,
                cfg.labeled_fraction,
                seeds.data,
            )?;
            // Test labels collapse every unobserved class onto the meta-class.
            let test = LabeledDataset {
                labels: test_split
                    .labels
                    .iter()
                    .map(|&y| y.min(cfg.k - 1))
                    .collect(),
                n_classes: cfg.k,
                features: test_split.features,
            };
            Ok((ds, Some(test), stats))
        }
        _ => unreachable!("validated above"),
    }
}

fn parse_surrogate(opts: &TrainOpts) -> Result<SurrogateSpec, CliError> {
    let name = opts.loss.clone().unwrap_or_else(|| "sigmoid_prob".into());
    let family = LossFamily::parse(&name)
        .ok_or_else(|| CliError::usage(format!("unknown loss name {name:?}")))?;
    let sym = if opts.sym.unwrap_or(false) {
        SymClip::Sym
    } else {
        SymClip::Raw
    };
    Ok(SurrogateSpec::new(family, opts.gamma.unwrap_or(1.0), sym)?)
}

fn parse_estimator(opts: &TrainOpts) -> Result<(Estimator, Correction), CliError> {
    let est_name = opts.estimator.clone().unwrap_or_else(|| "csmpu".into());
    let estimator = Estimator::parse(&est_name)
        .ok_or_else(|| CliError::usage(format!("unknown estimator {est_name:?}")))?;
    let corr_name = opts.correction.clone().unwrap_or_else(|| "abs".into());
    let correction = Correction::parse(&corr_name)
        .ok_or_else(|| CliError::usage(format!("unknown correction {corr_name:?}")))?;
    Ok((estimator, correction))
}

fn out_dir(common: &CommonOpts, file: &FileConfig) -> Result<PathBuf, CliError> {
    let dir = common
        .out_dir
        .clone()
        .or_else(|| file.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::usage(format!("output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("write {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_check_losses(cmd: CheckLossesCmd) -> CmdResult {
    let file = load_file_config(cmd.common.config.as_deref())?;
    let dir = out_dir(&cmd.common, &file)?;
    let seed = cmd.common.seed.or(file.seed).unwrap_or(0);
    let (lo, hi) = match &cmd.grid {
        Some(g) => (g[0], g[1]),
        None => (-10.0, 10.0),
    };
    let points = cmd.points.unwrap_or(2001);
    if let Some(names) = &cmd.losses {
        for name in names {
            if LossFamily::parse(name).is_none() {
                return Err(CliError::usage(format!("unknown loss name {name:?}")));
            }
        }
    }

    let training_inputs = if cmd.with_training {
        let data_opts = merge_data(cmd.data, file.data.clone());
        let train_opts = merge_train(cmd.train, file.train.clone());
        let data_cfg = resolve_data(&data_opts)?;
        let s = seeds(seed);
        let (dataset, test, _) = build_dataset(&data_cfg, &s)?;
        let test = test.ok_or_else(|| {
            CliError::usage("--with-training needs a dataset source that yields a test set")
        })?;
        let (estimator, correction) = parse_estimator(&train_opts)?;
        let surrogate = parse_surrogate(&train_opts)?;
        let risk = RiskConfig::new(
            data_cfg.k,
            dataset.priors().to_vec(),
            surrogate,
            correction,
            estimator,
        )?;
        let train_cfg = TrainConfig {
            epochs: train_opts.epochs.unwrap_or(20),
            batch_size: train_opts.batch_size.unwrap_or(128),
            learning_rate: train_opts.lr.unwrap_or(1e-3),
            seed: s.train,
            eval_every: usize::MAX - 1,
            risk,
        };
        Some((
            dataset,
            test,
            train_cfg,
            train_opts.hidden.unwrap_or_else(|| vec![64, 64]),
            train_opts.batch_norm.unwrap_or(true),
            s.scorer,
        ))
    } else {
        None
    };

    let rows = match &training_inputs {
        None => reproduce_loss_table(lo, hi, points, None)?,
        Some((dataset, test, train_cfg, hidden, batch_norm, scorer_seed)) => {
            let setup = LossTableTraining {
                dataset,
                test,
                train: train_cfg.clone(),
                hidden: hidden.clone(),
                batch_norm: *batch_norm,
                scorer_seed: *scorer_seed,
            };
            reproduce_loss_table(lo, hi, points, Some(&setup))?
        }
    };
    let rows: Vec<_> = match &cmd.losses {
        None => rows,
        Some(names) => rows
            .into_iter()
            .filter(|r| names.iter().any(|n| n == r.family.name()))
            .collect(),
    };

    let mut buf = Vec::new();
    write_loss_table_csv(&rows, &mut buf).expect("in-memory write");
    let csv = String::from_utf8(buf).expect("ascii");
    print!("{csv}");
    write_file(&dir.join("check_losses.csv"), &csv)
}

fn cmd_gen_data(cmd: GenDataCmd) -> CmdResult {
    let file = load_file_config(cmd.common.config.as_deref())?;
    let dir = out_dir(&cmd.common, &file)?;
    let seed = cmd.common.seed.or(file.seed).unwrap_or(0);
    let data_opts = merge_data(cmd.data, file.data);
    let cfg = resolve_data(&data_opts)?;
    let s = seeds(seed);
    let (dataset, _, _) = build_dataset(&cfg, &s)?;
    data::save_dataset(&dir, &dataset, &cfg.source, seed)?;
    println!("wrote dataset to {}", dir.display());
    Ok(())
}

fn cmd_train(cmd: TrainCmd) -> CmdResult {
    let file = load_file_config(cmd.common.config.as_deref())?;
    let dir = out_dir(&cmd.common, &file)?;
    let seed = cmd.common.seed.or(file.seed).unwrap_or(0);
    let data_opts = merge_data(cmd.data, file.data.clone());
    let train_opts = merge_train(cmd.train, file.train.clone());
    let data_cfg = resolve_data(&data_opts)?;
    let s = seeds(seed);
    let (dataset, test, norm_stats) = build_dataset(&data_cfg, &s)?;

    let (estimator, correction) = parse_estimator(&train_opts)?;
    let surrogate = parse_surrogate(&train_opts)?;
    let risk = RiskConfig::new(
        dataset.k(),
        dataset.priors().to_vec(),
        surrogate,
        correction,
        estimator,
    )?;
    let hidden = train_opts.hidden.clone().unwrap_or_else(|| vec![64, 64]);
    let arch = Architecture::mlp(
        dataset.feature_dim(),
        &hidden,
        dataset.k(),
        train_opts.batch_norm.unwrap_or(true),
    );
    let mut train_cfg = TrainConfig {
        epochs: train_opts.epochs.unwrap_or(100),
        batch_size: train_opts.batch_size.unwrap_or(512),
        learning_rate: train_opts.lr.unwrap_or(1e-3),
        seed: s.train,
        eval_every: train_opts.eval_every.unwrap_or(10),
        risk,
    };
    train_cfg.validate()?;

    if train_opts.lr.is_none() {
        let (best, table) =
            select_learning_rate(&train_cfg, &dataset, &arch, s.scorer, &LEARNING_RATE_SWEEP)?;
        train_cfg.learning_rate = best;
        let mut csv = String::from("learning_rate,val_accuracy\n");
        for (lr, acc) in &table {
            csv.push_str(&format!(
                "{},{}\n",
                csmpu::report::fmt_f64(*lr),
                csmpu::report::fmt_f64(*acc)
            ));
        }
        write_file(&dir.join("lr_sweep.csv"), &csv)?;
        println!("selected learning rate {best}");
    }

    let scorer = init_scorer(arch, s.scorer)?;
    let (trained, history) = train(&train_cfg, &dataset, scorer)?;

    write_file(&dir.join("checkpoint.json"), &trained.to_json())?;
    write_file(&dir.join("history.csv"), &history.to_csv_string())?;
    let final_risk = empirical_risk(&train_cfg.risk, &dataset.view(), &trained, Mode::Infer)?;
    write_file(&dir.join("risk.json"), &final_risk.to_json())?;
    if let Some(stats) = &norm_stats {
        write_file(
            &dir.join("norm_stats.json"),
            &serde_json::to_string_pretty(stats).expect("stats serialize"),
        )?;
    }
    if let Some(test) = &test {
        let metrics = evaluate(&trained, &test.features.view(), &test.labels, dataset.k())?;
        write_file(&dir.join("metrics.json"), &metrics.to_json())?;
    } else if let Some(labels) = dataset.hidden_labels() {
        let metrics = evaluate(&trained, &dataset.unlabeled().view(), labels, dataset.k())?;
        write_file(&dir.join("metrics.json"), &metrics.to_json())?;
    }
    Ok(())
}

fn load_checkpoint(path: Option<&Path>) -> Result<Scorer, CliError> {
    let path = path.ok_or_else(|| CliError::usage("missing --checkpoint"))?;
    if !path.exists() {
        return Err(CliError::usage(format!(
            "checkpoint does not exist: {}",
            path.display()
        )));
    }
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(Scorer::from_json(&text)?)
}

fn cmd_eval(cmd: EvalCmd) -> CmdResult {
    let file = load_file_config(cmd.common.config.as_deref())?;
    let dir = out_dir(&cmd.common, &file)?;
    let seed = cmd.common.seed.or(file.seed).unwrap_or(0);
    let scorer = load_checkpoint(cmd.checkpoint.as_deref())?;
    let data_opts = merge_data(cmd.data, file.data);
    let data_cfg = resolve_data(&data_opts)?;
    let s = seeds(seed);

    let (features, labels, k) = match data_cfg.source.as_str() {
        "synthetic" => {
            let test = synthetic_labeled(
                data_cfg.k,
                &data_cfg.priors,
                data_cfg.test_size,
                data_cfg.separation,
                s.test,
            )?;
            (test.features, test.labels, data_cfg.k)
        }
        "dir" => {
            let dataset = data::load_dataset(
                data_cfg
                    .data
                    .as_ref()
                    .ok_or_else(|| CliError::usage("dataset=dir needs --data <dir>"))?,
            )?;
            let labels = dataset
                .hidden_labels()
                .ok_or_else(|| {
                    CliError::usage("dataset directory has no hidden labels to evaluate against")
                })?
                .to_vec();
            (dataset.unlabeled().clone(), labels, dataset.k())
        }
        _ => {
            let full = if data_cfg.source == "csv" {
                load_csv(
                    data_cfg
                        .data
                        .as_ref()
                        .ok_or_else(|| CliError::usage("dataset=csv needs --data <file>"))?,
                    &data_cfg.label_column,
                )?
            } else {
                load_idx(
                    data_cfg
                        .images
                        .as_ref()
                        .ok_or_else(|| CliError::usage("dataset=idx needs --images <file>"))?,
                    data_cfg
                        .labels
                        .as_ref()
                        .ok_or_else(|| CliError::usage("dataset=idx needs --labels <file>"))?,
                )?
            };
            let features = match &cmd.norm_stats {
                Some(path) => {
                    let stats: NormStats = serde_json::from_str(
                        &fs::read_to_string(path).map_err(|e| {
                            CliError::usage(format!("cannot read {}: {e}", path.display()))
                        })?,
                    )
                    .map_err(|e| CliError::usage(format!("bad norm stats: {e}")))?;
                    minmax_apply(&stats, &full.features.view())?
                }
                None => full.features,
            };
            let labels = full
                .labels
                .iter()
                .map(|&y| y.min(data_cfg.k - 1))
                .collect();
            (features, labels, data_cfg.k)
        }
    };

    let metrics = evaluate(&scorer, &features.view(), &labels, k)?;
    write_file(&dir.join("metrics.json"), &metrics.to_json())?;
    let mut buf = Vec::new();
    metrics.write_csv(&mut buf).expect("in-memory write");
    write_file(&dir.join("metrics.csv"), &String::from_utf8(buf).expect("ascii"))?;

    let (margin, support) = margin_support_heatmaps(&scorer, &features.view(), &labels, k)?;
    let mut buf = Vec::new();
    write_margin_csv(&margin, &mut buf).expect("in-memory write");
    write_file(
        &dir.join("margin_heatmap.csv"),
        &String::from_utf8(buf).expect("ascii"),
    )?;
    let mut buf = Vec::new();
    write_support_csv(&support, &mut buf).expect("in-memory write");
    write_file(
        &dir.join("support_heatmap.csv"),
        &String::from_utf8(buf).expect("ascii"),
    )?;
    println!(
        "accuracy {} macro_f1 {}",
        csmpu::report::fmt_f64(metrics.accuracy),
        csmpu::report::fmt_f64(metrics.macro_f1)
    );
    Ok(())
}

/// Margins for the prior pipeline: pool and per-class positive margin
/// matrices, one column per observed class.
fn margins_for_prior(
    cfg: &DataConfig,
    opts: &PriorOpts,
    s: &Seeds,
) -> Result<(Array2<f64>, Vec<Array2<f64>>), CliError> {
    if let Some(pool_path) = &opts.pool_margins {
        if !pool_path.exists() {
            return Err(CliError::usage(format!(
                "scores file does not exist: {}",
                pool_path.display()
            )));
        }
        let pos_paths = opts
            .pos_margins
            .clone()
            .ok_or_else(|| CliError::usage("--pool-margins needs --pos-margins"))?;
        for p in &pos_paths {
            if !p.exists() {
                return Err(CliError::usage(format!(
                    "scores file does not exist: {}",
                    p.display()
                )));
            }
        }
        let pool = data::load_matrix_csv(pool_path)?;
        let pos = pos_paths
            .iter()
            .map(|p| data::load_matrix_csv(p))
            .collect::<csmpu::Result<Vec<_>>>()?;
        return Ok((pool, pos));
    }

    let (dataset, _, _) = build_dataset(cfg, s)?;
    let k = dataset.k();
    let observed_cols: Vec<usize> = (0..k - 1).collect();
    match &opts.checkpoint {
        Some(path) => {
            let scorer = load_checkpoint(Some(path))?;
            let pool = scorer
                .forward(&dataset.unlabeled().view(), Mode::Infer)?
                .select(Axis(1), &observed_cols);
            let pos = dataset
                .observed()
                .iter()
                .map(|set| {
                    scorer
                        .forward(&set.view(), Mode::Infer)
                        .map(|m| m.select(Axis(1), &observed_cols))
                })
                .collect::<csmpu::Result<Vec<_>>>()?;
            Ok((pool, pos))
        }
        None => {
            if cfg.source != "synthetic" {
                return Err(CliError::usage(
                    "estimate-prior on file data needs --checkpoint or margin CSVs",
                ));
            }
            // Synthetic oracle margins from the known class means.
            let means = polygon_means(k, cfg.separation);
            let pool = oracle_margins(&means.view(), &dataset.unlabeled().view())
                .select(Axis(1), &observed_cols);
            let pos = dataset
                .observed()
                .iter()
                .map(|set| {
                    oracle_margins(&means.view(), &set.view()).select(Axis(1), &observed_cols)
                })
                .collect();
            Ok((pool, pos))
        }
    }
}

fn cmd_estimate_prior(cmd: EstimatePriorCmd) -> CmdResult {
    let file = load_file_config(cmd.common.config.as_deref())?;
    let dir = out_dir(&cmd.common, &file)?;
    let seed = cmd.common.seed.or(file.seed).unwrap_or(0);
    let data_opts = merge_data(cmd.data, file.data.clone());
    let prior_opts = merge_prior(cmd.prior, file.prior.clone());
    let data_cfg = resolve_data(&data_opts)?;
    let s = seeds(seed);

    let defaults = PipelineConfig::default();
    let pipeline = PipelineConfig {
        alphas: prior_opts.alphas.clone().unwrap_or(defaults.alphas),
        epsilon: defaults.epsilon,
        top_q: prior_opts.top_q.unwrap_or(defaults.top_q),
        n_bins: prior_opts.bins.unwrap_or(defaults.n_bins),
        lambda: prior_opts.lambda.unwrap_or(defaults.lambda),
        step: prior_opts.step.unwrap_or(defaults.step),
        iters: prior_opts.iters.unwrap_or(defaults.iters),
    };

    let (pool, pos) = margins_for_prior(&data_cfg, &prior_opts, &s)?;
    let estimate = match prior_opts.bootstrap {
        None => estimate_priors(&pipeline, &pool.view(), &pos)?,
        Some(b) => bootstrap_priors(
            &pipeline,
            &pool.view(),
            &pos,
            b,
            prior_opts.delta.unwrap_or(0.05),
            s.prior,
        )?,
    };
    write_file(&dir.join("prior.json"), &estimate.to_json())?;
    println!(
        "point estimate: [{}]",
        estimate
            .point
            .iter()
            .map(|p| csmpu::report::fmt_f64(*p))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

fn cmd_sweep(cmd: SweepCmd) -> CmdResult {
    let file = load_file_config(cmd.common.config.as_deref())?;
    let dir = out_dir(&cmd.common, &file)?;
    let seed = cmd.common.seed.or(file.seed).unwrap_or(0);
    let data_opts = merge_data(cmd.data, file.data.clone());
    let train_opts = merge_train(cmd.train, file.train.clone());
    let sweep_opts = merge_sweep(cmd.sweep, file.sweep.clone());
    let data_cfg = resolve_data(&data_opts)?;
    let s = seeds(seed);
    let (dataset, test, _) = build_dataset(&data_cfg, &s)?;
    let test = test.ok_or_else(|| {
        CliError::usage("sweep needs a dataset source that yields a labeled test set")
    })?;

    let scheme_name = sweep_opts
        .scheme
        .clone()
        .unwrap_or_else(|| "adversarial".into());
    let scheme = SweepScheme::parse(&scheme_name)
        .ok_or_else(|| CliError::usage(format!("unknown sweep scheme {scheme_name:?}")))?;
    let mode = match sweep_opts.mode.as_deref().unwrap_or("reevaluate") {
        "reevaluate" | "reeval" => SweepMode::Reevaluate,
        "retrain" => SweepMode::Retrain,
        other => {
            return Err(CliError::usage(format!(
                "unknown sweep mode {other:?} (expected reevaluate or retrain)"
            )))
        }
    };
    let magnitudes = sweep_opts
        .l1
        .clone()
        .unwrap_or_else(|| vec![0.0, 0.05, 0.1, 0.2]);
    if magnitudes.iter().any(|m| *m < 0.0) {
        return Err(CliError::usage("sweep magnitudes must be non-negative"));
    }

    let (estimator, correction) = parse_estimator(&train_opts)?;
    let surrogate = parse_surrogate(&train_opts)?;
    let risk = RiskConfig::new(
        dataset.k(),
        dataset.priors().to_vec(),
        surrogate,
        correction,
        estimator,
    )?;
    let hidden = train_opts.hidden.clone().unwrap_or_else(|| vec![64, 64]);
    let arch = Architecture::mlp(
        dataset.feature_dim(),
        &hidden,
        dataset.k(),
        train_opts.batch_norm.unwrap_or(true),
    );
    let train_cfg = TrainConfig {
        epochs: train_opts.epochs.unwrap_or(30),
        batch_size: train_opts.batch_size.unwrap_or(128),
        learning_rate: train_opts.lr.unwrap_or(1e-3),
        seed: s.train,
        eval_every: usize::MAX - 1,
        risk,
    };

    let scorer = match &sweep_opts.checkpoint {
        Some(path) => load_checkpoint(Some(path))?,
        None => {
            let fresh = init_scorer(arch, s.scorer)?;
            let (trained, _) = train(&train_cfg, &dataset, fresh)?;
            trained
        }
    };

    let report =
        misspecification_sweep(&train_cfg, &dataset, &test, &scorer, scheme, &magnitudes, mode)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf).expect("in-memory write");
    write_file(
        &dir.join("sweep.csv"),
        &String::from_utf8(buf).expect("ascii"),
    )
}
