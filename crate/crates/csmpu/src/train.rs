//! Training loop with adaptive-moment optimization, evaluation metrics,
//! margin/support diagnostics, the class-prior misspecification sweep, and
//! the constant-sum loss table.
//!
//! Training is single-threaded and seed-deterministic: identical
//! (seed, data, config) produce bitwise-identical histories.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, MpuBatch, MpuDataset};
use crate::error::{Error, Result};
use crate::model::{init_scorer, Architecture, Mode, Scorer};
use crate::report::fmt_f64;
use crate::risk::{self, RiskConfig};
use crate::surrogate::{
    constant_sum_check, ConstSumReport, LossFamily, SurrogateSpec, SymClip,
};

/// The learning rates swept when none is fixed.
pub const LEARNING_RATE_SWEEP: [f64; 4] = [1e-3, 5e-4, 1e-5, 1e-6];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub risk: RiskConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl TrainConfig {
    /// Protocol defaults: 100 epochs, batch size 512.
    pub fn new(risk: RiskConfig, learning_rate: f64, seed: u64) -> Self {
        TrainConfig {
            risk,
            epochs: 100,
            batch_size: 512,
            learning_rate,
            seed,
            eval_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.risk.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig("counts must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Adaptive moment estimation with bias correction.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bias1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grads[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_risk: f64,
    pub eval_accuracy: Option<f64>,
    pub eval_macro_f1: Option<f64>,
}

/// Per-epoch training risk and (optional) evaluation metrics.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch,train_risk,eval_accuracy,eval_macro_f1")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{}",
                r.epoch,
                fmt_f64(r.train_risk),
                r.eval_accuracy.map(fmt_f64).unwrap_or_default(),
                r.eval_macro_f1.map(fmt_f64).unwrap_or_default(),
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("ascii csv")
    }
}

/// Cyclic per-step sampler: each epoch reshuffles every set, each step draws
/// a fixed quota from every set so no estimator term ever sees an empty set.
struct SetSampler {
    order: Vec<usize>,
    quota: usize,
    cursor: usize,
}

impl SetSampler {
    fn new(n: usize, quota: usize) -> Self {
        SetSampler {
            order: (0..n).collect(),
            quota: quota.min(n).max(1),
            cursor: 0,
        }
    }

    fn reshuffle(&mut self, rng: &mut ChaCha20Rng) {
        self.order.shuffle(rng);
        self.cursor = 0;
    }

    fn next_rows(&mut self) -> Vec<usize> {
        let n = self.order.len();
        let mut rows = Vec::with_capacity(self.quota);
        for _ in 0..self.quota {
            rows.push(self.order[self.cursor]);
            self.cursor = (self.cursor + 1) % n;
        }
        rows
    }
}

fn gather(features: &ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    features.select(Axis(0), rows)
}

/// Runs `epochs x ceil(n / batch)` adaptive-moment steps minimizing the
/// configured estimator. Per-epoch history records the mean minibatch
/// objective; when the dataset retains hidden pool labels, accuracy and
/// macro-F1 on the pool are recorded every `eval_every` epochs.
pub fn train(
    cfg: &TrainConfig,
    dataset: &MpuDataset,
    mut scorer: Scorer,
) -> Result<(Scorer, History)> {
    cfg.validate()?;
    if scorer.input_dim() != dataset.feature_dim() {
        return Err(Error::ShapeMismatch(format!(
            "scorer input dim {} vs dataset feature dim {}",
            scorer.input_dim(),
            dataset.feature_dim()
        )));
    }
    if scorer.k() != dataset.k() || cfg.risk.k != dataset.k() {
        return Err(Error::ShapeMismatch(format!(
            "scorer outputs {}, risk k {}, dataset k {}",
            scorer.k(),
            cfg.risk.k,
            dataset.k()
        )));
    }
    if dataset.observed().iter().any(|s| s.nrows() == 0) {
        return Err(Error::InvalidConfig(
            "observed class with empty sample set".into(),
        ));
    }
    if dataset.unlabeled().nrows() == 0 {
        return Err(Error::InvalidConfig("empty unlabeled pool".into()));
    }

    let mut history = History::default();
    if cfg.epochs == 0 {
        return Ok((scorer, history));
    }

    let n_total: usize = dataset
        .observed()
        .iter()
        .map(|s| s.nrows())
        .sum::<usize>()
        + dataset.unlabeled().nrows();
    let steps_per_epoch = n_total.div_ceil(cfg.batch_size);
    let mut samplers: Vec<SetSampler> = dataset
        .observed()
        .iter()
        .map(|s| {
            let quota =
                (cfg.batch_size as f64 * s.nrows() as f64 / n_total as f64).round() as usize;
            SetSampler::new(s.nrows(), quota)
        })
        .collect();
    let pool_quota = (cfg.batch_size as f64 * dataset.unlabeled().nrows() as f64
        / n_total as f64)
        .round() as usize;
    let mut pool_sampler = SetSampler::new(dataset.unlabeled().nrows(), pool_quota);

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(scorer.param_count());

    for epoch in 0..cfg.epochs {
        for sampler in samplers.iter_mut() {
            sampler.reshuffle(&mut rng);
        }
        pool_sampler.reshuffle(&mut rng);

        let mut epoch_risk = 0.0;
        for step in 0..steps_per_epoch {
            let batch = MpuBatch {
                observed: dataset
                    .observed()
                    .iter()
                    .zip(samplers.iter_mut())
                    .map(|(s, sampler)| gather(&s.view(), &sampler.next_rows()))
                    .collect(),
                unlabeled: gather(&dataset.unlabeled().view(), &pool_sampler.next_rows()),
                priors: cfg.risk.priors.clone(),
            };
            let (report, grads) = risk::training_gradient(&cfg.risk, &batch.view(), &mut scorer)?;
            if !report.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: step });
            }
            epoch_risk += report.total;
            adam.step(scorer.params_mut(), &grads, cfg.learning_rate);
        }

        let eval = if (epoch + 1) % cfg.eval_every == 0 {
            dataset.hidden_labels().map(|labels| {
                let metrics = evaluate(
                    &scorer,
                    &dataset.unlabeled().view(),
                    labels,
                    dataset.k(),
                )
                .expect("pool evaluation");
                (metrics.accuracy, metrics.macro_f1)
            })
        } else {
            None
        };
        history.records.push(EpochRecord {
            epoch: epoch + 1,
            train_risk: epoch_risk / steps_per_epoch as f64,
            eval_accuracy: eval.map(|(a, _)| a),
            eval_macro_f1: eval.map(|(_, f)| f),
        });
    }
    Ok((scorer, history))
}

/// Accuracy, macro-F1, per-class F1, and the k x k confusion matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let mut header = vec!["accuracy".to_string(), "macro_f1".to_string()];
        header.extend((0..self.per_class_f1.len()).map(|i| format!("f1_class_{i}")));
        writeln!(w, "{}", header.join(","))?;
        let mut row = vec![fmt_f64(self.accuracy), fmt_f64(self.macro_f1)];
        row.extend(self.per_class_f1.iter().map(|&v| fmt_f64(v)));
        writeln!(w, "{}", row.join(","))
    }
}

/// Derives all metrics from a confusion matrix of counts. Zero-support
/// classes (absent from both truth and predictions) contribute F1 = 0.
pub fn metrics_from_confusion(confusion: Vec<Vec<usize>>) -> Metrics {
    let k = confusion.len();
    let total: usize = confusion.iter().map(|row| row.iter().sum::<usize>()).sum();
    let trace: usize = (0..k).map(|i| confusion[i][i]).sum();
    let accuracy = trace as f64 / total as f64;
    let mut per_class_f1 = Vec::with_capacity(k);
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        let fp: f64 = (0..k).filter(|&t| t != c).map(|t| confusion[t][c] as f64).sum();
        let fn_: f64 = (0..k).filter(|&p| p != c).map(|p| confusion[c][p] as f64).sum();
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class_f1.push(f1);
    }
    let macro_f1 = per_class_f1.iter().sum::<f64>() / k as f64;
    Metrics {
        accuracy,
        macro_f1,
        per_class_f1,
        confusion,
    }
}

/// Predicted class per row: argmax score, ties broken by the lowest index.
pub fn predict(scores: &ArrayView2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            let _ = &row;
            best
        })
        .collect()
}

/// Scores a labeled test set in inference mode and computes metrics over
/// all k classes (meta-class included as class k - 1).
pub fn evaluate(
    scorer: &Scorer,
    features: &ArrayView2<f64>,
    labels: &[usize],
    k: usize,
) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(Error::InvalidConfig("empty test set".into()));
    }
    if features.nrows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows vs {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y >= k) {
        return Err(Error::InvalidConfig(format!("label out of range 0..{k}")));
    }
    let scores = scorer.forward(features, Mode::Infer)?;
    let predictions = predict(&scores.view());
    let mut confusion = vec![vec![0usize; k]; k];
    for (&truth, &pred) in labels.iter().zip(&predictions) {
        confusion[truth][pred] += 1;
    }
    Ok(metrics_from_confusion(confusion))
}

/// Margin and support matrices over (true class, predicted class) pairs.
/// `support[t][p]` counts samples; `margin[t][p]` is the mean of
/// `f_t(x) - max_{j != t} f_j(x)` over the cell, `None` when the cell is
/// empty.
pub fn margin_support_heatmaps(
    scorer: &Scorer,
    features: &ArrayView2<f64>,
    labels: &[usize],
    k: usize,
) -> Result<(Vec<Vec<Option<f64>>>, Vec<Vec<usize>>)> {
    if labels.len() != features.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows vs {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y >= k) {
        return Err(Error::InvalidConfig(format!("label out of range 0..{k}")));
    }
    let scores = scorer.forward(features, Mode::Infer)?;
    let predictions = predict(&scores.view());
    let mut support = vec![vec![0usize; k]; k];
    let mut sums = vec![vec![0.0f64; k]; k];
    for (row, (&truth, &pred)) in scores.rows().into_iter().zip(labels.iter().zip(&predictions)) {
        let mut rival = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if j != truth {
                rival = rival.max(v);
            }
        }
        support[truth][pred] += 1;
        sums[truth][pred] += row[truth] - rival;
    }
    let margin = (0..k)
        .map(|t| {
            (0..k)
                .map(|p| {
                    if support[t][p] > 0 {
                        Some(sums[t][p] / support[t][p] as f64)
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect();
    Ok((margin, support))
}

/// Writes a margin heatmap as CSV; empty cells are emitted blank, not 0.
pub fn write_margin_csv(margin: &[Vec<Option<f64>>], mut w: impl Write) -> std::io::Result<()> {
    let k = margin.len();
    let mut header = vec!["true_class".to_string()];
    header.extend((0..k).map(|p| format!("pred_{p}")));
    writeln!(w, "{}", header.join(","))?;
    for (t, row) in margin.iter().enumerate() {
        let mut cells = vec![t.to_string()];
        cells.extend(row.iter().map(|c| c.map(fmt_f64).unwrap_or_default()));
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

pub fn write_support_csv(support: &[Vec<usize>], mut w: impl Write) -> std::io::Result<()> {
    let k = support.len();
    let mut header = vec!["true_class".to_string()];
    header.extend((0..k).map(|p| format!("pred_{p}")));
    writeln!(w, "{}", header.join(","))?;
    for (t, row) in support.iter().enumerate() {
        let mut cells = vec![t.to_string()];
        cells.extend(row.iter().map(|c| c.to_string()));
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepScheme {
    ScalarLast,
    Adversarial,
}

impl SweepScheme {
    pub fn name(self) -> &'static str {
        match self {
            SweepScheme::ScalarLast => "scalar_last",
            SweepScheme::Adversarial => "adversarial",
        }
    }

    pub fn parse(name: &str) -> Option<SweepScheme> {
        match name {
            "scalar_last" => Some(SweepScheme::ScalarLast),
            "adversarial" => Some(SweepScheme::Adversarial),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Re-evaluate the bias proxy with perturbed priors on the fixed scorer.
    Reevaluate,
    /// Retrain from scratch with perturbed priors before evaluating.
    Retrain,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub scheme: SweepScheme,
    pub l1_delta: f64,
    pub macro_f1: f64,
    pub emp_bound: f64,
    pub theory_bound: f64,
}

/// Misspecification sweep outcome: one point per admissible magnitude, the
/// loss-gap terms `b_i`, the perturbation vectors, and any skipped points.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub b: Vec<f64>,
    pub deltas: Vec<Vec<f64>>,
    pub skipped: Vec<f64>,
}

impl SweepReport {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "scheme,l1_delta,macro_f1,emp_bound,theory_bound")?;
        for p in &self.points {
            writeln!(
                w,
                "{},{},{},{},{}",
                p.scheme.name(),
                fmt_f64(p.l1_delta),
                fmt_f64(p.macro_f1),
                fmt_f64(p.emp_bound),
                fmt_f64(p.theory_bound),
            )?;
        }
        Ok(())
    }
}

/// Loss-range constant for the theory bound: `C_delta = 2 C_l = 2`.
pub const SWEEP_C_DELTA: f64 = 2.0;

/// Empirical proxy `sum_i lambda_i |b_i| |delta_i|` and theory bound
/// `2 C_delta sum_i lambda_i |delta_i|`, with `lambda_i = 1/N`.
pub fn misspecification_bounds(b: &[f64], delta: &[f64]) -> (f64, f64) {
    let n = b.len() as f64;
    let lambda = 1.0 / n;
    let emp: f64 = b
        .iter()
        .zip(delta)
        .map(|(bi, di)| lambda * bi.abs() * di.abs())
        .sum();
    let theory: f64 = 2.0 * SWEEP_C_DELTA * delta.iter().map(|d| lambda * d.abs()).sum::<f64>();
    (emp, theory)
}

/// Per-class loss gap `b_i`: mean over class-i positives of
/// `l(f_i) - l(-f_i)`.
pub fn loss_gap_terms(
    dataset: &MpuDataset,
    scorer: &Scorer,
    spec: &SurrogateSpec,
) -> Result<Vec<f64>> {
    let mut b = Vec::with_capacity(dataset.k() - 1);
    for (i, set) in dataset.observed().iter().enumerate() {
        let scores = scorer.forward(&set.view(), Mode::Infer)?;
        let mut acc = 0.0;
        for row in scores.rows() {
            acc += spec.eval_unchecked(row[i]) - spec.eval_unchecked(-row[i]);
        }
        b.push(acc / set.nrows() as f64);
    }
    Ok(b)
}

fn sweep_delta(scheme: SweepScheme, magnitude: f64, b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    if magnitude == 0.0 {
        return Some(vec![0.0; n]);
    }
    if n < 2 {
        return None;
    }
    let half = magnitude / 2.0;
    match scheme {
        SweepScheme::ScalarLast => {
            // Mass moves from the last observed class to the others, evenly.
            let mut delta = vec![half / (n - 1) as f64; n];
            delta[n - 1] = -half;
            Some(delta)
        }
        SweepScheme::Adversarial => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&x, &y| b[y].abs().total_cmp(&b[x].abs()));
            let (top, second) = (order[0], order[1]);
            let mut delta = vec![0.0; n];
            let direction = if b[top] >= 0.0 { -1.0 } else { 1.0 };
            delta[top] = direction * half;
            delta[second] = -direction * half;
            Some(delta)
        }
    }
}

/// Sweeps prior misspecification `pi_hat = pi + delta` over the given L1
/// magnitudes. Re-evaluation mode (the default protocol) keeps the trained
/// scorer fixed; retrain mode retrains per point with the perturbed priors.
/// Infeasible perturbations (any prior outside [0, 1]) are skipped with a
/// warning on standard error.
#[allow(clippy::too_many_arguments)]
pub fn misspecification_sweep(
    train_cfg: &TrainConfig,
    dataset: &MpuDataset,
    test: &LabeledDataset,
    scorer: &Scorer,
    scheme: SweepScheme,
    magnitudes: &[f64],
    mode: SweepMode,
) -> Result<SweepReport> {
    if magnitudes.iter().any(|m| *m < 0.0 || !m.is_finite()) {
        return Err(Error::InvalidConfig(
            "sweep magnitudes must be non-negative".into(),
        ));
    }
    let k = dataset.k();
    let b = loss_gap_terms(dataset, scorer, &train_cfg.risk.surrogate)?;
    let base_metrics = evaluate(scorer, &test.features.view(), &test.labels, k)?;

    let mut points = Vec::new();
    let mut deltas = Vec::new();
    let mut skipped = Vec::new();
    for &magnitude in magnitudes {
        let Some(delta) = sweep_delta(scheme, magnitude, &b) else {
            eprintln!(
                "warning: skipping |delta|_1 = {magnitude}: needs at least two observed classes"
            );
            skipped.push(magnitude);
            continue;
        };
        let mut priors = train_cfg.risk.priors.clone();
        for (i, d) in delta.iter().enumerate() {
            priors[i] += d;
        }
        if priors.iter().any(|p| *p < 0.0 || *p > 1.0) {
            eprintln!(
                "warning: skipping |delta|_1 = {magnitude}: perturbed priors infeasible"
            );
            skipped.push(magnitude);
            continue;
        }
        let (emp_bound, theory_bound) = misspecification_bounds(&b, &delta);
        let macro_f1 = match mode {
            SweepMode::Reevaluate => base_metrics.macro_f1,
            SweepMode::Retrain => {
                let mut cfg = train_cfg.clone();
                cfg.risk.priors = priors;
                let fresh = init_scorer(scorer.architecture().clone(), scorer.seed())?;
                let (retrained, _) = train(&cfg, dataset, fresh)?;
                evaluate(&retrained, &test.features.view(), &test.labels, k)?.macro_f1
            }
        };
        points.push(SweepPoint {
            scheme,
            l1_delta: magnitude,
            macro_f1,
            emp_bound,
            theory_bound,
        });
        deltas.push(delta);
    }
    Ok(SweepReport {
        points,
        b,
        deltas,
        skipped,
    })
}

/// One row of the loss-diagnostics table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossTableRow {
    pub family: LossFamily,
    pub gamma: f64,
    pub sym_clip: SymClip,
    pub f1: Option<f64>,
    pub acc: Option<f64>,
    pub const_sum_max: f64,
    pub const_sum_p99: f64,
}

/// The canonical table rows: each loss family in the variants reported in
/// the diagnostics table (raw and, for hinge/ramp, symmetrized).
pub fn loss_table_specs() -> Vec<SurrogateSpec> {
    vec![
        SurrogateSpec::new(LossFamily::Hinge, 1.0, SymClip::Raw).unwrap(),
        SurrogateSpec::new(LossFamily::Hinge, 1.0, SymClip::Sym).unwrap(),
        SurrogateSpec::new(LossFamily::Logistic, 1.0, SymClip::Raw).unwrap(),
        SurrogateSpec::new(LossFamily::Ramp, 1.0, SymClip::Raw).unwrap(),
        SurrogateSpec::new(LossFamily::Ramp, 1.0, SymClip::Sym).unwrap(),
        SurrogateSpec::new(LossFamily::SigmoidProb, 1.0, SymClip::Raw).unwrap(),
        SurrogateSpec::new(LossFamily::SigmoidProb, 2.0, SymClip::Raw).unwrap(),
        SurrogateSpec::new(LossFamily::TanhSmooth, 1.0, SymClip::Raw).unwrap(),
        SurrogateSpec::new(LossFamily::Unhinged, 1.0, SymClip::Raw).unwrap(),
    ]
}

/// Optional training setup for the F1/Acc columns of the loss table.
pub struct LossTableTraining<'a> {
    pub dataset: &'a MpuDataset,
    pub test: &'a LabeledDataset,
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
    pub scorer_seed: u64,
}

/// Emits one row per loss variant with constant-sum max / p99 residuals on
/// the given grid; F1/Acc columns are populated only when a training setup
/// is supplied.
pub fn reproduce_loss_table(
    grid_lo: f64,
    grid_hi: f64,
    n_points: usize,
    training: Option<&LossTableTraining>,
) -> Result<Vec<LossTableRow>> {
    let mut rows = Vec::new();
    for spec in loss_table_specs() {
        let report: ConstSumReport = constant_sum_check(&spec, grid_lo, grid_hi, n_points)?;
        let (f1, acc) = match training {
            None => (None, None),
            Some(setup) => {
                let mut cfg = setup.train.clone();
                cfg.risk.surrogate = spec;
                let arch = Architecture::mlp(
                    setup.dataset.feature_dim(),
                    &setup.hidden,
                    setup.dataset.k(),
                    setup.batch_norm,
                );
                let scorer = init_scorer(arch, setup.scorer_seed)?;
                let (trained, _) = train(&cfg, setup.dataset, scorer)?;
                let metrics = evaluate(
                    &trained,
                    &setup.test.features.view(),
                    &setup.test.labels,
                    setup.dataset.k(),
                )?;
                (Some(metrics.macro_f1), Some(metrics.accuracy))
            }
        };
        rows.push(LossTableRow {
            family: spec.family,
            gamma: spec.gamma,
            sym_clip: spec.sym_clip,
            f1,
            acc,
            const_sum_max: report.max_residual,
            const_sum_p99: report.p99_residual,
        });
    }
    Ok(rows)
}

pub fn write_loss_table_csv(rows: &[LossTableRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "loss_fun,gamma,sym_clip,f1,acc,const_sum_max,const_sum_p99")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.family.name(),
            fmt_f64(r.gamma),
            match r.sym_clip {
                SymClip::Raw => "raw",
                SymClip::Sym => "sym",
            },
            r.f1.map(fmt_f64).unwrap_or_default(),
            r.acc.map(fmt_f64).unwrap_or_default(),
            fmt_f64(r.const_sum_max),
            fmt_f64(r.const_sum_p99),
        )?;
    }
    Ok(())
}

/// Splits off a seed-deterministic 10% validation slice from each observed
/// set (and the pool), trains at every rate in the sweep, and returns the
/// rate whose scorer best classifies the held-out observed-class samples.
/// Meta-class validation labels are unobservable in MPU, so validation
/// accuracy is measured on held-out labeled samples only.
pub fn select_learning_rate(
    base: &TrainConfig,
    dataset: &MpuDataset,
    architecture: &Architecture,
    scorer_seed: u64,
    rates: &[f64],
) -> Result<(f64, Vec<(f64, f64)>)> {
    if rates.is_empty() {
        return Err(Error::InvalidConfig("empty learning-rate sweep".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(base.seed);
    let mut train_observed = Vec::new();
    let mut val_features: Vec<Array2<f64>> = Vec::new();
    let mut val_labels: Vec<usize> = Vec::new();
    for (i, set) in dataset.observed().iter().enumerate() {
        let n = set.nrows();
        let mut rows: Vec<usize> = (0..n).collect();
        rows.shuffle(&mut rng);
        let n_val = ((n as f64 * 0.1).round() as usize).clamp(1, n - 1);
        train_observed.push(gather(&set.view(), &rows[n_val..]));
        val_features.push(gather(&set.view(), &rows[..n_val]));
        val_labels.extend(std::iter::repeat_n(i, n_val));
    }
    let mut pool_rows: Vec<usize> = (0..dataset.unlabeled().nrows()).collect();
    pool_rows.shuffle(&mut rng);
    let n_pool_val = ((pool_rows.len() as f64 * 0.1).round() as usize)
        .clamp(1, pool_rows.len() - 1);
    let train_pool = gather(&dataset.unlabeled().view(), &pool_rows[n_pool_val..]);

    let train_ds = MpuDataset::new(
        train_observed,
        train_pool,
        dataset.priors().to_vec(),
        None,
    )?;
    let total_val: usize = val_features.iter().map(|m| m.nrows()).sum();
    let mut stacked = Array2::zeros((total_val, dataset.feature_dim()));
    let mut at = 0;
    for m in &val_features {
        for row in m.rows() {
            stacked.row_mut(at).assign(&row);
            at += 1;
        }
    }

    let mut results = Vec::with_capacity(rates.len());
    let mut best: Option<(f64, f64)> = None;
    for &rate in rates {
        let mut cfg = base.clone();
        cfg.learning_rate = rate;
        let scorer = init_scorer(architecture.clone(), scorer_seed)?;
        let (trained, _) = train(&cfg, &train_ds, scorer)?;
        let metrics = evaluate(&trained, &stacked.view(), &val_labels, dataset.k())?;
        results.push((rate, metrics.accuracy));
        if best.map_or(true, |(_, acc)| metrics.accuracy > acc) {
            best = Some((rate, metrics.accuracy));
        }
    }
    Ok((best.expect("non-empty sweep").0, results))
}
