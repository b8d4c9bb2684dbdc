//! Per-sample losses for observed classes and the negative meta-class, the
//! unbiased empirical risk with its constant offset `-2(1 - pi_k)C`, the
//! corrected (ReLU / absolute-value) variants, and the three baseline risks
//! (biased-supervised, OVR-averaged unbiased, AREA).
//!
//! Class indices are 0-based: observed classes `0..k-1`, meta-class `k - 1`.
//! Per-sample evaluations are pure; means reduce in index order so results
//! are bitwise reproducible.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::{validate_priors, MpuView};
use crate::error::{Error, Result};
use crate::model::{Mode, Scorer};
use crate::surrogate::{SurrogateSpec, CONSTANT_SUM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correction {
    None,
    Nn,
    Abs,
}

impl Correction {
    pub const ALL: [Correction; 3] = [Correction::None, Correction::Nn, Correction::Abs];

    pub fn name(self) -> &'static str {
        match self {
            Correction::None => "none",
            Correction::Nn => "nn",
            Correction::Abs => "abs",
        }
    }

    pub fn parse(name: &str) -> Option<Correction> {
        Correction::ALL.iter().copied().find(|c| c.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Csmpu,
    UreOvr,
    BiasedSuper,
    Area,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [
        Estimator::Csmpu,
        Estimator::UreOvr,
        Estimator::BiasedSuper,
        Estimator::Area,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Csmpu => "csmpu",
            Estimator::UreOvr => "ure_ovr",
            Estimator::BiasedSuper => "biased_super",
            Estimator::Area => "area",
        }
    }

    pub fn parse(name: &str) -> Option<Estimator> {
        Estimator::ALL.iter().copied().find(|e| e.name() == name)
    }
}

/// Risk estimator configuration: class count, priors, base loss, correction
/// mode, and which estimator to evaluate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RiskConfig {
    pub k: usize,
    pub priors: Vec<f64>,
    pub surrogate: SurrogateSpec,
    pub correction: Correction,
    pub estimator: Estimator,
}

impl RiskConfig {
    pub fn new(
        k: usize,
        priors: Vec<f64>,
        surrogate: SurrogateSpec,
        correction: Correction,
        estimator: Estimator,
    ) -> Result<Self> {
        let cfg = RiskConfig {
            k,
            priors,
            surrogate,
            correction,
            estimator,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!("k must be >= 2, got {}", self.k)));
        }
        if self.priors.len() != self.k {
            return Err(Error::InvalidConfig(format!(
                "{} priors for k = {}",
                self.priors.len(),
                self.k
            )));
        }
        validate_priors(&self.priors)?;
        self.surrogate.validate()
    }

    /// The model-independent shift `-2(1 - pi_k) C`.
    pub fn constant_offset(&self) -> f64 {
        -2.0 * (1.0 - self.priors[self.k - 1]) * CONSTANT_SUM
    }

    pub fn pi_k(&self) -> f64 {
        self.priors[self.k - 1]
    }
}

/// Value of a risk estimator plus its per-component terms.
///
/// `per_class_terms` holds k entries. For observed class i it is
/// `2 pi_i g(mu_i)` (csmpu) or that estimator's labeled contribution. The
/// final entry is the unlabeled term: for uncorrected csmpu it is the bare
/// pool mean (the offset is reported separately so that
/// `total = sum(per_class_terms) + constant_offset`), while corrected csmpu
/// folds the offset inside, reporting `g(mu_u - 2(1 - pi_k)C)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RiskReport {
    pub estimator: Estimator,
    pub correction: Correction,
    pub total: f64,
    pub per_class_terms: Vec<f64>,
    pub constant_offset: f64,
}

impl RiskReport {
    pub fn corrected(&self) -> bool {
        self.correction != Correction::None
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Identity, `max(value, 0)`, or `|value|`.
pub fn apply_correction(value: f64, mode: Correction) -> f64 {
    match mode {
        Correction::None => value,
        Correction::Nn => value.max(0.0),
        Correction::Abs => value.abs(),
    }
}

/// Subgradient of `apply_correction`; 0 at the kink.
fn correction_grad(value: f64, mode: Correction) -> f64 {
    match mode {
        Correction::None => 1.0,
        Correction::Nn => {
            if value > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Correction::Abs => {
            if value > 0.0 {
                1.0
            } else if value < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
    }
}

/// Cost-sensitive loss of an observed class: `l(f_i) + l(-f_k)`.
pub fn observed_class_loss(
    scores: &ArrayView1<f64>,
    class: usize,
    spec: &SurrogateSpec,
) -> Result<f64> {
    let k = scores.len();
    if k < 2 || class >= k - 1 {
        return Err(Error::InvalidConfig(format!(
            "observed class index {class} out of range for k = {k}"
        )));
    }
    Ok(spec.eval_unchecked(scores[class]) + spec.eval_unchecked(-scores[k - 1]))
}

/// Index of the most confidently predicted observed class (ties broken by
/// the lowest index).
pub fn meta_argmax(scores: &ArrayView1<f64>) -> usize {
    let k = scores.len();
    let mut best = 0;
    for j in 1..k - 1 {
        if scores[j] > scores[best] {
            best = j;
        }
    }
    best
}

/// Meta-class loss: `l(f_k) + l(-f_{i*})` with `i*` the top observed score.
pub fn meta_class_loss(scores: &ArrayView1<f64>, spec: &SurrogateSpec) -> f64 {
    debug_assert!(scores.len() >= 2);
    let k = scores.len();
    let star = meta_argmax(scores);
    spec.eval_unchecked(scores[k - 1]) + spec.eval_unchecked(-scores[star])
}

/// The `1/(k-1)`-averaged OVR surrogate `l(f_y) + mean_{i != y} l(-f_i)`.
pub fn ovr_loss(scores: &ArrayView1<f64>, label: usize, spec: &SurrogateSpec) -> f64 {
    let k = scores.len();
    debug_assert!(label < k);
    let mut rest = 0.0;
    for (i, &s) in scores.iter().enumerate() {
        if i != label {
            rest += spec.eval_unchecked(-s);
        }
    }
    spec.eval_unchecked(scores[label]) + rest / (k - 1) as f64
}

/// The unbiased cost-sensitive empirical risk from per-class means, with the
/// selected correction applied classwise and to the aggregate:
/// `g( sum_i 2 pi_i g(mu_i) + g(mu_u - 2(1 - pi_k)C) )`.
pub fn csmpu_empirical_risk(
    cfg: &RiskConfig,
    labeled_means: &[f64],
    unlabeled_mean: f64,
) -> Result<RiskReport> {
    cfg.validate()?;
    if cfg.estimator != Estimator::Csmpu {
        return Err(Error::InvalidConfig(format!(
            "csmpu_empirical_risk called with estimator {}",
            cfg.estimator.name()
        )));
    }
    if labeled_means.len() != cfg.k - 1 {
        return Err(Error::ShapeMismatch(format!(
            "{} labeled means for k = {}",
            labeled_means.len(),
            cfg.k
        )));
    }
    if labeled_means.iter().any(|m| !m.is_finite()) || !unlabeled_mean.is_finite() {
        return Err(Error::Domain("non-finite class mean".into()));
    }
    let offset = cfg.constant_offset();
    let g = cfg.correction;
    let mut per_class_terms = Vec::with_capacity(cfg.k);
    for (i, &mu) in labeled_means.iter().enumerate() {
        per_class_terms.push(2.0 * cfg.priors[i] * apply_correction(mu, g));
    }
    let total = match g {
        Correction::None => {
            per_class_terms.push(unlabeled_mean);
            per_class_terms.iter().sum::<f64>() + offset
        }
        _ => {
            per_class_terms.push(apply_correction(unlabeled_mean + offset, g));
            apply_correction(per_class_terms.iter().sum::<f64>(), g)
        }
    };
    Ok(RiskReport {
        estimator: Estimator::Csmpu,
        correction: g,
        total,
        per_class_terms,
        constant_offset: offset,
    })
}

/// Scores of every MPU sample set under one scorer.
#[derive(Clone, Debug)]
pub struct MpuScores {
    pub observed: Vec<Array2<f64>>,
    pub unlabeled: Array2<f64>,
}

fn check_sets(cfg: &RiskConfig, scores: &MpuScores) -> Result<()> {
    if scores.observed.len() != cfg.k - 1 {
        return Err(Error::ShapeMismatch(format!(
            "{} observed score sets for k = {}",
            scores.observed.len(),
            cfg.k
        )));
    }
    for (i, s) in scores.observed.iter().enumerate() {
        if s.nrows() == 0 {
            return Err(Error::InvalidConfig(format!(
                "observed class {i} has an empty sample set"
            )));
        }
        if s.ncols() != cfg.k {
            return Err(Error::ShapeMismatch(format!(
                "observed class {i} scores have {} columns for k = {}",
                s.ncols(),
                cfg.k
            )));
        }
    }
    if scores.unlabeled.nrows() == 0 {
        return Err(Error::InvalidConfig("empty unlabeled pool".into()));
    }
    if scores.unlabeled.ncols() != cfg.k {
        return Err(Error::ShapeMismatch(format!(
            "pool scores have {} columns for k = {}",
            scores.unlabeled.ncols(),
            cfg.k
        )));
    }
    Ok(())
}

fn mean_loss(rows: &Array2<f64>, mut f: impl FnMut(&ArrayView1<f64>) -> f64) -> f64 {
    let mut acc = 0.0;
    for row in rows.rows() {
        acc += f(&row);
    }
    acc / rows.nrows() as f64
}

/// Evaluates the configured estimator on precomputed scores.
pub fn estimate_from_scores(cfg: &RiskConfig, scores: &MpuScores) -> Result<RiskReport> {
    Ok(estimate_with_score_grad_impl(cfg, scores, false)?.0)
}

/// As [`estimate_from_scores`], also returning the gradient of the total
/// with respect to every score entry (same shapes as the input).
pub fn estimate_with_score_grad(
    cfg: &RiskConfig,
    scores: &MpuScores,
) -> Result<(RiskReport, MpuScores)> {
    let (report, grads) = estimate_with_score_grad_impl(cfg, scores, true)?;
    Ok((report, grads.expect("gradients requested")))
}

fn estimate_with_score_grad_impl(
    cfg: &RiskConfig,
    scores: &MpuScores,
    want_grads: bool,
) -> Result<(RiskReport, Option<MpuScores>)> {
    cfg.validate()?;
    check_sets(cfg, scores)?;
    let k = cfg.k;
    let meta = k - 1;
    let spec = &cfg.surrogate;
    let mut grads = want_grads.then(|| MpuScores {
        observed: scores
            .observed
            .iter()
            .map(|s| Array2::zeros(s.dim()))
            .collect(),
        unlabeled: Array2::zeros(scores.unlabeled.dim()),
    });

    let report = match cfg.estimator {
        Estimator::Csmpu => {
            let labeled_means: Vec<f64> = scores
                .observed
                .iter()
                .enumerate()
                .map(|(i, s)| mean_loss(s, |row| observed_class_loss(row, i, spec).expect("checked")))
                .collect();
            let unlabeled_mean = mean_loss(&scores.unlabeled, |row| meta_class_loss(row, spec));
            let report = csmpu_empirical_risk(cfg, &labeled_means, unlabeled_mean)?;

            if let Some(g) = grads.as_mut() {
                let offset = cfg.constant_offset();
                let mode = cfg.correction;
                let inner_u = unlabeled_mean + offset;
                let aggregate = scores
                    .observed
                    .iter()
                    .zip(&labeled_means)
                    .enumerate()
                    .map(|(i, (_, &mu))| 2.0 * cfg.priors[i] * apply_correction(mu, mode))
                    .sum::<f64>()
                    + match mode {
                        Correction::None => unlabeled_mean + offset,
                        _ => apply_correction(inner_u, mode),
                    };
                let outer = correction_grad(aggregate, mode);
                for (i, (set, gset)) in scores
                    .observed
                    .iter()
                    .zip(g.observed.iter_mut())
                    .enumerate()
                {
                    let factor = outer * 2.0 * cfg.priors[i] * correction_grad(labeled_means[i], mode)
                        / set.nrows() as f64;
                    for (row, mut grow) in set.rows().into_iter().zip(gset.rows_mut()) {
                        grow[i] += factor * spec.derivative_unchecked(row[i]);
                        grow[meta] += factor * (-spec.derivative_unchecked(-row[meta]));
                    }
                }
                let factor = outer * correction_grad_for_unlabeled(inner_u, mode)
                    / scores.unlabeled.nrows() as f64;
                for (row, mut grow) in scores
                    .unlabeled
                    .rows()
                    .into_iter()
                    .zip(g.unlabeled.rows_mut())
                {
                    let star = meta_argmax(&row);
                    grow[meta] += factor * spec.derivative_unchecked(row[meta]);
                    grow[star] += factor * (-spec.derivative_unchecked(-row[star]));
                }
            }
            report
        }
        Estimator::UreOvr => {
            let mut per_class_terms = Vec::with_capacity(k);
            for (i, set) in scores.observed.iter().enumerate() {
                let composite = mean_loss(set, |row| {
                    ovr_loss(row, i, spec) - ovr_loss(row, meta, spec)
                });
                per_class_terms.push(cfg.priors[i] * composite);
            }
            per_class_terms.push(mean_loss(&scores.unlabeled, |row| ovr_loss(row, meta, spec)));
            let total = per_class_terms.iter().sum();

            if let Some(g) = grads.as_mut() {
                for (i, (set, gset)) in scores
                    .observed
                    .iter()
                    .zip(g.observed.iter_mut())
                    .enumerate()
                {
                    let c = cfg.priors[i] / set.nrows() as f64;
                    for (row, mut grow) in set.rows().into_iter().zip(gset.rows_mut()) {
                        add_ovr_grad(&row, i, spec, c, &mut grow);
                        add_ovr_grad(&row, meta, spec, -c, &mut grow);
                    }
                }
                let c = 1.0 / scores.unlabeled.nrows() as f64;
                for (row, mut grow) in scores
                    .unlabeled
                    .rows()
                    .into_iter()
                    .zip(g.unlabeled.rows_mut())
                {
                    add_ovr_grad(&row, meta, spec, c, &mut grow);
                }
            }
            RiskReport {
                estimator: Estimator::UreOvr,
                correction: Correction::None,
                total,
                per_class_terms,
                constant_offset: 0.0,
            }
        }
        Estimator::BiasedSuper => {
            let mut per_class_terms = Vec::with_capacity(k);
            for (i, set) in scores.observed.iter().enumerate() {
                per_class_terms.push(mean_loss(set, |row| ovr_loss(row, i, spec)));
            }
            per_class_terms.push(mean_loss(&scores.unlabeled, |row| ovr_loss(row, meta, spec)));
            let total = per_class_terms.iter().sum();

            if let Some(g) = grads.as_mut() {
                for (i, (set, gset)) in scores
                    .observed
                    .iter()
                    .zip(g.observed.iter_mut())
                    .enumerate()
                {
                    let c = 1.0 / set.nrows() as f64;
                    for (row, mut grow) in set.rows().into_iter().zip(gset.rows_mut()) {
                        add_ovr_grad(&row, i, spec, c, &mut grow);
                    }
                }
                let c = 1.0 / scores.unlabeled.nrows() as f64;
                for (row, mut grow) in scores
                    .unlabeled
                    .rows()
                    .into_iter()
                    .zip(g.unlabeled.rows_mut())
                {
                    add_ovr_grad(&row, meta, spec, c, &mut grow);
                }
            }
            RiskReport {
                estimator: Estimator::BiasedSuper,
                correction: Correction::None,
                total,
                per_class_terms,
                constant_offset: 0.0,
            }
        }
        Estimator::Area => {
            let labeled_weight = k as f64 / (k - 1) as f64;
            let mut per_class_terms = Vec::with_capacity(k);
            for (i, set) in scores.observed.iter().enumerate() {
                let mean = mean_loss(set, |row| {
                    spec.eval_unchecked(row[i]) + spec.eval_unchecked(-row[meta])
                });
                per_class_terms.push(labeled_weight * cfg.priors[i] * mean);
            }
            let unlabeled_mean = mean_loss(&scores.unlabeled, |row| {
                let mut rest = 0.0;
                for j in 0..k - 1 {
                    rest += spec.eval_unchecked(-row[j]);
                }
                spec.eval_unchecked(row[meta]) + rest / (k - 1) as f64
            });
            per_class_terms.push(unlabeled_mean);
            let total = per_class_terms.iter().sum();

            if let Some(g) = grads.as_mut() {
                for (i, (set, gset)) in scores
                    .observed
                    .iter()
                    .zip(g.observed.iter_mut())
                    .enumerate()
                {
                    let c = labeled_weight * cfg.priors[i] / set.nrows() as f64;
                    for (row, mut grow) in set.rows().into_iter().zip(gset.rows_mut()) {
                        grow[i] += c * spec.derivative_unchecked(row[i]);
                        grow[meta] += c * (-spec.derivative_unchecked(-row[meta]));
                    }
                }
                let c = 1.0 / scores.unlabeled.nrows() as f64;
                for (row, mut grow) in scores
                    .unlabeled
                    .rows()
                    .into_iter()
                    .zip(g.unlabeled.rows_mut())
                {
                    grow[meta] += c * spec.derivative_unchecked(row[meta]);
                    let share = c / (k - 1) as f64;
                    for j in 0..k - 1 {
                        grow[j] += share * (-spec.derivative_unchecked(-row[j]));
                    }
                }
            }
            RiskReport {
                estimator: Estimator::Area,
                correction: Correction::None,
                total,
                per_class_terms,
                constant_offset: 0.0,
            }
        }
    };
    Ok((report, grads))
}

/// For uncorrected csmpu the unlabeled mean enters linearly.
fn correction_grad_for_unlabeled(inner: f64, mode: Correction) -> f64 {
    match mode {
        Correction::None => 1.0,
        _ => correction_grad(inner, mode),
    }
}

fn add_ovr_grad(
    row: &ArrayView1<f64>,
    label: usize,
    spec: &SurrogateSpec,
    coeff: f64,
    grad: &mut ndarray::ArrayViewMut1<f64>,
) {
    let k = row.len();
    grad[label] += coeff * spec.derivative_unchecked(row[label]);
    let share = coeff / (k - 1) as f64;
    for j in 0..k {
        if j != label {
            grad[j] += share * (-spec.derivative_unchecked(-row[j]));
        }
    }
}

fn stack_view(view: &MpuView) -> Array2<f64> {
    let total: usize = view
        .observed
        .iter()
        .map(|m| m.nrows())
        .sum::<usize>()
        + view.unlabeled.nrows();
    let d = view.unlabeled.ncols();
    let mut out = Array2::zeros((total, d));
    let mut at = 0;
    for set in view.observed.iter().chain(std::iter::once(&view.unlabeled)) {
        for row in set.rows() {
            out.row_mut(at).assign(&row);
            at += 1;
        }
    }
    out
}

fn split_scores(view: &MpuView, scores: Array2<f64>) -> MpuScores {
    let mut at = 0;
    let mut observed = Vec::with_capacity(view.observed.len());
    for set in &view.observed {
        let n = set.nrows();
        observed.push(scores.slice(ndarray::s![at..at + n, ..]).to_owned());
        at += n;
    }
    let unlabeled = scores.slice(ndarray::s![at.., ..]).to_owned();
    MpuScores {
        observed,
        unlabeled,
    }
}

/// Scores every sample set with one stacked forward pass (so train-mode
/// batch statistics see the whole batch) and evaluates the estimator.
pub fn empirical_risk(
    cfg: &RiskConfig,
    view: &MpuView,
    scorer: &Scorer,
    mode: Mode,
) -> Result<RiskReport> {
    let x = stack_view(view);
    let scores = scorer.forward(&x.view(), mode)?;
    estimate_from_scores(cfg, &split_scores(view, scores))
}

fn gradient_impl(
    cfg: &RiskConfig,
    batch: &MpuView,
    scorer: &Scorer,
    mode: Mode,
) -> Result<(RiskReport, Vec<f64>, crate::model::ForwardCache)> {
    let x = stack_view(batch);
    let (scores, cache) = scorer.forward_cached(&x.view(), mode)?;
    let split = split_scores(batch, scores);
    let (report, score_grads) = estimate_with_score_grad(cfg, &split)?;
    let mut upstream = Array2::zeros((x.nrows(), cfg.k));
    let mut at = 0;
    for set in score_grads
        .observed
        .iter()
        .chain(std::iter::once(&score_grads.unlabeled))
    {
        for row in set.rows() {
            upstream.row_mut(at).assign(&row);
            at += 1;
        }
    }
    let grads = scorer.backward(&cache, &upstream.view())?;
    Ok((report, grads, cache))
}

/// Gradient of the configured estimator with respect to scorer parameters,
/// together with the risk report for the same batch. Kink and clip
/// subgradients follow the surrogate-module conventions; corrected terms
/// propagate zero gradient where the non-negativity map clips.
pub fn risk_gradient_terms(
    cfg: &RiskConfig,
    batch: &MpuView,
    scorer: &Scorer,
    mode: Mode,
) -> Result<(RiskReport, Vec<f64>)> {
    let (report, grads, _) = gradient_impl(cfg, batch, scorer, mode)?;
    Ok((report, grads))
}

/// As [`risk_gradient_terms`] in train mode, additionally folding the batch
/// statistics into the scorer's running batch-norm estimates. This is the
/// training-step primitive.
pub fn training_gradient(
    cfg: &RiskConfig,
    batch: &MpuView,
    scorer: &mut Scorer,
) -> Result<(RiskReport, Vec<f64>)> {
    let (report, grads, cache) = gradient_impl(cfg, batch, scorer, Mode::Train)?;
    scorer.apply_bn_updates(&cache);
    Ok((report, grads))
}

/// Sum of per-class means of the supervised OVR loss, weighted by priors:
/// the quantity the OVR unbiased estimator targets. Used by oracles.
pub fn supervised_ovr_risk(
    cfg: &RiskConfig,
    class_scores: &[Array2<f64>],
) -> Result<f64> {
    if class_scores.len() != cfg.k {
        return Err(Error::ShapeMismatch(format!(
            "{} class score sets for k = {}",
            class_scores.len(),
            cfg.k
        )));
    }
    let mut total = 0.0;
    for (y, set) in class_scores.iter().enumerate() {
        if set.nrows() == 0 {
            return Err(Error::InvalidConfig(format!("class {y} has no samples")));
        }
        total += cfg.priors[y] * mean_loss(set, |row| ovr_loss(row, y, &cfg.surrogate));
    }
    Ok(total)
}

/// Rebuilds an [`MpuScores`] by scoring each sample set separately in
/// inference mode. Convenience for diagnostics.
pub fn score_sets(view: &MpuView, scorer: &Scorer) -> Result<MpuScores> {
    let mut observed = Vec::with_capacity(view.observed.len());
    for set in &view.observed {
        observed.push(scorer.forward(set, Mode::Infer)?);
    }
    let unlabeled = scorer.forward(&view.unlabeled, Mode::Infer)?;
    Ok(MpuScores {
        observed,
        unlabeled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::LossFamily;
    use ndarray::{array, Array2};

    fn unhinged() -> SurrogateSpec {
        SurrogateSpec::raw(LossFamily::Unhinged)
    }

    fn cfg2(correction: Correction, estimator: Estimator) -> RiskConfig {
        RiskConfig::new(2, vec![0.5, 0.5], unhinged(), correction, estimator).unwrap()
    }

    #[test]
    fn observed_class_loss_examples() {
        let s = unhinged();
        let scores = array![1.0, -1.0];
        assert_eq!(observed_class_loss(&scores.view(), 0, &s).unwrap(), 0.0);
        let scores = array![0.0, 0.0];
        assert_eq!(observed_class_loss(&scores.view(), 0, &s).unwrap(), 1.0);
        let scores = array![-1.0, 1.0];
        assert_eq!(observed_class_loss(&scores.view(), 0, &s).unwrap(), 2.0);
        assert!(observed_class_loss(&scores.view(), 1, &s).is_err());
    }

    #[test]
    fn meta_class_loss_examples() {
        let s = unhinged();
        let scores = array![-1.0, 1.0];
        assert_eq!(meta_class_loss(&scores.view(), &s), 0.0);
        let scores = array![0.0, 0.0, 0.0];
        assert_eq!(meta_class_loss(&scores.view(), &s), 1.0);
        // i* = 1 since f_1 = 3 is the top observed score.
        let scores = array![2.0, 3.0, -1.0];
        assert_eq!(meta_class_loss(&scores.view(), &s), 3.0);
        // Argmax ties break to the lowest index.
        let scores = array![5.0, 5.0, 0.0];
        assert_eq!(meta_argmax(&scores.view()), 0);
    }

    #[test]
    fn meta_argmax_scale_free() {
        let scores = array![0.2, 1.4, -0.3, 0.0];
        let before = meta_argmax(&scores.view());
        let transformed = scores.mapv(|v: f64| (3.0 * v).exp());
        assert_eq!(meta_argmax(&transformed.view()), before);
    }

    #[test]
    fn csmpu_risk_examples() {
        let cfg = cfg2(Correction::None, Estimator::Csmpu);
        let r = csmpu_empirical_risk(&cfg, &[0.0], 0.0).unwrap();
        assert_eq!(r.total, -1.0);
        assert_eq!(r.constant_offset, -1.0);

        let cfg = cfg2(Correction::Nn, Estimator::Csmpu);
        let r = csmpu_empirical_risk(&cfg, &[0.0], 0.0).unwrap();
        assert_eq!(r.total, 0.0);

        let cfg = cfg2(Correction::None, Estimator::Csmpu);
        let r = csmpu_empirical_risk(&cfg, &[1.0], 1.0).unwrap();
        assert_eq!(r.total, 1.0);
    }

    #[test]
    fn offset_identity_for_uncorrected() {
        let cfg = RiskConfig::new(
            3,
            vec![0.3, 0.2, 0.5],
            unhinged(),
            Correction::None,
            Estimator::Csmpu,
        )
        .unwrap();
        let r = csmpu_empirical_risk(&cfg, &[0.7, -0.4], 1.3).unwrap();
        let sum: f64 = r.per_class_terms.iter().sum();
        assert_eq!(r.total - sum, r.constant_offset);
    }

    #[test]
    fn apply_correction_examples() {
        assert_eq!(apply_correction(-1.0, Correction::Nn), 0.0);
        assert_eq!(apply_correction(-1.0, Correction::Abs), 1.0);
        for mode in Correction::ALL {
            assert_eq!(apply_correction(0.3, mode), 0.3);
        }
    }

    fn single_sample_scores(labeled: Vec<f64>, unlabeled: Vec<f64>) -> MpuScores {
        let k = labeled.len();
        MpuScores {
            observed: vec![Array2::from_shape_vec((1, k), labeled).unwrap()],
            unlabeled: Array2::from_shape_vec((1, k), unlabeled).unwrap(),
        }
    }

    #[test]
    fn biased_super_examples() {
        let cfg = cfg2(Correction::None, Estimator::BiasedSuper);
        let s = single_sample_scores(vec![1.0, -1.0], vec![-1.0, 1.0]);
        let r = estimate_from_scores(&cfg, &s).unwrap();
        assert_eq!(r.per_class_terms, vec![0.0, 0.0]);
        assert_eq!(r.total, 0.0);

        let s = single_sample_scores(vec![0.0, 0.0], vec![0.0, 0.0]);
        let r = estimate_from_scores(&cfg, &s).unwrap();
        assert_eq!(r.total, 2.0, "1 per sample set");
        assert_eq!(r.constant_offset, 0.0);
    }

    #[test]
    fn ure_ovr_example() {
        let cfg = cfg2(Correction::None, Estimator::UreOvr);
        let s = single_sample_scores(vec![0.0, 0.0], vec![0.0, 0.0]);
        let r = estimate_from_scores(&cfg, &s).unwrap();
        // Composite cancels on the labeled sample; pool contributes 1.
        assert_eq!(r.per_class_terms[0], 0.0);
        assert_eq!(r.total, 1.0);
    }

    #[test]
    fn area_examples() {
        let cfg = cfg2(Correction::None, Estimator::Area);
        let s = single_sample_scores(vec![0.0, 0.0], vec![0.0, 0.0]);
        let r = estimate_from_scores(&cfg, &s).unwrap();
        assert_eq!(r.total, 2.0);

        let s = single_sample_scores(vec![1.0, -1.0], vec![-1.0, 1.0]);
        let r = estimate_from_scores(&cfg, &s).unwrap();
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn empty_class_set_is_hard_error() {
        let cfg = cfg2(Correction::None, Estimator::Csmpu);
        let s = MpuScores {
            observed: vec![Array2::zeros((0, 2))],
            unlabeled: Array2::zeros((3, 2)),
        };
        assert!(estimate_from_scores(&cfg, &s).is_err());
    }

    #[test]
    fn correction_dominance_and_nonnegativity() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(42);
        for _ in 0..200 {
            let mus: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mu_u: f64 = rng.random_range(-1.0..3.0);
            let base = RiskConfig::new(
                3,
                vec![0.25, 0.25, 0.5],
                unhinged(),
                Correction::None,
                Estimator::Csmpu,
            )
            .unwrap();
            let none = csmpu_empirical_risk(&base, &mus, mu_u).unwrap().total;
            let nn = csmpu_empirical_risk(
                &RiskConfig {
                    correction: Correction::Nn,
                    ..base.clone()
                },
                &mus,
                mu_u,
            )
            .unwrap()
            .total;
            let abs = csmpu_empirical_risk(
                &RiskConfig {
                    correction: Correction::Abs,
                    ..base.clone()
                },
                &mus,
                mu_u,
            )
            .unwrap()
            .total;
            assert!(nn >= none - 1e-15);
            assert!(nn >= 0.0 && abs >= 0.0);
        }
    }

    #[test]
    fn area_nonnegative_for_sym_clipped() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(9);
        let spec = SurrogateSpec::raw(LossFamily::Hinge).symmetrize();
        let cfg = RiskConfig::new(
            3,
            vec![0.3, 0.3, 0.4],
            spec,
            Correction::None,
            Estimator::Area,
        )
        .unwrap();
        for _ in 0..100 {
            let scores = MpuScores {
                observed: (0..2)
                    .map(|_| Array2::from_shape_fn((4, 3), |_| rng.random_range(-5.0..5.0)))
                    .collect(),
                unlabeled: Array2::from_shape_fn((6, 3), |_| rng.random_range(-5.0..5.0)),
            };
            let r = estimate_from_scores(&cfg, &scores).unwrap();
            assert!(r.total >= 0.0, "area total {}", r.total);
        }
    }

    #[test]
    fn nn_clipped_inner_term_has_zero_gradient() {
        // Labeled mean is forced negative via large scores; with unhinged,
        // mu_1 = l(f_1) + l(-f_k) < 0 once both margins exceed 1.
        let cfg = cfg2(Correction::Nn, Estimator::Csmpu);
        let scores = single_sample_scores(vec![4.0, -4.0], vec![0.0, 0.0]);
        let (_, grads) = estimate_with_score_grad(&cfg, &scores).unwrap();
        assert!(grads.observed[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn abs_negative_inner_term_negates_gradient() {
        let base = cfg2(Correction::None, Estimator::Csmpu);
        let abs = cfg2(Correction::Abs, Estimator::Csmpu);
        // Same setup: labeled inner term negative, everything else positive
        // enough that the aggregate stays positive.
        let scores = single_sample_scores(vec![4.0, -4.0], vec![0.5, -0.5]);
        let (_, g_none) = estimate_with_score_grad(&base, &scores).unwrap();
        let (_, g_abs) = estimate_with_score_grad(&abs, &scores).unwrap();
        for (a, b) in g_none.observed[0].iter().zip(g_abs.observed[0].iter()) {
            assert!((a + b).abs() < 1e-12, "expected negation: {a} vs {b}");
        }
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(77);
        let spec = SurrogateSpec::new(LossFamily::SigmoidProb, 1.0, crate::surrogate::SymClip::Raw)
            .unwrap();
        let h = 1e-5;
        for estimator in Estimator::ALL {
            for correction in Correction::ALL {
                let cfg = RiskConfig::new(
                    3,
                    vec![0.3, 0.2, 0.5],
                    spec,
                    correction,
                    estimator,
                )
                .unwrap();
                let scores = MpuScores {
                    observed: (0..2)
                        .map(|_| Array2::from_shape_fn((3, 3), |_| rng.random_range(-2.0..2.0)))
                        .collect(),
                    unlabeled: Array2::from_shape_fn((4, 3), |_| rng.random_range(-2.0..2.0)),
                };
                let (_, grads) = estimate_with_score_grad(&cfg, &scores).unwrap();
                // Probe a few entries in each set by central differences.
                for set_idx in 0..3 {
                    for _ in 0..4 {
                        let (r, c) = (
                            rng.random_range(0..if set_idx < 2 { 3 } else { 4 }),
                            rng.random_range(0..3usize),
                        );
                        let mut up = scores.clone();
                        let mut down = scores.clone();
                        if set_idx < 2 {
                            up.observed[set_idx][[r, c]] += h;
                            down.observed[set_idx][[r, c]] -= h;
                        } else {
                            up.unlabeled[[r, c]] += h;
                            down.unlabeled[[r, c]] -= h;
                        }
                        let fu = estimate_from_scores(&cfg, &up).unwrap().total;
                        let fd = estimate_from_scores(&cfg, &down).unwrap().total;
                        let numeric = (fu - fd) / (2.0 * h);
                        let analytic = if set_idx < 2 {
                            grads.observed[set_idx][[r, c]]
                        } else {
                            grads.unlabeled[[r, c]]
                        };
                        let scale = analytic.abs().max(numeric.abs()).max(1e-6);
                        assert!(
                            (analytic - numeric).abs() / scale < 1e-4,
                            "{estimator:?}/{correction:?} set {set_idx} ({r},{c}): \
                             {analytic} vs {numeric}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn report_serializes_expected_fields() {
        let cfg = cfg2(Correction::Nn, Estimator::Csmpu);
        let r = csmpu_empirical_risk(&cfg, &[0.25], 0.75).unwrap();
        let json = r.to_json();
        for field in [
            "estimator",
            "correction",
            "total",
            "per_class_terms",
            "constant_offset",
        ] {
            assert!(json.contains(field), "missing {field}: {json}");
        }
    }
}
