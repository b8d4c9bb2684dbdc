//! Shared test oracles: population expectations over the 2-D Gaussian
//! synthetic family by dense tensor quadrature, independent of every
//! estimator code path they are used to check.

use csmpu::model::{Mode, Scorer};
use csmpu::risk::{meta_class_loss, observed_class_loss, ovr_loss, RiskConfig};
use ndarray::{Array2, ArrayView1};

/// Scores and normalized Gaussian weights on a dense midpoint grid around
/// one class mean. `radius` is in standard deviations; `step` the spacing.
pub struct ClassQuadrature {
    pub weights: Vec<f64>,
    pub scores: Array2<f64>,
}

pub fn class_quadrature(
    mean: (f64, f64),
    radius: f64,
    step: f64,
    scorer: &Scorer,
) -> ClassQuadrature {
    let n_side = (2.0 * radius / step).round() as usize;
    let mut points = Array2::zeros((n_side * n_side, 2));
    let mut weights = Vec::with_capacity(n_side * n_side);
    let norm = 1.0 / (2.0 * std::f64::consts::PI);
    let mut idx = 0;
    for i in 0..n_side {
        let dx = -radius + (i as f64 + 0.5) * step;
        for j in 0..n_side {
            let dy = -radius + (j as f64 + 0.5) * step;
            points[[idx, 0]] = mean.0 + dx;
            points[[idx, 1]] = mean.1 + dy;
            weights.push(norm * (-(dx * dx + dy * dy) / 2.0).exp() * step * step);
            idx += 1;
        }
    }
    // Normalize so that E[1] = 1 exactly.
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    let scores = scorer
        .forward(&points.view(), Mode::Infer)
        .expect("quadrature forward");
    ClassQuadrature { weights, scores }
}

pub fn expect_loss(q: &ClassQuadrature, f: impl Fn(&ArrayView1<f64>) -> f64) -> f64 {
    q.weights
        .iter()
        .zip(q.scores.rows())
        .map(|(w, row)| w * f(&row))
        .sum()
}

/// Population value of the uncorrected cost-sensitive MPU risk:
/// `sum_i 2 pi_i E_{p_i}[L_i] + E_{p_u}[L_k] - 2(1 - pi_k)`.
pub fn population_csmpu_risk(cfg: &RiskConfig, quads: &[ClassQuadrature]) -> f64 {
    let k = cfg.k;
    let mut total = 0.0;
    for i in 0..k - 1 {
        let e = expect_loss(&quads[i], |row| {
            observed_class_loss(row, i, &cfg.surrogate).expect("valid class")
        });
        total += 2.0 * cfg.priors[i] * e;
    }
    // E over the unlabeled mixture decomposes over class conditionals.
    for j in 0..k {
        let e = expect_loss(&quads[j], |row| meta_class_loss(row, &cfg.surrogate));
        total += cfg.priors[j] * e;
    }
    total + cfg.constant_offset()
}

/// Population value of the fully supervised OVR risk
/// `E_{(x,y)}[ovr_loss(f(x), y)]`, the quantity the OVR unbiased estimator
/// targets.
pub fn population_supervised_ovr_risk(cfg: &RiskConfig, quads: &[ClassQuadrature]) -> f64 {
    let mut total = 0.0;
    for (j, q) in quads.iter().enumerate() {
        total += cfg.priors[j] * expect_loss(q, |row| ovr_loss(row, j, &cfg.surrogate));
    }
    total
}

/// Mean and standard error of a sample.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Uniform pass/fail line for acceptance criteria.
pub fn report(n: u32, name: &str, pass: bool, details: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n} ({name}): {verdict} - {details}");
    assert!(pass, "criterion {n} ({name}) failed: {details}");
}
