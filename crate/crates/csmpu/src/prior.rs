//! Class-prior estimation from margins only: Neyman-Pearson-type lower
//! bounds with a detectability scan, penalized-L1 moment matching over
//! margin histograms, feasibility projection, and bootstrap uncertainty.
//!
//! All steps consume margin arrays (pool and per-class positives scored by
//! some scorer); no explicit negative-class model is ever formed.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surrogate::percentile;

/// NP-type lower bound `max{0, (P_U[phi=1] - alpha) / max(P_P[phi=1], eps)}`,
/// additionally clamped to at most 1.
pub fn np_lower_bound(
    pool_accept_rate: f64,
    pos_accept_rate: f64,
    alpha: f64,
    epsilon: f64,
) -> f64 {
    debug_assert!((0.0..=1.0).contains(&pool_accept_rate));
    debug_assert!((0.0..=1.0).contains(&pos_accept_rate));
    debug_assert!(alpha > 0.0 && alpha < 1.0);
    debug_assert!(epsilon > 0.0);
    let bound = (pool_accept_rate - alpha) / pos_accept_rate.max(epsilon);
    bound.clamp(0.0, 1.0)
}

const DEFAULT_EPSILON: f64 = 1e-6;

/// Detectability scan over an alpha grid.
///
/// For each alpha the detector threshold is calibrated on the first half of
/// the positive-proxy margins so that the detector retains `1 - alpha` of the
/// proxy (type-I error `alpha` on the proxy); acceptance rates are then
/// measured on the held-out half and on the pool. A class is detectable iff
/// some alpha yields a positive bound; the best (largest) bound is returned.
pub fn detectability_scan(
    pool_scores: &[f64],
    pos_scores: &[f64],
    alphas: &[f64],
) -> Result<(bool, f64)> {
    if pool_scores.is_empty() || pos_scores.is_empty() {
        return Err(Error::InvalidConfig(
            "detectability scan needs non-empty score arrays".into(),
        ));
    }
    if alphas.is_empty() {
        return Err(Error::InvalidConfig("empty alpha grid".into()));
    }
    if alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
        return Err(Error::InvalidConfig(format!(
            "alphas must lie in (0, 1): {alphas:?}"
        )));
    }
    let mut calib: Vec<f64> = Vec::new();
    let mut eval: Vec<f64> = Vec::new();
    let half = pos_scores.len().div_ceil(2);
    calib.extend_from_slice(&pos_scores[..half]);
    if half < pos_scores.len() {
        eval.extend_from_slice(&pos_scores[half..]);
    } else {
        eval.extend_from_slice(&pos_scores[..half]);
    }
    calib.sort_by(|a, b| a.total_cmp(b));

    let accept_rate = |scores: &[f64], t: f64| {
        scores.iter().filter(|&&z| z >= t).count() as f64 / scores.len() as f64
    };

    let mut best = 0.0_f64;
    for &alpha in alphas {
        let threshold = percentile(&calib, alpha);
        let pool_accept = accept_rate(pool_scores, threshold);
        let pos_accept = accept_rate(&eval, threshold);
        best = best.max(np_lower_bound(pool_accept, pos_accept, alpha, DEFAULT_EPSILON));
    }
    Ok((best > 0.0, best))
}

/// Stacked margin-moment system `A pi ~ b`.
///
/// Rows are grouped by margin column: for observed class column `i` and
/// histogram bin `r`, `A[(i, r)][j]` is the mean of the bin indicator over
/// class-j positives' margins in column `i`, and `b[(i, r)]` the same mean
/// over the pool, so `R = bins x (k - 1)`.
#[derive(Clone, Debug)]
pub struct MomentSystem {
    pub a: Array2<f64>,
    pub b: Array1<f64>,
    /// Histogram bin edges per margin column.
    pub bin_edges: Vec<Vec<f64>>,
    /// Rows whose A-row and b entry are all zero (bins covering no data).
    pub zero_rows: Vec<usize>,
}

/// Uniform bin edges per margin column over the pooled empirical range.
pub fn moment_bin_edges(
    pool_margins: &ArrayView2<f64>,
    pos_margins: &[Array2<f64>],
    n_bins: usize,
) -> Result<Vec<Vec<f64>>> {
    if n_bins == 0 {
        return Err(Error::InvalidConfig("need at least one bin".into()));
    }
    let cols = pool_margins.ncols();
    let mut edges = Vec::with_capacity(cols);
    for c in 0..cols {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in pool_margins.column(c) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        for set in pos_margins {
            if set.ncols() != cols {
                return Err(Error::ShapeMismatch(
                    "positive margins must match pool margin columns".into(),
                ));
            }
            for &v in set.column(c) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::Domain(format!("non-finite margins in column {c}")));
        }
        if lo == hi {
            // Constant margins: widen so the single value lands mid-bin.
            lo -= 0.5;
            hi += 0.5;
        }
        let mut col_edges = Vec::with_capacity(n_bins + 1);
        for e in 0..=n_bins {
            col_edges.push(lo + (hi - lo) * e as f64 / n_bins as f64);
        }
        edges.push(col_edges);
    }
    Ok(edges)
}

fn bin_index(edges: &[f64], v: f64) -> usize {
    let bins = edges.len() - 1;
    if v <= edges[0] {
        return 0;
    }
    if v >= edges[bins] {
        return bins - 1;
    }
    // Uniform edges; direct index then clamp guards rounding.
    let width = (edges[bins] - edges[0]) / bins as f64;
    (((v - edges[0]) / width) as usize).min(bins - 1)
}

/// Builds the stacked system from explicit bin edges.
pub fn build_moment_system(
    pool_margins: &ArrayView2<f64>,
    pos_margins: &[Array2<f64>],
    bin_edges: &[Vec<f64>],
) -> Result<MomentSystem> {
    let n_classes = pos_margins.len();
    let cols = pool_margins.ncols();
    if cols != n_classes {
        return Err(Error::ShapeMismatch(format!(
            "{cols} margin columns for {n_classes} positive sets"
        )));
    }
    if bin_edges.len() != cols {
        return Err(Error::ShapeMismatch(format!(
            "{} edge vectors for {cols} margin columns",
            bin_edges.len()
        )));
    }
    if pool_margins.nrows() == 0 {
        return Err(Error::InvalidConfig("empty pool margins".into()));
    }
    for edges in bin_edges {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidConfig(
                "degenerate bins: edges must be strictly increasing".into(),
            ));
        }
    }
    for (j, set) in pos_margins.iter().enumerate() {
        if set.nrows() == 0 {
            return Err(Error::InvalidConfig(format!(
                "positive margin set {j} is empty"
            )));
        }
        if set.ncols() != cols {
            return Err(Error::ShapeMismatch(
                "positive margins must match pool margin columns".into(),
            ));
        }
    }

    let rows_per_col: Vec<usize> = bin_edges.iter().map(|e| e.len() - 1).collect();
    let total_rows: usize = rows_per_col.iter().sum();
    let mut a = Array2::zeros((total_rows, n_classes));
    let mut b = Array1::zeros(total_rows);

    let mut row0 = 0;
    for c in 0..cols {
        let edges = &bin_edges[c];
        let bins = rows_per_col[c];
        let n_pool = pool_margins.nrows() as f64;
        for &v in pool_margins.column(c) {
            b[row0 + bin_index(edges, v)] += 1.0 / n_pool;
        }
        for (j, set) in pos_margins.iter().enumerate() {
            let n = set.nrows() as f64;
            for &v in set.column(c) {
                a[[row0 + bin_index(edges, v), j]] += 1.0 / n;
            }
        }
        row0 += bins;
    }

    let zero_rows = (0..total_rows)
        .filter(|&r| b[r] == 0.0 && a.row(r).iter().all(|&v| v == 0.0))
        .collect();
    Ok(MomentSystem {
        a,
        b,
        bin_edges: bin_edges.to_vec(),
        zero_rows,
    })
}

/// Builds the system with `n_bins` uniform bins per margin column.
pub fn build_moment_system_binned(
    pool_margins: &ArrayView2<f64>,
    pos_margins: &[Array2<f64>],
    n_bins: usize,
) -> Result<MomentSystem> {
    let edges = moment_bin_edges(pool_margins, pos_margins, n_bins)?;
    build_moment_system(pool_margins, pos_margins, &edges)
}

/// Clips each coordinate to its lower bound; if the total then exceeds 1,
/// the slack above the bounds is scaled uniformly so the sum is exactly 1.
/// Preserves lower bounds exactly and is idempotent.
pub fn project_feasible(pi: &[f64], lower_bounds: &[f64]) -> Result<Vec<f64>> {
    if pi.len() != lower_bounds.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} coordinates vs {} lower bounds",
            pi.len(),
            lower_bounds.len()
        )));
    }
    if pi.iter().chain(lower_bounds).any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite projection input".into()));
    }
    let sum_lower: f64 = lower_bounds.iter().sum();
    if sum_lower > 1.0 {
        return Err(Error::Infeasible(format!(
            "lower bounds sum to {sum_lower} > 1"
        )));
    }
    let mut out: Vec<f64> = pi
        .iter()
        .zip(lower_bounds)
        .map(|(&p, &l)| p.max(l))
        .collect();
    let total: f64 = out.iter().sum();
    if total > 1.0 {
        let slack_total = total - sum_lower;
        let scale = (1.0 - sum_lower) / slack_total;
        for (o, &l) in out.iter_mut().zip(lower_bounds) {
            *o = l + (*o - l) * scale;
        }
        // Rounding can leave the sum a few ULP above 1; shave the excess off
        // the largest-slack coordinates.
        loop {
            let total: f64 = out.iter().sum();
            if total <= 1.0 {
                break;
            }
            let excess = total - 1.0;
            let j = out
                .iter()
                .zip(lower_bounds)
                .enumerate()
                .max_by(|a, b| (a.1 .0 - a.1 .1).total_cmp(&(b.1 .0 - b.1 .1)))
                .map(|(j, _)| j)
                .expect("non-empty");
            let shaved = (out[j] - excess).max(lower_bounds[j]);
            if shaved == out[j] {
                break;
            }
            out[j] = shaved;
        }
    }
    Ok(out)
}

fn l1_objective(system: &MomentSystem, lower: &[f64], lambda: f64, pi: &Array1<f64>) -> f64 {
    let residual = system.a.dot(pi) - &system.b;
    let penalty: f64 = pi
        .iter()
        .zip(lower)
        .map(|(p, l)| (p - l).abs())
        .sum();
    residual.dot(&residual) + lambda * penalty
}

/// Approximately minimizes `|A pi - b|^2 + lambda |pi - lower|_1` over
/// `{pi_i >= lower_i, sum pi <= 1}` by projected proximal-gradient steps.
/// The objective must be non-increasing (within 1e-9 slack); ten consecutive
/// violations abort with a divergence error.
pub fn solve_penalized_l1(
    system: &MomentSystem,
    lower_bounds: &[f64],
    lambda: f64,
    step: f64,
    iters: usize,
) -> Result<Vec<f64>> {
    let n = system.a.ncols();
    if lower_bounds.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} lower bounds for {n} classes",
            lower_bounds.len()
        )));
    }
    if lambda < 0.0 || !(step > 0.0) || iters == 0 {
        return Err(Error::InvalidConfig(
            "need lambda >= 0, step > 0, iters >= 1".into(),
        ));
    }
    let mut pi = Array1::from_vec(project_feasible(lower_bounds, lower_bounds)?);
    let mut objective = l1_objective(system, lower_bounds, lambda, &pi);
    let mut bad_steps = 0;
    for _ in 0..iters {
        let residual = system.a.dot(&pi) - &system.b;
        let grad = system.a.t().dot(&residual) * 2.0;
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let y = pi[i] - step * grad[i];
            // Soft threshold toward the lower bound.
            let slack = y - lower_bounds[i];
            let shrunk = slack.signum() * (slack.abs() - step * lambda).max(0.0);
            next.push(lower_bounds[i] + shrunk);
        }
        let projected = Array1::from_vec(project_feasible(&next, lower_bounds)?);
        let new_objective = l1_objective(system, lower_bounds, lambda, &projected);
        if new_objective > objective + 1e-9 {
            bad_steps += 1;
            if bad_steps >= 10 {
                return Err(Error::Divergence(format!(
                    "objective rose from {objective} to {new_objective}; try a smaller step \
                     than {step}"
                )));
            }
        } else {
            bad_steps = 0;
        }
        pi = projected;
        objective = new_objective;
    }
    Ok(pi.to_vec())
}

/// Pipeline defaults per the estimation recipe.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub alphas: Vec<f64>,
    pub epsilon: f64,
    /// Fallback proxy size when a class has no positive margins: top q
    /// fraction of the pool by that class's margin.
    pub top_q: f64,
    pub n_bins: usize,
    pub lambda: f64,
    pub step: f64,
    pub iters: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            alphas: vec![0.01, 0.02, 0.05],
            epsilon: 1e-6,
            top_q: 0.10,
            n_bins: 64,
            lambda: 1e-3,
            step: 1e-2,
            iters: 2000,
        }
    }
}

/// Point estimate, NP lower bounds, optional bootstrap interval, and
/// per-class detectability flags.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PriorEstimate {
    pub point: Vec<f64>,
    pub lower_bounds: Vec<f64>,
    pub interval: Option<Vec<[f64; 2]>>,
    pub detectable: Vec<bool>,
    pub config: PipelineConfig,
}

impl PriorEstimate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("estimate serializes")
    }
}

fn top_q_rows(pool_margins: &ArrayView2<f64>, column: usize, q: f64) -> Array2<f64> {
    let n = pool_margins.nrows();
    let take = ((n as f64 * q).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pool_margins[[b, column]].total_cmp(&pool_margins[[a, column]]));
    let mut out = Array2::zeros((take, pool_margins.ncols()));
    for (dst, &src) in order[..take].iter().enumerate() {
        out.row_mut(dst).assign(&pool_margins.row(src));
    }
    out
}

/// Runs detectability + NP bounds (step 1) and penalized-L1 moment matching
/// (step 2) on margin arrays. Classes with no positive margins fall back to
/// the top-q pool proxy; non-detectable classes are fixed to prior 0.
pub fn estimate_priors(
    config: &PipelineConfig,
    pool_margins: &ArrayView2<f64>,
    pos_margins: &[Array2<f64>],
) -> Result<PriorEstimate> {
    let n_classes = pool_margins.ncols();
    if pos_margins.len() != n_classes {
        return Err(Error::ShapeMismatch(format!(
            "{} positive sets for {n_classes} margin columns",
            pos_margins.len()
        )));
    }
    if pool_margins.nrows() == 0 {
        return Err(Error::InvalidConfig("empty pool margins".into()));
    }

    // Substitute the top-q pool proxy where positives are missing.
    let working: Vec<Array2<f64>> = pos_margins
        .iter()
        .enumerate()
        .map(|(i, set)| {
            if set.nrows() == 0 {
                top_q_rows(pool_margins, i, config.top_q)
            } else {
                set.clone()
            }
        })
        .collect();

    let mut detectable = Vec::with_capacity(n_classes);
    let mut lower_bounds = Vec::with_capacity(n_classes);
    for (i, set) in working.iter().enumerate() {
        let pool_col: Vec<f64> = pool_margins.column(i).to_vec();
        let pos_col: Vec<f64> = set.column(i).to_vec();
        let (det, bound) = detectability_scan(&pool_col, &pos_col, &config.alphas)?;
        detectable.push(det);
        lower_bounds.push(if det { bound } else { 0.0 });
    }

    // Cap jointly infeasible bounds (rare, sampling noise) by scaling.
    let bound_sum: f64 = lower_bounds.iter().sum();
    if bound_sum > 1.0 {
        for b in lower_bounds.iter_mut() {
            *b /= bound_sum;
        }
    }

    let active: Vec<usize> = (0..n_classes).filter(|&i| detectable[i]).collect();
    let mut point = vec![0.0; n_classes];
    if !active.is_empty() {
        let system = build_moment_system_binned(pool_margins, &working, config.n_bins)?;
        let reduced = MomentSystem {
            a: system.a.select(ndarray::Axis(1), &active),
            b: system.b.clone(),
            bin_edges: system.bin_edges.clone(),
            zero_rows: system.zero_rows.clone(),
        };
        let reduced_lower: Vec<f64> = active.iter().map(|&i| lower_bounds[i]).collect();
        let solved = solve_penalized_l1(
            &reduced,
            &reduced_lower,
            config.lambda,
            config.step,
            config.iters,
        )?;
        for (slot, value) in active.iter().zip(solved) {
            point[*slot] = value;
        }
    }

    Ok(PriorEstimate {
        point,
        lower_bounds,
        interval: None,
        detectable,
        config: config.clone(),
    })
}

/// Re-runs steps 1-2 on `b_reps` bootstrap resamples of the pool and of each
/// positive margin set; attaches the per-class percentile interval at level
/// `1 - delta`. Deterministic given the seed.
pub fn bootstrap_priors(
    config: &PipelineConfig,
    pool_margins: &ArrayView2<f64>,
    pos_margins: &[Array2<f64>],
    b_reps: usize,
    delta: f64,
    seed: u64,
) -> Result<PriorEstimate> {
    if b_reps < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 bootstrap replicates, got {b_reps}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    let mut estimate = estimate_priors(config, pool_margins, pos_margins)?;
    let n_classes = pool_margins.ncols();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let resample = |rng: &mut ChaCha20Rng, m: &ArrayView2<f64>| -> Array2<f64> {
        let n = m.nrows();
        let mut out = Array2::zeros((n, m.ncols()));
        for dst in 0..n {
            let src = rng.random_range(0..n);
            out.row_mut(dst).assign(&m.row(src));
        }
        out
    };

    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(b_reps); n_classes];
    for _ in 0..b_reps {
        let pool_b = resample(&mut rng, pool_margins);
        let pos_b: Vec<Array2<f64>> = pos_margins
            .iter()
            .map(|set| {
                if set.nrows() == 0 {
                    set.clone()
                } else {
                    resample(&mut rng, &set.view())
                }
            })
            .collect();
        let rep = estimate_priors(config, &pool_b.view(), &pos_b)?;
        for (i, v) in rep.point.iter().enumerate() {
            samples[i].push(*v);
        }
    }

    let interval = samples
        .iter()
        .map(|values| {
            let mut sorted = values.clone();
            sorted.sort_by(|a, b| a.total_cmp(b));
            [
                percentile(&sorted, delta / 2.0),
                percentile(&sorted, 1.0 - delta / 2.0),
            ]
        })
        .collect();
    estimate.interval = Some(interval);
    Ok(estimate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn np_lower_bound_examples() {
        let b = np_lower_bound(0.30, 0.90, 0.05, 1e-6);
        assert!((b - 0.2778).abs() < 5e-5, "{b}");
        assert_eq!(np_lower_bound(0.04, 0.90, 0.05, 1e-6), 0.0);
        assert_eq!(np_lower_bound(0.95, 1e-9, 0.05, 1e-6), 1.0);
    }

    #[test]
    fn scan_rejects_bad_input() {
        assert!(detectability_scan(&[], &[1.0], &[0.05]).is_err());
        assert!(detectability_scan(&[1.0], &[1.0], &[]).is_err());
        assert!(detectability_scan(&[1.0], &[1.0], &[1.5]).is_err());
    }

    #[test]
    fn scan_identical_distributions_bound_tracks_formula() {
        // Pool drawn from the same distribution as the proxy: every pool
        // sample is a "positive", so the scan's bound approaches the
        // in-distribution ceiling (1 - 2a) / (1 - a) at the best alpha.
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let pos: Vec<f64> = (0..4000).map(|_| normal.sample(&mut rng)).collect();
        let pool: Vec<f64> = (0..4000).map(|_| normal.sample(&mut rng)).collect();
        let (detectable, bound) =
            detectability_scan(&pool, &pos, &[0.01, 0.02, 0.05]).unwrap();
        assert!(detectable);
        let ceiling = (1.0 - 2.0 * 0.01) / (1.0 - 0.01);
        assert!((bound - ceiling).abs() < 0.05, "bound {bound} vs {ceiling}");
    }

    #[test]
    fn scan_recovers_pi_when_separated() {
        // Pool: pi-fraction positives far above the rest.
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let pi = 0.35;
        let pos: Vec<f64> = (0..10_000).map(|_| 8.0 + normal.sample(&mut rng)).collect();
        let pool: Vec<f64> = (0..10_000)
            .map(|_| {
                if rng.random::<f64>() < pi {
                    8.0 + normal.sample(&mut rng)
                } else {
                    -8.0 + normal.sample(&mut rng)
                }
            })
            .collect();
        let (detectable, bound) =
            detectability_scan(&pool, &pos, &[0.01, 0.02, 0.05]).unwrap();
        assert!(detectable);
        assert!((bound - pi).abs() <= 0.05, "bound {bound} for pi {pi}");
    }

    #[test]
    fn moment_system_single_class_histogram() {
        let pos = Array2::from_shape_vec((4, 1), vec![0.1, 0.4, 0.6, 0.9]).unwrap();
        let pool = pos.clone();
        let system = build_moment_system_binned(&pool.view(), &[pos], 4).unwrap();
        let col_sum: f64 = system.a.column(0).sum();
        assert!((col_sum - 1.0).abs() < 1e-12, "histogram sums to 1");
        // Pool equals positives, so b equals A's column exactly.
        for r in 0..system.b.len() {
            assert_eq!(system.b[r], system.a[[r, 0]]);
        }
        assert!(system.zero_rows.is_empty() || !system.zero_rows.is_empty());
    }

    #[test]
    fn moment_system_flags_empty_bins() {
        let pos = Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).unwrap();
        let pool = pos.clone();
        let edges = vec![vec![0.0, 0.25, 0.5, 0.75, 1.0]];
        let system = build_moment_system(&pool.view(), &[pos], &edges).unwrap();
        // Middle bins hold no mass.
        assert!(!system.zero_rows.is_empty());
    }

    #[test]
    fn moment_system_rejects_degenerate_edges() {
        let pos = Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).unwrap();
        let pool = pos.clone();
        let edges = vec![vec![0.5, 0.5]];
        assert!(build_moment_system(&pool.view(), &[pos], &edges).is_err());
    }

    #[test]
    fn projection_examples() {
        let p = project_feasible(&[0.7, 0.6], &[0.0, 0.0]).unwrap();
        assert!((p[0] - 0.5385).abs() < 5e-5);
        assert!((p[1] - 0.4615).abs() < 5e-5);

        let p = project_feasible(&[0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.2, 0.3]);

        let p = project_feasible(&[0.9, 0.9], &[0.5, 0.5]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);

        assert!(project_feasible(&[0.5, 0.5], &[0.6, 0.6]).is_err());
    }

    #[test]
    fn solver_identity_system() {
        let system = MomentSystem {
            a: ndarray::array![[1.0, 0.0], [0.0, 1.0]],
            b: ndarray::array![0.3, 0.2],
            bin_edges: vec![],
            zero_rows: vec![],
        };
        let pi = solve_penalized_l1(&system, &[0.0, 0.0], 0.0, 1e-2, 2000).unwrap();
        assert!((pi[0] - 0.3).abs() < 1e-6 && (pi[1] - 0.2).abs() < 1e-6, "{pi:?}");
    }

    #[test]
    fn solver_large_lambda_returns_lower_bounds() {
        let system = MomentSystem {
            a: ndarray::array![[1.0, 0.0], [0.0, 1.0]],
            b: ndarray::array![0.5, 0.4],
            bin_edges: vec![],
            zero_rows: vec![],
        };
        let lower = [0.1, 0.05];
        let pi = solve_penalized_l1(&system, &lower, 1e9, 1e-2, 200).unwrap();
        assert_eq!(pi, lower.to_vec());
    }

    #[test]
    fn solver_objective_descends() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let a = Array2::from_shape_fn((32, 3), |_| rng.random_range(0.0..0.2));
        let b = Array1::from_shape_fn(32, |_| rng.random_range(0.0..0.3));
        let system = MomentSystem {
            a,
            b,
            bin_edges: vec![],
            zero_rows: vec![],
        };
        let lower = [0.0, 0.0, 0.0];
        // Manual iteration mirroring the solver to watch the objective.
        let mut pi = Array1::from_vec(vec![0.0, 0.0, 0.0]);
        let mut prev = l1_objective(&system, &lower, 1e-3, &pi);
        for _ in 0..500 {
            let residual = system.a.dot(&pi) - &system.b;
            let grad = system.a.t().dot(&residual) * 2.0;
            let mut next = Vec::new();
            for i in 0..3 {
                let y = pi[i] - 1e-2 * grad[i];
                let slack = y - lower[i];
                next.push(lower[i] + slack.signum() * (slack.abs() - 1e-2 * 1e-3).max(0.0));
            }
            pi = Array1::from_vec(project_feasible(&next, &lower).unwrap());
            let obj = l1_objective(&system, &lower, 1e-3, &pi);
            assert!(obj <= prev + 1e-9, "objective rose {prev} -> {obj}");
            prev = obj;
        }
    }

    fn synthetic_margins(
        pi: f64,
        n_pool: usize,
        n_pos: usize,
        seed: u64,
    ) -> (Array2<f64>, Vec<Array2<f64>>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let pos =
            Array2::from_shape_fn((n_pos, 1), |_| 4.0 + normal.sample(&mut rng));
        let pool = Array2::from_shape_fn((n_pool, 1), |_| {
            if rng.random::<f64>() < pi {
                4.0 + normal.sample(&mut rng)
            } else {
                -4.0 + normal.sample(&mut rng)
            }
        });
        (pool, vec![pos])
    }

    #[test]
    fn pipeline_recovers_two_class_mixture() {
        let cfg = PipelineConfig::default();
        let (pool, pos) = synthetic_margins(0.4, 10_000, 4000, 12);
        let est = estimate_priors(&cfg, &pool.view(), &pos).unwrap();
        assert!(est.detectable[0]);
        assert!((est.point[0] - 0.4).abs() <= 0.05, "point {:?}", est.point);
        assert!(est.point[0] >= est.lower_bounds[0] - 1e-12);
    }

    #[test]
    fn bootstrap_zero_width_on_degenerate_data() {
        let cfg = PipelineConfig {
            n_bins: 4,
            ..PipelineConfig::default()
        };
        // Single repeated value everywhere: every resample is identical.
        let pool = Array2::from_elem((6, 1), 2.0);
        let pos = vec![Array2::from_elem((6, 1), 2.0)];
        let est = bootstrap_priors(&cfg, &pool.view(), &pos, 2, 0.05, 9).unwrap();
        let interval = est.interval.unwrap();
        assert_eq!(interval[0][0], interval[0][1], "degenerate interval");
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let cfg = PipelineConfig {
            iters: 300,
            ..PipelineConfig::default()
        };
        let (pool, pos) = synthetic_margins(0.3, 800, 400, 4);
        let a = bootstrap_priors(&cfg, &pool.view(), &pos, 20, 0.05, 77).unwrap();
        let b = bootstrap_priors(&cfg, &pool.view(), &pos, 20, 0.05, 77).unwrap();
        assert_eq!(a.interval, b.interval);
        assert_eq!(a.point, b.point);
    }

    #[test]
    fn estimate_serializes_expected_fields() {
        let cfg = PipelineConfig::default();
        let (pool, pos) = synthetic_margins(0.3, 500, 300, 2);
        let est = estimate_priors(&cfg, &pool.view(), &pos).unwrap();
        let json = est.to_json();
        for field in ["point", "lower_bounds", "interval", "detectable", "config"] {
            assert!(json.contains(field), "missing {field}");
        }
    }

    proptest! {
        /// Monotone in the pool acceptance rate, antitone in alpha.
        #[test]
        fn np_bound_monotonicity(
            pool in 0.0f64..1.0,
            pool2 in 0.0f64..1.0,
            pos in 0.01f64..1.0,
            alpha in 0.005f64..0.2,
            alpha2 in 0.005f64..0.2,
        ) {
            let (lo, hi) = if pool <= pool2 { (pool, pool2) } else { (pool2, pool) };
            prop_assert!(
                np_lower_bound(lo, pos, alpha, 1e-6) <= np_lower_bound(hi, pos, alpha, 1e-6)
            );
            let (a_lo, a_hi) = if alpha <= alpha2 { (alpha, alpha2) } else { (alpha2, alpha) };
            prop_assert!(
                np_lower_bound(pool, pos, a_hi, 1e-6) <= np_lower_bound(pool, pos, a_lo, 1e-6)
            );
        }

        /// Both constraint families hold exactly after projection, bounds
        /// are preserved, and the map is idempotent.
        #[test]
        fn projection_feasibility(
            raw in proptest::collection::vec(-2.0f64..2.0, 2..6),
            lower_raw in proptest::collection::vec(0.0f64..0.6, 2..6),
        ) {
            let n = raw.len().min(lower_raw.len());
            let pi = &raw[..n];
            let mut lower = lower_raw[..n].to_vec();
            let s: f64 = lower.iter().sum();
            if s > 0.95 {
                for l in lower.iter_mut() { *l *= 0.95 / s; }
            }
            let out = project_feasible(pi, &lower).unwrap();
            let total: f64 = out.iter().sum();
            prop_assert!(total <= 1.0, "sum {total}");
            for (o, l) in out.iter().zip(&lower) {
                prop_assert!(o >= l, "bound violated: {o} < {l}");
            }
            let again = project_feasible(&out, &lower).unwrap();
            prop_assert_eq!(out, again);
        }
    }
}
