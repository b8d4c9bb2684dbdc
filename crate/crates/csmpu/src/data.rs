//! MPU dataset construction: synthetic generators with known ground truth,
//! file ingestion (CSV, IDX), the observed/unlabeled split protocol, and
//! feature-wise min-max normalization.
//!
//! Hidden labels (the true classes of the unlabeled pool) are retained for
//! synthetic and benchmark data but are reachable only through [`MpuDataset`]
//! itself; estimators consume [`MpuView`], which does not carry them.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PRIOR_SUM_TOL: f64 = 1e-9;

pub(crate) fn validate_priors(priors: &[f64]) -> Result<()> {
    if priors.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 class priors, got {}",
            priors.len()
        )));
    }
    if priors.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidConfig(format!(
            "priors must lie in [0, 1]: {priors:?}"
        )));
    }
    let sum: f64 = priors.iter().sum();
    if (sum - 1.0).abs() > PRIOR_SUM_TOL {
        return Err(Error::InvalidConfig(format!(
            "priors must sum to 1 (got {sum})"
        )));
    }
    Ok(())
}

/// A fully labeled dataset with contiguous 0-based labels.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows vs {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::InvalidConfig("empty dataset".into()));
        }
        let n_classes = labels.iter().copied().max().unwrap() + 1;
        Ok(LabeledDataset {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }
}

/// `k - 1` labeled observed-class sample sets plus one unlabeled pool.
///
/// Class indices are 0-based throughout: observed classes are `0..k-1`,
/// the negative meta-class is `k - 1`.
#[derive(Clone, Debug)]
pub struct MpuDataset {
    observed: Vec<Array2<f64>>,
    unlabeled: Array2<f64>,
    priors: Vec<f64>,
    hidden_labels: Option<Vec<usize>>,
}

impl MpuDataset {
    pub fn new(
        observed: Vec<Array2<f64>>,
        unlabeled: Array2<f64>,
        priors: Vec<f64>,
        hidden_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let k = observed.len() + 1;
        if k < 2 {
            return Err(Error::InvalidConfig(
                "need at least one observed class".into(),
            ));
        }
        if priors.len() != k {
            return Err(Error::InvalidConfig(format!(
                "{} priors for k = {k}",
                priors.len()
            )));
        }
        validate_priors(&priors)?;
        let d = unlabeled.ncols();
        if observed.iter().any(|m| m.ncols() != d) {
            return Err(Error::ShapeMismatch(
                "observed sets and pool must share the feature dimension".into(),
            ));
        }
        if let Some(labels) = &hidden_labels {
            if labels.len() != unlabeled.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "{} hidden labels for {} pool samples",
                    labels.len(),
                    unlabeled.nrows()
                )));
            }
            if labels.iter().any(|&y| y >= k) {
                return Err(Error::InvalidConfig(
                    "hidden labels must lie in 0..k".into(),
                ));
            }
        }
        Ok(MpuDataset {
            observed,
            unlabeled,
            priors,
            hidden_labels,
        })
    }

    pub fn k(&self) -> usize {
        self.observed.len() + 1
    }

    pub fn feature_dim(&self) -> usize {
        self.unlabeled.ncols()
    }

    pub fn observed(&self) -> &[Array2<f64>] {
        &self.observed
    }

    pub fn unlabeled(&self) -> &Array2<f64> {
        &self.unlabeled
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    /// True pool labels, present for synthetic/benchmark data. For oracles
    /// and metrics only; estimator paths take [`MpuView`] instead.
    pub fn hidden_labels(&self) -> Option<&[usize]> {
        self.hidden_labels.as_deref()
    }

    /// Estimator-facing view with hidden labels stripped.
    pub fn view(&self) -> MpuView<'_> {
        MpuView {
            observed: self.observed.iter().map(|m| m.view()).collect(),
            unlabeled: self.unlabeled.view(),
            priors: &self.priors,
        }
    }
}

/// Borrowed MPU data as estimators see it: sample sets and priors only.
#[derive(Clone)]
pub struct MpuView<'a> {
    pub observed: Vec<ArrayView2<'a, f64>>,
    pub unlabeled: ArrayView2<'a, f64>,
    pub priors: &'a [f64],
}

impl MpuView<'_> {
    pub fn k(&self) -> usize {
        self.observed.len() + 1
    }
}

/// An owned mini-batch of MPU data, one slice per sample set.
#[derive(Clone, Debug)]
pub struct MpuBatch {
    pub observed: Vec<Array2<f64>>,
    pub unlabeled: Array2<f64>,
    pub priors: Vec<f64>,
}

impl MpuBatch {
    pub fn view(&self) -> MpuView<'_> {
        MpuView {
            observed: self.observed.iter().map(|m| m.view()).collect(),
            unlabeled: self.unlabeled.view(),
            priors: &self.priors,
        }
    }
}

/// Class-conditional means on a regular k-gon of circumradius `separation`.
pub fn polygon_means(k: usize, separation: f64) -> Array2<f64> {
    let mut means = Array2::zeros((k, 2));
    for i in 0..k {
        let angle = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
        means[[i, 0]] = separation * angle.cos();
        means[[i, 1]] = separation * angle.sin();
    }
    means
}

/// One-vs-rest distance margins for the synthetic Gaussian family:
/// `f_i(x) = min_{j != i} |x - mu_j| - |x - mu_i|`.
///
/// Positive where class i is the nearest mean. Distances (not squared
/// distances) keep the margin noise scale O(1) regardless of how far the
/// class means sit, which conditions the prior pipeline's margin histograms.
pub fn oracle_margins(means: &ArrayView2<f64>, x: &ArrayView2<f64>) -> Array2<f64> {
    let k = means.nrows();
    let n = x.nrows();
    let mut dist = Array2::zeros((n, k));
    for (s, row) in x.rows().into_iter().enumerate() {
        for j in 0..k {
            let mut d2 = 0.0;
            for (a, b) in row.iter().zip(means.row(j)) {
                d2 += (a - b) * (a - b);
            }
            dist[[s, j]] = d2.sqrt();
        }
    }
    let mut margins = Array2::zeros((n, k));
    for s in 0..n {
        for i in 0..k {
            let mut best_other = f64::INFINITY;
            for j in 0..k {
                if j != i {
                    best_other = best_other.min(dist[[s, j]]);
                }
            }
            margins[[s, i]] = best_other - dist[[s, i]];
        }
    }
    margins
}

fn sample_gaussian(
    rng: &mut ChaCha20Rng,
    mean: (f64, f64),
    n: usize,
    out: &mut Vec<f64>,
) {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for _ in 0..n {
        out.push(mean.0 + normal.sample(rng));
        out.push(mean.1 + normal.sample(rng));
    }
}

fn sample_class(rng: &mut ChaCha20Rng, priors: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in priors.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    priors.len() - 1
}

/// Synthetic MPU data: isotropic unit Gaussians in d = 2 with means on a
/// regular k-gon. Labeled sets come from classes `0..k-1`; the pool is drawn
/// from the prior mixture over all k classes, hidden labels retained.
pub fn gen_synthetic(
    k: usize,
    priors: &[f64],
    n_labeled_per_class: usize,
    n_unlabeled: usize,
    separation: f64,
    seed: u64,
) -> Result<MpuDataset> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k must be >= 2, got {k}")));
    }
    if priors.len() != k {
        return Err(Error::InvalidConfig(format!(
            "{} priors for k = {k}",
            priors.len()
        )));
    }
    validate_priors(priors)?;
    if !(separation.is_finite() && separation > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "separation must be positive, got {separation}"
        )));
    }
    if n_labeled_per_class == 0 || n_unlabeled == 0 {
        return Err(Error::InvalidConfig(
            "sample counts must be positive".into(),
        ));
    }
    let means = polygon_means(k, separation);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let mut observed = Vec::with_capacity(k - 1);
    for i in 0..k - 1 {
        let mut buf = Vec::with_capacity(2 * n_labeled_per_class);
        sample_gaussian(&mut rng, (means[[i, 0]], means[[i, 1]]), n_labeled_per_class, &mut buf);
        observed.push(Array2::from_shape_vec((n_labeled_per_class, 2), buf).expect("shape"));
    }

    let mut pool = Vec::with_capacity(2 * n_unlabeled);
    let mut hidden = Vec::with_capacity(n_unlabeled);
    for _ in 0..n_unlabeled {
        let y = sample_class(&mut rng, priors);
        sample_gaussian(&mut rng, (means[[y, 0]], means[[y, 1]]), 1, &mut pool);
        hidden.push(y);
    }
    let unlabeled = Array2::from_shape_vec((n_unlabeled, 2), pool).expect("shape");

    MpuDataset::new(observed, unlabeled, priors.to_vec(), Some(hidden))
}

/// A labeled draw from the same synthetic joint, for test-set evaluation.
pub fn synthetic_labeled(
    k: usize,
    priors: &[f64],
    n: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    validate_priors(priors)?;
    if priors.len() != k {
        return Err(Error::InvalidConfig(format!(
            "{} priors for k = {k}",
            priors.len()
        )));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "separation must be positive, got {separation}"
        )));
    }
    let means = polygon_means(k, separation);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut buf = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = sample_class(&mut rng, priors);
        sample_gaussian(&mut rng, (means[[y, 0]], means[[y, 1]]), 1, &mut buf);
        labels.push(y);
    }
    let mut ds = LabeledDataset::new(Array2::from_shape_vec((n, 2), buf).expect("shape"), labels)?;
    ds.n_classes = k;
    Ok(ds)
}

/// The MPU split protocol: the first `k - 1` source categories become
/// observed classes, every remaining category merges into the meta-class and
/// appears only in the pool. Per observed class, `1 - labeled_fraction` of
/// its samples move to the pool; the pool is then subsampled on its larger
/// side so the realized meta-class fraction matches `pi_k` within one sample.
pub fn mpu_split(
    source: &LabeledDataset,
    k: usize,
    pi_k: f64,
    labeled_fraction: f64,
    seed: u64,
) -> Result<MpuDataset> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k must be >= 2, got {k}")));
    }
    if source.n_classes < k {
        return Err(Error::InvalidConfig(format!(
            "source has {} classes; need at least k = {k} (k - 1 observed plus meta)",
            source.n_classes
        )));
    }
    if !(pi_k > 0.0 && pi_k < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "pi_k must lie in (0, 1), got {pi_k}"
        )));
    }
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "labeled_fraction must lie in (0, 1], got {labeled_fraction}"
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); source.n_classes];
    for (idx, &y) in source.labels.iter().enumerate() {
        by_class[y].push(idx);
    }
    if by_class[..k - 1].iter().any(|c| c.is_empty()) {
        return Err(Error::InvalidConfig(
            "every observed source class needs at least one sample".into(),
        ));
    }

    let mut observed_rows: Vec<Vec<usize>> = Vec::with_capacity(k - 1);
    // Pool candidates as (source row, mpu class).
    let mut pool_observed: Vec<(usize, usize)> = Vec::new();
    let mut pool_meta: Vec<(usize, usize)> = Vec::new();
    for class in 0..k - 1 {
        let mut rows = by_class[class].clone();
        rows.shuffle(&mut rng);
        let n_lab = ((rows.len() as f64 * labeled_fraction).round() as usize)
            .clamp(1, rows.len());
        observed_rows.push(rows[..n_lab].to_vec());
        for &r in &rows[n_lab..] {
            pool_observed.push((r, class));
        }
    }
    for class in k - 1..source.n_classes {
        for &r in &by_class[class] {
            pool_meta.push((r, k - 1));
        }
    }

    let m = pool_meta.len();
    let o = pool_observed.len();
    if m == 0 {
        return Err(Error::Infeasible(
            "no meta-class samples available for the pool".into(),
        ));
    }
    if o == 0 {
        return Err(Error::Infeasible(format!(
            "labeled_fraction = {labeled_fraction} leaves no observed-origin pool samples; \
             cannot realize pi_k = {pi_k} < 1"
        )));
    }

    // Subsample the larger side only; labeled sets are never discarded.
    let current = m as f64 / (m + o) as f64;
    if current > pi_k {
        let target_m = (o as f64 * pi_k / (1.0 - pi_k)).round() as usize;
        pool_meta.shuffle(&mut rng);
        pool_meta.truncate(target_m.min(m));
    } else if current < pi_k {
        let target_o = (m as f64 * (1.0 - pi_k) / pi_k).round() as usize;
        if target_o == 0 {
            let need = (pi_k / (1.0 - pi_k)).ceil() as usize;
            return Err(Error::Infeasible(format!(
                "pi_k = {pi_k} needs at least {need} meta-class samples per observed-origin \
                 pool sample; have {m} meta and {o} observed-origin"
            )));
        }
        pool_observed.shuffle(&mut rng);
        pool_observed.truncate(target_o.min(o));
    }

    let mut pool: Vec<(usize, usize)> = pool_observed;
    pool.extend(pool_meta);
    pool.shuffle(&mut rng);
    if pool.is_empty() {
        return Err(Error::Infeasible("empty unlabeled pool".into()));
    }

    let d = source.feature_dim();
    let gather = |rows: &[usize]| -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), d));
        for (dst, &src_row) in rows.iter().enumerate() {
            out.row_mut(dst).assign(&source.features.row(src_row));
        }
        out
    };

    let observed: Vec<Array2<f64>> = observed_rows.iter().map(|rows| gather(rows)).collect();
    let pool_rows: Vec<usize> = pool.iter().map(|&(r, _)| r).collect();
    let hidden: Vec<usize> = pool.iter().map(|&(_, y)| y).collect();
    let unlabeled = gather(&pool_rows);

    // pi_k is recorded as given; observed priors split the remaining mass
    // proportionally to their pool-resident counts.
    let mut pool_counts = vec![0usize; k - 1];
    for &(_, y) in pool.iter().filter(|&&(_, y)| y < k - 1) {
        pool_counts[y] += 1;
    }
    let observed_total: usize = pool_counts.iter().sum();
    let mut priors = vec![0.0; k];
    priors[k - 1] = pi_k;
    if observed_total > 0 {
        for i in 0..k - 1 {
            priors[i] = (1.0 - pi_k) * pool_counts[i] as f64 / observed_total as f64;
        }
    } else {
        for p in priors[..k - 1].iter_mut() {
            *p = (1.0 - pi_k) / (k - 1) as f64;
        }
    }

    MpuDataset::new(observed, unlabeled, priors, Some(hidden))
}

/// Per-feature min and max computed on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn minmax_fit(train: &ArrayView2<f64>) -> Result<NormStats> {
    if train.nrows() == 0 {
        return Err(Error::InvalidConfig(
            "cannot fit normalization on an empty matrix".into(),
        ));
    }
    let d = train.ncols();
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for row in train.rows() {
        for (j, &v) in row.iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    Ok(NormStats { min, max })
}

/// `x' = (x - min) / (max - min)` per feature; constant features map to 0.
/// Out-of-range values are not clipped.
pub fn minmax_apply(stats: &NormStats, matrix: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if matrix.ncols() != stats.min.len() {
        return Err(Error::ShapeMismatch(format!(
            "matrix has {} columns, stats have {}",
            matrix.ncols(),
            stats.min.len()
        )));
    }
    let mut out = matrix.to_owned();
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            let range = stats.max[j] - stats.min[j];
            *v = if range == 0.0 {
                0.0
            } else {
                (*v - stats.min[j]) / range
            };
        }
    }
    Ok(out)
}

/// Loads a CSV with a header row; `label_column` is a column name or 0-based
/// index. Labels are remapped to contiguous 0-based ids by sorted value.
pub fn load_csv(path: &Path, label_column: &str) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::parse(path, "open", e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path, "header", e.to_string()))?
        .clone();
    let label_idx = match headers.iter().position(|h| h == label_column) {
        Some(idx) => idx,
        None => label_column.parse::<usize>().map_err(|_| {
            Error::parse(
                path,
                "header",
                format!("label column {label_column:?} not found by name or index"),
            )
        })?,
    };
    if label_idx >= headers.len() {
        return Err(Error::parse(
            path,
            "header",
            format!("label column index {label_idx} out of range ({} columns)", headers.len()),
        ));
    }
    let n_features = headers.len() - 1;
    if n_features == 0 {
        return Err(Error::parse(path, "header", "no feature columns"));
    }

    let mut raw_labels: Vec<i64> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let line = row_idx + 2; // 1-based, after the header
        let record = record.map_err(|e| Error::parse(path, format!("line {line}"), e.to_string()))?;
        if record.len() != headers.len() {
            return Err(Error::parse(
                path,
                format!("line {line}"),
                format!("expected {} fields, found {}", headers.len(), record.len()),
            ));
        }
        for (col, field) in record.iter().enumerate() {
            if col == label_idx {
                let label: i64 = field.trim().parse().map_err(|_| {
                    Error::parse(
                        path,
                        format!("line {line}"),
                        format!("label {field:?} is not an integer"),
                    )
                })?;
                raw_labels.push(label);
            } else {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::parse(
                        path,
                        format!("line {line}"),
                        format!("feature {field:?} is not numeric"),
                    )
                })?;
                values.push(v);
            }
        }
    }
    if raw_labels.is_empty() {
        return Err(Error::parse(path, "body", "no data rows"));
    }

    let mut classes: Vec<i64> = raw_labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label present"))
        .collect();
    let features = Array2::from_shape_vec((labels.len(), n_features), values)
        .expect("row-major fill");
    let mut ds = LabeledDataset::new(features, labels)?;
    ds.n_classes = classes.len();
    Ok(ds)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::parse(
            path,
            format!("offset {offset}"),
            "unexpected end of file",
        ));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Loads an IDX image/label pair (big-endian magics 0x00000803/0x00000801);
/// pixel values are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let magic = read_u32_be(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::parse(
            images_path,
            "offset 0",
            format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = read_u32_be(&img_bytes, 4, images_path)? as usize;
    let rows = read_u32_be(&img_bytes, 8, images_path)? as usize;
    let cols = read_u32_be(&img_bytes, 12, images_path)? as usize;
    let expected = 16 + n * rows * cols;
    if img_bytes.len() < expected {
        return Err(Error::parse(
            images_path,
            format!("offset {}", img_bytes.len()),
            format!("file truncated: need {expected} bytes"),
        ));
    }

    let lbl_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let magic = read_u32_be(&lbl_bytes, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::parse(
            labels_path,
            "offset 0",
            format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n_labels = read_u32_be(&lbl_bytes, 4, labels_path)? as usize;
    if n_labels != n {
        return Err(Error::parse(
            labels_path,
            "offset 4",
            format!("{n_labels} labels for {n} images"),
        ));
    }
    if lbl_bytes.len() < 8 + n_labels {
        return Err(Error::parse(
            labels_path,
            format!("offset {}", lbl_bytes.len()),
            format!("file truncated: need {} bytes", 8 + n_labels),
        ));
    }

    let features = Array2::from_shape_vec(
        (n, rows * cols),
        img_bytes[16..16 + n * rows * cols]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect(),
    )
    .expect("shape");
    let raw: Vec<i64> = lbl_bytes[8..8 + n_labels].iter().map(|&b| b as i64).collect();
    let mut classes = raw.clone();
    classes.sort_unstable();
    classes.dedup();
    let labels: Vec<usize> = raw
        .iter()
        .map(|l| classes.binary_search(l).expect("label present"))
        .collect();
    let mut ds = LabeledDataset::new(features, labels)?;
    ds.n_classes = classes.len();
    Ok(ds)
}

/// JSON manifest accompanying a materialized dataset directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub source: String,
    pub k: usize,
    pub pi_k: f64,
    pub seed: u64,
    pub counts: ManifestCounts,
    pub priors: Vec<f64>,
    pub feature_dim: usize,
    pub has_hidden_labels: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub observed: Vec<usize>,
    pub unlabeled: usize,
}

fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header: Vec<String> = (0..m.ncols()).map(|j| format!("x{j}")).collect();
    writeln!(file, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(file, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Reads a header-carrying CSV of floats as a matrix.
pub fn load_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    read_matrix_csv(path)
}

fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::parse(path, "open", e.to_string()))?;
    let d = reader
        .headers()
        .map_err(|e| Error::parse(path, "header", e.to_string()))?
        .len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| Error::parse(path, format!("line {}", i + 2), e.to_string()))?;
        for field in record.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::parse(path, format!("line {}", i + 2), format!("{field:?} is not numeric"))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, d), values)
        .map_err(|e| Error::parse(path, "body", e.to_string()))
}

/// Writes `manifest.json`, `observed_<i>.csv`, `unlabeled.csv` and, when
/// hidden labels are present, `hidden_labels.csv` into `dir`.
pub fn save_dataset(dir: &Path, dataset: &MpuDataset, source: &str, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        source: source.to_string(),
        k: dataset.k(),
        pi_k: dataset.priors()[dataset.k() - 1],
        seed,
        counts: ManifestCounts {
            observed: dataset.observed().iter().map(|m| m.nrows()).collect(),
            unlabeled: dataset.unlabeled().nrows(),
        },
        priors: dataset.priors().to_vec(),
        feature_dim: dataset.feature_dim(),
        has_hidden_labels: dataset.hidden_labels().is_some(),
    };
    let manifest_path = dir.join("manifest.json");
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(&manifest_path, e))?;
    for (i, m) in dataset.observed().iter().enumerate() {
        write_matrix_csv(&dir.join(format!("observed_{i}.csv")), m)?;
    }
    write_matrix_csv(&dir.join("unlabeled.csv"), dataset.unlabeled())?;
    if let Some(labels) = dataset.hidden_labels() {
        let path = dir.join("hidden_labels.csv");
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(file, "label").map_err(|e| Error::io(&path, e))?;
        for &y in labels {
            writeln!(file, "{y}").map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<MpuDataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
    )
    .map_err(|e| Error::parse(&manifest_path, "json", e.to_string()))?;
    let mut observed = Vec::with_capacity(manifest.k - 1);
    for i in 0..manifest.k - 1 {
        observed.push(read_matrix_csv(&dir.join(format!("observed_{i}.csv")))?);
    }
    let unlabeled = read_matrix_csv(&dir.join("unlabeled.csv"))?;
    let hidden = if manifest.has_hidden_labels {
        let path = dir.join("hidden_labels.csv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let labels: std::result::Result<Vec<usize>, _> = text
            .lines()
            .skip(1)
            .map(|line| line.trim().parse::<usize>())
            .collect();
        Some(labels.map_err(|e| Error::parse(&path, "body", e.to_string()))?)
    } else {
        None
    };
    MpuDataset::new(observed, unlabeled, manifest.priors, hidden)
}

/// Splits a labeled dataset into train/test by a seeded shuffle.
pub fn train_test_split(
    source: &LabeledDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = source.len();
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut rows: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rows.shuffle(&mut rng);
    let take = |rows: &[usize]| -> LabeledDataset {
        let feats = source.features.select(Axis(0), rows);
        let labels = rows.iter().map(|&r| source.labels[r]).collect();
        let mut ds = LabeledDataset::new(feats, labels).expect("non-empty subsets");
        ds.n_classes = source.n_classes;
        ds
    };
    Ok((take(&rows[n_test..]), take(&rows[..n_test])))
}
