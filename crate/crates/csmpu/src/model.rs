//! Differentiable k-output scorers: linear models and multilayer perceptrons
//! with rectifier activations and optional per-layer batch normalization.
//!
//! Parameters live in one flat vector with a deterministic layout so that
//! optimizers, checkpoints, and finite-difference checks all agree:
//! for each layer, weights (row-major, out x in) then biases, followed by
//! batch-norm scale and shift when that hidden layer has normalization.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const CHECKPOINT_VERSION: u32 = 1;

/// Layer widths plus a batch-norm flag per hidden layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub widths: Vec<usize>,
    pub batch_norm: Vec<bool>,
}

impl Architecture {
    /// `d -> hidden... -> k` with the same batch-norm flag on every hidden layer.
    pub fn mlp(input_dim: usize, hidden: &[usize], k: usize, batch_norm: bool) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input_dim);
        widths.extend_from_slice(hidden);
        widths.push(k);
        Architecture {
            batch_norm: vec![batch_norm; hidden.len()],
            widths,
        }
    }

    pub fn linear(input_dim: usize, k: usize) -> Self {
        Architecture::mlp(input_dim, &[], k, false)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidConfig(
                "architecture needs at least input and output widths".into(),
            ));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("zero-width layer".into()));
        }
        if self.batch_norm.len() != self.widths.len() - 2 {
            return Err(Error::InvalidConfig(format!(
                "expected {} batch-norm flags, got {}",
                self.widths.len() - 2,
                self.batch_norm.len()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn layer_has_bn(&self, layer: usize) -> bool {
        layer < self.batch_norm.len() && self.batch_norm[layer]
    }

    pub fn param_count(&self) -> usize {
        let mut count = 0;
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            count += fan_out * fan_in + fan_out;
            if self.layer_has_bn(l) {
                count += 2 * fan_out;
            }
        }
        count
    }
}

/// Offsets of one layer's parameter blocks inside the flat vector.
#[derive(Clone, Copy, Debug)]
struct LayerSlots {
    weights: usize,
    bias: usize,
    bn_scale: Option<usize>,
    bn_shift: Option<usize>,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Frozen batch-norm statistics for inference.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BnStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// A parameterized map `x -> (f_1(x), ..., f_k(x))` with exact gradients.
#[derive(Clone, Debug)]
pub struct Scorer {
    arch: Architecture,
    seed: u64,
    params: Vec<f64>,
    bn_stats: Vec<Option<BnStats>>,
    slots: Vec<LayerSlots>,
}

/// He-normal initialization: weight std `sqrt(2 / fan_in)`, zero biases,
/// batch-norm scale 1 and shift 0. Deterministic given the seed.
pub fn init_scorer(arch: Architecture, seed: u64) -> Result<Scorer> {
    arch.validate()?;
    let slots = layout(&arch);
    let mut params = vec![0.0; arch.param_count()];
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for (l, slot) in slots.iter().enumerate() {
        let std = (2.0 / slot.fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for w in params[slot.weights..slot.weights + slot.fan_out * slot.fan_in].iter_mut() {
            *w = normal.sample(&mut rng);
        }
        if let Some(scale) = slot.bn_scale {
            for g in params[scale..scale + slot.fan_out].iter_mut() {
                *g = 1.0;
            }
        }
        let _ = l;
    }
    let bn_stats = slots
        .iter()
        .map(|slot| {
            slot.bn_scale.map(|_| BnStats {
                running_mean: vec![0.0; slot.fan_out],
                running_var: vec![1.0; slot.fan_out],
            })
        })
        .collect();
    Ok(Scorer {
        arch,
        seed,
        params,
        bn_stats,
        slots,
    })
}

fn layout(arch: &Architecture) -> Vec<LayerSlots> {
    let mut slots = Vec::with_capacity(arch.n_layers());
    let mut offset = 0;
    for l in 0..arch.n_layers() {
        let (fan_in, fan_out) = (arch.widths[l], arch.widths[l + 1]);
        let weights = offset;
        offset += fan_out * fan_in;
        let bias = offset;
        offset += fan_out;
        let (bn_scale, bn_shift) = if arch.layer_has_bn(l) {
            let scale = offset;
            offset += fan_out;
            let shift = offset;
            offset += fan_out;
            (Some(scale), Some(shift))
        } else {
            (None, None)
        };
        slots.push(LayerSlots {
            weights,
            bias,
            bn_scale,
            bn_shift,
            fan_in,
            fan_out,
        });
    }
    slots
}

/// Per-layer intermediates retained for the backward pass.
struct LayerCache {
    input: Array2<f64>,
    pre_activation: Array2<f64>,
    bn: Option<BnCache>,
}

struct BnCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var_unbiased: Array1<f64>,
    mode: Mode,
}

/// Forward intermediates for one batch; feed to [`Scorer::backward`].
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    batch_size: usize,
}

impl Scorer {
    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn k(&self) -> usize {
        self.arch.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn bn_stats(&self) -> &[Option<BnStats>] {
        &self.bn_stats
    }

    fn weight_view(&self, slot: &LayerSlots) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(
            (slot.fan_out, slot.fan_in),
            &self.params[slot.weights..slot.weights + slot.fan_out * slot.fan_in],
        )
        .expect("layout is consistent")
    }

    /// Scores for every sample in the batch. Pure: train mode normalizes with
    /// batch statistics but leaves the running statistics untouched.
    pub fn forward(&self, x: &ArrayView2<f64>, mode: Mode) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x, mode)?.0)
    }

    /// Forward pass that also returns the intermediates needed by `backward`.
    pub fn forward_cached(
        &self,
        x: &ArrayView2<f64>,
        mode: Mode,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.arch.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input width {} does not match scorer input dim {}",
                x.ncols(),
                self.arch.input_dim()
            )));
        }
        let n = x.nrows();
        if n == 0 {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        if mode == Mode::Train && n < 2 && self.arch.batch_norm.iter().any(|&b| b) {
            return Err(Error::InvalidConfig(
                "train-mode batch of 1 is not allowed with batch norm".into(),
            ));
        }

        let mut layers = Vec::with_capacity(self.slots.len());
        let mut activ = x.to_owned();
        let last = self.slots.len() - 1;
        for (l, slot) in self.slots.iter().enumerate() {
            let input = activ;
            let w = self.weight_view(slot);
            let bias = &self.params[slot.bias..slot.bias + slot.fan_out];
            let mut z = input.dot(&w.t());
            for mut row in z.rows_mut() {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += *b;
                }
            }
            let pre_activation = z.clone();
            let (out, bn) = if l == last {
                (z, None)
            } else {
                z.mapv_inplace(|v| v.max(0.0));
                if slot.bn_scale.is_some() {
                    let (normalized_out, bn_cache) = self.batch_norm_forward(l, slot, z, mode);
                    (normalized_out, Some(bn_cache))
                } else {
                    (z, None)
                }
            };
            layers.push(LayerCache {
                input,
                pre_activation,
                bn,
            });
            activ = out;
        }
        Ok((
            activ,
            ForwardCache {
                layers,
                batch_size: n,
            },
        ))
    }

    fn batch_norm_forward(
        &self,
        layer: usize,
        slot: &LayerSlots,
        r: Array2<f64>,
        mode: Mode,
    ) -> (Array2<f64>, BnCache) {
        let n = r.nrows() as f64;
        let scale = &self.params[slot.bn_scale.unwrap()..slot.bn_scale.unwrap() + slot.fan_out];
        let shift = &self.params[slot.bn_shift.unwrap()..slot.bn_shift.unwrap() + slot.fan_out];

        let (mean, var_biased) = match mode {
            Mode::Train => {
                let mean = r.mean_axis(Axis(0)).expect("non-empty batch");
                let mut var = Array1::zeros(slot.fan_out);
                for row in r.rows() {
                    for (j, v) in row.iter().enumerate() {
                        let d = v - mean[j];
                        var[j] += d * d;
                    }
                }
                var.mapv_inplace(|v| v / n);
                (mean, var)
            }
            Mode::Infer => {
                let stats = self.bn_stats[layer].as_ref().expect("bn layer has stats");
                (
                    Array1::from_vec(stats.running_mean.clone()),
                    Array1::from_vec(stats.running_var.clone()),
                )
            }
        };
        let inv_std = var_biased.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut normalized = r;
        for mut row in normalized.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let mut out = normalized.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = scale[j] * *v + shift[j];
            }
        }
        // Unbiased batch variance feeds the running estimate.
        let batch_var_unbiased = if mode == Mode::Train && n > 1.0 {
            var_biased.mapv(|v| v * n / (n - 1.0))
        } else {
            var_biased.clone()
        };
        (
            out,
            BnCache {
                normalized,
                inv_std,
                batch_mean: mean,
                batch_var_unbiased,
                mode,
            },
        )
    }

    /// Folds the batch statistics recorded in `cache` into the running
    /// batch-norm statistics (exponential moving average, momentum 0.1).
    pub fn apply_bn_updates(&mut self, cache: &ForwardCache) {
        for (layer, lc) in cache.layers.iter().enumerate() {
            if let Some(bn) = &lc.bn {
                if bn.mode != Mode::Train {
                    continue;
                }
                let stats = self.bn_stats[layer].as_mut().expect("bn layer has stats");
                for (rm, bm) in stats.running_mean.iter_mut().zip(bn.batch_mean.iter()) {
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * bm;
                }
                for (rv, bv) in stats
                    .running_var
                    .iter_mut()
                    .zip(bn.batch_var_unbiased.iter())
                {
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * bv;
                }
            }
        }
    }

    /// Gradient of `sum_s <upstream_s, scores_s>` with respect to the flat
    /// parameter vector. Rectifier subgradient at 0 is 0.
    pub fn backward(&self, cache: &ForwardCache, upstream: &ArrayView2<f64>) -> Result<Vec<f64>> {
        let last = self.slots.len() - 1;
        let out_dim = self.arch.output_dim();
        if upstream.nrows() != cache.batch_size || upstream.ncols() != out_dim {
            return Err(Error::ShapeMismatch(format!(
                "upstream shape ({}, {}) does not match scores shape ({}, {})",
                upstream.nrows(),
                upstream.ncols(),
                cache.batch_size,
                out_dim
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut d_out = upstream.to_owned();
        for l in (0..self.slots.len()).rev() {
            let slot = &self.slots[l];
            let lc = &cache.layers[l];
            let mut dz = d_out;
            if l != last {
                if let Some(bn) = &lc.bn {
                    dz = self.batch_norm_backward(slot, lc, bn, dz, &mut grads);
                }
                // Rectifier mask on the pre-activation.
                for (mut drow, zrow) in dz.rows_mut().into_iter().zip(lc.pre_activation.rows()) {
                    for (d, z) in drow.iter_mut().zip(zrow) {
                        if *z <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
            }
            // dW = dz^T . input, db = column sums of dz.
            let dw = dz.t().dot(&lc.input);
            grads[slot.weights..slot.weights + slot.fan_out * slot.fan_in]
                .copy_from_slice(dw.as_standard_layout().as_slice().expect("contiguous"));
            let db = dz.sum_axis(Axis(0));
            grads[slot.bias..slot.bias + slot.fan_out]
                .copy_from_slice(db.as_slice().expect("contiguous"));
            if l > 0 {
                d_out = dz.dot(&self.weight_view(slot));
            } else {
                d_out = Array2::zeros((0, 0));
            }
        }
        Ok(grads)
    }

    fn batch_norm_backward(
        &self,
        slot: &LayerSlots,
        lc: &LayerCache,
        bn: &BnCache,
        dy: Array2<f64>,
        grads: &mut [f64],
    ) -> Array2<f64> {
        let _ = lc;
        let n = dy.nrows() as f64;
        let fan_out = slot.fan_out;
        let scale_at = slot.bn_scale.unwrap();
        let shift_at = slot.bn_shift.unwrap();
        let scale = &self.params[scale_at..scale_at + fan_out];

        let mut d_scale = vec![0.0; fan_out];
        let mut d_shift = vec![0.0; fan_out];
        for (dyrow, xrow) in dy.rows().into_iter().zip(bn.normalized.rows()) {
            for j in 0..fan_out {
                d_scale[j] += dyrow[j] * xrow[j];
                d_shift[j] += dyrow[j];
            }
        }
        grads[scale_at..scale_at + fan_out].copy_from_slice(&d_scale);
        grads[shift_at..shift_at + fan_out].copy_from_slice(&d_shift);

        match bn.mode {
            Mode::Infer => {
                // Frozen statistics: plain affine backward.
                let mut dx = dy;
                for mut row in dx.rows_mut() {
                    for j in 0..fan_out {
                        row[j] *= scale[j] * bn.inv_std[j];
                    }
                }
                dx
            }
            Mode::Train => {
                // dxhat = dy * scale; dx folds in the batch mean/var paths.
                let mut sum_dxhat = vec![0.0; fan_out];
                let mut sum_dxhat_xhat = vec![0.0; fan_out];
                let mut dxhat = dy;
                for (mut drow, xrow) in dxhat.rows_mut().into_iter().zip(bn.normalized.rows()) {
                    for j in 0..fan_out {
                        drow[j] *= scale[j];
                        sum_dxhat[j] += drow[j];
                        sum_dxhat_xhat[j] += drow[j] * xrow[j];
                    }
                }
                let mut dx = dxhat;
                for (mut drow, xrow) in dx.rows_mut().into_iter().zip(bn.normalized.rows()) {
                    for j in 0..fan_out {
                        drow[j] = bn.inv_std[j] / n
                            * (n * drow[j] - sum_dxhat[j] - xrow[j] * sum_dxhat_xhat[j]);
                    }
                }
                dx
            }
        }
    }

    /// Serializes a versioned JSON checkpoint.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            architecture: self.arch.clone(),
            seed: self.seed,
            parameters: self.params.clone(),
            bn_stats: self.bn_stats.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Scorer> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        ck.architecture.validate()?;
        if ck.parameters.len() != ck.architecture.param_count() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match architecture ({} expected)",
                ck.parameters.len(),
                ck.architecture.param_count()
            )));
        }
        let slots = layout(&ck.architecture);
        if ck.bn_stats.len() != slots.len()
            || slots
                .iter()
                .zip(&ck.bn_stats)
                .any(|(slot, st)| slot.bn_scale.is_some() != st.is_some())
        {
            return Err(Error::Checkpoint(
                "batch-norm statistics do not match architecture".into(),
            ));
        }
        Ok(Scorer {
            arch: ck.architecture,
            seed: ck.seed,
            params: ck.parameters,
            bn_stats: ck.bn_stats,
            slots,
        })
    }

    pub fn from_json(json: &str) -> Result<Scorer> {
        let ck: Checkpoint =
            serde_json::from_str(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Scorer::from_checkpoint(ck)
    }
}

/// Versioned scorer checkpoint: architecture, seed, parameters, frozen stats.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub architecture: Architecture,
    pub seed: u64,
    pub parameters: Vec<f64>,
    pub bn_stats: Vec<Option<BnStats>>,
}

/// Compares an analytic gradient against central finite differences
/// (`h = 1e-5`) of `loss` on `n_probes` random coordinates; returns the
/// maximum relative error observed.
pub fn grad_check(
    scorer: &Scorer,
    loss: impl Fn(&Scorer) -> f64,
    analytic: &[f64],
    n_probes: usize,
    seed: u64,
) -> Result<f64> {
    if analytic.len() != scorer.param_count() {
        return Err(Error::ShapeMismatch(format!(
            "analytic gradient has {} entries, scorer has {} parameters",
            analytic.len(),
            scorer.param_count()
        )));
    }
    let h = 1e-5;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut max_rel = 0.0_f64;
    let n_params = scorer.param_count();
    for _ in 0..n_probes {
        let idx = rand::Rng::random_range(&mut rng, 0..n_params);
        let mut perturbed = scorer.clone();
        let base = perturbed.params()[idx];
        perturbed.params_mut()[idx] = base + h;
        let up = loss(&perturbed);
        perturbed.params_mut()[idx] = base - h;
        let down = loss(&perturbed);
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[idx];
        let scale = a.abs().max(numeric.abs());
        let rel = if scale < 1e-8 {
            0.0
        } else {
            (a - numeric).abs() / scale
        };
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
