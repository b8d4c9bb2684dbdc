//! Binary base losses and the constant-sum identity `l(z) + l(-z) = C`.
//!
//! Six margin losses are provided. Three satisfy the identity in raw form
//! (unhinged, probability-style sigmoid, tanh-smooth); hinge, ramp and the
//! logistic log-loss do not and must be symmetrized-and-clipped first.
//! The constant is fixed to `C = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The constant-sum target `C`.
pub const CONSTANT_SUM: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    Unhinged,
    SigmoidProb,
    TanhSmooth,
    Hinge,
    Ramp,
    Logistic,
}

impl LossFamily {
    pub const ALL: [LossFamily; 6] = [
        LossFamily::Unhinged,
        LossFamily::SigmoidProb,
        LossFamily::TanhSmooth,
        LossFamily::Hinge,
        LossFamily::Ramp,
        LossFamily::Logistic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossFamily::Unhinged => "unhinged",
            LossFamily::SigmoidProb => "sigmoid_prob",
            LossFamily::TanhSmooth => "tanh_smooth",
            LossFamily::Hinge => "hinge",
            LossFamily::Ramp => "ramp",
            LossFamily::Logistic => "logistic",
        }
    }

    pub fn parse(name: &str) -> Option<LossFamily> {
        LossFamily::ALL.iter().copied().find(|f| f.name() == name)
    }

    /// Whether the sharpness parameter enters the formula.
    pub fn uses_gamma(self) -> bool {
        matches!(
            self,
            LossFamily::SigmoidProb | LossFamily::TanhSmooth | LossFamily::Logistic
        )
    }

    /// Whether the raw form already satisfies the constant-sum identity.
    pub fn raw_constant_sum(self) -> bool {
        matches!(
            self,
            LossFamily::Unhinged | LossFamily::SigmoidProb | LossFamily::TanhSmooth
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymClip {
    Raw,
    Sym,
}

/// A binary base loss: family, sharpness `gamma`, and raw/symmetrized flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub family: LossFamily,
    pub gamma: f64,
    pub sym_clip: SymClip,
}

impl SurrogateSpec {
    pub fn new(family: LossFamily, gamma: f64, sym_clip: SymClip) -> Result<Self> {
        let spec = SurrogateSpec {
            family,
            gamma,
            sym_clip,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Raw loss with the default sharpness `gamma = 1`.
    pub fn raw(family: LossFamily) -> Self {
        SurrogateSpec {
            family,
            gamma: 1.0,
            sym_clip: SymClip::Raw,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be positive and finite, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    /// Returns a copy with `sym_clip = sym`. Idempotent.
    pub fn symmetrize(&self) -> Self {
        SurrogateSpec {
            sym_clip: SymClip::Sym,
            ..*self
        }
    }

    /// Evaluates the loss at margin `z`.
    pub fn eval(&self, z: f64) -> Result<f64> {
        if !z.is_finite() {
            return Err(Error::Domain(format!("margin must be finite, got {z}")));
        }
        Ok(self.eval_unchecked(z))
    }

    /// `eval` without the finiteness check, for validated hot loops.
    pub fn eval_unchecked(&self, z: f64) -> f64 {
        match self.sym_clip {
            SymClip::Raw => raw_eval(self.family, self.gamma, z),
            SymClip::Sym => {
                let d = raw_eval(self.family, self.gamma, z) - raw_eval(self.family, self.gamma, -z);
                (0.5 + 0.5 * d).clamp(0.0, CONSTANT_SUM)
            }
        }
    }

    /// Single-precision evaluation, for diagnostics at `f32` working precision.
    pub fn eval_f32(&self, z: f32) -> f32 {
        match self.sym_clip {
            SymClip::Raw => raw_eval_f32(self.family, self.gamma as f32, z),
            SymClip::Sym => {
                let d = raw_eval_f32(self.family, self.gamma as f32, z)
                    - raw_eval_f32(self.family, self.gamma as f32, -z);
                (0.5 + 0.5 * d).clamp(0.0, CONSTANT_SUM as f32)
            }
        }
    }

    /// Derivative `dl/dz`, with fixed subgradient choices at kinks:
    /// hinge uses 0 at `z = 1`, ramp uses 0 at both kinks, and the
    /// symmetrized-clipped form uses 0 wherever the clip is active.
    pub fn derivative(&self, z: f64) -> Result<f64> {
        if !z.is_finite() {
            return Err(Error::Domain(format!("margin must be finite, got {z}")));
        }
        Ok(self.derivative_unchecked(z))
    }

    /// `derivative` without the finiteness check, for validated hot loops.
    pub fn derivative_unchecked(&self, z: f64) -> f64 {
        match self.sym_clip {
            SymClip::Raw => raw_derivative(self.family, self.gamma, z),
            SymClip::Sym => {
                let d = raw_eval(self.family, self.gamma, z) - raw_eval(self.family, self.gamma, -z);
                let v = 0.5 + 0.5 * d;
                if v <= 0.0 || v >= CONSTANT_SUM {
                    0.0
                } else {
                    0.5 * (raw_derivative(self.family, self.gamma, z)
                        + raw_derivative(self.family, self.gamma, -z))
                }
            }
        }
    }
}

fn raw_eval(family: LossFamily, gamma: f64, z: f64) -> f64 {
    match family {
        LossFamily::Unhinged => 0.5 * (1.0 - z),
        LossFamily::SigmoidProb => sigmoid(-gamma * z),
        LossFamily::TanhSmooth => 0.5 * (1.0 - (gamma * z).tanh()),
        LossFamily::Hinge => (1.0 - z).max(0.0),
        LossFamily::Ramp => (1.0 - z).clamp(0.0, 1.0),
        LossFamily::Logistic => softplus(-gamma * z),
    }
}

fn raw_derivative(family: LossFamily, gamma: f64, z: f64) -> f64 {
    match family {
        LossFamily::Unhinged => -0.5,
        LossFamily::SigmoidProb => {
            let s = sigmoid(-gamma * z);
            -gamma * s * (1.0 - s)
        }
        LossFamily::TanhSmooth => {
            let t = (gamma * z).tanh();
            -0.5 * gamma * (1.0 - t * t)
        }
        // Subgradient 0 at the kink z = 1 (right limit).
        LossFamily::Hinge => {
            if z < 1.0 {
                -1.0
            } else {
                0.0
            }
        }
        // Subgradient 0 at both kinks z = 0 and z = 1.
        LossFamily::Ramp => {
            if z > 0.0 && z < 1.0 {
                -1.0
            } else {
                0.0
            }
        }
        LossFamily::Logistic => -gamma * sigmoid(-gamma * z),
    }
}

fn raw_eval_f32(family: LossFamily, gamma: f32, z: f32) -> f32 {
    match family {
        LossFamily::Unhinged => 0.5 * (1.0 - z),
        LossFamily::SigmoidProb => sigmoid_f32(-gamma * z),
        LossFamily::TanhSmooth => 0.5 * (1.0 - (gamma * z).tanh()),
        LossFamily::Hinge => (1.0 - z).max(0.0),
        LossFamily::Ramp => (1.0 - z).clamp(0.0, 1.0),
        LossFamily::Logistic => {
            let t = -gamma * z;
            if t > 0.0 {
                t + (-t).exp().ln_1p()
            } else {
                t.exp().ln_1p()
            }
        }
    }
}

/// Numerically stable logistic function.
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn sigmoid_f32(t: f32) -> f32 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^t)`.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Residual summary of the constant-sum identity over a margin grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstSumReport {
    pub max_residual: f64,
    pub p99_residual: f64,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_points: usize,
}

/// Evaluates `|l(z) + l(-z) - C|` on a uniform grid and reports the max and
/// 99th-percentile residuals.
pub fn constant_sum_check(
    spec: &SurrogateSpec,
    grid_lo: f64,
    grid_hi: f64,
    n_points: usize,
) -> Result<ConstSumReport> {
    check_grid(grid_lo, grid_hi, n_points)?;
    let mut residuals = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let z = grid_point(grid_lo, grid_hi, n_points, i);
        let r = (spec.eval_unchecked(z) + spec.eval_unchecked(-z) - CONSTANT_SUM).abs();
        residuals.push(r);
    }
    Ok(summarize(residuals, grid_lo, grid_hi, n_points))
}

/// `constant_sum_check` evaluated at single precision.
pub fn constant_sum_check_f32(
    spec: &SurrogateSpec,
    grid_lo: f64,
    grid_hi: f64,
    n_points: usize,
) -> Result<ConstSumReport> {
    check_grid(grid_lo, grid_hi, n_points)?;
    let mut residuals = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let z = grid_point(grid_lo, grid_hi, n_points, i) as f32;
        let r = (spec.eval_f32(z) + spec.eval_f32(-z) - CONSTANT_SUM as f32).abs();
        residuals.push(r as f64);
    }
    Ok(summarize(residuals, grid_lo, grid_hi, n_points))
}

fn check_grid(grid_lo: f64, grid_hi: f64, n_points: usize) -> Result<()> {
    if !(grid_lo.is_finite() && grid_hi.is_finite() && grid_lo < grid_hi) {
        return Err(Error::InvalidConfig(format!(
            "grid bounds must be finite with lo < hi, got [{grid_lo}, {grid_hi}]"
        )));
    }
    if n_points < 2 {
        return Err(Error::InvalidConfig(format!(
            "grid needs at least 2 points, got {n_points}"
        )));
    }
    Ok(())
}

fn grid_point(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
    lo + (hi - lo) * (i as f64) / ((n - 1) as f64)
}

fn summarize(mut residuals: Vec<f64>, lo: f64, hi: f64, n: usize) -> ConstSumReport {
    residuals.sort_by(|a, b| a.total_cmp(b));
    let max_residual = *residuals.last().expect("n_points >= 2");
    let p99_residual = percentile(&residuals, 0.99);
    ConstSumReport {
        max_residual,
        p99_residual,
        grid_lo: lo,
        grid_hi: hi,
        grid_points: n,
    }
}

/// Linear-interpolation percentile of an ascending-sorted slice.
pub(crate) fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}
