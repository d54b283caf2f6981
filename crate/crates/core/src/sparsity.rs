//! Smooth ℓ1 surrogate, sparsity measurement and the communication bit model.
//!
//! The surrogate is `phi(x) = rho * sum_n log cosh(x_n / rho)`, whose gradient is
//! `tanh(x_n / rho)`. It sits between `||x||_1 - d * rho * ln 2` and `||x||_1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing level used when a run does not set one.
pub const DEFAULT_RHO: f64 = 1e-4;

/// Magnitude at or below which a parameter counts as zero.
pub const DEFAULT_ZERO_TOL: f64 = 1e-3;

/// Largest `f64` strictly below one; `tanh` saturates to exactly 1.0 for
/// arguments above ~19, so gradients are clamped here to stay inside (-1, 1).
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothL1Config {
    rho: f64,
}

impl SmoothL1Config {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::invalid(format!("rho must be positive, got {rho}")));
        }
        Ok(Self { rho })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }
}

impl Default for SmoothL1Config {
    fn default() -> Self {
        Self { rho: DEFAULT_RHO }
    }
}

/// `ln(2) - log cosh(u)` for `u >= 0`, which lies in `[0, ln 2]`.
#[inline]
fn log_cosh_gap(a: f64) -> f64 {
    // ln cosh a = a + ln(1 + e^{-2a}) - ln 2, never overflows
    std::f64::consts::LN_2 - (-2.0 * a).exp().ln_1p()
}

/// `rho * log cosh(x / rho)` for a single coordinate.
#[inline]
pub(crate) fn phi_scalar(x: f64, rho: f64) -> f64 {
    let ax = x.abs();
    let a = ax / rho;
    if a < 1.0 {
        rho * a.cosh().ln()
    } else {
        // written as |x| minus a nonnegative correction so the value never
        // exceeds |x| after rounding
        ax - rho * log_cosh_gap(a)
    }
}

#[inline]
pub(crate) fn grad_scalar(x: f64, rho: f64) -> f64 {
    (x / rho).tanh().clamp(-BELOW_ONE, BELOW_ONE)
}

fn check_finite(x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

pub fn phi_rho(x: &[f64], cfg: SmoothL1Config) -> Result<f64> {
    check_finite(x)?;
    let sum: f64 = x.iter().map(|&v| phi_scalar(v, cfg.rho)).sum();
    // the exact value lies in the bracket; summation rounding can step outside
    // it when every term sits on its asymptote
    let l1: f64 = x.iter().map(|v| v.abs()).sum();
    let lower = l1 - x.len() as f64 * cfg.rho * std::f64::consts::LN_2;
    Ok(sum.max(lower).min(l1))
}

pub fn grad_phi_rho(x: &[f64], cfg: SmoothL1Config) -> Result<Vec<f64>> {
    check_finite(x)?;
    Ok(x.iter().map(|&v| grad_scalar(v, cfg.rho)).collect())
}

/// `out += scale * grad phi(x)` without allocating.
pub(crate) fn add_scaled_grad(out: &mut [f64], x: &[f64], scale: f64, rho: f64) {
    debug_assert_eq!(out.len(), x.len());
    if scale == 0.0 {
        return;
    }
    for (o, &v) in out.iter_mut().zip(x) {
        *o += scale * grad_scalar(v, rho);
    }
}

/// Fraction of entries whose magnitude exceeds `zero_tol`.
pub fn sparsity_fraction(x: &[f64], zero_tol: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Empty("sparsity of an empty vector"));
    }
    if !(zero_tol >= 0.0) {
        return Err(Error::invalid(format!("zero_tol must be >= 0, got {zero_tol}")));
    }
    let nnz = x.iter().filter(|v| v.abs() > zero_tol).count();
    Ok(nnz as f64 / x.len() as f64)
}

/// Bit costs for one upload plus one broadcast of a sparse model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommCostModel {
    pub bits_dense: u64,
    pub bits_zero: u64,
    pub index_bits_per_param: u64,
}

impl Default for CommCostModel {
    fn default() -> Self {
        Self {
            bits_dense: 64,
            bits_zero: 1,
            index_bits_per_param: 1,
        }
    }
}

impl CommCostModel {
    pub fn validate(&self) -> Result<()> {
        if self.bits_dense == 0 || self.bits_zero == 0 || self.index_bits_per_param == 0 {
            return Err(Error::invalid("communication bit costs must all be >= 1"));
        }
        Ok(())
    }
}

/// Bits exchanged between the server and one client in one round:
/// `s*n*2*dense + (1-s)*n*2*zero + n*index`, where `s` is the nonzero fraction.
pub fn round_comm_bits(n_params: usize, sparsity: f64, model: CommCostModel) -> Result<u64> {
    if n_params == 0 {
        return Err(Error::invalid("n_params must be positive"));
    }
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::invalid(format!(
            "sparsity must lie in [0, 1], got {sparsity}"
        )));
    }
    model.validate()?;
    let n = n_params as f64;
    let bits = sparsity * n * 2.0 * model.bits_dense as f64
        + (1.0 - sparsity) * n * 2.0 * model.bits_zero as f64
        + n * model.index_bits_per_param as f64;
    Ok(bits.round() as u64)
}
