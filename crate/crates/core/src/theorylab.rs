//! Linear sparse recovery with side information.
//!
//! Compares two priors built from a side vector `w`:
//! `f1(theta) = ||theta||_1 - zeta <theta, w>` (maximizing correlation) and
//! `f2(theta) = ||theta||_1 + zeta/2 ||theta - w||^2` (l2 distance), through the
//! closed-form `v_zeta` quantities, Monte-Carlo Gaussian squared distances and
//! empirical phase transitions of `min ||y - X theta||^2 + gamma f(theta)`.

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedcore::derive_seed;

const TAG_SIGNAL: u64 = 0x51;
const TAG_DESIGN: u64 = 0x52;
const TAG_TRIAL: u64 = 0x53;
const TAG_MC: u64 = 0x54;

/// Boundary distance below which `|w_i| = 1/zeta` is treated as `|w_i| > 1/zeta`.
const BOUNDARY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SideModel {
    Exact,
    /// Gaussian noise of standard deviation `sigma` on the support.
    Noisy { sigma: f64 },
    /// `k` support entries moved to off-support positions.
    ShiftedSupport { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    /// `||theta||_1 - zeta <theta, w>`
    F1,
    /// `||theta||_1 + zeta/2 ||theta - w||^2`
    F2,
}

impl PriorKind {
    pub fn name(&self) -> &'static str {
        match self {
            PriorKind::F1 => "f1",
            PriorKind::F2 => "f2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub kind: PriorKind,
    pub gamma: f64,
    pub zeta: f64,
}

impl PriorConfig {
    pub fn new(kind: PriorKind, gamma: f64, zeta: f64) -> Result<Self> {
        let cfg = Self { kind, gamma, zeta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.zeta >= 0.0) || !self.zeta.is_finite() {
            return Err(Error::invalid(format!("zeta must be >= 0, got {}", self.zeta)));
        }
        Ok(())
    }
}

/// Regularization weight used when none is given: `0.1 / sqrt(n_d)`.
pub fn default_gamma(n_d: usize) -> f64 {
    0.1 / (n_d.max(1) as f64).sqrt()
}

/// Noiseless measurements `y = X theta*` of an `s`-sparse signal.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryInstance {
    pub x: Array2<f64>,
    pub y: Vec<f64>,
    pub theta_star: Vec<f64>,
    pub w_side: Vec<f64>,
    pub s: usize,
    pub seed: u64,
}

fn signal_and_side(n_i: usize, s: usize, side: SideModel, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if s > n_i {
        return Err(Error::invalid(format!("s = {s} exceeds N_I = {n_i}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_SIGNAL, 0));
    let mut support = index::sample(&mut rng, n_i, s).into_vec();
    support.sort_unstable();
    let mut theta = vec![0.0; n_i];
    for &i in &support {
        let mag: f64 = rng.random_range(0.5..1.5);
        theta[i] = if rng.random_bool(0.5) { mag } else { -mag };
    }
    let mut w = theta.clone();
    match side {
        SideModel::Exact => {}
        SideModel::Noisy { sigma } => {
            if !(sigma >= 0.0) {
                return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
            }
            for &i in &support {
                let z: f64 = rng.sample(StandardNormal);
                w[i] += sigma * z;
            }
        }
        SideModel::ShiftedSupport { k } => {
            if k > s || k > n_i - s {
                return Err(Error::invalid(format!(
                    "cannot move {k} of {s} support entries into {} free positions",
                    n_i - s
                )));
            }
            let free: Vec<usize> = (0..n_i).filter(|i| theta[*i] == 0.0).collect();
            let from = index::sample(&mut rng, s, k).into_vec();
            let to = index::sample(&mut rng, free.len(), k).into_vec();
            for (&a, &b) in from.iter().zip(&to) {
                let (src, dst) = (support[a], free[b]);
                w[dst] = w[src];
                w[src] = 0.0;
            }
        }
    }
    Ok((theta, w))
}

/// Draws an instance. Rows of `X` come from their own stream, so the instance
/// with `n_d` rows is a prefix of any instance with more rows and the same seed.
pub fn gen_instance(n_i: usize, n_d: usize, s: usize, side: SideModel, seed: u64) -> Result<RecoveryInstance> {
    if n_i == 0 || n_d == 0 {
        return Err(Error::invalid("N_I and N_D must be >= 1"));
    }
    let (theta_star, w_side) = signal_and_side(n_i, s, side, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_DESIGN, 0));
    let x = Array2::from_shape_simple_fn((n_d, n_i), || rng.sample(StandardNormal));
    let y = x.dot(&ndarray::ArrayView1::from(&theta_star)).to_vec();
    Ok(RecoveryInstance {
        x,
        y,
        theta_star,
        w_side,
        s,
        seed,
    })
}

/// Proximal-gradient variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMethod {
    /// Plain proximal gradient.
    #[default]
    Ista,
    /// Monotone accelerated proximal gradient: a momentum step whose accepted
    /// iterate never raises the objective.
    Mfista,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub method: SolverMethod,
    pub max_iters: usize,
    /// Stop once the prox-gradient move `||z_k - y_k||` is at most `tol * max(1, ||z_k||)`.
    pub tol: f64,
    /// Fixed step; defaults to the inverse Lipschitz constant of the smooth part.
    pub step: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            method: SolverMethod::Ista,
            max_iters: 5000,
            tol: 1e-9,
            step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// Sufficient statistics of the least-squares term.
#[derive(Debug, Clone)]
struct Normal {
    gram: Array2<f64>,
    xty: Vec<f64>,
    yty: f64,
}

impl Normal {
    fn from_rows(x: &Array2<f64>, y: &[f64]) -> Self {
        let n_i = x.ncols();
        let mut out = Self {
            gram: Array2::zeros((n_i, n_i)),
            xty: vec![0.0; n_i],
            yty: 0.0,
        };
        out.add_rows(x, y, 0, x.nrows());
        out
    }

    fn add_rows(&mut self, x: &Array2<f64>, y: &[f64], lo: usize, hi: usize) {
        if hi <= lo {
            return;
        }
        let block = x.slice(ndarray::s![lo..hi, ..]);
        ndarray::linalg::general_mat_mul(1.0, &block.t(), &block, 1.0, &mut self.gram);
        for (r, row) in block.axis_iter(Axis(0)).enumerate() {
            let yr = y[lo + r];
            for (acc, &v) in self.xty.iter_mut().zip(row.iter()) {
                *acc += v * yr;
            }
            self.yty += yr * yr;
        }
    }

    /// `G theta` touching only the nonzero columns of `theta`.
    fn gram_times(&self, theta: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (j, &t) in theta.iter().enumerate() {
            if t != 0.0 {
                let row = self.gram.row(j);
                for (o, &g) in out.iter_mut().zip(row.iter()) {
                    *o += g * t;
                }
            }
        }
    }

    /// Largest eigenvalue of the Gram matrix (`sigma_max(X)^2`) by power iteration,
    /// inflated slightly so step sizes derived from it stay admissible.
    fn lambda_max(&self) -> f64 {
        let n = self.xty.len();
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut gv = vec![0.0; n];
        let mut est = 0.0;
        for _ in 0..500 {
            for (i, row) in self.gram.axis_iter(Axis(0)).enumerate() {
                gv[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            }
            let norm = gv.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            let next = norm;
            for (vi, &g) in v.iter_mut().zip(&gv) {
                *vi = g / norm;
            }
            let done = (next - est).abs() <= 1e-12 * next;
            est = next;
            if done {
                break;
            }
        }
        est * 1.01
    }
}

fn smooth_lipschitz(lambda_max: f64, cfg: &PriorConfig) -> f64 {
    let mut l = 2.0 * lambda_max;
    if cfg.kind == PriorKind::F2 && cfg.zeta != 0.0 {
        l += cfg.gamma * cfg.zeta;
    }
    l
}

fn prior_value(theta: &[f64], w: &[f64], cfg: &PriorConfig) -> f64 {
    let l1: f64 = theta.iter().map(|t| t.abs()).sum();
    if cfg.zeta == 0.0 {
        return l1;
    }
    match cfg.kind {
        PriorKind::F1 => l1 - cfg.zeta * theta.iter().zip(w).map(|(a, b)| a * b).sum::<f64>(),
        PriorKind::F2 => {
            l1 + 0.5 * cfg.zeta * theta.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        }
    }
}

fn objective(normal: &Normal, theta: &[f64], w: &[f64], cfg: &PriorConfig, g_theta: &[f64]) -> f64 {
    let quad: f64 = theta.iter().zip(g_theta).map(|(a, b)| a * b).sum();
    let lin: f64 = theta.iter().zip(&normal.xty).map(|(a, b)| a * b).sum();
    (normal.yty - 2.0 * lin + quad).max(0.0) + cfg.gamma * prior_value(theta, w, cfg)
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

fn prox_grad(
    normal: &Normal,
    lambda_max: f64,
    w: &[f64],
    cfg: &PriorConfig,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    cfg.validate()?;
    let n = w.len();
    let lip = smooth_lipschitz(lambda_max, cfg);
    let step = match opts.step {
        Some(step) => {
            if !(step > 0.0) || step * lip > 1.0 + 1e-12 {
                return Err(Error::invalid(format!(
                    "step {step} exceeds the admissible bound {}",
                    1.0 / lip
                )));
            }
            step
        }
        None if lip > 0.0 => 1.0 / lip,
        None => 1.0,
    };
    let thresh = cfg.gamma * step;
    let gz = cfg.gamma * cfg.zeta;
    let accelerate = opts.method == SolverMethod::Mfista;

    // `y` is the extrapolated point, `x` the accepted iterate, `z` the prox step
    let mut x = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut g_buf = vec![0.0; n];
    let mut f_x = if accelerate {
        objective(normal, &x, w, cfg, &g_buf)
    } else {
        f64::NAN
    };
    let mut t = 1.0f64;
    let mut iterations = 0;
    for it in 0..opts.max_iters {
        iterations = it + 1;
        normal.gram_times(&y, &mut g_buf);
        let mut diff_sq = 0.0;
        let mut norm_sq = 0.0;
        for i in 0..n {
            let mut grad = 2.0 * (g_buf[i] - normal.xty[i]);
            if cfg.zeta != 0.0 {
                grad += match cfg.kind {
                    PriorKind::F1 => -gz * w[i],
                    PriorKind::F2 => gz * (y[i] - w[i]),
                };
            }
            let next = soft_threshold(y[i] - step * grad, thresh);
            if !next.is_finite() {
                return Err(Error::NonFinite { index: i });
            }
            diff_sq += (next - y[i]) * (next - y[i]);
            norm_sq += next * next;
            z[i] = next;
        }
        let converged = diff_sq.sqrt() <= opts.tol * norm_sq.sqrt().max(1.0);
        if !accelerate {
            std::mem::swap(&mut x, &mut z);
            y.copy_from_slice(&x);
        } else {
            normal.gram_times(&z, &mut g_buf);
            let f_z = objective(normal, &z, w, cfg, &g_buf);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let keep_z = f_z <= f_x;
            // y = x_new + t/t' (z - x_new) + (t-1)/t' (x_new - x_old)
            for i in 0..n {
                let x_old = x[i];
                let x_new = if keep_z { z[i] } else { x_old };
                y[i] = x_new + (t / t_next) * (z[i] - x_new) + ((t - 1.0) / t_next) * (x_new - x_old);
                x[i] = x_new;
            }
            if keep_z {
                f_x = f_z;
            }
            t = t_next;
            if converged && keep_z {
                break;
            }
            continue;
        }
        if converged {
            break;
        }
    }
    normal.gram_times(&x, &mut g_buf);
    let objective = objective(normal, &x, w, cfg, &g_buf);
    Ok(SolveReport {
        theta: x,
        objective,
        iterations,
    })
}

/// Proximal-gradient solve of `||y - X theta||^2 + gamma f(theta)` from zero.
pub fn solve_prior(inst: &RecoveryInstance, cfg: &PriorConfig, opts: &SolverOptions) -> Result<SolveReport> {
    let normal = Normal::from_rows(&inst.x, &inst.y);
    prox_grad(&normal, normal.lambda_max(), &inst.w_side, cfg, opts)
}

/// Objective values after each of the first `iters` iterations, for monotonicity checks.
pub fn objective_trace(
    inst: &RecoveryInstance,
    cfg: &PriorConfig,
    method: SolverMethod,
    iters: usize,
) -> Result<Vec<f64>> {
    let normal = Normal::from_rows(&inst.x, &inst.y);
    let lm = normal.lambda_max();
    (1..=iters)
        .map(|k| {
            let opts = SolverOptions {
                method,
                max_iters: k,
                tol: 0.0,
                step: None,
            };
            prox_grad(&normal, lm, &inst.w_side, cfg, &opts).map(|r| r.objective)
        })
        .collect()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Index sets entering the `v_zeta` quantities and the measurement bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct SideSets {
    /// `|I|`, the support size of `theta*`.
    pub s: usize,
    /// `|I ∪ J|` with `J = {i : theta*_i != w_i}`.
    pub q: usize,
    /// Off-support disagreements with `|w_i| > 1/zeta`.
    pub k_neq: Vec<usize>,
    /// Boundary set `|w_i| = 1/zeta`; always empty because near-boundary entries
    /// are merged into `k_neq`.
    pub k_eq: Vec<usize>,
    /// `|w_k|` for the off-support disagreement closest to the boundary; zero
    /// when there is none.
    pub w_bar: f64,
}

pub fn side_sets(theta_star: &[f64], w: &[f64], zeta: f64) -> Result<SideSets> {
    if theta_star.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: theta_star.len(),
            got: w.len(),
            context: "side information",
        });
    }
    if !(zeta >= 0.0) {
        return Err(Error::invalid(format!("zeta must be >= 0, got {zeta}")));
    }
    let mut s = 0;
    let mut q = 0;
    let mut k_neq = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for (i, (&t, &wi)) in theta_star.iter().zip(w).enumerate() {
        let on_support = t != 0.0;
        let disagree = t != wi;
        s += on_support as usize;
        q += (on_support || disagree) as usize;
        if !on_support && disagree {
            if zeta > 0.0 {
                let gap = wi.abs() - 1.0 / zeta;
                if gap > 0.0 || gap.abs() < BOUNDARY_TOL {
                    k_neq.push(i);
                }
            }
            let dist = if zeta > 0.0 {
                (wi.abs() - 1.0 / zeta).abs()
            } else {
                f64::INFINITY
            };
            if best.is_none_or(|(d, _)| dist < d) {
                best = Some((dist, wi.abs()));
            }
        }
    }
    Ok(SideSets {
        s,
        q,
        k_neq,
        k_eq: Vec::new(),
        w_bar: best.map_or(0.0, |(_, v)| v),
    })
}

fn v_zeta(kind: PriorKind, theta_star: &[f64], w: &[f64], zeta: f64) -> Result<f64> {
    let sets = side_sets(theta_star, w, zeta)?;
    let mut v = 0.0;
    for (&t, &wi) in theta_star.iter().zip(w) {
        if t != 0.0 {
            let term = match kind {
                PriorKind::F1 => sign(t) - zeta * wi,
                PriorKind::F2 => sign(t) + zeta * (t - wi),
            };
            v += term * term;
        }
    }
    for &i in &sets.k_neq {
        let e = zeta * w[i].abs() - 1.0;
        v += e * e;
    }
    Ok(v)
}

/// `sum_{I} (sign(theta*_i) - zeta w_i)^2 + sum_{K} (zeta |w_i| - 1)^2`.
pub fn v_zeta1(theta_star: &[f64], w: &[f64], zeta: f64) -> Result<f64> {
    v_zeta(PriorKind::F1, theta_star, w, zeta)
}

/// `sum_{I} (sign(theta*_i) + zeta (theta*_i - w_i))^2 + sum_{K} (zeta |w_i| - 1)^2`.
pub fn v_zeta2(theta_star: &[f64], w: &[f64], zeta: f64) -> Result<f64> {
    v_zeta(PriorKind::F2, theta_star, w, zeta)
}

pub fn v_zeta_for(kind: PriorKind, theta_star: &[f64], w: &[f64], zeta: f64) -> Result<f64> {
    v_zeta(kind, theta_star, w, zeta)
}

/// Per-coordinate description of `gamma * subdifferential(f)(theta*)`: a point on
/// the support, an interval off it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoordSet {
    Point(f64),
    Interval(f64, f64),
}

pub fn scaled_subdifferential(theta_star: &[f64], w: &[f64], prior: &PriorConfig) -> Result<Vec<CoordSet>> {
    if theta_star.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: theta_star.len(),
            got: w.len(),
            context: "side information",
        });
    }
    let (g, z) = (prior.gamma, prior.zeta);
    Ok(theta_star
        .iter()
        .zip(w)
        .map(|(&t, &wi)| {
            // both priors shift the l1 subgradient by -zeta*w_i or zeta*(theta*_i - w_i),
            // which coincide off the support
            let shift = match prior.kind {
                PriorKind::F1 => -z * wi,
                PriorKind::F2 => z * (t - wi),
            };
            if t != 0.0 {
                CoordSet::Point(g * (sign(t) + shift))
            } else {
                CoordSet::Interval(g * (-1.0 + shift), g * (1.0 + shift))
            }
        })
        .collect())
}

fn dist_sq(g: f64, set: CoordSet) -> f64 {
    match set {
        CoordSet::Point(p) => (g - p) * (g - p),
        CoordSet::Interval(a, b) => {
            if g > b {
                (g - b) * (g - b)
            } else if g < a {
                (a - g) * (a - g)
            } else {
                0.0
            }
        }
    }
}

/// Monte-Carlo estimate of `E dist^2(g, gamma * subdiff f(theta*))`, `g ~ N(0, I)`,
/// with its standard error.
pub fn eta_sq_mc(
    theta_star: &[f64],
    w: &[f64],
    prior: &PriorConfig,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_samples < 100 {
        return Err(Error::invalid(format!("need at least 100 samples, got {n_samples}")));
    }
    if !(prior.gamma >= 0.0) || !(prior.zeta >= 0.0) {
        return Err(Error::invalid("gamma and zeta must be >= 0"));
    }
    let sets = scaled_subdifferential(theta_star, w, prior)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_MC, 0));
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 0..n_samples {
        let d: f64 = sets
            .iter()
            .map(|&set| dist_sq(rng.sample(StandardNormal), set))
            .sum();
        let delta = d - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (d - mean);
    }
    let var = m2 / (n_samples - 1) as f64;
    Ok((mean, (var / n_samples as f64).sqrt()))
}

/// Smallest Monte-Carlo estimate over `gammas`, sharing one Gaussian sample set.
pub fn eta_sq_min_over_gamma(
    theta_star: &[f64],
    w: &[f64],
    kind: PriorKind,
    zeta: f64,
    gammas: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for &gamma in gammas {
        let prior = PriorConfig { kind, gamma, zeta };
        let est = eta_sq_mc(theta_star, w, &prior, n_samples, seed)?;
        if best.is_none_or(|(b, _)| est.0 < b) {
            best = Some((est.0, gamma));
        }
    }
    best.ok_or(Error::Empty("gamma grid"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaBound {
    pub precondition: bool,
    pub bound: f64,
    pub v_zeta: f64,
    pub q: usize,
}

/// Measurement bound `2 v log(N_I/q) + s + |K| + |K=|/2 + 4q/5` together with
/// whether its precondition
/// `(q - s)/(N_I - q) <= |1 - zeta w_bar| exp(((zeta w_bar)^2 - 2 zeta w_bar) log(N_I/q))`
/// holds.
pub fn lemma_bound(kind: PriorKind, theta_star: &[f64], w: &[f64], zeta: f64) -> Result<LemmaBound> {
    let sets = side_sets(theta_star, w, zeta)?;
    let n_i = theta_star.len();
    if sets.q == 0 || sets.q >= n_i {
        return Err(Error::invalid(format!(
            "bound needs 0 < q < N_I, got q = {} with N_I = {n_i}",
            sets.q
        )));
    }
    let v = v_zeta(kind, theta_star, w, zeta)?;
    let log_ratio = (n_i as f64 / sets.q as f64).ln();
    let zw = zeta * sets.w_bar;
    let lhs = (sets.q - sets.s) as f64 / (n_i - sets.q) as f64;
    let rhs = (1.0 - zw).abs() * ((zw * zw - 2.0 * zw) * log_ratio).exp();
    let bound = 2.0 * v * log_ratio
        + sets.s as f64
        + sets.k_neq.len() as f64
        + 0.5 * sets.k_eq.len() as f64
        + 0.8 * sets.q as f64;
    Ok(LemmaBound {
        precondition: lhs <= rhs,
        bound,
        v_zeta: v,
        q: sets.q,
    })
}

fn default_zetas() -> Vec<f64> {
    (0..9).map(|k| 10f64.powf(-3.0 + 0.5 * k as f64)).collect()
}

fn default_priors() -> Vec<PriorKind> {
    vec![PriorKind::F1, PriorKind::F2]
}

/// Phase-transition sweep over priors, `zeta` values and measurement counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub n_i: usize,
    pub s: usize,
    #[serde(default = "exact")]
    pub side: SideModel,
    #[serde(default = "default_priors")]
    pub priors: Vec<PriorKind>,
    /// Regularization weight; `0.1/sqrt(N_D)` per grid point when absent.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_zetas")]
    pub zetas: Vec<f64>,
    pub n_d_grid: Vec<usize>,
    pub trials: usize,
    #[serde(default = "default_success_tol")]
    pub success_tol: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "sweep_solver")]
    pub solver: SolverOptions,
    /// Evaluate every grid point instead of stopping each curve at its threshold.
    #[serde(default)]
    pub full_grid: bool,
    /// Gaussian samples for the reported squared-distance estimate.
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
}

/// Accelerated solver used by sweeps; far fewer iterations than plain ISTA on
/// the poorly conditioned underdetermined systems near the transition.
pub fn sweep_solver() -> SolverOptions {
    SolverOptions {
        method: SolverMethod::Mfista,
        max_iters: 1000,
        ..Default::default()
    }
}

fn exact() -> SideModel {
    SideModel::Exact
}

fn default_success_tol() -> f64 {
    1e-2
}

fn default_mc_samples() -> usize {
    2000
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_d_grid.is_empty() {
            return Err(Error::invalid("N_D grid is empty"));
        }
        if self.n_d_grid[0] == 0 || self.n_d_grid.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::invalid("N_D grid must be positive and strictly ascending"));
        }
        if self.trials < 10 {
            return Err(Error::invalid(format!("need at least 10 trials, got {}", self.trials)));
        }
        if self.s > self.n_i || self.n_i == 0 {
            return Err(Error::invalid(format!("need 0 < N_I and s <= N_I, got {} / {}", self.s, self.n_i)));
        }
        if self.priors.is_empty() || self.zetas.is_empty() {
            return Err(Error::invalid("priors and zetas must be nonempty"));
        }
        if let Some(g) = self.gamma {
            PriorConfig::new(PriorKind::F1, g, 0.0)?;
        }
        for &z in &self.zetas {
            PriorConfig::new(PriorKind::F1, 1.0, z)?;
        }
        if !(self.success_tol > 0.0) {
            return Err(Error::invalid("success_tol must be positive"));
        }
        if self.mc_samples < 100 {
            return Err(Error::invalid("mc_samples must be >= 100"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub prior: PriorKind,
    pub zeta: f64,
    pub n_d: usize,
    pub success_rate: f64,
    pub mean_error: f64,
    pub v_zeta: f64,
    pub eta_sq_estimate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Threshold {
    pub prior: PriorKind,
    pub zeta: f64,
    /// First grid point with success rate >= 1/2.
    pub n_d: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub thresholds: Vec<Threshold>,
}

impl SweepResult {
    /// Smallest threshold over `zeta` for `prior`.
    pub fn best_threshold(&self, prior: PriorKind) -> Option<(usize, f64)> {
        self.thresholds
            .iter()
            .filter(|t| t.prior == prior)
            .filter_map(|t| t.n_d.map(|n| (n, t.zeta)))
            .min_by(|a, b| a.0.cmp(&b.0))
    }
}

struct Trial {
    master: RecoveryInstance,
    normal: Normal,
    rows_done: usize,
    star_norm: f64,
}

/// Runs the sweep. Trial `k` uses the first `N_D` rows of one design matrix for every
/// grid point, so success curves are coupled across `N_D`.
pub fn sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let n_max = *cfg.n_d_grid.last().expect("validated nonempty");
    let mut trials: Vec<Trial> = (0..cfg.trials)
        .into_par_iter()
        .map(|k| {
            let master = gen_instance(cfg.n_i, n_max, cfg.s, cfg.side, derive_seed(cfg.seed, TAG_TRIAL, k as u64))?;
            let star_norm = master.theta_star.iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok(Trial {
                normal: Normal {
                    gram: Array2::zeros((cfg.n_i, cfg.n_i)),
                    xty: vec![0.0; cfg.n_i],
                    yty: 0.0,
                },
                master,
                rows_done: 0,
                star_norm,
            })
        })
        .collect::<Result<_>>()?;

    let combos: Vec<(PriorKind, f64)> = cfg
        .priors
        .iter()
        .flat_map(|&p| cfg.zetas.iter().map(move |&z| (p, z)))
        .collect();
    let gamma_report = cfg.gamma.unwrap_or_else(|| default_gamma(cfg.n_d_grid[0]));
    let reference = &trials[0].master;
    let stats: Vec<(f64, f64)> = combos
        .iter()
        .map(|&(kind, zeta)| {
            let v = v_zeta(kind, &reference.theta_star, &reference.w_side, zeta)?;
            let prior = PriorConfig { kind, gamma: gamma_report, zeta };
            let (eta, _) = eta_sq_mc(&reference.theta_star, &reference.w_side, &prior, cfg.mc_samples, cfg.seed)?;
            Ok((v, eta))
        })
        .collect::<Result<_>>()?;

    let mut found: Vec<Option<usize>> = vec![None; combos.len()];
    let mut rows = Vec::new();
    for &n_d in &cfg.n_d_grid {
        if !cfg.full_grid && found.iter().all(Option::is_some) {
            break;
        }
        let spectra: Vec<f64> = trials
            .par_iter_mut()
            .map(|t| {
                t.normal.add_rows(&t.master.x, &t.master.y, t.rows_done, n_d);
                t.rows_done = n_d;
                t.normal.lambda_max()
            })
            .collect();
        let gamma = cfg.gamma.unwrap_or_else(|| default_gamma(n_d));
        for (c, &(kind, zeta)) in combos.iter().enumerate() {
            if found[c].is_some() && !cfg.full_grid {
                continue;
            }
            let prior = PriorConfig { kind, gamma, zeta };
            let errors: Vec<(bool, f64)> = trials
                .par_iter()
                .zip(spectra.par_iter())
                .map(|(t, &lm)| match prox_grad(&t.normal, lm, &t.master.w_side, &prior, &cfg.solver) {
                    Ok(rep) => {
                        let err = rep
                            .theta
                            .iter()
                            .zip(&t.master.theta_star)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt();
                        (err <= cfg.success_tol * t.star_norm, err / t.star_norm.max(f64::MIN_POSITIVE))
                    }
                    Err(_) => (false, f64::INFINITY),
                })
                .collect();
            let successes = errors.iter().filter(|e| e.0).count();
            let rate = successes as f64 / cfg.trials as f64;
            let mean_error = errors.iter().map(|e| e.1).sum::<f64>() / cfg.trials as f64;
            if rate >= 0.5 && found[c].is_none() {
                found[c] = Some(n_d);
            }
            rows.push(SweepRow {
                prior: kind,
                zeta,
                n_d,
                success_rate: rate,
                mean_error,
                v_zeta: stats[c].0,
                eta_sq_estimate: stats[c].1,
            });
        }
    }
    let thresholds = combos
        .iter()
        .zip(&found)
        .map(|(&(prior, zeta), &n_d)| Threshold { prior, zeta, n_d })
        .collect();
    Ok(SweepResult { rows, thresholds })
}

/// Minimal grid `N_D` with success rate >= 1/2 for a single prior, or `None`.
#[allow(clippy::too_many_arguments)]
pub fn phase_transition(
    n_i: usize,
    s: usize,
    side: SideModel,
    prior: &PriorConfig,
    n_d_grid: &[usize],
    trials: usize,
    success_tol: f64,
    seed: u64,
) -> Result<Option<usize>> {
    prior.validate()?;
    let cfg = SweepConfig {
        n_i,
        s,
        side,
        priors: vec![prior.kind],
        gamma: Some(prior.gamma),
        zetas: vec![prior.zeta],
        n_d_grid: n_d_grid.to_vec(),
        trials,
        success_tol,
        seed,
        solver: sweep_solver(),
        full_grid: false,
        mc_samples: 100,
    };
    Ok(sweep(&cfg)?.thresholds[0].n_d)
}

pub fn write_sweep_csv(path: &std::path::Path, rows: &[SweepRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
