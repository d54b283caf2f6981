//! Federated protocol engine.
//!
//! One global round: every client (or only the sampled ones, when
//! `compute_all_clients` is off) starts from the global model, runs `R` local
//! rounds of its strategy and returns its local global model; the server mixes the
//! uploads of `S` sampled clients into the global model with weight `beta`.
//!
//! Every random draw comes from a ChaCha stream keyed by `(seed, purpose, client)`
//! and positioned by the round index, so results do not depend on thread count or
//! on which clients were computed in earlier rounds.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{ClientData, FederatedDataset};
use crate::error::{Error, Result};
use crate::metrics::{eval_round, EvalConfig, MetricsRecord};
use crate::models::{init_params, loss_and_grad, Batch, ModelSpec, ParamVector};
use crate::sparsity::{self, add_scaled_grad, SmoothL1Config};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Global rounds `T`.
    #[serde(alias = "T")]
    pub rounds: usize,
    /// Local rounds per global round `R`.
    #[serde(alias = "R")]
    pub local_rounds: usize,
    /// Clients aggregated per round `S`.
    #[serde(alias = "S")]
    pub clients_per_round: usize,
    /// Personalization weight (correlation for FedMac).
    pub lambda: f64,
    /// Step size of the local global model update.
    pub eta: f64,
    /// Step size of the personalized model update (also the local SGD rate of the
    /// non-personalized baselines).
    pub eta_p: f64,
    /// Sparsity weight on the personalized model.
    pub gamma: f64,
    /// Sparsity weight on the local global model.
    pub gamma_w: f64,
    /// Server mixing weight.
    pub beta: f64,
    /// Smoothing level of the log-cosh surrogate.
    pub rho: f64,
    /// Stop the personalized solve once the squared gradient norm is below this;
    /// zero means a fixed `inner_steps` count.
    pub nu: f64,
    pub batch_size: usize,
    pub inner_steps: usize,
    pub nu_max_iters: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            rounds: 800,
            local_rounds: 20,
            clients_per_round: 10,
            lambda: 1e-4,
            eta: 3000.0,
            eta_p: 0.01,
            gamma: 0.0,
            gamma_w: 0.0,
            beta: 1.0,
            rho: sparsity::DEFAULT_RHO,
            nu: 0.0,
            batch_size: 20,
            inner_steps: 1,
            nu_max_iters: 100,
        }
    }
}

impl HyperParams {
    pub fn validate(&self, n_clients: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.clients_per_round == 0 || self.clients_per_round > n_clients {
            return bad(format!(
                "clients_per_round must lie in [1, {n_clients}], got {}",
                self.clients_per_round
            ));
        }
        if self.local_rounds == 0 || self.batch_size == 0 || self.inner_steps == 0 {
            return bad("local_rounds, batch_size and inner_steps must be >= 1".into());
        }
        for (name, v) in [("eta", self.eta), ("eta_p", self.eta_p), ("rho", self.rho)] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("gamma_w", self.gamma_w),
            ("nu", self.nu),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        Ok(())
    }

    fn smooth(&self) -> SmoothL1Config {
        SmoothL1Config::new(self.rho).expect("validated rho")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Strategy {
    FedMac,
    FedAvg,
    FedProx {
        mu: f64,
    },
    /// Moreau-envelope personalization: `k_steps` gradient steps on
    /// `loss + lambda/2 ||theta - w_i||^2` per local round.
    PFedMe {
        #[serde(default = "default_pfedme_lambda")]
        lambda: f64,
        #[serde(default = "one")]
        k_steps: usize,
    },
    /// First-order MAML update; step sizes default to `eta_p`.
    PerFedAvg {
        #[serde(default)]
        alpha: Option<f64>,
        #[serde(default)]
        beta_ml: Option<f64>,
    },
}

fn default_pfedme_lambda() -> f64 {
    15.0
}

fn one() -> usize {
    1
}

impl Strategy {
    pub fn pfedme() -> Self {
        Strategy::PFedMe {
            lambda: default_pfedme_lambda(),
            k_steps: 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FedMac => "fedmac",
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx { .. } => "fedprox",
            Strategy::PFedMe { .. } => "pfedme",
            Strategy::PerFedAvg { .. } => "perfedavg",
        }
    }

    /// Whether the strategy produces a per-client personalized model.
    pub fn is_personalized(&self) -> bool {
        matches!(
            self,
            Strategy::FedMac | Strategy::PFedMe { .. } | Strategy::PerFedAvg { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{} {name} must be >= 0, got {v}", self.name())))
            }
        };
        match *self {
            Strategy::FedMac | Strategy::FedAvg => Ok(()),
            Strategy::FedProx { mu } => nonneg("mu", mu),
            Strategy::PFedMe { lambda, k_steps } => {
                if k_steps == 0 {
                    return Err(Error::invalid("pfedme k_steps must be >= 1"));
                }
                nonneg("lambda", lambda)
            }
            Strategy::PerFedAvg { alpha, beta_ml } => {
                nonneg("alpha", alpha.unwrap_or(0.0))?;
                nonneg("beta_ml", beta_ml.unwrap_or(0.0))
            }
        }
    }
}

/// Which model stands in for a client's personalized model at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PmEval {
    /// The personalized model left by the client's last local round.
    #[default]
    LastTrained,
    /// One personalized step from the current global model on a fresh mini-batch.
    FreshStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub pm_eval: PmEval,
    /// Run every client each round; otherwise only the sampled ones.
    pub compute_all_clients: bool,
    pub eval: EvalConfig,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            pm_eval: PmEval::LastTrained,
            compute_all_clients: true,
            eval: EvalConfig::default(),
        }
    }
}

fn divergence(strategy: &str, hyperparam: &'static str) -> Error {
    Error::Divergence {
        strategy: strategy.to_string(),
        round: 0,
        hyperparam,
    }
}

fn finite_or(p: ParamVector, strategy: &str, hyperparam: &'static str) -> Result<ParamVector> {
    if p.check_finite().is_ok() {
        Ok(p)
    } else {
        Err(divergence(strategy, hyperparam))
    }
}

/// Value and gradient of `loss(theta; batch) + gamma*phi(theta) - lambda*<theta, w_local>`.
pub fn theta_objective(
    theta: &ParamVector,
    w_local: &ParamVector,
    batch: &Batch,
    hp: &HyperParams,
) -> Result<(f64, ParamVector)> {
    theta.check_same_shape(w_local)?;
    let (loss, mut grad) = loss_and_grad(theta, batch)?;
    let mut value = loss;
    if hp.gamma != 0.0 {
        value += hp.gamma * sparsity::phi_rho(theta.values(), hp.smooth())?;
        add_scaled_grad(grad.values_mut(), theta.values(), hp.gamma, hp.rho);
    }
    if hp.lambda != 0.0 {
        value -= hp.lambda * theta.dot(w_local);
        grad.axpy(-hp.lambda, w_local);
    }
    Ok((value, grad))
}

/// Personalized-model update on one mini-batch: `inner_steps` gradient steps on the
/// correlation objective, or, with `nu > 0`, steps until the squared gradient norm
/// drops to `nu` (at most `nu_max_iters`).
pub fn theta_step_fedmac(
    theta: &ParamVector,
    w_local: &ParamVector,
    batch: &Batch,
    hp: &HyperParams,
) -> Result<ParamVector> {
    let mut theta = theta.clone();
    if hp.nu > 0.0 {
        for _ in 0..hp.nu_max_iters {
            let (_, g) = theta_objective(&theta, w_local, batch, hp)?;
            if g.norm_sq() <= hp.nu {
                break;
            }
            theta.axpy(-hp.eta_p, &g);
            theta = finite_or(theta, "fedmac", "eta_p")?;
        }
    } else {
        for _ in 0..hp.inner_steps {
            let (_, g) = theta_objective(&theta, w_local, batch, hp)?;
            theta.axpy(-hp.eta_p, &g);
        }
    }
    finite_or(theta, "fedmac", "eta_p")
}

/// Value and gradient of `-lambda*<theta, w> + lambda/2 ||w||^2 + gamma_w*phi(w)`.
pub fn w_objective(
    w_local: &ParamVector,
    theta_tilde: &ParamVector,
    hp: &HyperParams,
) -> Result<(f64, ParamVector)> {
    w_local.check_same_shape(theta_tilde)?;
    let mut grad = w_local.clone();
    grad.axpy(-1.0, theta_tilde);
    grad.scale(hp.lambda);
    let mut value = -hp.lambda * theta_tilde.dot(w_local) + 0.5 * hp.lambda * w_local.norm_sq();
    if hp.gamma_w != 0.0 {
        value += hp.gamma_w * sparsity::phi_rho(w_local.values(), hp.smooth())?;
        add_scaled_grad(grad.values_mut(), w_local.values(), hp.gamma_w, hp.rho);
    }
    Ok((value, grad))
}

/// `w <- w - eta * (lambda (w - theta) + gamma_w tanh(w / rho))`.
pub fn w_step_fedmac(
    w_local: &ParamVector,
    theta_tilde: &ParamVector,
    hp: &HyperParams,
) -> Result<ParamVector> {
    w_local.check_same_shape(theta_tilde)?;
    let mut w = w_local.clone();
    let step = hp.eta * hp.lambda;
    if step != 0.0 {
        for (wi, (&w0, &t)) in w
            .values_mut()
            .iter_mut()
            .zip(w_local.values().iter().zip(theta_tilde.values()))
        {
            *wi -= step * (w0 - t);
        }
    }
    add_scaled_grad(w.values_mut(), w_local.values(), -hp.eta * hp.gamma_w, hp.rho);
    finite_or(w, "fedmac", "eta")
}

/// One client's working state inside a run.
#[derive(Debug, Clone)]
pub struct ClientState<'a> {
    pub id: usize,
    /// Personalized model from the last local round.
    pub theta: ParamVector,
    /// Local copy of the global model, uploaded at the end of `client_update`.
    pub w_local: ParamVector,
    /// Model used as this client's personalized model in the last evaluation.
    pub personal: Option<ParamVector>,
    pub data: &'a ClientData,
    rng: ChaCha8Rng,
}

impl<'a> ClientState<'a> {
    pub fn new(id: usize, init: &ParamVector, data: &'a ClientData, seed: u64) -> Self {
        Self {
            id,
            theta: init.clone(),
            w_local: init.clone(),
            personal: None,
            data,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_CLIENT, id as u64)),
        }
    }

    /// Positions the client's stream for `round`; training and evaluation draws use
    /// disjoint streams.
    pub fn begin_round(&mut self, round: usize, evaluation: bool) {
        self.rng.set_stream(2 * round as u64 + evaluation as u64);
        self.rng.set_word_pos(0);
    }

    fn sample_batch(&mut self, size: usize) -> Batch {
        let n = self.data.train.len();
        let k = size.min(n);
        let mut idx = index::sample(&mut self.rng, n, k).into_vec();
        idx.sort_unstable();
        self.data.train.select(&idx)
    }
}

const TAG_INIT: u64 = 0x1;
const TAG_SAMPLE: u64 = 0x2;
const TAG_CLIENT: u64 = 0x3;

/// SplitMix64 finalizer over `(seed, tag, index)`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sgd_step(
    w: &mut ParamVector,
    batch: &Batch,
    hp: &HyperParams,
    lr: f64,
    anchor: Option<(f64, &ParamVector)>,
) -> Result<()> {
    let (_, mut g) = loss_and_grad(w, batch)?;
    add_scaled_grad(g.values_mut(), w.values(), hp.gamma, hp.rho);
    if let Some((mu, w0)) = anchor {
        if mu != 0.0 {
            for (gi, (&a, &b)) in g.values_mut().iter_mut().zip(w.values().iter().zip(w0.values())) {
                *gi += mu * (a - b);
            }
        }
    }
    w.axpy(-lr, &g);
    Ok(())
}

/// Runs `R` local rounds of `strategy` from `w_global` and returns the model the
/// client uploads. Leaves the personalized model in `client.theta`.
pub fn client_update(
    client: &mut ClientState,
    w_global: &ParamVector,
    hp: &HyperParams,
    strategy: &Strategy,
) -> Result<ParamVector> {
    strategy.validate()?;
    client.theta = w_global.clone();
    client.w_local = w_global.clone();
    let name = strategy.name();
    for _ in 0..hp.local_rounds {
        let batch = client.sample_batch(hp.batch_size);
        match *strategy {
            Strategy::FedMac => {
                client.theta = theta_step_fedmac(&client.theta, &client.w_local, &batch, hp)?;
                client.w_local = w_step_fedmac(&client.w_local, &client.theta, hp)?;
            }
            Strategy::FedAvg => {
                sgd_step(&mut client.w_local, &batch, hp, hp.eta_p, None)?;
            }
            Strategy::FedProx { mu } => {
                sgd_step(&mut client.w_local, &batch, hp, hp.eta_p, Some((mu, w_global)))?;
            }
            Strategy::PFedMe { lambda, k_steps } => {
                for _ in 0..k_steps {
                    sgd_step(
                        &mut client.theta,
                        &batch,
                        hp,
                        hp.eta_p,
                        Some((lambda, &client.w_local)),
                    )?;
                }
                client.theta = finite_or(client.theta.clone(), name, "eta_p")?;
                let mut w = client.w_local.clone();
                let step = hp.eta * lambda;
                if step != 0.0 {
                    w.scale(1.0 - step);
                    w.axpy(step, &client.theta);
                }
                add_scaled_grad(w.values_mut(), client.w_local.values(), -hp.eta * hp.gamma_w, hp.rho);
                client.w_local = w;
            }
            Strategy::PerFedAvg { alpha, beta_ml } => {
                let second = client.sample_batch(hp.batch_size);
                let mut tmp = client.w_local.clone();
                sgd_step(&mut tmp, &batch, hp, alpha.unwrap_or(hp.eta_p), None)?;
                let (_, mut g) = loss_and_grad(&tmp, &second)?;
                add_scaled_grad(g.values_mut(), tmp.values(), hp.gamma, hp.rho);
                client.w_local.axpy(-beta_ml.unwrap_or(hp.eta_p), &g);
            }
        }
        if !strategy.is_personalized() {
            client.theta = client.w_local.clone();
        }
        client.w_local = finite_or(client.w_local.clone(), name, "eta_p")?;
    }
    if matches!(strategy, Strategy::PerFedAvg { .. }) {
        client.theta = client.w_local.clone();
    }
    Ok(client.w_local.clone())
}

/// `(1 - beta) w_prev + beta * mean(uploads)`, uploads in ascending client order.
///
/// The mean is accumulated as a running average so identical uploads reproduce
/// themselves exactly.
pub fn aggregate(w_prev: &ParamVector, uploads: &[&ParamVector], beta: f64) -> Result<ParamVector> {
    if uploads.is_empty() {
        return Err(Error::Empty("aggregation uploads"));
    }
    for u in uploads {
        w_prev.check_same_shape(u)?;
    }
    let mut mean = vec![0.0; w_prev.len()];
    for (k, u) in uploads.iter().enumerate() {
        let inv = 1.0 / (k + 1) as f64;
        for (m, &x) in mean.iter_mut().zip(u.values()) {
            *m += (x - *m) * inv;
        }
    }
    let values = if beta == 1.0 {
        mean
    } else {
        w_prev
            .values()
            .iter()
            .zip(&mean)
            .map(|(&w, &m)| (1.0 - beta) * w + beta * m)
            .collect()
    };
    ParamVector::new(*w_prev.spec(), values)
}

/// `S` distinct clients drawn uniformly, in ascending order.
pub fn sample_clients<R: Rng + ?Sized>(n_clients: usize, s: usize, rng: &mut R) -> Result<Vec<usize>> {
    if s == 0 || s > n_clients {
        return Err(Error::invalid(format!(
            "cannot sample {s} of {n_clients} clients"
        )));
    }
    let mut idx = index::sample(rng, n_clients, s).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Clients sampled for aggregation in `round` of a run seeded with `seed`.
pub fn round_sample(seed: u64, round: usize, n_clients: usize, s: usize) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_SAMPLE, 0));
    rng.set_stream(round as u64);
    sample_clients(n_clients, s, &mut rng)
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub w: ParamVector,
    pub round: usize,
    pub history: Vec<MetricsRecord>,
}

/// A run in progress: server, clients and configuration.
pub struct Simulation<'a> {
    pub server: ServerState,
    pub clients: Vec<ClientState<'a>>,
    pub hp: HyperParams,
    pub strategy: Strategy,
    pub opts: RunOptions,
    seed: u64,
}

impl<'a> Simulation<'a> {
    pub fn new(
        data: &'a FederatedDataset,
        spec: ModelSpec,
        hp: HyperParams,
        strategy: Strategy,
        seed: u64,
        opts: RunOptions,
    ) -> Result<Self> {
        spec.validate()?;
        data.validate()?;
        hp.validate(data.n_clients())?;
        strategy.validate()?;
        opts.eval.validate()?;
        if data.input_dim != spec.input_dim || data.num_classes != spec.num_classes {
            return Err(Error::invalid(format!(
                "model expects {}-dim inputs and {} classes, dataset has {} and {}",
                spec.input_dim, spec.num_classes, data.input_dim, data.num_classes
            )));
        }
        let w0 = init_params(
            &spec,
            &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_INIT, 0)),
        )?;
        let clients = data
            .clients
            .iter()
            .enumerate()
            .map(|(i, c)| ClientState::new(i, &w0, c, seed))
            .collect();
        let mut sim = Self {
            server: ServerState {
                w: w0,
                round: 0,
                history: Vec::new(),
            },
            clients,
            hp,
            strategy,
            opts,
            seed,
        };
        sim.record(1)?;
        Ok(sim)
    }

    pub fn history(&self) -> &[MetricsRecord] {
        &self.server.history
    }

    fn tag(&self, e: Error) -> Error {
        match e {
            Error::Divergence { hyperparam, .. } => Error::Divergence {
                strategy: self.strategy.name().to_string(),
                round: self.server.round,
                hyperparam,
            },
            other => other,
        }
    }

    /// Runs one global round and records its metrics.
    pub fn step(&mut self) -> Result<&MetricsRecord> {
        let n = self.clients.len();
        let round = self.server.round;
        let sampled = round_sample(self.seed, round, n, self.hp.clients_per_round)?;
        let mut active = vec![self.opts.compute_all_clients; n];
        for &i in &sampled {
            active[i] = true;
        }

        let (w, hp, strategy) = (&self.server.w, &self.hp, &self.strategy);
        let uploads: Vec<Option<ParamVector>> = self
            .clients
            .par_iter_mut()
            .zip(active.par_iter())
            .map(|(c, &on)| {
                if !on {
                    return Ok(None);
                }
                c.begin_round(round, false);
                client_update(c, w, hp, strategy).map(Some)
            })
            .collect::<Result<_>>()
            .map_err(|e| self.tag(e))?;

        let picked: Vec<&ParamVector> = sampled
            .iter()
            .map(|&i| uploads[i].as_ref().expect("sampled clients are computed"))
            .collect();
        let next = aggregate(&self.server.w, &picked, self.hp.beta)
            .map_err(|_| divergence(self.strategy.name(), "beta"))
            .map_err(|e| self.tag(e))?;
        self.server.w = next;
        self.server.round += 1;
        self.record(sampled.len() as u64)?;
        Ok(self.server.history.last().expect("just recorded"))
    }

    fn refresh_personal(&mut self) -> Result<()> {
        let (w, hp, strategy, mode) = (&self.server.w, &self.hp, self.strategy, self.opts.pm_eval);
        let round = self.server.round;
        self.clients.par_iter_mut().try_for_each(|c| -> Result<()> {
            c.personal = personalized_model(c, w, hp, &strategy, mode, round)?;
            Ok(())
        })
    }

    fn record(&mut self, transfers: u64) -> Result<()> {
        self.refresh_personal().map_err(|e| self.tag(e))?;
        let rec = eval_round(&self.server, &self.clients, &self.opts.eval, transfers)?;
        self.server.history.push(rec);
        Ok(())
    }

    pub fn run(mut self) -> Result<Vec<MetricsRecord>> {
        while self.server.round < self.hp.rounds {
            self.step()?;
        }
        Ok(self.server.history)
    }
}

/// The model evaluated as client `c`'s personalized model at the current global `w`.
fn personalized_model(
    c: &mut ClientState,
    w: &ParamVector,
    hp: &HyperParams,
    strategy: &Strategy,
    mode: PmEval,
    round: usize,
) -> Result<Option<ParamVector>> {
    if !strategy.is_personalized() {
        return Ok(None);
    }
    if round == 0 {
        return Ok(Some(w.clone()));
    }
    let fresh = matches!(strategy, Strategy::PerFedAvg { .. }) || mode == PmEval::FreshStep;
    if !fresh {
        return Ok(Some(c.theta.clone()));
    }
    c.begin_round(round, true);
    let batch = c.sample_batch(hp.batch_size);
    let pm = match *strategy {
        Strategy::FedMac => theta_step_fedmac(w, w, &batch, hp)?,
        Strategy::PFedMe { lambda, k_steps } => {
            let mut t = w.clone();
            for _ in 0..k_steps {
                sgd_step(&mut t, &batch, hp, hp.eta_p, Some((lambda, w)))?;
            }
            t
        }
        Strategy::PerFedAvg { alpha, .. } => {
            let mut t = w.clone();
            sgd_step(&mut t, &batch, hp, alpha.unwrap_or(hp.eta_p), None)?;
            t
        }
        Strategy::FedAvg | Strategy::FedProx { .. } => unreachable!("not personalized"),
    };
    Ok(Some(finite_or(pm, strategy.name(), "eta_p")?))
}

/// Runs `hp.rounds` global rounds and returns the metrics of rounds `0..=T`.
pub fn run_experiment(
    data: &FederatedDataset,
    spec: ModelSpec,
    hp: &HyperParams,
    strategy: &Strategy,
    seed: u64,
    opts: &RunOptions,
) -> Result<Vec<MetricsRecord>> {
    Simulation::new(data, spec, hp.clone(), *strategy, seed, opts.clone())?.run()
}
