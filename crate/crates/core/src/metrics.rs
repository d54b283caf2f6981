//! Per-round evaluation, best-accuracy summaries and history CSV files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedcore::{ClientState, ServerState};
use crate::models::{evaluate, ParamVector};
use crate::sparsity::{round_comm_bits, sparsity_fraction, CommCostModel, DEFAULT_ZERO_TOL};

/// Version tag of the history CSV columns and the run summary layout.
pub const SCHEMA_VERSION: &str = "fedmac-metrics/1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub comm: CommCostModel,
    pub zero_tol: f64,
    /// Weight client averages by shard size instead of counting clients equally.
    pub weighted: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            comm: CommCostModel::default(),
            zero_tol: DEFAULT_ZERO_TOL,
            weighted: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.comm.validate()?;
        if !(self.zero_tol >= 0.0) {
            return Err(Error::invalid(format!(
                "zero_tol must be >= 0, got {}",
                self.zero_tol
            )));
        }
        Ok(())
    }
}

/// Metrics of one global round. Personalized-model fields are empty for strategies
/// without a personalized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub gm_acc: f64,
    pub pm_acc: Option<f64>,
    /// Mean training loss of the model each client actually uses.
    pub train_loss: f64,
    pub gm_train_loss: f64,
    pub gm_sparsity: f64,
    pub mean_pm_sparsity: Option<f64>,
    /// Mean squared distance between personalized and global models.
    pub pm_gap: Option<f64>,
    pub cum_comm_bits: u64,
}

struct Mean {
    sum: f64,
    weight: f64,
}

impl Mean {
    fn new() -> Self {
        Self { sum: 0.0, weight: 0.0 }
    }

    fn add(&mut self, x: f64, w: f64) {
        self.sum += x * w;
        self.weight += w;
    }

    fn get(&self) -> f64 {
        self.sum / self.weight
    }
}

/// Evaluates the global model and the clients' `personal` models.
///
/// `transfers` is the number of client exchanges since the previous record; each
/// is charged at the global model's sparsity.
pub fn eval_round(
    server: &ServerState,
    clients: &[ClientState],
    cfg: &EvalConfig,
    transfers: u64,
) -> Result<MetricsRecord> {
    if clients.is_empty() {
        return Err(Error::Empty("clients"));
    }
    let w = &server.w;
    let weight = |n: usize| if cfg.weighted { n as f64 } else { 1.0 };
    let has_pm = clients.iter().all(|c| c.personal.is_some());

    let (mut gm_acc, mut gm_loss, mut pm_acc, mut used_loss) =
        (Mean::new(), Mean::new(), Mean::new(), Mean::new());
    let (mut pm_sp, mut gap) = (Mean::new(), Mean::new());
    for c in clients {
        let wt_test = weight(c.data.test.len());
        let wt_train = weight(c.data.train.len());
        gm_acc.add(evaluate(w, &c.data.test)?.0, wt_test);
        let (_, gl) = evaluate(w, &c.data.train)?;
        gm_loss.add(gl, wt_train);
        match (&c.personal, has_pm) {
            (Some(p), true) => {
                pm_acc.add(evaluate(p, &c.data.test)?.0, wt_test);
                used_loss.add(evaluate(p, &c.data.train)?.1, wt_train);
                pm_sp.add(sparsity_fraction(p.values(), cfg.zero_tol)?, 1.0);
                gap.add(p.dist_sq(w), 1.0);
            }
            _ => used_loss.add(gl, wt_train),
        }
    }

    let gm_sparsity = sparsity_fraction(w.values(), cfg.zero_tol)?;
    let prev = server.history.last().map_or(0, |r| r.cum_comm_bits);
    let per = round_comm_bits(w.len(), gm_sparsity, cfg.comm)?;
    Ok(MetricsRecord {
        round: server.round,
        gm_acc: gm_acc.get(),
        pm_acc: has_pm.then(|| pm_acc.get()),
        train_loss: used_loss.get(),
        gm_train_loss: gm_loss.get(),
        gm_sparsity,
        mean_pm_sparsity: has_pm.then(|| pm_sp.get()),
        pm_gap: has_pm.then(|| gap.get()),
        cum_comm_bits: prev + transfers * per,
    })
}

/// Accuracy of a single model on a batch, for callers outside a run.
pub fn accuracy(params: &ParamVector, batch: &crate::models::Batch) -> Result<f64> {
    Ok(evaluate(params, batch)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestSummary {
    pub best_gm: f64,
    pub gm_round: usize,
    pub best_pm: Option<f64>,
    pub pm_round: Option<usize>,
}

/// Highest accuracies over a history; ties go to the earliest round.
pub fn best_summary(history: &[MetricsRecord]) -> Result<BestSummary> {
    let first = history.first().ok_or(Error::Empty("metrics history"))?;
    let mut out = BestSummary {
        best_gm: first.gm_acc,
        gm_round: first.round,
        best_pm: None,
        pm_round: None,
    };
    for r in history {
        if r.gm_acc > out.best_gm {
            out.best_gm = r.gm_acc;
            out.gm_round = r.round;
        }
        if let Some(p) = r.pm_acc {
            if out.best_pm.is_none_or(|b| p > b) {
                out.best_pm = Some(p);
                out.pm_round = Some(r.round);
            }
        }
    }
    Ok(out)
}

pub fn write_history_csv(path: &Path, history: &[MetricsRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_history_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}
