//! Per-slice orchestration: `b` update, sparse anomaly estimate,
//! detection, then `C` and `A` refreshes.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::admm::{admm_solve, build_q, AdmmOutcome, AdmmWorkspace};
use crate::error::{Error, Result};
use crate::subspace::{init_model, update_a, update_b, update_c};
use crate::types::{
    validate_hyperparams, validate_routing, AnomalyVector, CpModel, Hyperparams, ObservedSlice,
    RlsCaches, RoutingMatrix,
};

/// Denominator floor of the residual ratio.
const TINY: f64 = 1e-300;

/// Output of one tracker step. Equality ignores the timing fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepResult {
    pub slice_index: usize,
    pub measurement_time: usize,
    pub b: DVector<f64>,
    pub anomaly: AnomalyVector,
    /// Flows with `|z_i| > delta_v`, ascending.
    pub flagged: Vec<usize>,
    pub residual: f64,
    pub admm_iters: usize,
    pub converged: bool,
    /// Seconds spent in the subspace updates.
    #[serde(skip)]
    pub tracking_secs: f64,
    /// Seconds spent building `q` and running ADMM.
    #[serde(skip)]
    pub sparse_secs: f64,
}

impl PartialEq for StepResult {
    fn eq(&self, other: &Self) -> bool {
        self.slice_index == other.slice_index
            && self.measurement_time == other.measurement_time
            && self.b == other.b
            && self.anomaly == other.anomaly
            && self.flagged == other.flagged
            && self.residual == other.residual
            && self.admm_iters == other.admm_iters
            && self.converged == other.converged
    }
}

/// Serializable tracker state; restoring it resumes a stream bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub hyperparams: Hyperparams,
    pub model: CpModel,
    pub caches: RlsCaches,
    pub warm: AnomalyVector,
    pub last_index: usize,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Online tracker for one link stream.
#[derive(Debug, Clone)]
pub struct Tracker {
    hp: Hyperparams,
    routing: RoutingMatrix,
    model: CpModel,
    caches: RlsCaches,
    warm: AnomalyVector,
    workspace: AdmmWorkspace,
    last_index: usize,
}

impl Tracker {
    pub fn new(routing: RoutingMatrix, hp: Hyperparams, seed: u64) -> Result<Self> {
        let mut problems: Vec<String> = validate_hyperparams(&hp)
            .iter()
            .map(ToString::to_string)
            .collect();
        problems.extend(validate_routing(&routing).iter().map(ToString::to_string));
        if !problems.is_empty() {
            return Err(Error::Parameter(problems.join("; ")));
        }
        let (model, caches) = init_model(routing.num_links(), hp.window, hp.rank, hp.mu_r, seed)?;
        let warm = AnomalyVector::zeros(routing.num_flows());
        Ok(Self {
            hp,
            routing,
            model,
            caches,
            warm,
            workspace: AdmmWorkspace::new(),
            last_index: 0,
        })
    }

    pub fn from_checkpoint(routing: RoutingMatrix, checkpoint: Checkpoint) -> Result<Self> {
        if checkpoint.format_version != CHECKPOINT_VERSION {
            return Err(Error::Parameter(format!(
                "unsupported checkpoint version {}",
                checkpoint.format_version
            )));
        }
        if checkpoint.model.links() != routing.num_links()
            || checkpoint.warm.len() != routing.num_flows()
        {
            return Err(Error::Dimension(
                "checkpoint does not match the routing matrix".into(),
            ));
        }
        Ok(Self {
            hp: checkpoint.hyperparams,
            routing,
            model: checkpoint.model,
            caches: checkpoint.caches,
            warm: checkpoint.warm,
            workspace: AdmmWorkspace::new(),
            last_index: checkpoint.last_index,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            hyperparams: self.hp.clone(),
            model: self.model.clone(),
            caches: self.caches.clone(),
            warm: self.warm.clone(),
            last_index: self.last_index,
        }
    }

    pub fn model(&self) -> &CpModel {
        &self.model
    }

    pub fn caches(&self) -> &RlsCaches {
        &self.caches
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn routing(&self) -> &RoutingMatrix {
        &self.routing
    }

    pub fn last_index(&self) -> usize {
        self.last_index
    }

    /// Processes the next slice; its index must be exactly one past the
    /// previous one.
    pub fn step(&mut self, slice: &ObservedSlice) -> Result<StepResult> {
        self.advance(slice, true)
    }

    /// Subspace updates only: no sparse stage, the whole slice is treated
    /// as normal traffic. The anomaly estimate in the result is zero.
    pub fn track(&mut self, slice: &ObservedSlice) -> Result<StepResult> {
        self.advance(slice, false)
    }

    fn advance(&mut self, slice: &ObservedSlice, sparse: bool) -> Result<StepResult> {
        let expected = self.last_index + 1;
        if slice.index != expected {
            return Err(Error::Sequencing {
                expected,
                got: slice.index,
            });
        }
        let hp = &self.hp;
        let last = hp.window - 1;

        let t0 = Instant::now();
        let b = update_b(&self.model, slice, hp)?;
        self.model.advance_b(b);
        let t1 = Instant::now();

        let outcome = if sparse {
            let q = build_q(slice, &self.model);
            let mask_col: Vec<bool> = slice.mask.column(last).iter().copied().collect();
            admm_solve(
                &q,
                &self.routing,
                &mask_col,
                hp,
                Some(&self.warm),
                &mut self.workspace,
            )?
        } else {
            AdmmOutcome {
                estimate: AnomalyVector::zeros(self.routing.num_flows()),
                iterations: 0,
                converged: true,
                weight: 0.0,
            }
        };
        let t2 = Instant::now();

        let z = outcome.estimate.estimate();
        let flagged: Vec<usize> = z
            .iter()
            .enumerate()
            .filter(|(_, x)| x.abs() > hp.threshold)
            .map(|(i, _)| i)
            .collect();

        let mut anomaly = DMatrix::zeros(slice.links(), slice.window());
        let link_part = self.routing.apply(z.as_slice());
        anomaly.set_column(last, &DVector::from_vec(link_part));

        update_c(&mut self.model, &mut self.caches, slice, &anomaly, hp)?;
        update_a(&mut self.model, &mut self.caches, slice, &anomaly, hp)?;
        let t3 = Instant::now();

        let residual = masked_relative_residual(slice, &self.model);
        if sparse {
            self.warm = outcome.estimate.clone();
        }
        self.last_index = slice.index;

        Ok(StepResult {
            slice_index: slice.index,
            measurement_time: slice.newest_time(),
            b: self.model.b_curr.clone(),
            anomaly: outcome.estimate,
            flagged,
            residual,
            admm_iters: outcome.iterations,
            converged: outcome.converged,
            tracking_secs: (t1 - t0).as_secs_f64() + (t3 - t2).as_secs_f64(),
            sparse_secs: (t2 - t1).as_secs_f64(),
        })
    }

    /// Steps through a whole stream, stopping at the first error.
    pub fn run<'a, I>(&mut self, slices: I) -> Result<Vec<StepResult>>
    where
        I: IntoIterator<Item = &'a ObservedSlice>,
    {
        slices.into_iter().map(|s| self.step(s)).collect()
    }
}

/// `||O * (Y - A diag(b) C^T)||_F / max(||O * Y||_F, tiny)`
pub fn masked_relative_residual(slice: &ObservedSlice, model: &CpModel) -> f64 {
    let recon = model.reconstruct(&model.b_curr);
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&y, &x), &m) in slice.values.iter().zip(recon.iter()).zip(slice.mask.iter()) {
        if m {
            num += (y - x) * (y - x);
            den += y * y;
        }
    }
    num.sqrt() / den.sqrt().max(TINY)
}
