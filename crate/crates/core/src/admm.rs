//! Sparse abnormal-flow estimation by scaled-form ADMM.
//!
//! Solves `min_v 1/2 ||q - R_w v||^2 + mu_s ||v||_1` where `R_w` keeps only
//! the routing rows of links observed in the newest column. The `F x F`
//! system of the `v`-step is never formed: it is applied through the matrix
//! inversion lemma with a cached Cholesky factor of the `L' x L'` matrix
//! `xi I + R_w R_w^T`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::types::{AnomalyVector, CpModel, Hyperparams, ObservedSlice, RoutingMatrix};

/// `sign(a) * max(|a| - kappa, 0)`
pub fn soft_threshold(a: f64, kappa: f64) -> f64 {
    debug_assert!(kappa >= 0.0);
    if a > kappa {
        a - kappa
    } else if a < -kappa {
        a + kappa
    } else {
        0.0
    }
}

/// Masked residual of the newest slice column against the CP reconstruction
/// `A diag(b[t]) C^T`.
pub fn build_q(slice: &ObservedSlice, model: &CpModel) -> DVector<f64> {
    let last = slice.window() - 1;
    let c_last = model.c.row(last).transpose().component_mul(&model.b_curr);
    let fit = &model.a * c_last;
    DVector::from_fn(slice.links(), |l, _| {
        if slice.mask[(l, last)] {
            slice.values[(l, last)] - fit[l]
        } else {
            0.0
        }
    })
}

/// l1 weight from the observable proxy: `scale * max|q|`.
pub fn sparsity_weight(q: &DVector<f64>, scale: f64) -> f64 {
    scale * q.amax()
}

/// Routing matrix restricted to the observed links of one column.
#[derive(Debug, Clone)]
pub struct MaskedRouting {
    flows: usize,
    /// Link index of each observed row.
    observed: Vec<usize>,
    /// Observed-row positions traversed by each flow.
    columns: Vec<Vec<usize>>,
}

impl MaskedRouting {
    pub fn new(routing: &RoutingMatrix, mask_col: &[bool]) -> Result<Self> {
        if mask_col.len() != routing.num_links() {
            return Err(Error::Dimension(format!(
                "mask column has {} entries, routing has {} links",
                mask_col.len(),
                routing.num_links()
            )));
        }
        let mut position = vec![usize::MAX; mask_col.len()];
        let mut observed = Vec::new();
        for (l, &m) in mask_col.iter().enumerate() {
            if m {
                position[l] = observed.len();
                observed.push(l);
            }
        }
        let columns = routing
            .columns()
            .iter()
            .map(|col| {
                col.iter()
                    .filter(|&&l| mask_col[l])
                    .map(|&l| position[l])
                    .collect()
            })
            .collect();
        Ok(Self {
            flows: routing.num_flows(),
            observed,
            columns,
        })
    }

    pub fn observed_links(&self) -> &[usize] {
        &self.observed
    }

    pub fn num_observed(&self) -> usize {
        self.observed.len()
    }

    pub fn num_flows(&self) -> usize {
        self.flows
    }

    /// `R_w x`, length `L'`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.observed.len());
        for (col, &xi) in self.columns.iter().zip(x.iter()) {
            if xi != 0.0 {
                for &p in col {
                    y[p] += xi;
                }
            }
        }
        y
    }

    /// `R_w^T y` for `y` of length `L'`.
    pub fn apply_transpose(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.flows,
            self.columns.iter().map(|col| col.iter().map(|&p| y[p]).sum()),
        )
    }

    /// Gathers the observed entries of a link-space vector.
    pub fn restrict(&self, full: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.observed.len(), self.observed.iter().map(|&l| full[l]))
    }

    /// Dense `L' x L'` Gram matrix `R_w R_w^T`.
    pub fn gram(&self) -> DMatrix<f64> {
        let n = self.observed.len();
        let mut g = DMatrix::zeros(n, n);
        for col in &self.columns {
            for &p in col {
                for &q in col {
                    g[(p, q)] += 1.0;
                }
            }
        }
        g
    }
}

/// `(R_w^T R_w + xi I_F)^{-1}` applied through the inversion lemma.
#[derive(Debug, Clone)]
pub struct WoodburyOperator {
    routing: MaskedRouting,
    xi: f64,
    inner: Option<Cholesky<f64, Dyn>>,
}

impl WoodburyOperator {
    pub fn new(routing: MaskedRouting, xi: f64) -> Result<Self> {
        if !(xi > 0.0) {
            return Err(Error::Parameter(format!("ADMM penalty must be positive, got {xi}")));
        }
        let inner = if routing.num_observed() == 0 {
            None
        } else {
            let mut g = routing.gram();
            for i in 0..g.nrows() {
                g[(i, i)] += xi;
            }
            Some(Cholesky::new(g).ok_or_else(|| {
                Error::Parameter("inner Woodbury system is not positive definite".into())
            })?)
        };
        Ok(Self { routing, xi, inner })
    }

    pub fn routing(&self) -> &MaskedRouting {
        &self.routing
    }

    pub fn apply(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match &self.inner {
            None => rhs / self.xi,
            Some(chol) => {
                let inner = chol.solve(&self.routing.apply(rhs));
                (rhs - self.routing.apply_transpose(&inner)) / self.xi
            }
        }
    }
}

/// One-shot `(R_w^T R_w + xi I)^{-1} rhs`.
pub fn woodbury_apply(routing: &MaskedRouting, xi: f64, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(WoodburyOperator::new(routing.clone(), xi)?.apply(rhs))
}

/// Per-stream cache of the Woodbury factor, refreshed when the observation
/// pattern of the newest column changes.
#[derive(Debug, Clone, Default)]
pub struct AdmmWorkspace {
    pattern: Vec<bool>,
    xi: f64,
    operator: Option<WoodburyOperator>,
    /// `(r_pri, r_dual)` per iteration of the last solve.
    pub history: Vec<(f64, f64)>,
    refreshes: usize,
}

impl AdmmWorkspace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of factorizations performed so far.
    pub fn refreshes(&self) -> usize {
        self.refreshes
    }

    fn operator(&mut self, routing: &RoutingMatrix, mask_col: &[bool], xi: f64) -> Result<&WoodburyOperator> {
        let stale = self.operator.is_none() || self.pattern != mask_col || self.xi != xi;
        if stale {
            let masked = MaskedRouting::new(routing, mask_col)?;
            self.operator = Some(WoodburyOperator::new(masked, xi)?);
            self.pattern = mask_col.to_vec();
            self.xi = xi;
            self.refreshes += 1;
        }
        Ok(self.operator.as_ref().expect("operator just built"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmOutcome {
    pub estimate: AnomalyVector,
    pub iterations: usize,
    pub converged: bool,
    /// l1 weight used.
    pub weight: f64,
}

/// ADMM with the l1 weight set from `q` by [`sparsity_weight`].
pub fn admm_solve(
    q: &DVector<f64>,
    routing: &RoutingMatrix,
    mask_col: &[bool],
    hp: &Hyperparams,
    warm: Option<&AnomalyVector>,
    workspace: &mut AdmmWorkspace,
) -> Result<AdmmOutcome> {
    let weight = sparsity_weight(q, hp.sparsity_scale);
    admm_solve_weighted(q, routing, mask_col, weight, hp, warm, workspace)
}

/// ADMM for an explicit l1 weight `mu_s`.
pub fn admm_solve_weighted(
    q: &DVector<f64>,
    routing: &RoutingMatrix,
    mask_col: &[bool],
    weight: f64,
    hp: &Hyperparams,
    warm: Option<&AnomalyVector>,
    workspace: &mut AdmmWorkspace,
) -> Result<AdmmOutcome> {
    let flows = routing.num_flows();
    if q.len() != routing.num_links() {
        return Err(Error::Dimension(format!(
            "q has {} entries, routing has {} links",
            q.len(),
            routing.num_links()
        )));
    }
    if !(weight >= 0.0) {
        return Err(Error::Parameter(format!("l1 weight must be nonnegative, got {weight}")));
    }
    let xi = hp.admm_penalty;
    let op = workspace.operator(routing, mask_col, xi)?;
    let masked = op.routing();
    let rtq = masked.apply_transpose(&masked.restrict(q));
    let kappa = weight / xi;
    let sqrt_f = (flows as f64).sqrt();

    let mut state = match warm {
        Some(w) if w.len() == flows => w.clone(),
        Some(w) => {
            return Err(Error::Dimension(format!(
                "warm start has {} flows, expected {flows}",
                w.len()
            )))
        }
        None => AnomalyVector::zeros(flows),
    };
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for k in 1..=hp.max_iters.max(1) {
        iterations = k;
        let rhs = &rtq + (&state.z - &state.u) * xi;
        let v = op.apply(&rhs);
        let z_old = std::mem::replace(&mut state.z, v.clone());
        state.z.zip_apply(&state.u, |z, u| *z = soft_threshold(*z + u, kappa));
        state.u += &v - &state.z;
        state.v = v;

        let r_pri = (&state.v - &state.z).norm();
        let r_dual = xi * (&state.z - &z_old).norm();
        if !(r_pri.is_finite() && r_dual.is_finite()) {
            return Err(Error::Numerical { iteration: k });
        }
        history.push((r_pri, r_dual));
        let eps_pri = sqrt_f * hp.eps_abs + hp.eps_rel * state.v.norm().max(state.z.norm());
        let eps_dual = sqrt_f * hp.eps_abs + hp.eps_rel * xi * state.u.norm();
        if r_pri <= eps_pri && r_dual <= eps_dual {
            converged = true;
            break;
        }
    }
    workspace.history = history;
    Ok(AdmmOutcome {
        estimate: state,
        iterations,
        converged,
        weight,
    })
}

/// `1/2 ||q_w - R_w x||^2 + weight ||x||_1` on observed links.
pub fn lasso_objective(
    q: &DVector<f64>,
    routing: &RoutingMatrix,
    mask_col: &[bool],
    weight: f64,
    x: &DVector<f64>,
) -> f64 {
    let rx = routing.apply(x.as_slice());
    let fit: f64 = (0..q.len())
        .filter(|&l| mask_col[l])
        .map(|l| (q[l] - rx[l]).powi(2))
        .sum();
    0.5 * fit + weight * x.lp_norm(1)
}
