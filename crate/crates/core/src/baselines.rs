//! Reference detectors: EWMA forecasting residuals and the minimum-norm
//! pseudo-inverse estimator, both able to feed the same l1 stage as the
//! tracker.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::admm::{admm_solve, AdmmOutcome, AdmmWorkspace};
use crate::error::{Error, Result};
use crate::pipeline::StepResult;
use crate::types::{AnomalyVector, Hyperparams, Mask, RoutingMatrix};

pub const DEFAULT_EWMA_ALPHA: f64 = 0.2;

/// Forecast `X` and residual `D = Y - X` of a per-link EWMA.
#[derive(Debug, Clone, PartialEq)]
pub struct EwmaModel {
    pub forecast: DMatrix<f64>,
    pub residual: DMatrix<f64>,
}

/// `x_t = alpha y_{t-1} + (1 - alpha) x_{t-1}`, `x_1 = y_1`. Missing values are
/// replaced by the latest observed one (0 before any observation).
pub fn ewma_model(links: &DMatrix<f64>, mask: &Mask, alpha: f64) -> Result<EwmaModel> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Parameter(format!("EWMA alpha {alpha} outside (0, 1]")));
    }
    if links.shape() != mask.shape() {
        return Err(Error::Dimension(format!(
            "link matrix is {:?} but mask is {:?}",
            links.shape(),
            mask.shape()
        )));
    }
    let (l, total) = links.shape();
    let mut filled = DMatrix::zeros(l, total);
    let mut forecast = DMatrix::zeros(l, total);
    for i in 0..l {
        let mut last = 0.0;
        for s in 0..total {
            if mask[(i, s)] {
                last = links[(i, s)];
            }
            filled[(i, s)] = last;
        }
        if total > 0 {
            forecast[(i, 0)] = filled[(i, 0)];
        }
        for s in 1..total {
            let prev = forecast[(i, s - 1)];
            forecast[(i, s)] = prev + alpha * (filled[(i, s - 1)] - prev);
        }
    }
    let residual = filled - &forecast;
    Ok(EwmaModel { forecast, residual })
}

/// Minimum-norm least-squares `R^+ d`, computed as `R^T (R R^T)^+ d`.
pub fn frobenius_estimate(d: &DVector<f64>, routing: &RoutingMatrix) -> Result<DVector<f64>> {
    if d.len() != routing.num_links() {
        return Err(Error::Dimension(format!(
            "column has {} entries, routing has {} links",
            d.len(),
            routing.num_links()
        )));
    }
    let r = routing.to_dense();
    let gram = &r * r.transpose();
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.amax();
    let tol = top * f64::EPSILON * routing.num_links().max(1) as f64;
    let proj = eig.eigenvectors.transpose() * d;
    let scaled = DVector::from_fn(proj.len(), |k, _| {
        let e = eig.eigenvalues[k];
        if e > tol {
            proj[k] / e
        } else {
            0.0
        }
    });
    let y = &eig.eigenvectors * scaled;
    Ok(DVector::from_vec(routing.apply_transpose(y.as_slice())))
}

/// l1 identification on a baseline residual column, restricted to observed links.
pub fn sparsity_max_on_residual(
    d: &DVector<f64>,
    routing: &RoutingMatrix,
    mask_col: &[bool],
    hp: &Hyperparams,
    warm: Option<&AnomalyVector>,
    workspace: &mut AdmmWorkspace,
) -> Result<AdmmOutcome> {
    if mask_col.len() != d.len() {
        return Err(Error::Dimension("mask column length differs from residual".into()));
    }
    let q = DVector::from_fn(d.len(), |l, _| if mask_col[l] { d[l] } else { 0.0 });
    admm_solve(&q, routing, mask_col, hp, warm, workspace)
}

/// EWMA residuals passed through the l1 stage at times `W ..= T`, in the
/// same result format as the tracker (`b` is empty).
pub fn ewma_detect(
    links: &DMatrix<f64>,
    mask: &Mask,
    routing: &RoutingMatrix,
    hp: &Hyperparams,
    alpha: f64,
) -> Result<Vec<StepResult>> {
    let t0 = Instant::now();
    let model = ewma_model(links, mask, alpha)?;
    let fit_secs = t0.elapsed().as_secs_f64();
    let total = links.ncols();
    if total < hp.window {
        return Ok(Vec::new());
    }
    let steps = total - hp.window + 1;
    let mut workspace = AdmmWorkspace::new();
    let mut warm: Option<AnomalyVector> = None;
    let mut out = Vec::with_capacity(steps);
    for time in hp.window..=total {
        let col = time - 1;
        let t1 = Instant::now();
        let mask_col: Vec<bool> = mask.column(col).iter().copied().collect();
        let d = model.residual.column(col).into_owned();
        let outcome = sparsity_max_on_residual(&d, routing, &mask_col, hp, warm.as_ref(), &mut workspace)?;
        let sparse_secs = t1.elapsed().as_secs_f64();
        let z = outcome.estimate.estimate();
        let flagged = (0..z.len()).filter(|&i| z[i].abs() > hp.threshold).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for l in 0..links.nrows() {
            if mask_col[l] {
                num += d[l] * d[l];
                den += links[(l, col)] * links[(l, col)];
            }
        }
        warm = Some(outcome.estimate.clone());
        out.push(StepResult {
            slice_index: time - hp.window + 1,
            measurement_time: time,
            b: DVector::zeros(0),
            anomaly: outcome.estimate,
            flagged,
            residual: num.sqrt() / den.sqrt().max(1e-300),
            admm_iters: outcome.iterations,
            converged: outcome.converged,
            tracking_secs: fit_secs / steps as f64,
            sparse_secs,
        });
    }
    Ok(out)
}
