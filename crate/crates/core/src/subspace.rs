//! Online CP subspace tracking.
//!
//! The projection vector `b[t]` is the closed-form minimizer of a ridge
//! problem over the current slice plus a Hankel coupling to `b[t-1]`. The
//! factor rows `a^l` and `c^w` are exponentially weighted least-squares
//! estimates maintained with per-row information matrices `RA_l`, `RC_w`:
//!
//! ```text
//! RA_l[t] = lambda RA_l[t-1] + sum_w O[l,w] alpha_w alpha_w^T
//!         + mu_h sum_{w<W} O[l,w] beta_w beta_w^T + (1 - lambda) mu_r I
//! RA_l[t] a^l[t] = lambda RA_l[t-1] a^l[t-1] + sum_w O[l,w] Z[l,w] alpha_w
//! ```
//!
//! and likewise for `c^w` in descending `w`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{CpModel, Hyperparams, ObservedSlice, RlsCaches};

/// Random factors scaled by `1/sqrt(R)`, zero projection vectors and
/// `mu_r I` caches.
pub fn init_model(
    links: usize,
    window: usize,
    rank: usize,
    mu_r: f64,
    seed: u64,
) -> Result<(CpModel, RlsCaches)> {
    if rank == 0 {
        return Err(Error::Parameter("rank must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (rank as f64).sqrt();
    let mut draw = |rows: usize| {
        DMatrix::from_fn(rows, rank, |_, _| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x * scale
        })
    };
    let a = draw(links);
    let c = draw(window);
    let model = CpModel {
        a,
        c,
        b_curr: DVector::zeros(rank),
        b_prev: DVector::zeros(rank),
    };
    let eye = DMatrix::identity(rank, rank) * mu_r;
    let caches = RlsCaches {
        ra: vec![eye.clone(); links],
        rc: vec![eye; window],
    };
    Ok((model, caches))
}

fn check_shapes(model: &CpModel, slice: &ObservedSlice) -> Result<()> {
    if slice.links() != model.links() || slice.window() != model.window() {
        return Err(Error::Dimension(format!(
            "slice {} is {}x{} but model expects {}x{}",
            slice.index,
            slice.links(),
            slice.window(),
            model.links(),
            model.window()
        )));
    }
    Ok(())
}

fn spd_solve(m: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = Cholesky::<f64, Dyn>::new(m)?;
    let x = chol.solve(rhs);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// `acc += s * x x^T`, upper and lower filled identically.
fn add_outer(acc: &mut DMatrix<f64>, x: &DVector<f64>, s: f64) {
    let r = x.len();
    for i in 0..r {
        let xi = s * x[i];
        for j in 0..r {
            acc[(i, j)] += xi * x[j];
        }
    }
}

/// Normal equations `(M, r)` of the projection-vector problem for `slice`,
/// using the model's current factors and `b_curr` as `b[t-1]`.
pub fn projection_system(
    model: &CpModel,
    slice: &ObservedSlice,
    hp: &Hyperparams,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_shapes(model, slice)?;
    let (links, window, rank) = (model.links(), model.window(), model.rank());
    let b_prev = &model.b_curr;
    let mut m = DMatrix::identity(rank, rank) * hp.mu_r;
    let mut r = DVector::zeros(rank);
    let mut g = DVector::zeros(rank);
    let mut g_next = DVector::zeros(rank);
    for l in 0..links {
        let a_row = model.a.row(l);
        for w in 0..window {
            if !slice.mask[(l, w)] {
                continue;
            }
            for k in 0..rank {
                g[k] = a_row[k] * model.c[(w, k)];
            }
            let hankel = w + 1 < window && hp.mu_h != 0.0;
            add_outer(&mut m, &g, if hankel { 1.0 + hp.mu_h } else { 1.0 });
            r.axpy(slice.values[(l, w)], &g, 1.0);
            if hankel {
                for k in 0..rank {
                    g_next[k] = a_row[k] * model.c[(w + 1, k)];
                }
                r.axpy(hp.mu_h * g_next.dot(b_prev), &g, 1.0);
            }
        }
    }
    Ok((m, r))
}

/// Closed-form `b[t]` for the incoming slice. The model must still hold the
/// factors of step `t-1` with `b_curr = b[t-1]`.
pub fn update_b(model: &CpModel, slice: &ObservedSlice, hp: &Hyperparams) -> Result<DVector<f64>> {
    let (m, r) = projection_system(model, slice, hp)?;
    spd_solve(m, &r).ok_or_else(|| Error::Solver {
        what: "projection vector b".into(),
        slice: slice.index,
    })
}

/// Regressors for the link-factor rows: `alpha_w = b[t] * c^w` and, for
/// `w < W`, `beta_w = b[t-1] * c^{w+1} - b[t] * c^w` (elementwise).
pub fn link_regressors(model: &CpModel) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let window = model.window();
    let row = |w: usize| model.c.row(w).transpose();
    let alphas: Vec<DVector<f64>> = (0..window)
        .map(|w| row(w).component_mul(&model.b_curr))
        .collect();
    let betas = (0..window.saturating_sub(1))
        .map(|w| row(w + 1).component_mul(&model.b_prev) - &alphas[w])
        .collect();
    (alphas, betas)
}

/// RLS update of every link row of `A` against the current `C`, `b[t]`
/// and `b[t-1]`. `anomaly` is the `L x W` abnormal contribution removed from
/// the slice before fitting. Rows are independent and updated in parallel.
pub fn update_a(
    model: &mut CpModel,
    caches: &mut RlsCaches,
    slice: &ObservedSlice,
    anomaly: &DMatrix<f64>,
    hp: &Hyperparams,
) -> Result<()> {
    check_shapes(model, slice)?;
    if anomaly.shape() != slice.values.shape() {
        return Err(Error::Dimension("anomaly slice shape differs from slice".into()));
    }
    let (window, rank) = (model.window(), model.rank());
    let lambda = hp.forgetting;
    let (alphas, betas) = link_regressors(model);
    let alpha_outer: Vec<DMatrix<f64>> = alphas.iter().map(|x| x * x.transpose()).collect();
    let beta_outer: Vec<DMatrix<f64>> = betas.iter().map(|x| x * x.transpose()).collect();
    let drift = (1.0 - lambda) * hp.mu_r;
    let a_old = &model.a;

    let rows: Vec<Result<DVector<f64>>> = caches
        .ra
        .par_iter_mut()
        .enumerate()
        .map(|(l, ra)| {
            let a_prev = a_old.row(l).transpose();
            let mut rhs = (&*ra * &a_prev) * lambda;
            let mut next = &*ra * lambda;
            for k in 0..rank {
                next[(k, k)] += drift;
            }
            for w in 0..window {
                if !slice.mask[(l, w)] {
                    continue;
                }
                next += &alpha_outer[w];
                if w + 1 < window && hp.mu_h != 0.0 {
                    next += &beta_outer[w] * hp.mu_h;
                }
                let z = slice.values[(l, w)] - anomaly[(l, w)];
                rhs.axpy(z, &alphas[w], 1.0);
            }
            let a_new = spd_solve(next.clone(), &rhs).ok_or_else(|| Error::Solver {
                what: format!("link row {l}"),
                slice: slice.index,
            })?;
            *ra = next;
            Ok(a_new)
        })
        .collect();
    for (l, row) in rows.into_iter().enumerate() {
        let row = row?;
        model.a.set_row(l, &row.transpose());
    }
    Ok(())
}

/// RLS update of the rows of `C` in descending order `w = W, ..., 1`
/// against the current `A`. Row `w < W` couples to the freshly updated
/// `c^{w+1}` through the Hankel term; the last row has no such term.
pub fn update_c(
    model: &mut CpModel,
    caches: &mut RlsCaches,
    slice: &ObservedSlice,
    anomaly: &DMatrix<f64>,
    hp: &Hyperparams,
) -> Result<()> {
    check_shapes(model, slice)?;
    if anomaly.shape() != slice.values.shape() {
        return Err(Error::Dimension("anomaly slice shape differs from slice".into()));
    }
    let (links, window, rank) = (model.links(), model.window(), model.rank());
    let lambda = hp.forgetting;
    let drift = (1.0 - lambda) * hp.mu_r;
    let gammas: Vec<DVector<f64>> = (0..links)
        .map(|l| model.a.row(l).transpose().component_mul(&model.b_curr))
        .collect();
    let etas: Vec<DVector<f64>> = (0..links)
        .map(|l| model.a.row(l).transpose().component_mul(&model.b_prev))
        .collect();

    for w in (0..window).rev() {
        let hankel = w + 1 < window;
        let weight = if hankel { 1.0 + hp.mu_h } else { 1.0 };
        let c_prev = model.c.row(w).transpose();
        let c_next = hankel.then(|| model.c.row(w + 1).transpose());
        let rc = &mut caches.rc[w];
        let mut rhs = (&*rc * &c_prev) * lambda;
        let mut next = &*rc * lambda;
        for k in 0..rank {
            next[(k, k)] += drift;
        }
        for l in 0..links {
            if !slice.mask[(l, w)] {
                continue;
            }
            add_outer(&mut next, &gammas[l], weight);
            let mut target = slice.values[(l, w)] - anomaly[(l, w)];
            if let Some(c_next) = &c_next {
                target += hp.mu_h * etas[l].dot(c_next);
            }
            rhs.axpy(target, &gammas[l], 1.0);
        }
        let c_new = spd_solve(next.clone(), &rhs).ok_or_else(|| Error::Solver {
            what: format!("window column {}", w + 1),
            slice: slice.index,
        })?;
        *rc = next;
        model.c.set_row(w, &c_new.transpose());
    }
    Ok(())
}
