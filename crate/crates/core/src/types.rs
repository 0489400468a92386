//! Shared domain types and hyperparameters.
//!
//! Index conventions used across the crate: link and flow indices are
//! 0-based, while slice indices `t` and measurement times `s` are 1-based.
//! Slice `t` covers measurement times `t ..= t + W - 1`.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary link-by-flow incidence matrix, stored by column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingMatrix {
    links: usize,
    /// Sorted link indices traversed by each flow.
    columns: Vec<Vec<usize>>,
}

impl RoutingMatrix {
    /// Builds a routing matrix from per-flow link lists.
    ///
    /// Link indices are sorted; out-of-range or repeated indices are
    /// rejected. Empty columns are accepted here and reported by
    /// [`validate`].
    pub fn new(links: usize, columns: Vec<Vec<usize>>) -> Result<Self> {
        let mut sorted = Vec::with_capacity(columns.len());
        for (flow, mut col) in columns.into_iter().enumerate() {
            col.sort_unstable();
            if col.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Parameter(format!(
                    "flow {flow} lists the same link twice"
                )));
            }
            if let Some(&l) = col.last() {
                if l >= links {
                    return Err(Error::Dimension(format!(
                        "flow {flow} references link {l} but there are only {links} links"
                    )));
                }
            }
            sorted.push(col);
        }
        Ok(Self {
            links,
            columns: sorted,
        })
    }

    /// Builds a routing matrix from a dense 0/1 matrix.
    pub fn from_dense(dense: &DMatrix<f64>) -> Result<Self> {
        let mut columns = Vec::with_capacity(dense.ncols());
        for j in 0..dense.ncols() {
            let mut col = Vec::new();
            for i in 0..dense.nrows() {
                let x = dense[(i, j)];
                if x == 1.0 {
                    col.push(i);
                } else if x != 0.0 {
                    return Err(Error::Parameter(format!(
                        "routing entry ({i}, {j}) = {x} is not binary"
                    )));
                }
            }
            columns.push(col);
        }
        Self::new(dense.nrows(), columns)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            links: n,
            columns: (0..n).map(|i| vec![i]).collect(),
        }
    }

    pub fn num_links(&self) -> usize {
        self.links
    }

    pub fn num_flows(&self) -> usize {
        self.columns.len()
    }

    /// Links traversed by `flow`, ascending.
    pub fn flow_links(&self, flow: usize) -> &[usize] {
        &self.columns[flow]
    }

    pub fn columns(&self) -> &[Vec<usize>] {
        &self.columns
    }

    pub fn nnz(&self) -> usize {
        self.columns.iter().map(Vec::len).sum()
    }

    /// Row view: flows carried by each link, ascending.
    pub fn link_flows(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.links];
        for (flow, col) in self.columns.iter().enumerate() {
            for &l in col {
                rows[l].push(flow);
            }
        }
        rows
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.links, self.columns.len());
        for (flow, col) in self.columns.iter().enumerate() {
            for &l in col {
                m[(l, flow)] = 1.0;
            }
        }
        m
    }

    /// `R * x` for a flow-space vector `x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.columns.len(), "flow vector length");
        let mut y = vec![0.0; self.links];
        for (col, &xi) in self.columns.iter().zip(x) {
            if xi != 0.0 {
                for &l in col {
                    y[l] += xi;
                }
            }
        }
        y
    }

    /// `R^T * y` for a link-space vector `y`.
    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.links, "link vector length");
        self.columns
            .iter()
            .map(|col| col.iter().map(|&l| y[l]).sum())
            .collect()
    }
}

/// Binary observation pattern stored as a dense boolean matrix.
pub type Mask = DMatrix<bool>;

/// One `L x W` frontal slice of the Hankelized link tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedSlice {
    /// 1-based slice index.
    pub index: usize,
    /// Traffic volumes; entries at unobserved positions are 0.
    pub values: DMatrix<f64>,
    pub mask: Mask,
}

impl ObservedSlice {
    pub fn new(index: usize, values: DMatrix<f64>, mask: Mask) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(Error::Dimension(format!(
                "slice values are {:?} but mask is {:?}",
                values.shape(),
                mask.shape()
            )));
        }
        if index == 0 {
            return Err(Error::Dimension("slice indices start at 1".into()));
        }
        let mut values = values;
        for (x, &m) in values.iter_mut().zip(mask.iter()) {
            if !m {
                *x = 0.0;
            }
        }
        Ok(Self {
            index,
            values,
            mask,
        })
    }

    pub fn links(&self) -> usize {
        self.values.nrows()
    }

    pub fn window(&self) -> usize {
        self.values.ncols()
    }

    /// Measurement time covered by the last column.
    pub fn newest_time(&self) -> usize {
        self.index + self.window() - 1
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// CP factors of the normal link tensor plus the two retained projection vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpModel {
    /// `L x R` link factor.
    pub a: DMatrix<f64>,
    /// `W x R` window factor.
    pub c: DMatrix<f64>,
    /// `b[t]`
    pub b_curr: DVector<f64>,
    /// `b[t-1]`
    pub b_prev: DVector<f64>,
}

impl CpModel {
    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub fn links(&self) -> usize {
        self.a.nrows()
    }

    pub fn window(&self) -> usize {
        self.c.nrows()
    }

    /// Shifts `b[t]` into `b[t-1]` and installs the new projection vector.
    pub fn advance_b(&mut self, b: DVector<f64>) {
        self.b_prev = std::mem::replace(&mut self.b_curr, b);
    }

    /// `A diag(b) C^T`
    pub fn reconstruct(&self, b: &DVector<f64>) -> DMatrix<f64> {
        let mut scaled = self.a.clone();
        for (r, mut col) in scaled.column_iter_mut().enumerate() {
            col *= b[r];
        }
        scaled * self.c.transpose()
    }
}

/// Per-row and per-column RLS information matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlsCaches {
    /// One `R x R` matrix per link.
    pub ra: Vec<DMatrix<f64>>,
    /// One `R x R` matrix per window column.
    pub rc: Vec<DMatrix<f64>>,
}

impl RlsCaches {
    /// Largest asymmetry `max |M - M^T|` over all cached matrices.
    pub fn max_asymmetry(&self) -> f64 {
        self.ra
            .iter()
            .chain(&self.rc)
            .map(|m| (m - m.transpose()).amax())
            .fold(0.0, f64::max)
    }
}

/// Tracker and solver hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    /// Forgetting factor `lambda` in (0, 1].
    pub forgetting: f64,
    /// Frobenius / l2 regularizer weight `mu_r`.
    pub mu_r: f64,
    /// Hankel-structure weight `mu_h`.
    pub mu_h: f64,
    /// Sparsity scale `c`; the l1 weight is `c * max|q|`.
    pub sparsity_scale: f64,
    /// ADMM penalty `xi`.
    pub admm_penalty: f64,
    /// Maximum ADMM iterations `K`.
    pub max_iters: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Detection threshold `delta_v` on `|v|`.
    pub threshold: f64,
    pub rank: usize,
    pub window: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            forgetting: 0.9,
            mu_r: 1e-3,
            mu_h: 1e-3,
            sparsity_scale: 1e-2,
            admm_penalty: 1.0,
            max_iters: 120,
            eps_abs: 1e-5,
            eps_rel: 1e-3,
            threshold: 0.5,
            rank: 10,
            window: 24,
        }
    }
}

/// Per-flow abnormal-volume estimate with its ADMM state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyVector {
    pub v: DVector<f64>,
    /// Sparse split variable; this is the reported estimate.
    pub z: DVector<f64>,
    /// Scaled dual.
    pub u: DVector<f64>,
}

impl AnomalyVector {
    pub fn zeros(flows: usize) -> Self {
        Self {
            v: DVector::zeros(flows),
            z: DVector::zeros(flows),
            u: DVector::zeros(flows),
        }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// The sparse estimate.
    pub fn estimate(&self) -> &DVector<f64> {
        &self.z
    }
}

/// Which flows an anomaly event targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnomalyStructure {
    OneToOne,
    NToOne { n: usize },
    AllOdsOneLink { link: usize },
}

impl AnomalyStructure {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::OneToOne => "one_to_one",
            Self::NToOne { .. } => "n_to_one",
            Self::AllOdsOneLink { .. } => "all_ods_one_link",
        }
    }
}

/// An injected (or detected) volume anomaly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyEvent {
    pub flows: BTreeSet<usize>,
    /// 1-based measurement time of the first affected sample.
    pub start: usize,
    pub duration: usize,
    /// Multiplicative volume ratio `delta`; 0 is an outage.
    pub ratio: f64,
    /// Rise fraction `gamma_i` of the duration.
    pub rise: f64,
    /// Fall fraction `gamma_d` of the duration.
    pub fall: f64,
    pub structure: AnomalyStructure,
}

impl AnomalyEvent {
    /// Last affected measurement time (inclusive).
    pub fn end(&self) -> usize {
        self.start + self.duration - 1
    }

    pub fn check(&self) -> std::result::Result<(), String> {
        if self.duration == 0 {
            return Err("duration must be at least 1".into());
        }
        if self.start == 0 {
            return Err("start time is 1-based".into());
        }
        if !(self.ratio >= 0.0) {
            return Err(format!("ratio {} is negative", self.ratio));
        }
        for (name, g) in [("rise", self.rise), ("fall", self.fall)] {
            if !(0.0..0.5).contains(&g) {
                return Err(format!("{name} fraction {g} outside [0, 0.5)"));
            }
        }
        if self.rise + self.fall > 1.0 {
            return Err("rise + fall exceeds 1".into());
        }
        if self.flows.is_empty() {
            return Err("event targets no flow".into());
        }
        Ok(())
    }
}

/// One invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ForgettingOutOfRange(f64),
    NegativeRegularizer { name: &'static str, value: f64 },
    NonPositivePenalty(f64),
    ZeroIterations,
    WindowTooSmall(usize),
    ZeroRank,
    FactorShape { factor: &'static str, expected: (usize, usize), got: (usize, usize) },
    ProjectionLength { which: &'static str, expected: usize, got: usize },
    NonFinite(&'static str),
    EmptyFlow(usize),
    LinkCountMismatch { model: usize, routing: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ForgettingOutOfRange(x) => write!(f, "forgetting factor out of range: {x}"),
            Self::NegativeRegularizer { name, value } => {
                write!(f, "regularizer {name} is negative: {value}")
            }
            Self::NonPositivePenalty(x) => write!(f, "ADMM penalty must be positive: {x}"),
            Self::ZeroIterations => write!(f, "ADMM iteration cap must be at least 1"),
            Self::WindowTooSmall(w) => write!(f, "window length must exceed 1: {w}"),
            Self::ZeroRank => write!(f, "rank must be at least 1"),
            Self::FactorShape {
                factor,
                expected,
                got,
            } => write!(f, "factor {factor} has shape {got:?}, expected {expected:?}"),
            Self::ProjectionLength {
                which,
                expected,
                got,
            } => write!(f, "projection vector {which} has length {got}, expected {expected}"),
            Self::NonFinite(what) => write!(f, "non-finite entry in {what}"),
            Self::EmptyFlow(i) => write!(f, "flow {i} traverses no link"),
            Self::LinkCountMismatch { model, routing } => write!(
                f,
                "model has {model} links but routing matrix has {routing}"
            ),
        }
    }
}

pub fn validate_hyperparams(hp: &Hyperparams) -> Vec<Violation> {
    let mut out = Vec::new();
    if !(hp.forgetting > 0.0 && hp.forgetting <= 1.0) {
        out.push(Violation::ForgettingOutOfRange(hp.forgetting));
    }
    for (name, value) in [("mu_r", hp.mu_r), ("mu_h", hp.mu_h), ("sparsity_scale", hp.sparsity_scale)] {
        if !(value >= 0.0) {
            out.push(Violation::NegativeRegularizer { name, value });
        }
    }
    if !(hp.admm_penalty > 0.0) {
        out.push(Violation::NonPositivePenalty(hp.admm_penalty));
    }
    if hp.max_iters == 0 {
        out.push(Violation::ZeroIterations);
    }
    if hp.window <= 1 {
        out.push(Violation::WindowTooSmall(hp.window));
    }
    if hp.rank == 0 {
        out.push(Violation::ZeroRank);
    }
    out
}

pub fn validate_routing(routing: &RoutingMatrix) -> Vec<Violation> {
    routing
        .columns()
        .iter()
        .enumerate()
        .filter(|(_, col)| col.is_empty())
        .map(|(i, _)| Violation::EmptyFlow(i))
        .collect()
}

/// Collects every invariant violation of a model, routing matrix and
/// hyperparameter set. Never aborts early.
pub fn validate(
    model: &CpModel,
    routing: &RoutingMatrix,
    hp: &Hyperparams,
) -> std::result::Result<(), Vec<Violation>> {
    let mut out = validate_hyperparams(hp);
    let (l, r) = (model.a.nrows(), model.a.ncols());
    if model.c.ncols() != r {
        out.push(Violation::FactorShape {
            factor: "C",
            expected: (model.c.nrows(), r),
            got: model.c.shape(),
        });
    }
    if model.c.nrows() != hp.window {
        out.push(Violation::FactorShape {
            factor: "C",
            expected: (hp.window, r),
            got: model.c.shape(),
        });
    }
    if r != hp.rank {
        out.push(Violation::FactorShape {
            factor: "A",
            expected: (l, hp.rank),
            got: model.a.shape(),
        });
    }
    for (which, b) in [("b[t]", &model.b_curr), ("b[t-1]", &model.b_prev)] {
        if b.len() != r {
            out.push(Violation::ProjectionLength {
                which,
                expected: r,
                got: b.len(),
            });
        }
    }
    for (what, finite) in [
        ("A", model.a.iter().all(|x| x.is_finite())),
        ("C", model.c.iter().all(|x| x.is_finite())),
        ("b[t]", model.b_curr.iter().all(|x| x.is_finite())),
        ("b[t-1]", model.b_prev.iter().all(|x| x.is_finite())),
    ] {
        if !finite {
            out.push(Violation::NonFinite(what));
        }
    }
    if l != routing.num_links() {
        out.push(Violation::LinkCountMismatch {
            model: l,
            routing: routing.num_links(),
        });
    }
    out.extend(validate_routing(routing));
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(l: usize, w: usize, r: usize) -> CpModel {
        CpModel {
            a: DMatrix::from_element(l, r, 0.5),
            c: DMatrix::from_element(w, r, 0.25),
            b_curr: DVector::zeros(r),
            b_prev: DVector::zeros(r),
        }
    }

    fn hp(w: usize, r: usize) -> Hyperparams {
        Hyperparams {
            window: w,
            rank: r,
            ..Hyperparams::default()
        }
    }

    #[test]
    fn valid_model_has_no_violations() {
        let routing = RoutingMatrix::new(3, vec![vec![0], vec![1, 2], vec![0, 2], vec![1]]).unwrap();
        assert_eq!(validate(&model(3, 4, 2), &routing, &hp(4, 2)), Ok(()));
    }

    #[test]
    fn forgetting_factor_out_of_range() {
        let routing = RoutingMatrix::identity(3);
        let mut p = hp(4, 2);
        p.forgetting = 1.5;
        let errs = validate(&model(3, 4, 2), &routing, &p).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert!(errs[0].to_string().contains("forgetting factor out of range"));
    }

    #[test]
    fn empty_flow_column_is_reported() {
        let mut cols: Vec<Vec<usize>> = (0..10).map(|i| vec![i % 3]).collect();
        cols[7].clear();
        let routing = RoutingMatrix::new(3, cols).unwrap();
        let errs = validate(&model(3, 4, 2), &routing, &hp(4, 2)).unwrap_err();
        assert_eq!(errs, vec![Violation::EmptyFlow(7)]);
        assert_eq!(errs[0].to_string(), "flow 7 traverses no link");
    }

    #[test]
    fn collects_multiple_violations() {
        let routing = RoutingMatrix::identity(5);
        let mut p = hp(1, 2);
        p.admm_penalty = 0.0;
        p.max_iters = 0;
        let mut m = model(3, 4, 2);
        m.a[(0, 0)] = f64::NAN;
        let errs = validate(&m, &routing, &p).unwrap_err();
        assert!(errs.contains(&Violation::NonPositivePenalty(0.0)));
        assert!(errs.contains(&Violation::ZeroIterations));
        assert!(errs.contains(&Violation::WindowTooSmall(1)));
        assert!(errs.contains(&Violation::NonFinite("A")));
        assert!(errs.contains(&Violation::LinkCountMismatch { model: 3, routing: 5 }));
    }

    #[test]
    fn routing_rejects_bad_indices() {
        assert!(RoutingMatrix::new(2, vec![vec![2]]).is_err());
        assert!(RoutingMatrix::new(3, vec![vec![1, 1]]).is_err());
        let mut d = DMatrix::zeros(2, 2);
        d[(0, 1)] = 0.5;
        assert!(RoutingMatrix::from_dense(&d).is_err());
    }

    #[test]
    fn slice_zeroes_masked_entries() {
        let values = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let mask = DMatrix::from_row_slice(1, 3, &[true, false, true]);
        let s = ObservedSlice::new(2, values, mask).unwrap();
        assert_eq!(s.values[(0, 1)], 0.0);
        assert_eq!(s.newest_time(), 4);
        assert_eq!(s.observed_count(), 2);
    }

    #[test]
    fn event_checks() {
        let mut e = AnomalyEvent {
            flows: [1].into_iter().collect(),
            start: 3,
            duration: 4,
            ratio: 2.0,
            rise: 0.2,
            fall: 0.3,
            structure: AnomalyStructure::OneToOne,
        };
        assert!(e.check().is_ok());
        assert_eq!(e.end(), 6);
        e.rise = 0.5;
        assert!(e.check().is_err());
        e.rise = 0.1;
        e.duration = 0;
        assert!(e.check().is_err());
    }
}
