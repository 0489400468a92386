//! Hankel trajectory matrices and frontal slices of the link tensor.
//!
//! Each link's series is embedded into a `W x K` trajectory matrix; stacking
//! these over links gives an `L x W x K` tensor whose `t`-th frontal slice is
//! the `L x W` window of measurement times `t ..= t + W - 1`. Missing
//! measurements stay missing in every slice they fall into.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::types::{Mask, ObservedSlice};

/// Trajectory matrix `H[w, k] = series[k + w]` (0-based), shape `W x (N - W + 1)`.
pub fn hankelize(series: &[f64], window: usize) -> Result<DMatrix<f64>> {
    let n = series.len();
    if window <= 1 || window >= n {
        return Err(Error::Dimension(format!(
            "window {window} must satisfy 1 < W < N = {n}"
        )));
    }
    let k = n - window + 1;
    Ok(DMatrix::from_fn(window, k, |w, j| series[w + j]))
}

/// Frontal slice `t` (1-based) of the Hankelized link matrix.
pub fn frontal_slice(
    link_matrix: &DMatrix<f64>,
    masks: &Mask,
    window: usize,
    t: usize,
) -> Result<ObservedSlice> {
    if link_matrix.shape() != masks.shape() {
        return Err(Error::Dimension(format!(
            "link matrix is {:?} but mask is {:?}",
            link_matrix.shape(),
            masks.shape()
        )));
    }
    let total = link_matrix.ncols();
    if window <= 1 || window > total {
        return Err(Error::Dimension(format!(
            "window {window} must satisfy 1 < W <= T = {total}"
        )));
    }
    let slices = total - window + 1;
    if t == 0 || t > slices {
        return Err(Error::Dimension(format!(
            "slice index {t} outside 1..={slices}"
        )));
    }
    let values = link_matrix.columns(t - 1, window).into_owned();
    let mask = masks.columns(t - 1, window).into_owned();
    ObservedSlice::new(t, values, mask)
}

/// Number of frontal slices `K = T - W + 1` (0 when `T < W`).
pub fn slice_count(total: usize, window: usize) -> usize {
    (total + 1).saturating_sub(window)
}

/// Per-link ring buffer turning a live measurement stream into slices.
#[derive(Debug, Clone)]
pub struct LinkSeriesBuffer {
    links: usize,
    window: usize,
    /// Number of samples pushed so far (the current wall-clock time).
    time: usize,
    /// Column-major ring storage, `window` columns of `links` rows.
    values: Vec<f64>,
    observed: Vec<bool>,
}

impl LinkSeriesBuffer {
    pub fn new(links: usize, window: usize) -> Result<Self> {
        if window <= 1 {
            return Err(Error::Dimension(format!("window {window} must exceed 1")));
        }
        Ok(Self {
            links,
            window,
            time: 0,
            values: vec![0.0; links * window],
            observed: vec![false; links * window],
        })
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn links(&self) -> usize {
        self.links
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Appends one measurement per link. Returns the slice ending at this
    /// sample once at least `W` samples have been seen.
    pub fn push(&mut self, values: &[f64], observed: &[bool]) -> Result<Option<ObservedSlice>> {
        if values.len() != self.links || observed.len() != self.links {
            return Err(Error::Dimension(format!(
                "sample has {} values and {} flags, expected {}",
                values.len(),
                observed.len(),
                self.links
            )));
        }
        let slot = self.time % self.window;
        let base = slot * self.links;
        for l in 0..self.links {
            self.observed[base + l] = observed[l];
            self.values[base + l] = if observed[l] { values[l] } else { 0.0 };
        }
        self.time += 1;
        if self.time < self.window {
            return Ok(None);
        }
        // oldest sample sits in the slot after the one just written
        let oldest = self.time % self.window;
        let mut y = DMatrix::zeros(self.links, self.window);
        let mut m = DMatrix::from_element(self.links, self.window, false);
        for w in 0..self.window {
            let src = ((oldest + w) % self.window) * self.links;
            for l in 0..self.links {
                y[(l, w)] = self.values[src + l];
                m[(l, w)] = self.observed[src + l];
            }
        }
        ObservedSlice::new(self.time - self.window + 1, y, m).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_trajectory_matrix() {
        let h = hankelize(&[1.0, 2.0, 3.0, 4.0, 5.0], 3).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[1., 2., 3., 2., 3., 4., 3., 4., 5.]);
        assert_eq!(h, expected);
    }

    #[test]
    fn constant_series_gives_constant_matrix() {
        let h = hankelize(&[4.5; 12], 5).unwrap();
        assert!(h.iter().all(|&x| x == 4.5));
        assert_eq!(h.shape(), (5, 8));
    }

    #[test]
    fn anti_diagonals_are_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let series: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let h = hankelize(&series, 24).unwrap();
        for d in 0..(24 + 77 - 1) {
            let entries: Vec<f64> = (0..24)
                .filter(|&w| d >= w && d - w < 77)
                .map(|w| h[(w, d - w)])
                .collect();
            assert!(entries.iter().all(|&x| x == entries[0]));
            assert_eq!(entries[0], series[d]);
        }
    }

    #[test]
    fn window_bounds() {
        assert!(hankelize(&[1.0, 2.0, 3.0], 1).is_err());
        assert!(hankelize(&[1.0, 2.0, 3.0], 3).is_err());
    }

    #[test]
    fn slice_endpoints() {
        let y = DMatrix::from_fn(2, 6, |l, s| (10 * l + s) as f64);
        let m = DMatrix::from_element(2, 6, true);
        let first = frontal_slice(&y, &m, 3, 1).unwrap();
        assert_eq!(first.values, y.columns(0, 3).into_owned());
        assert_eq!(first.newest_time(), 3);
        let last = frontal_slice(&y, &m, 3, 4).unwrap();
        assert_eq!(last.values.column(2), y.column(5));
        assert!(frontal_slice(&y, &m, 3, 5).is_err());
        assert!(frontal_slice(&y, &m, 3, 0).is_err());
    }

    #[test]
    fn warm_up_then_first_slice() {
        let mut buf = LinkSeriesBuffer::new(2, 4).unwrap();
        for s in 0..3 {
            assert!(buf.push(&[s as f64, 1.0], &[true, true]).unwrap().is_none());
        }
        let slice = buf.push(&[3.0, 1.0], &[true, false]).unwrap().unwrap();
        assert_eq!(slice.index, 1);
        assert_eq!(slice.values[(0, 3)], 3.0);
        assert!(!slice.mask[(1, 3)]);
        assert!(buf.push(&[1.0], &[true]).is_err());
    }

    #[test]
    fn missing_sample_stays_missing_in_every_slice() {
        let (l, t, w) = (3, 12, 4);
        let y = DMatrix::from_fn(l, t, |i, s| (i * 100 + s) as f64);
        let mut m = DMatrix::from_element(l, t, true);
        m[(1, 6)] = false;
        for idx in 1..=slice_count(t, w) {
            let s = frontal_slice(&y, &m, w, idx).unwrap();
            for col in 0..w {
                let time = idx - 1 + col;
                assert_eq!(s.mask[(1, col)], time != 6);
                if time == 6 {
                    assert_eq!(s.values[(1, col)], 0.0);
                }
            }
        }
    }
}
