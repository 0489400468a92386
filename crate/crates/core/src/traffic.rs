//! Synthetic OD traffic, anomaly injection, link aggregation and
//! observation masks.
//!
//! A normal flow is `c0 + A1 sin(w t) + seasonal(t) + noise`, with the
//! seasonal part drawn per flow from {none, linear `b1 t`, weekly
//! `A2/b2 sin(7 w t)`}. Anomalies scale the normal volume by a trapezoid
//! profile: `f + (delta - 1) f s(t)`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AnomalyEvent, AnomalyStructure, Mask, RoutingMatrix};

/// Ground-truth anomalous cells as `(flow, time)`, time 1-based.
pub type Labels = BTreeSet<(usize, usize)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Seasonal {
    None,
    Linear,
    Weekly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowGenParams {
    /// Baseline offset `c0`.
    pub offset: f64,
    /// Periodic amplitude `A1`.
    pub amplitude: f64,
    /// Angular frequency `w` in radians per sample.
    pub omega: f64,
    /// Linear trend slope `b1`; `None` means `1 / T`.
    pub linear_slope: Option<f64>,
    /// Weekly term numerator `A2`.
    pub weekly_amplitude: f64,
    /// Weekly term divisor `b2`.
    pub weekly_divisor: f64,
    /// Noise standard deviation `sigma`.
    pub noise_std: f64,
}

impl Default for FlowGenParams {
    fn default() -> Self {
        Self {
            offset: 2.0,
            amplitude: 1.0,
            omega: 2.0 * std::f64::consts::PI / 24.0,
            linear_slope: None,
            weekly_amplitude: 0.5,
            weekly_divisor: 1.0,
            noise_std: 0.1,
        }
    }
}

impl FlowGenParams {
    pub fn check(&self) -> Result<()> {
        if !(self.offset >= 0.0 && self.amplitude >= 0.0 && self.noise_std >= 0.0) {
            return Err(Error::Parameter("offset, amplitude and noise_std must be nonnegative".into()));
        }
        if self.weekly_divisor == 0.0 {
            return Err(Error::Parameter("weekly_divisor must be nonzero".into()));
        }
        Ok(())
    }

    /// Noise-free value at 1-based time `t` of a horizon of `total` samples.
    pub fn normal_value(&self, kind: Seasonal, t: usize, total: usize) -> f64 {
        let t = t as f64;
        let seasonal = match kind {
            Seasonal::None => 0.0,
            Seasonal::Linear => self.linear_slope.unwrap_or(1.0 / total as f64) * t,
            Seasonal::Weekly => {
                self.weekly_amplitude / self.weekly_divisor * (7.0 * self.omega * t).sin()
            }
        };
        self.offset + self.amplitude * (self.omega * t).sin() + seasonal
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSet {
    /// `F x T` volumes.
    pub values: DMatrix<f64>,
    pub seasonal: Vec<Seasonal>,
}

/// Normal flow matrix with a uniformly drawn seasonal type per flow, clipped at 0.
pub fn gen_flows(flows: usize, total: usize, params: &FlowGenParams, seed: u64) -> Result<FlowSet> {
    if total == 0 {
        return Err(Error::Parameter("horizon T must be at least 1".into()));
    }
    params.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = [Seasonal::None, Seasonal::Linear, Seasonal::Weekly];
    let seasonal: Vec<Seasonal> = (0..flows).map(|_| kinds[rng.random_range(0..3)]).collect();
    let noise = Normal::new(0.0, params.noise_std)
        .map_err(|e| Error::Parameter(format!("noise distribution: {e}")))?;
    let mut values = DMatrix::zeros(flows, total);
    for (i, &kind) in seasonal.iter().enumerate() {
        for s in 0..total {
            let x = params.normal_value(kind, s + 1, total) + noise.sample(&mut rng);
            values[(i, s)] = x.max(0.0);
        }
    }
    Ok(FlowSet { values, seasonal })
}

/// Trapezoid profile `s(k)`, `k = 0..d`: linear rise over `round(rise d)`
/// samples, plateau at 1, linear fall over `round(fall d)` samples. Every
/// sample of the event is strictly positive.
pub fn trapezoid(duration: usize, rise: f64, fall: f64) -> Vec<f64> {
    let n_rise = (rise * duration as f64).round() as usize;
    let n_fall = ((fall * duration as f64).round() as usize).min(duration - n_rise.min(duration));
    (0..duration)
        .map(|k| {
            if k < n_rise {
                (k + 1) as f64 / (n_rise + 1) as f64
            } else if k >= duration - n_fall {
                (duration - k) as f64 / (n_fall + 1) as f64
            } else {
                1.0
            }
        })
        .collect()
}

/// Injects `events` into `flows` in place and returns the truth labels.
pub fn inject(flows: &mut DMatrix<f64>, events: &[AnomalyEvent]) -> Result<Labels> {
    let (n_flows, total) = flows.shape();
    let mut per_flow: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (id, e) in events.iter().enumerate() {
        e.check().map_err(|m| Error::Parameter(format!("event {id}: {m}")))?;
        if e.end() > total {
            return Err(Error::Parameter(format!(
                "event {id} ends at {} beyond horizon {total}",
                e.end()
            )));
        }
        for &f in &e.flows {
            if f >= n_flows {
                return Err(Error::Parameter(format!("event {id} targets unknown flow {f}")));
            }
            per_flow.entry(f).or_default().push(id);
        }
    }
    for (&flow, ids) in &per_flow {
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                let (ea, eb) = (&events[a], &events[b]);
                if ea.start <= eb.end() && eb.start <= ea.end() {
                    return Err(Error::OverlappingEvents { flow, first: a, second: b });
                }
            }
        }
    }

    let mut labels = Labels::new();
    for e in events {
        let profile = trapezoid(e.duration, e.rise, e.fall);
        for &f in &e.flows {
            for (k, &s) in profile.iter().enumerate() {
                let col = e.start - 1 + k;
                let base = flows[(f, col)];
                let delta = (e.ratio - 1.0) * base * s;
                flows[(f, col)] = base + delta;
                if s > 0.0 && e.ratio != 1.0 {
                    labels.insert((f, col + 1));
                }
            }
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureMix {
    Mixture,
    OneToOne,
    NToOne,
    AllOdsOneLink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalyConfig {
    /// Target fraction of flows carrying an anomaly.
    pub flow_ratio: f64,
    pub structure: StructureMix,
    /// Earliest 1-based start time.
    pub min_start: usize,
    pub durations: Vec<usize>,
    /// Range of the multiplicative ratio for volume increases.
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub n_min: usize,
    pub n_max: usize,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            flow_ratio: 0.01,
            structure: StructureMix::Mixture,
            min_start: 1,
            durations: vec![5, 10, 20, 30],
            ratio_min: 1.5,
            ratio_max: 2.5,
            n_min: 3,
            n_max: 10,
        }
    }
}

/// Draws anomaly events until roughly `flow_ratio * F` distinct flows are
/// affected. Each flow is hit by at most one event. Mixture cycles through
/// the three structures.
pub fn generate_events(
    routing: &RoutingMatrix,
    od: &[(usize, usize)],
    total: usize,
    config: &AnomalyConfig,
    seed: u64,
) -> Result<Vec<AnomalyEvent>> {
    let n_flows = routing.num_flows();
    if od.len() != n_flows {
        return Err(Error::Dimension(format!(
            "{} OD pairs for {n_flows} flows",
            od.len()
        )));
    }
    if !(0.0..=1.0).contains(&config.flow_ratio) {
        return Err(Error::Parameter(format!("flow_ratio {} outside [0, 1]", config.flow_ratio)));
    }
    if config.durations.is_empty() || config.durations.iter().any(|&d| d == 0 || d > total) {
        return Err(Error::Parameter("durations must lie in 1..=T".into()));
    }
    let target = (config.flow_ratio * n_flows as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = BTreeSet::new();
    let mut events = Vec::new();
    let link_flows = routing.link_flows();
    let cycle = match config.structure {
        StructureMix::Mixture => vec![StructureMix::OneToOne, StructureMix::NToOne, StructureMix::AllOdsOneLink],
        other => vec![other],
    };
    let mut attempt = 0;
    // a mixture always draws each structure once, even past the flow budget
    let first_pass = if target > 0 { cycle.len() } else { 0 };
    while (used.len() < target || events.len() < first_pass) && attempt < 20 * target + 20 {
        let kind = cycle[attempt % cycle.len()];
        attempt += 1;
        let remaining = target.saturating_sub(used.len());
        // budget kept back for structures not yet drawn in the first pass
        let reserve = first_pass.saturating_sub(events.len() + 1);
        let picked: Option<(BTreeSet<usize>, AnomalyStructure)> = match kind {
            StructureMix::OneToOne | StructureMix::Mixture => {
                let free: Vec<usize> = (0..n_flows).filter(|f| !used.contains(f)).collect();
                free.choose(&mut rng)
                    .map(|&f| (BTreeSet::from([f]), AnomalyStructure::OneToOne))
            }
            StructureMix::NToOne => {
                let mut by_dst: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for (f, &(_, dst)) in od.iter().enumerate() {
                    if !used.contains(&f) {
                        by_dst.entry(dst).or_default().push(f);
                    }
                }
                let best = by_dst.values().map(Vec::len).max().unwrap_or(0);
                let need = config.n_min.min(best);
                let dsts: Vec<&Vec<usize>> = by_dst.values().filter(|v| need > 0 && v.len() >= need).collect();
                dsts.choose(&mut rng).map(|group| {
                    let cap = remaining.saturating_sub(reserve).max(config.n_min);
                    let n = rng
                        .random_range(config.n_min..=config.n_max.max(config.n_min))
                        .min(cap)
                        .min(group.len());
                    let mut group = (*group).clone();
                    group.shuffle(&mut rng);
                    let set: BTreeSet<usize> = group.into_iter().take(n).collect();
                    let n = set.len();
                    (set, AnomalyStructure::NToOne { n })
                })
            }
            StructureMix::AllOdsOneLink => {
                let candidates: Vec<usize> = (0..link_flows.len())
                    .filter(|&l| {
                        let fl = &link_flows[l];
                        !fl.is_empty() && fl.iter().all(|f| !used.contains(f))
                    })
                    .collect();
                let fitting: Vec<usize> = candidates
                    .iter()
                    .copied()
                    .filter(|&l| link_flows[l].len() <= remaining.saturating_sub(reserve).max(1))
                    .collect();
                let pool = if fitting.is_empty() {
                    let smallest = candidates.iter().map(|&l| link_flows[l].len()).min();
                    candidates
                        .iter()
                        .copied()
                        .filter(|&l| Some(link_flows[l].len()) == smallest)
                        .collect()
                } else {
                    fitting
                };
                pool.choose(&mut rng).map(|&link| {
                    (
                        link_flows[link].iter().copied().collect(),
                        AnomalyStructure::AllOdsOneLink { link },
                    )
                })
            }
        };
        let Some((flows, structure)) = picked else {
            continue;
        };
        let duration = *config.durations.choose(&mut rng).expect("nonempty durations");
        let latest = total - duration + 1;
        let earliest = config.min_start.clamp(1, latest);
        let start = rng.random_range(earliest..=latest);
        let ratio = match structure {
            AnomalyStructure::AllOdsOneLink { .. } => 0.0,
            _ => rng.random_range(config.ratio_min..=config.ratio_max),
        };
        let rise = rng.random_range(0.0..0.5);
        let fall = rng.random_range(0.0..0.5);
        used.extend(flows.iter().copied());
        events.push(AnomalyEvent {
            flows,
            start,
            duration,
            ratio,
            rise,
            fall,
            structure,
        });
    }
    Ok(events)
}

/// `Y = R F`, one column per time.
pub fn make_link_matrix(routing: &RoutingMatrix, flows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if flows.nrows() != routing.num_flows() {
        return Err(Error::Dimension(format!(
            "flow matrix has {} rows, routing has {} flows",
            flows.nrows(),
            routing.num_flows()
        )));
    }
    let total = flows.ncols();
    let mut links = DMatrix::zeros(routing.num_links(), total);
    for (f, col) in routing.columns().iter().enumerate() {
        for s in 0..total {
            let x = flows[(f, s)];
            if x != 0.0 {
                for &l in col {
                    links[(l, s)] += x;
                }
            }
        }
    }
    Ok(links)
}

/// I.i.d. Bernoulli(`rho`/100) observation mask.
pub fn sample_mask(links: usize, total: usize, rho: f64, seed: u64) -> Result<Mask> {
    if !(rho > 0.0 && rho <= 100.0) {
        return Err(Error::Parameter(format!("observation ratio {rho} outside (0, 100]")));
    }
    let p = rho / 100.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // column-major fill so the layout matches the storage order
    Ok(Mask::from_fn(links, total, |_, _| p >= 1.0 || rng.random::<f64>() < p))
}

/// Centered moving average; windows are truncated at the series ends.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let n = series.len();
    if window <= 1 || n == 0 {
        return series.to_vec();
    }
    let before = (window - 1) / 2;
    let after = window / 2;
    let mut prefix = vec![0.0; n + 1];
    for (i, &x) in series.iter().enumerate() {
        prefix[i + 1] = prefix[i] + x;
    }
    (0..n)
        .map(|k| {
            let lo = k.saturating_sub(before);
            let hi = (k + after).min(n - 1);
            let mean = (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64;
            // exact for constant windows despite prefix-sum rounding
            if series[lo..=hi].iter().all(|&x| x == series[k]) {
                series[k]
            } else {
                mean
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Smoothing {
    pub smoothed: DMatrix<f64>,
    pub residual: DMatrix<f64>,
    /// Per-flow noise level estimated from the residual.
    pub sigma: Vec<f64>,
}

/// Splits each flow into a moving-average trend and a residual.
pub fn smooth_flows(flows: &DMatrix<f64>, window: usize) -> Smoothing {
    let (n, total) = flows.shape();
    let mut smoothed = DMatrix::zeros(n, total);
    let mut sigma = Vec::with_capacity(n);
    for f in 0..n {
        let row: Vec<f64> = flows.row(f).iter().copied().collect();
        let trend = moving_average(&row, window);
        for (s, &x) in trend.iter().enumerate() {
            smoothed[(f, s)] = x;
        }
        let ms = row
            .iter()
            .zip(&trend)
            .map(|(x, m)| (x - m).powi(2))
            .sum::<f64>()
            / total.max(1) as f64;
        // white noise leaves a fraction (1 - 1/w) of its variance in the residual
        let shrink = if window > 1 { 1.0 - 1.0 / window as f64 } else { 1.0 };
        sigma.push((ms / shrink).sqrt());
    }
    let residual = flows - &smoothed;
    Smoothing {
        smoothed,
        residual,
        sigma,
    }
}

/// Prepares a measured flow matrix for injection: smooth, optionally re-add
/// Gaussian noise at the estimated level, clip at 0, then inject `events`.
pub fn prep_real(
    flows: &DMatrix<f64>,
    window: usize,
    refit_noise: bool,
    events: &[AnomalyEvent],
    seed: u64,
) -> Result<(DMatrix<f64>, Labels)> {
    if flows.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Parameter("flow matrix must be finite and nonnegative".into()));
    }
    let parts = smooth_flows(flows, window);
    let mut out = parts.smoothed;
    if refit_noise {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for f in 0..out.nrows() {
            let noise = Normal::new(0.0, parts.sigma[f])
                .map_err(|e| Error::Parameter(format!("noise distribution: {e}")))?;
            for s in 0..out.ncols() {
                out[(f, s)] = (out[(f, s)] + noise.sample(&mut rng)).max(0.0);
            }
        }
    }
    let labels = inject(&mut out, events)?;
    Ok((out, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(flows: &[usize], start: usize, duration: usize, ratio: f64, rise: f64, fall: f64) -> AnomalyEvent {
        AnomalyEvent {
            flows: flows.iter().copied().collect(),
            start,
            duration,
            ratio,
            rise,
            fall,
            structure: AnomalyStructure::OneToOne,
        }
    }

    #[test]
    fn noiseless_sinusoid() {
        let p = FlowGenParams {
            noise_std: 0.0,
            ..FlowGenParams::default()
        };
        let set = gen_flows(30, 50, &p, 1).unwrap();
        for (i, &kind) in set.seasonal.iter().enumerate() {
            if kind == Seasonal::None {
                for s in 0..50 {
                    let t = (s + 1) as f64;
                    assert!((set.values[(i, s)] - (2.0 + (p.omega * t).sin())).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn linear_trend_only() {
        let p = FlowGenParams {
            noise_std: 0.0,
            amplitude: 0.0,
            linear_slope: Some(0.25),
            ..FlowGenParams::default()
        };
        for t in 1..=10 {
            assert!((p.normal_value(Seasonal::Linear, t, 10) - (2.0 + 0.25 * t as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_ratio_changes_nothing() {
        let mut f = DMatrix::from_element(2, 20, 3.0);
        let labels = inject(&mut f, &[event(&[1], 4, 6, 1.0, 0.2, 0.2)]).unwrap();
        assert!(labels.is_empty());
        assert!(f.iter().all(|&x| x == 3.0));
    }

    #[test]
    fn square_outage() {
        let mut f = DMatrix::from_element(1, 20, 3.0);
        let labels = inject(&mut f, &[event(&[0], 6, 5, 0.0, 0.0, 0.0)]).unwrap();
        for s in 1..=20 {
            let expect = if (6..=10).contains(&s) { 0.0 } else { 3.0 };
            assert_eq!(f[(0, s - 1)], expect);
        }
        assert_eq!(labels.len(), 5);
    }

    #[test]
    fn ramped_doubling_on_constant_flow() {
        let c = 4.0;
        let mut f = DMatrix::from_element(1, 30, c);
        inject(&mut f, &[event(&[0], 11, 10, 2.0, 0.2, 0.0)]).unwrap();
        // direct trapezoid: two ramp samples at 1/3, 2/3, then plateau
        let expect = [c * (1.0 + 1.0 / 3.0), c * (1.0 + 2.0 / 3.0)];
        assert!((f[(0, 10)] - expect[0]).abs() < 1e-12);
        assert!((f[(0, 11)] - expect[1]).abs() < 1e-12);
        for s in 12..20 {
            assert!((f[(0, s)] - 2.0 * c).abs() < 1e-12);
        }
        assert_eq!(f[(0, 20)], c);
    }

    #[test]
    fn overlapping_events_rejected() {
        let mut f = DMatrix::from_element(2, 30, 1.0);
        let err = inject(
            &mut f,
            &[event(&[0], 5, 5, 2.0, 0.0, 0.0), event(&[1], 5, 5, 2.0, 0.0, 0.0), event(&[0], 9, 3, 2.0, 0.0, 0.0)],
        )
        .unwrap_err();
        assert!(matches!(err, Error::OverlappingEvents { flow: 0, first: 0, second: 2 }));
    }

    #[test]
    fn link_superposition() {
        let routing = RoutingMatrix::new(3, vec![vec![0, 1], vec![1, 2]]).unwrap();
        let flows = DMatrix::from_row_slice(2, 1, &[7.0, 2.0]);
        let y = make_link_matrix(&routing, &flows).unwrap();
        assert_eq!(y.column(0).as_slice(), &[7.0, 9.0, 2.0]);
        assert!(make_link_matrix(&routing, &DMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn full_observation_mask() {
        let m = sample_mask(4, 9, 100.0, 3).unwrap();
        assert!(m.iter().all(|&x| x));
        assert!(sample_mask(4, 9, 0.0, 3).is_err());
        assert!(sample_mask(4, 9, 101.0, 3).is_err());
    }

    #[test]
    fn smoothing_identity_and_decomposition() {
        let constant = DMatrix::from_element(2, 40, 5.5);
        let parts = smooth_flows(&constant, 12);
        assert_eq!(parts.smoothed, constant);
        assert!(parts.sigma.iter().all(|&s| s == 0.0));

        let wiggly = DMatrix::from_fn(1, 40, |_, s| (s as f64 * 0.7).sin() + 2.0);
        let parts = smooth_flows(&wiggly, 12);
        assert_eq!(&parts.smoothed + &parts.residual, wiggly);
    }

    #[test]
    fn sigma_estimate_within_fifteen_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let sigma = 0.3;
        let noise = Normal::new(0.0, sigma).unwrap();
        let series = DMatrix::from_fn(1, 2000, |_, s| {
            3.0 + (s as f64 * 2.0 * std::f64::consts::PI / 288.0).sin() + noise.sample(&mut rng)
        });
        let est = smooth_flows(&series, 12).sigma[0];
        assert!((est - sigma).abs() / sigma < 0.15, "estimate {est}");
    }

    #[test]
    fn prep_rejects_negative_volumes() {
        let bad = DMatrix::from_element(1, 5, -1.0);
        assert!(prep_real(&bad, 3, false, &[], 0).is_err());
    }

    #[test]
    fn mixture_events_cover_all_structures() {
        let mut net = crate::netgen::Network::generate(30, 4).unwrap();
        let routing = crate::netgen::build_routing(&mut net, 300, 2).unwrap();
        let od: Vec<_> = net.flows.iter().map(|f| (f.src, f.dst)).collect();
        let cfg = AnomalyConfig {
            flow_ratio: 0.03,
            ..AnomalyConfig::default()
        };
        let events = generate_events(&routing, &od, 168, &cfg, 9).unwrap();
        let tags: BTreeSet<&str> = events.iter().map(|e| e.structure.tag()).collect();
        assert_eq!(tags.len(), 3, "{events:?}");
        let mut flows = gen_flows(300, 168, &FlowGenParams::default(), 1).unwrap().values;
        inject(&mut flows, &events).unwrap();
        let none = AnomalyConfig {
            flow_ratio: 0.0,
            ..AnomalyConfig::default()
        };
        assert!(generate_events(&routing, &od, 168, &none, 9).unwrap().is_empty());
    }
}
