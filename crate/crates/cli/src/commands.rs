use std::fs::{File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anomography::baselines::ewma_detect;
use anomography::hankel::{frontal_slice, slice_count};
use anomography::io;
use anomography::metrics::{f1_curve, f_measure, ScoreGrid};
use anomography::netgen::{build_routing, Network};
use anomography::pipeline::{Checkpoint, StepResult, Tracker};
use anomography::traffic::{gen_flows, generate_events, inject, make_link_matrix, sample_mask, Labels};
use anomography::{Error, Mask, RoutingMatrix};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, Config};

pub const NETWORK: &str = "network.json";
pub const ROUTING: &str = "routing.csv";
pub const FLOWS: &str = "flows.csv";
pub const LINKS: &str = "links.csv";
pub const MASK: &str = "mask.csv";
pub const TRUTH: &str = "truth.csv";
pub const EVENTS: &str = "events.json";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const RUN_SUMMARY: &str = "run_summary.json";
pub const EVAL_SUMMARY: &str = "eval_summary.json";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }

    /// Maps a library error raised while handling `context` (usually a file).
    fn from_lib(context: &str, e: Error) -> Self {
        let code = match e {
            Error::Numerical { .. } | Error::Solver { .. } => 4,
            Error::Parameter(_) | Error::Degenerate(_) => 2,
            _ => 3,
        };
        Self {
            code,
            message: format!("{context}: {e}"),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

trait Context<T> {
    fn ctx(self, context: &str) -> Result<T>;
}

impl<T> Context<T> for anomography::Result<T> {
    fn ctx(self, context: &str) -> Result<T> {
        self.map_err(|e| CliError::from_lib(context, e))
    }
}

pub fn load_config(path: Option<&Path>) -> Result<Config> {
    let Some(path) = path else {
        return Ok(Config::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    Config::parse(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

/// Opens an input file; a missing file is reported with `missing_code`.
fn open_input(path: &Path, missing_code: u8) -> Result<std::io::BufReader<File>> {
    io::open(path).map_err(|e| CliError {
        code: missing_code,
        message: format!("{}: {e}", path.display()),
    })
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> anomography::Result<()>,
{
    let name = path.display().to_string();
    let mut out = io::create(path).ctx(&name)?;
    f(&mut out).ctx(&name)
}

fn load_network(dir: &Path, missing_code: u8) -> Result<(Network, RoutingMatrix)> {
    let path = file(dir, NETWORK);
    let name = path.display().to_string();
    let network: Network = io::read_json(open_input(&path, missing_code)?).ctx(&name)?;
    let routing = network.routing_matrix().ctx(&name)?;
    Ok((network, routing))
}

pub fn gen_network(cfg: &Config, dir: &Path) -> Result<()> {
    let n = &cfg.network;
    if n.nodes < 3 {
        return Err(CliError::config(format!("network.nodes must be at least 3, got {}", n.nodes)));
    }
    let mut network = Network::generate(n.nodes, cfg.seed).ctx("network generation")?;
    let routing = build_routing(&mut network, n.flows, cfg.seed.wrapping_add(1)).ctx("routing")?;
    write_with(&file(dir, NETWORK), |w| io::write_json(w, &network))?;
    write_with(&file(dir, ROUTING), |w| io::write_routing(w, &routing))?;
    println!(
        "nodes={} links={} flows={}",
        network.num_nodes(),
        routing.num_links(),
        routing.num_flows()
    );
    Ok(())
}

pub fn gen_traffic(cfg: &Config, dir: &Path) -> Result<()> {
    let (network, routing) = load_network(dir, 2)?;
    let t = &cfg.traffic;
    let total = t.horizon;
    let flows = routing.num_flows();
    let mut values = gen_flows(flows, total, &t.flow, cfg.seed.wrapping_add(2))
        .ctx("traffic.flow")?
        .values;
    let od: Vec<(usize, usize)> = network.flows.iter().map(|f| (f.src, f.dst)).collect();
    let events = generate_events(&routing, &od, total, &t.anomalies, cfg.seed.wrapping_add(3))
        .ctx("traffic.anomalies")?;
    let truth = inject(&mut values, &events).ctx("anomaly injection")?;
    let links = make_link_matrix(&routing, &values).ctx("link matrix")?;
    let mask = sample_mask(routing.num_links(), total, t.observation_ratio, cfg.seed.wrapping_add(4))
        .ctx("traffic.observation_ratio")?;

    write_with(&file(dir, FLOWS), |w| io::write_dense(w, &values))?;
    write_with(&file(dir, LINKS), |w| io::write_dense(w, &links))?;
    write_with(&file(dir, MASK), |w| io::write_mask(w, &mask))?;
    write_with(&file(dir, TRUTH), |w| io::write_labels(w, &truth))?;
    write_with(&file(dir, EVENTS), |w| io::write_json(w, &events))?;
    let anomalous: std::collections::BTreeSet<usize> = events.iter().flat_map(|e| e.flows.iter().copied()).collect();
    println!(
        "flows={flows} samples={total} events={} anomalous_flows={} labels={}",
        events.len(),
        anomalous.len(),
        truth.len()
    );
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub algorithm: String,
    pub steps: usize,
    /// Seconds in model tracking (subspace updates, or the EWMA fit).
    pub tracking_secs: f64,
    /// Seconds in sparse abnormal-flow estimation.
    pub sparse_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithms: Vec<Timing>,
}

fn results_name(alg: Algorithm) -> String {
    format!("results_{}.csv", alg.name())
}

fn scores_name(alg: Algorithm) -> String {
    format!("scores_{}.csv", alg.name())
}

fn csv_writer(path: &Path, append: bool, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>> {
    let existing = append && path.exists();
    let f = if existing {
        OpenOptions::new().append(true).open(path)
    } else {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).ok();
        }
        File::create(path)
    }
    .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(f));
    if !existing {
        w.write_record(header)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    }
    Ok(w)
}

fn top_entries(step: &StepResult, k: usize) -> String {
    let z = step.anomaly.estimate();
    let mut idx: Vec<usize> = (0..z.len()).filter(|&i| z[i] != 0.0).collect();
    idx.sort_by(|&a, &b| z[b].abs().total_cmp(&z[a].abs()).then(a.cmp(&b)));
    idx.iter()
        .take(k)
        .map(|&i| format!("{i}:{}", z[i]))
        .collect::<Vec<_>>()
        .join(";")
}

fn write_steps(dir: &Path, alg: Algorithm, steps: &[StepResult], top_k: usize, append: bool) -> Result<()> {
    let path = file(dir, &results_name(alg));
    let err = |e: csv::Error| CliError::data(format!("{}: {e}", path.display()));
    let mut w = csv_writer(&path, append, &["slice", "time", "residual", "admm_iters", "converged", "top"])?;
    for s in steps {
        w.write_record(&[
            s.slice_index.to_string(),
            s.measurement_time.to_string(),
            s.residual.to_string(),
            s.admm_iters.to_string(),
            s.converged.to_string(),
            top_entries(s, top_k),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;

    let path = file(dir, &scores_name(alg));
    let err = |e: csv::Error| CliError::data(format!("{}: {e}", path.display()));
    let mut w = csv_writer(&path, append, &["row", "col", "value"])?;
    for s in steps {
        let z = s.anomaly.estimate();
        for (i, x) in z.iter().enumerate() {
            if *x != 0.0 {
                w.write_record(&[i.to_string(), s.measurement_time.to_string(), x.abs().to_string()])
                    .map_err(err)?;
            }
        }
    }
    w.flush().map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn timing(alg: Algorithm, steps: &[StepResult]) -> Timing {
    Timing {
        algorithm: alg.name().to_string(),
        steps: steps.len(),
        tracking_secs: steps.iter().map(|s| s.tracking_secs).sum(),
        sparse_secs: steps.iter().map(|s| s.sparse_secs).sum(),
    }
}

fn load_stream(dir: &Path, routing: &RoutingMatrix) -> Result<(DMatrix<f64>, Mask)> {
    let path = file(dir, LINKS);
    let name = path.display().to_string();
    let links = io::read_dense(open_input(&path, 3)?).ctx(&name)?;
    if links.nrows() != routing.num_links() {
        return Err(CliError::data(format!(
            "{name}: {} rows but the network has {} links",
            links.nrows(),
            routing.num_links()
        )));
    }
    let path = file(dir, MASK);
    let name = path.display().to_string();
    let mask = io::read_mask(open_input(&path, 3)?, links.nrows(), links.ncols()).ctx(&name)?;
    Ok((links, mask))
}

pub fn run(cfg: &Config, dir: &Path, resume: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    let hp = &cfg.detector.hyperparams;
    let (_, routing) = load_network(dir, 3)?;
    let (links, mask) = load_stream(dir, &routing)?;
    let total = links.ncols();
    let slices = slice_count(total, hp.window);
    if slices == 0 {
        return Err(CliError::data(format!(
            "{}: {total} samples are fewer than the window {}",
            file(dir, LINKS).display(),
            hp.window
        )));
    }

    let summary_path = file(dir, RUN_SUMMARY);
    let mut summary = if resume.is_some() && summary_path.exists() {
        io::read_json(open_input(&summary_path, 3)?).ctx(&summary_path.display().to_string())?
    } else {
        RunSummary::default()
    };
    let record = |summary: &mut RunSummary, t: Timing| match summary.algorithms.iter_mut().find(|x| x.algorithm == t.algorithm) {
        Some(prev) => {
            prev.steps += t.steps;
            prev.tracking_secs += t.tracking_secs;
            prev.sparse_secs += t.sparse_secs;
        }
        None => summary.algorithms.push(t),
    };

    for &alg in &cfg.detector.algorithms {
        match alg {
            Algorithm::Proposed => {
                let mut tracker = match resume {
                    Some(path) => {
                        let name = path.display().to_string();
                        let ckpt: Checkpoint = io::read_json(open_input(path, 3)?).ctx(&name)?;
                        Tracker::from_checkpoint(routing.clone(), ckpt).ctx(&name)?
                    }
                    None => Tracker::new(routing.clone(), hp.clone(), cfg.seed.wrapping_add(5)).ctx("detector.hyperparams")?,
                };
                let first = tracker.last_index() + 1;
                let last = stop_after.unwrap_or(slices).min(slices);
                let mut steps = Vec::new();
                for t in first..=last {
                    let slice = frontal_slice(&links, &mask, tracker.hyperparams().window, t).ctx(LINKS)?;
                    steps.push(tracker.step(&slice).ctx(&format!("slice {t}"))?);
                }
                write_steps(dir, alg, &steps, cfg.detector.top_k, resume.is_some())?;
                write_with(&file(dir, CHECKPOINT), |w| io::write_json(w, &tracker.checkpoint()))?;
                record(&mut summary, timing(alg, &steps));
            }
            Algorithm::Ewma => {
                if resume.is_some() || stop_after.is_some() {
                    // the baseline is stateless per run and is not checkpointed
                    continue;
                }
                let steps = ewma_detect(&links, &mask, &routing, hp, cfg.detector.ewma_alpha).ctx("ewma")?;
                write_steps(dir, alg, &steps, cfg.detector.top_k, false)?;
                record(&mut summary, timing(alg, &steps));
            }
        }
    }
    write_with(&summary_path, |w| io::write_json(w, &summary))?;
    println!("slices={slices} algorithms={}", summary.algorithms.len());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmScore {
    pub algorithm: String,
    pub auc: f64,
    pub best_f1: f64,
    pub best_f1_threshold: f64,
    /// F1 at the configured detection threshold.
    pub f1_at_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub scored_times: [usize; 2],
    pub algorithms: Vec<AlgorithmScore>,
    pub timings: Vec<Timing>,
}

fn read_times(path: &Path) -> Result<Vec<usize>> {
    let name = path.display().to_string();
    let mut r = csv::Reader::from_reader(open_input(path, 3)?);
    let mut times = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::data(format!("{name}: {e}")))?;
        let t: usize = rec
            .get(1)
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| CliError::data(format!("{name}: bad time field")))?;
        times.push(t);
    }
    Ok(times)
}

fn load_grid(dir: &Path, alg: Algorithm, flows: usize) -> Result<ScoreGrid> {
    let results = file(dir, &results_name(alg));
    let times = read_times(&results)?;
    let first = *times
        .first()
        .ok_or_else(|| CliError::data(format!("{}: no result rows", results.display())))?;
    if times.iter().enumerate().any(|(j, &t)| t != first + j) {
        return Err(CliError::data(format!(
            "{}: measurement times are not consecutive",
            results.display()
        )));
    }
    let path = file(dir, &scores_name(alg));
    let name = path.display().to_string();
    let mut scores = DMatrix::zeros(flows, times.len());
    for (f, t, v) in io::read_triplets(open_input(&path, 3)?).ctx(&name)? {
        if f >= flows || t < first || t >= first + times.len() {
            return Err(CliError::data(format!("{name}: cell ({f}, {t}) outside the result grid")));
        }
        scores[(f, t - first)] = v;
    }
    Ok(ScoreGrid { first_time: first, scores })
}

pub fn eval(cfg: &Config, dir: &Path) -> Result<()> {
    let (_, routing) = load_network(dir, 3)?;
    let flows = routing.num_flows();
    let truth_path = file(dir, TRUTH);
    let truth: Labels = io::read_labels(open_input(&truth_path, 3)?).ctx(&truth_path.display().to_string())?;
    if let Some(&(f, _)) = truth.iter().find(|&&(f, _)| f >= flows) {
        return Err(CliError::data(format!(
            "{}: flow {f} outside the network's {flows} flows",
            truth_path.display()
        )));
    }
    let algorithms: Vec<Algorithm> = cfg
        .detector
        .algorithms
        .iter()
        .copied()
        .filter(|&a| file(dir, &results_name(a)).exists())
        .collect();
    if algorithms.is_empty() {
        return Err(CliError::data(format!("no result files in {}", dir.display())));
    }

    let mut rows = Vec::new();
    let mut span = [0, 0];
    for alg in algorithms {
        let grid = load_grid(dir, alg, flows)?;
        span = [grid.first_time, grid.times().end - 1];
        let roc = grid.roc(&truth).ctx(TRUTH)?;
        write_with(&file(dir, &format!("roc_{}.csv", alg.name())), |w| {
            io::write_rows(w, &["threshold", "tpr", "fpr"], roc.points.iter().map(|p| vec![p.threshold, p.tpr, p.fpr]))
        })?;

        let top = grid.scores.max().max(0.0);
        let n = cfg.eval.f1_points.max(2);
        let thresholds: Vec<f64> = (0..n).map(|i| top * i as f64 / (n - 1) as f64).collect();
        let curve = f1_curve(&grid, &truth, &thresholds);
        write_with(&file(dir, &format!("f1_{}.csv", alg.name())), |w| {
            io::write_rows(
                w,
                &["threshold", "precision", "recall", "f1"],
                curve.iter().map(|(t, p)| vec![*t, p.precision, p.recall, p.f1]),
            )
        })?;
        let delta = cfg.detector.hyperparams.threshold;
        let trace = f_measure(&grid.flagged(delta), &truth, grid.first_time);
        write_with(&file(dir, &format!("f1_trace_{}.csv", alg.name())), |w| {
            io::write_rows(
                w,
                &["time", "precision", "recall", "f1"],
                trace.per_time.iter().map(|(t, p)| vec![*t as f64, p.precision, p.recall, p.f1]),
            )
        })?;
        let (best_t, best) = curve
            .iter()
            .fold((0.0, f64::NEG_INFINITY), |acc, (t, p)| if p.f1 > acc.1 { (*t, p.f1) } else { acc });
        rows.push(AlgorithmScore {
            algorithm: alg.name().to_string(),
            auc: roc.auc,
            best_f1: best,
            best_f1_threshold: best_t,
            f1_at_threshold: trace.overall.f1,
        });
    }

    let summary_path = file(dir, RUN_SUMMARY);
    let timings = if summary_path.exists() {
        let s: RunSummary = io::read_json(open_input(&summary_path, 3)?).ctx(&summary_path.display().to_string())?;
        s.algorithms
    } else {
        Vec::new()
    };
    for r in &rows {
        println!("{}: auc={:.4} best_f1={:.4}", r.algorithm, r.auc, r.best_f1);
    }
    let summary = EvalSummary {
        scored_times: span,
        algorithms: rows,
        timings,
    };
    write_with(&file(dir, EVAL_SUMMARY), |w| io::write_json(w, &summary))
}
