//! Sweep orchestration.
//!
//! Each sweep point is a copy of the config with the axis values applied.
//! Every requested method writes one CSV (`<method>.csv`) with one row per
//! point, in point order. Trials are simulated from
//! `derive(seed, &[instance, trial])`, where `instance` indexes the point on
//! the non-paired axes only, so points differing in `alpha`, `snr` or
//! `layers` see the same labels and networks.
//!
//! Rows are flushed after each batch of points and recorded in
//! `completed.log`; a rerun into the same directory skips logged points and
//! drops any row written after the last logged point.

use std::collections::{BTreeMap, HashSet};
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::bp::{compute_mse, run_bp};
use crate::config::{AxisParam, ExperimentConfig, Instance, MethodKind};
use crate::error::{Error, Result};
use crate::io;
use crate::label_model::{sample_covariates, sample_labels, CovariateSample, LabelSample};
use crate::netgen::{generate_network, AdjacencyList};
use crate::oracle::exact_posterior;
use crate::potential::minimize_potential;
use crate::rng::{self, stream};
use crate::spectral::{spectral_pipeline, GmmPath};

pub const THREADS_ENV: &str = "SBM_LIMITS_THREADS";
pub const COMPLETED_LOG: &str = "completed.log";

/// Thread cap from `SBM_LIMITS_THREADS`; unset, empty or 0 means no cap.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) => Ok(None),
            Ok(t) => Ok(Some(t)),
            Err(_) => Err(Error::Config(format!("{THREADS_ENV}={v} is not a thread count"))),
        },
        Err(_) => Ok(None),
    }
}

pub fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        b = b.num_threads(t);
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// One sampled instance.
#[derive(Debug, Clone)]
pub struct Observations {
    pub labels: LabelSample,
    pub covariates: CovariateSample,
    pub networks: Vec<AdjacencyList>,
}

pub fn simulate(inst: &Instance, seed: u64) -> Result<Observations> {
    let labels = sample_labels(&inst.model, inst.n, rng::derive(seed, &[stream::LABELS]))?;
    let covariates = sample_covariates(&labels, &inst.channel, rng::derive(seed, &[stream::COVARIATES]))?;
    let networks = inst
        .specs
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| generate_network(&labels, &inst.model, layer, l, rng::derive(seed, &[stream::NETWORK])))
        .collect::<Result<Vec<_>>>()?;
    Ok(Observations { labels, covariates, networks })
}

/// Outcome of one method on one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub mse: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Method-specific: `tr` of the exact MMSE matrix for the oracle, 1 when
    /// the spectral pipeline returned the prior.
    pub extra: f64,
}

pub fn run_trial(cfg: &ExperimentConfig, inst: &Instance, method: MethodKind, seed: u64) -> Result<TrialOutcome> {
    let obs = simulate(inst, seed)?;
    match method {
        MethodKind::Bound => Err(Error::Unsupported("bound has no trials".into())),
        MethodKind::Bp => {
            let est = run_bp(&obs.networks, &obs.covariates, &inst.channel, &inst.model, &inst.specs, &cfg.bp, rng::derive(seed, &[stream::BP_INIT]))?;
            Ok(TrialOutcome { mse: compute_mse(&est.means, &obs.labels)?, converged: est.converged, iterations: est.iterations, extra: f64::NAN })
        }
        MethodKind::Spectral => {
            let est = spectral_pipeline(&obs.networks, &inst.model, &cfg.gmm, rng::derive(seed, &[stream::SPECTRAL]))?;
            let fit = est.fit.as_ref();
            Ok(TrialOutcome {
                mse: compute_mse(&est.estimates.means, &obs.labels)?,
                converged: fit.is_none_or(|f| f.converged),
                iterations: fit.map_or(0, |f| f.iterations),
                extra: if est.path == GmmPath::Prior || est.rejected { 1.0 } else { 0.0 },
            })
        }
        MethodKind::Oracle => {
            let post = exact_posterior(&obs.networks, &[], &obs.covariates, &inst.channel, &inst.model, &inst.specs)?;
            Ok(TrialOutcome {
                mse: compute_mse(&post.estimates(&inst.model).means, &obs.labels)?,
                converged: true,
                iterations: 0,
                extra: post.mmse_matrix.trace(),
            })
        }
    }
}

/// Median of the finite values; `NaN` when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// One output row.
#[derive(Debug, Clone, PartialEq)]
pub struct PointRow {
    pub config_hash: String,
    pub seed: u64,
    pub method: MethodKind,
    pub point: usize,
    pub axes: Vec<(AxisParam, f64)>,
    pub n: usize,
    pub trials: usize,
    pub mse_median: f64,
    pub mse_trials: Vec<f64>,
    pub converged_rate: f64,
    pub converged: bool,
    pub extra_median: f64,
    pub trace_bound: f64,
    pub f_star: f64,
    pub wall_time_s: f64,
    pub error: String,
}

fn fmt(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        x.to_string()
    }
}

impl PointRow {
    pub fn header(axes: &[AxisParam]) -> Vec<String> {
        let mut h: Vec<String> = ["config_hash", "seed", "method", "point"].iter().map(|s| s.to_string()).collect();
        h.extend(axes.iter().map(|&a| String::from(a)));
        h.extend(
            ["n", "trials", "mse_median", "mse_trials", "converged_rate", "converged", "extra_median", "trace_bound", "f_star", "wall_time_s", "error"]
                .iter()
                .map(|s| s.to_string()),
        );
        h
    }

    pub fn record(&self) -> Vec<String> {
        let mut r = vec![self.config_hash.clone(), self.seed.to_string(), self.method.name().to_string(), self.point.to_string()];
        r.extend(self.axes.iter().map(|&(_, v)| v.to_string()));
        r.extend([
            self.n.to_string(),
            self.trials.to_string(),
            fmt(self.mse_median),
            self.mse_trials.iter().map(|&v| fmt(v)).collect::<Vec<_>>().join(";"),
            fmt(self.converged_rate),
            self.converged.to_string(),
            fmt(self.extra_median),
            fmt(self.trace_bound),
            fmt(self.f_star),
            format!("{:.6}", self.wall_time_s),
            self.error.clone(),
        ]);
        r
    }
}

/// Axis assignments of every point, last axis fastest.
pub fn sweep_points(cfg: &ExperimentConfig) -> Vec<Vec<(AxisParam, f64)>> {
    let axes = cfg.sweep.as_ref().map_or(&[][..], |s| &s.axes[..]);
    let mut points = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push((axis.name, v));
                    q
                })
            })
            .collect();
    }
    points
}

/// Index of a point on the non-paired axes only.
pub fn instance_index(cfg: &ExperimentConfig, point: &[(AxisParam, f64)]) -> u64 {
    let axes = cfg.sweep.as_ref().map_or(&[][..], |s| &s.axes[..]);
    let mut idx = 0u64;
    for (axis, &(_, v)) in axes.iter().zip(point) {
        if axis.name.is_paired() {
            continue;
        }
        let pos = axis.values.iter().position(|&x| x == v).unwrap_or(0);
        idx = idx * axis.values.len() as u64 + pos as u64;
    }
    idx
}

pub fn trial_seed(root: u64, instance: u64, trial: usize) -> u64 {
    rng::derive(root, &[instance, trial as u64])
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
    /// Continue from `completed.log` when it matches the config hash.
    pub resume: bool,
    /// Stop after this many points (for testing resume).
    pub max_points: Option<usize>,
}

impl SweepOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self { out_dir: out_dir.into(), threads: None, resume: true, max_points: None }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    /// Rows computed in this run, per method, in point order.
    pub rows: BTreeMap<MethodKind, Vec<PointRow>>,
    pub skipped: usize,
    pub files: Vec<PathBuf>,
}

enum Task {
    Bound,
    Trial(usize),
}

struct TaskResult {
    point: usize,
    method: MethodKind,
    trial: Option<usize>,
    outcome: Result<(TrialOutcome, f64, f64)>,
    seconds: f64,
}

fn run_task(cfg: &ExperimentConfig, point: usize, assign: &[(AxisParam, f64)], method: MethodKind, task: &Task) -> TaskResult {
    let start = Instant::now();
    let outcome = (|| {
        let pcfg = cfg.at(assign)?;
        let inst = pcfg.instance()?;
        match task {
            Task::Bound => {
                let b = minimize_potential(&inst.specs, &inst.channel, &inst.model, &pcfg.minimize)?;
                let converged = b.best_fixed_point().is_some() || b.grid_candidate().is_some();
                let out = TrialOutcome { mse: f64::NAN, converged, iterations: 0, extra: f64::NAN };
                Ok((out, b.u_star.trace(), b.f_star))
            }
            Task::Trial(t) => {
                let seed = trial_seed(cfg.seed, instance_index(cfg, assign), *t);
                Ok((run_trial(&pcfg, &inst, method, seed)?, f64::NAN, f64::NAN))
            }
        }
    })();
    let trial = match task {
        Task::Bound => None,
        Task::Trial(t) => Some(*t),
    };
    TaskResult { point, method, trial, outcome, seconds: start.elapsed().as_secs_f64() }
}

fn summarize(cfg: &ExperimentConfig, hash: &str, point: usize, assign: &[(AxisParam, f64)], method: MethodKind, mut results: Vec<&TaskResult>) -> PointRow {
    results.sort_by_key(|r| r.trial);
    let n = cfg.at(assign).map(|c| c.n).unwrap_or(cfg.n);
    let mut row = PointRow {
        config_hash: hash.to_string(),
        seed: cfg.seed,
        method,
        point,
        axes: assign.to_vec(),
        n,
        trials: results.len(),
        mse_median: f64::NAN,
        mse_trials: Vec::new(),
        converged_rate: f64::NAN,
        converged: false,
        extra_median: f64::NAN,
        trace_bound: f64::NAN,
        f_star: f64::NAN,
        wall_time_s: results.iter().map(|r| r.seconds).sum(),
        error: String::new(),
    };
    let mut extras = Vec::new();
    let mut conv = 0usize;
    for r in &results {
        match &r.outcome {
            Ok((o, tr, f)) => {
                row.mse_trials.push(o.mse);
                extras.push(o.extra);
                conv += o.converged as usize;
                if tr.is_finite() {
                    row.trace_bound = *tr;
                    row.f_star = *f;
                }
            }
            Err(e) => {
                row.mse_trials.push(f64::NAN);
                if row.error.is_empty() {
                    let which = r.trial.map_or(String::new(), |t| format!("trial {t}: "));
                    row.error = format!("{which}{e}").replace(['\n', '\r'], " ");
                }
            }
        }
    }
    row.mse_median = median(&row.mse_trials);
    row.extra_median = median(&extras);
    row.converged_rate = conv as f64 / results.len().max(1) as f64;
    row.converged = conv == results.len() && row.error.is_empty();
    row
}

fn read_log(path: &Path, hash: &str) -> Result<HashSet<(MethodKind, usize)>> {
    let mut done = HashSet::new();
    if !path.exists() {
        return Ok(done);
    }
    for line in BufReader::new(io::open(path)?).lines() {
        let line = line?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if let [h, m, p] = parts[..] {
            if h != hash {
                continue;
            }
            let method: MethodKind = serde_json::from_str(&format!("\"{m}\"")).map_err(|e| Error::Parse(format!("{COMPLETED_LOG}: {e}")))?;
            let point = p.parse().map_err(|e| Error::Parse(format!("{COMPLETED_LOG}: {e}")))?;
            done.insert((method, point));
        }
    }
    Ok(done)
}

/// Rewrite `path` keeping the header and rows of logged points only.
fn prune_csv(path: &Path, hash: &str, method: MethodKind, done: &HashSet<(MethodKind, usize)>) -> Result<bool> {
    if !path.exists() {
        return Ok(false);
    }
    let mut rd = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?;
    let header = rd.headers()?.clone();
    let mut kept = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let point: Option<usize> = rec.get(3).and_then(|p| p.parse().ok());
        if rec.get(0) == Some(hash) && point.is_some_and(|p| done.contains(&(method, p))) {
            kept.push(rec);
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for rec in kept {
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(true)
}

pub fn run_sweep(cfg: &ExperimentConfig, opts: &SweepOptions) -> Result<SweepReport> {
    cfg.validate()?;
    let sweep = cfg.sweep.clone().ok_or_else(|| Error::Config("config has no sweep section".into()))?;
    let hash = cfg.hash();
    let points = sweep_points(cfg);
    let axes: Vec<AxisParam> = sweep.axes.iter().map(|a| a.name).collect();
    let mut methods = sweep.methods.clone();
    methods.sort();
    methods.dedup();

    std::fs::create_dir_all(&opts.out_dir)?;
    let log_path = opts.out_dir.join(COMPLETED_LOG);
    let done = if opts.resume { read_log(&log_path, &hash)? } else { HashSet::new() };
    if done.is_empty() {
        io::create(&log_path)?;
    }

    let mut report = SweepReport::default();
    let mut writers = BTreeMap::new();
    for &m in &methods {
        let path = opts.out_dir.join(format!("{}.csv", m.name()));
        let resumed = !done.is_empty() && prune_csv(&path, &hash, m, &done)?;
        let file = if resumed { OpenOptions::new().append(true).open(&path)? } else { io::create(&path)? };
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if !resumed {
            w.write_record(PointRow::header(&axes))?;
            w.flush()?;
        }
        writers.insert(m, w);
        report.files.push(path);
    }
    let mut log = OpenOptions::new().append(true).open(&log_path)?;

    let pool = thread_pool(opts.threads)?;
    let batch = pool.current_num_threads().max(1);
    let limit = opts.max_points.unwrap_or(points.len()).min(points.len());
    let todo: Vec<usize> = (0..limit).filter(|&p| methods.iter().any(|&m| !done.contains(&(m, p)))).collect();
    report.skipped = limit - todo.len();

    for chunk in todo.chunks(batch) {
        let mut tasks = Vec::new();
        for &p in chunk {
            for &m in &methods {
                if done.contains(&(m, p)) {
                    continue;
                }
                if m == MethodKind::Bound {
                    tasks.push((p, m, Task::Bound));
                } else {
                    tasks.extend((0..sweep.trials).map(|t| (p, m, Task::Trial(t))));
                }
            }
        }
        let results: Vec<TaskResult> = pool.install(|| tasks.par_iter().map(|(p, m, t)| run_task(cfg, *p, &points[*p], *m, t)).collect());
        for &p in chunk {
            for &m in &methods {
                if done.contains(&(m, p)) {
                    continue;
                }
                let mine: Vec<&TaskResult> = results.iter().filter(|r| r.point == p && r.method == m).collect();
                let row = summarize(cfg, &hash, p, &points[p], m, mine);
                let w = writers.get_mut(&m).expect("writer per method");
                w.write_record(row.record())?;
                w.flush()?;
                writeln!(log, "{hash} {} {p}", m.name())?;
                log.flush()?;
                log::info!("point {p} {}: mse {} {}", m.name(), fmt(row.mse_median), row.error);
                report.rows.entry(m).or_default().push(row);
            }
        }
    }
    Ok(report)
}
