//! Monte Carlo experiments: configuration, per-run simulation, RMSE curves
//! and CSV export.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baseline;
use crate::msgpass::{CoslatEngine, FilterConfig, Fusion, MessageScheme, MsgPassError, StepContext, StepStats};
use crate::rng::{self, tag};
use crate::scenario::{self, MovementGate, ScenarioConfig, ScenarioError, Truth};
use crate::statespace::{GaussianRangeNoise, Location, NodeId, NodeState, StatePrior};

/// Final target errors above this (metres) mark a run as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 100.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot parse config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("run {run} ({method}): {source}")]
    Filter {
        run: usize,
        method: Method,
        source: MsgPassError,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("rmse table line {line}: {msg}")]
    RmseParse { line: usize, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Coslat,
    Baseline,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Coslat => "coslat",
            Method::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "coslat" => Ok(Method::Coslat),
            "baseline" => Ok(Method::Baseline),
            _ => Err(format!("unknown method {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodSelection {
    Coslat,
    Baseline,
    #[default]
    Both,
}

impl MethodSelection {
    pub fn methods(self) -> Vec<Method> {
        match self {
            MethodSelection::Coslat => vec![Method::Coslat],
            MethodSelection::Baseline => vec![Method::Baseline],
            MethodSelection::Both => vec![Method::Coslat, Method::Baseline],
        }
    }
}

/// How target beliefs are fused and which target messages are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    DistributedLc,
    Centralized,
    ExactExtrinsic,
}

impl Mode {
    pub fn apply(self, filter: &mut FilterConfig) {
        let (fusion, messages) = match self {
            Mode::DistributedLc => (Fusion::DistributedLc, MessageScheme::Amp),
            Mode::Centralized => (Fusion::Centralized, MessageScheme::Amp),
            Mode::ExactExtrinsic => (Fusion::DistributedLc, MessageScheme::ExactExtrinsic),
        };
        filter.fusion = fusion;
        filter.messages = messages;
    }
}

/// Complete experiment description, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub runs: usize,
    pub seed: u64,
    pub method: MethodSelection,
    pub mode: Mode,
    pub filter: FilterConfig,
    pub scenario: ScenarioConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            runs: 50,
            seed: 1,
            method: MethodSelection::Both,
            mode: Mode::DistributedLc,
            filter: FilterConfig::default(),
            scenario: ScenarioConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: SimConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        SimConfig::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.filter.validate().map_err(HarnessError::Invalid)?;
        self.scenario.validate()?;
        if self.runs == 0 {
            return Err(HarnessError::Invalid("runs must be at least 1".into()));
        }
        Ok(())
    }

    /// Filter settings with the run mode applied.
    pub fn effective_filter(&self) -> FilterConfig {
        let mut f = self.filter.clone();
        self.mode.apply(&mut f);
        f
    }

    /// Engine for this configuration. Mobile sensors held by the movement
    /// gate know they are at rest; they restart from the mobile prior's
    /// velocity distribution.
    pub fn engine(&self) -> CoslatEngine {
        let engine = CoslatEngine::new(
            self.effective_filter(),
            self.scenario.motion_model(),
            Arc::new(GaussianRangeNoise::new(self.scenario.sigma_v2)),
        );
        match self.scenario.mobile_ids().first() {
            Some(&k) => engine.with_rest_prior(self.scenario.sensor_prior(k)),
            None => engine,
        }
    }
}

/// Estimates and truth of one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Posterior mean location per sensor index.
    pub sensor_estimates: Vec<Location>,
    /// Posterior mean of each sensor's target copy.
    pub target_estimates: Vec<Location>,
    /// True locations, node 0 the target.
    pub truth: Vec<Location>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run: usize,
    pub method: Method,
    /// Sensor indices that count toward self-localization error.
    pub mobile: Vec<usize>,
    /// `steps[n - 1]` holds time step `n`.
    pub steps: Vec<StepRecord>,
    pub stats: StepStats,
    pub released_at: Vec<Option<usize>>,
    /// SHA-256 over the measurement log.
    pub measurement_digest: String,
}

impl RunRecord {
    /// Mean over mobile sensors of the squared self-localization error at `n`.
    pub fn selfloc_sq(&self, n: usize) -> f64 {
        let s = &self.steps[n - 1];
        if self.mobile.is_empty() {
            return 0.0;
        }
        self.mobile
            .iter()
            .map(|&k| (s.sensor_estimates[k] - s.truth[k + 1]).norm_squared())
            .sum::<f64>()
            / self.mobile.len() as f64
    }

    /// Mean over sensors' target copies of the squared tracking error at `n`.
    pub fn track_sq(&self, n: usize) -> f64 {
        let s = &self.steps[n - 1];
        if s.target_estimates.is_empty() {
            return 0.0;
        }
        s.target_estimates
            .iter()
            .map(|e| (e - s.truth[0]).norm_squared())
            .sum::<f64>()
            / s.target_estimates.len() as f64
    }

    pub fn final_track_error(&self) -> f64 {
        self.steps.last().map_or(0.0, |_| self.track_sq(self.steps.len()).sqrt())
    }

    pub fn final_selfloc_error(&self) -> f64 {
        self.steps.last().map_or(0.0, |_| self.selfloc_sq(self.steps.len()).sqrt())
    }

    /// Non-finite estimates or a final tracking error above
    /// [`DIVERGENCE_THRESHOLD`].
    pub fn diverged(&self) -> bool {
        let finite = self.steps.iter().all(|s| {
            s.sensor_estimates
                .iter()
                .chain(&s.target_estimates)
                .all(|l| l.x.is_finite() && l.y.is_finite())
        });
        !finite || !(self.final_track_error() <= DIVERGENCE_THRESHOLD)
    }
}

/// Simulates one run of one method. `truth` is the fixed trajectory set;
/// with gating on, each mobile sensor's realized path depends on when it
/// was released.
pub fn simulate_run(cfg: &SimConfig, truth: &Truth, method: Method, run: usize) -> Result<RunRecord, HarnessError> {
    let sc = &cfg.scenario;
    let engine = cfg.engine();
    let run_seed = rng::derive(cfg.seed, &[tag::RUN, run as u64]);
    let k_count = sc.num_sensors();
    let priors: Vec<StatePrior> = (1..=k_count).map(|k| sc.sensor_prior(NodeId(k))).collect();
    let mut beliefs = engine.initialize(&priors, &sc.target_prior(), run_seed);
    let mut gate = MovementGate::new(sc);
    let mut hasher = Sha256::new();
    let mut stats = StepStats::default();
    let mut steps = Vec::with_capacity(sc.steps);
    let filter_err = |source| HarnessError::Filter { run, method, source };
    let mut mobile_mask = vec![false; k_count];
    for k in sc.mobile_ids() {
        mobile_mask[k.sensor_index()] = true;
    }
    for n in 1..=sc.steps.min(truth.steps()) {
        let states: Vec<NodeState> = gate.realized_states(truth, n);
        let locs: Vec<Location> = states.iter().map(NodeState::location).collect();
        let topo = scenario::build_topology(&locs, sc);
        let meas = scenario::generate_measurements(&states, &topo, engine.noise.as_ref(), run_seed, n);
        meas.digest_into(n, &mut hasher);
        let at_rest: Vec<bool> = (0..k_count).map(|i| sc.gating && mobile_mask[i] && !gate.is_released(i)).collect();
        let ctx = StepContext {
            n,
            seed: run_seed,
            topology: &topo,
            measurements: &meas,
            include_target: method == Method::Coslat,
            at_rest: &at_rest,
        };
        match method {
            Method::Coslat => {
                let out = engine.step(&beliefs, &ctx).map_err(filter_err)?;
                stats += out.stats;
                beliefs = out.beliefs;
            }
            Method::Baseline => {
                let out = baseline::csl_step(&engine, &beliefs, &ctx).map_err(filter_err)?;
                stats += out.stats;
                let means: Vec<Location> = out.beliefs.sensors.iter().map(|b| b.mean_location()).collect();
                let (target, dtt_stats) = baseline::dtt_step(&engine, &beliefs.target, &means, &ctx).map_err(filter_err)?;
                stats += dtt_stats;
                beliefs = out.beliefs;
                beliefs.target = target;
            }
        }
        gate.update(n, &beliefs.sensors);
        steps.push(StepRecord {
            sensor_estimates: beliefs.sensors.iter().map(|b| b.mean_location()).collect(),
            target_estimates: beliefs.target.iter().map(|t| t.mean_location()).collect(),
            truth: locs,
        });
    }
    let mobile = sc.mobile_ids().iter().map(|k| k.sensor_index()).collect();
    Ok(RunRecord {
        run,
        method,
        mobile,
        steps,
        stats,
        released_at: (0..k_count).map(|i| gate.released_at(i)).collect(),
        measurement_digest: hex::encode(hasher.finalize()),
    })
}

/// All records of one experiment, ordered by method then run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: SimConfig,
    pub truth: Truth,
    pub records: Vec<RunRecord>,
}

/// Runs every (method, run) pair. Runs execute in parallel; the output
/// order and content depend only on the configuration.
pub fn run_experiment(cfg: &SimConfig) -> Result<Experiment, HarnessError> {
    let truth = scenario::generate_truth(&cfg.scenario);
    run_experiment_with_truth(cfg, truth)
}

pub fn run_experiment_with_truth(cfg: &SimConfig, truth: Truth) -> Result<Experiment, HarnessError> {
    cfg.validate()?;
    if truth.num_nodes() != cfg.scenario.num_sensors() + 1 {
        return Err(HarnessError::Invalid(format!(
            "truth has {} nodes, scenario needs {}",
            truth.num_nodes(),
            cfg.scenario.num_sensors() + 1
        )));
    }
    if truth.steps() < cfg.scenario.steps {
        return Err(HarnessError::Invalid(format!(
            "truth covers {} steps, scenario needs {}",
            truth.steps(),
            cfg.scenario.steps
        )));
    }
    let jobs: Vec<(Method, usize)> = cfg
        .method
        .methods()
        .into_iter()
        .flat_map(|m| (0..cfg.runs).map(move |r| (m, r)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(m, r)| simulate_run(cfg, &truth, m, r))
        .collect::<Result<Vec<_>, _>>()?;
    for r in &records {
        if r.stats.degenerate_events > 0 || r.stats.fit_failures > 0 {
            log::info!(
                "run {} ({}): {} degenerate updates, {} fit failures",
                r.run,
                r.method,
                r.stats.degenerate_events,
                r.stats.fit_failures
            );
        }
    }
    Ok(Experiment {
        config: cfg.clone(),
        truth,
        records,
    })
}

/// RMSE time series of one method; index `n - 1` holds time step `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmseCurves {
    pub method: Method,
    pub selfloc: Vec<f64>,
    pub track: Vec<f64>,
    pub included_runs: usize,
    pub excluded_runs: usize,
}

impl RmseCurves {
    /// Mean of a curve over `n` in `[from, to]`, inclusive.
    pub fn window_mean(curve: &[f64], from: usize, to: usize) -> f64 {
        let slice = &curve[from - 1..to.min(curve.len())];
        slice.iter().sum::<f64>() / slice.len() as f64
    }
}

/// `RMSE(n) = sqrt(mean over included runs and relevant nodes of the
/// squared error)`, per method. Diverged runs are excluded and counted.
pub fn rmse_curves(records: &[RunRecord]) -> Vec<RmseCurves> {
    let mut methods: Vec<Method> = records.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    methods
        .into_iter()
        .map(|m| {
            let all: Vec<&RunRecord> = records.iter().filter(|r| r.method == m).collect();
            let kept: Vec<&RunRecord> = all.iter().copied().filter(|r| !r.diverged()).collect();
            if kept.len() < all.len() {
                log::warn!("{m}: excluding {} diverged runs", all.len() - kept.len());
            }
            let steps = kept.iter().map(|r| r.steps.len()).min().unwrap_or(0);
            let curve = |f: &dyn Fn(&RunRecord, usize) -> f64| -> Vec<f64> {
                (1..=steps)
                    .map(|n| (kept.iter().map(|r| f(r, n)).sum::<f64>() / kept.len() as f64).sqrt())
                    .collect()
            };
            RmseCurves {
                method: m,
                selfloc: curve(&|r, n| r.selfloc_sq(n)),
                track: curve(&|r, n| r.track_sq(n)),
                included_runs: kept.len(),
                excluded_runs: all.len() - kept.len(),
            }
        })
        .collect()
}

/// One row of `rmse.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmseRow {
    pub method: Method,
    pub metric: Metric,
    pub n: usize,
    pub rmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Selfloc,
    Track,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Selfloc => "selfloc",
            Metric::Track => "track",
        }
    }
}

pub const RMSE_HEADER: &str = "method,metric,n,rmse";

pub fn write_rmse_csv<W: Write>(curves: &[RmseCurves], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{RMSE_HEADER}")?;
    for c in curves {
        for (metric, series) in [(Metric::Selfloc, &c.selfloc), (Metric::Track, &c.track)] {
            for (i, v) in series.iter().enumerate() {
                writeln!(w, "{},{},{},{:.6}", c.method, metric.as_str(), i + 1, v)?;
            }
        }
    }
    w.flush()
}

/// Parses `rmse.csv`. Rows must be unique per `(method, metric, n)` and
/// carry finite, nonnegative values.
pub fn parse_rmse_csv<R: Read>(r: R) -> Result<Vec<RmseRow>, HarnessError> {
    let mut text = String::new();
    let mut r = r;
    r.read_to_string(&mut text).map_err(|e| HarnessError::RmseParse {
        line: 0,
        msg: format!("not UTF-8 text: {e}"),
    })?;
    let mut lines = text.split('\n');
    match lines.next() {
        Some(h) if h == RMSE_HEADER => {}
        _ => {
            return Err(HarnessError::RmseParse {
                line: 1,
                msg: format!("expected header {RMSE_HEADER}"),
            })
        }
    }
    let mut rows = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| HarnessError::RmseParse { line: line_no, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", fields.len())));
        }
        let method = Method::from_str(fields[0]).map_err(bad)?;
        let metric = match fields[1] {
            "selfloc" => Metric::Selfloc,
            "track" => Metric::Track,
            other => return Err(bad(format!("unknown metric {other:?}"))),
        };
        let n: usize = fields[2].parse().map_err(|e| bad(format!("n: {e}")))?;
        let rmse: f64 = fields[3].parse().map_err(|e| bad(format!("rmse: {e}")))?;
        if !rmse.is_finite() || rmse < 0.0 {
            return Err(bad(format!("rmse must be finite and nonnegative, got {rmse}")));
        }
        if !seen.insert((method, metric.as_str(), n)) {
            return Err(bad(format!("duplicate row {method},{},{n}", metric.as_str())));
        }
        rows.push(RmseRow { method, metric, n, rmse });
    }
    Ok(rows)
}

pub const RUNS_HEADER: &str =
    "method,run,diverged,final_selfloc_error,final_track_error,degenerate_events,fit_failures,mixture_updates,measurement_digest";

pub fn write_runs_csv<W: Write>(records: &[RunRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{RUNS_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{:.6},{:.6},{},{},{},{}",
            r.method,
            r.run,
            r.diverged(),
            r.final_selfloc_error(),
            r.final_track_error(),
            r.stats.degenerate_events,
            r.stats.fit_failures,
            r.stats.mixture_updates,
            r.measurement_digest
        )?;
    }
    w.flush()
}

/// Writes `rmse.csv`, `runs.csv` and `truth.csv` into `dir`.
pub fn export_csv(exp: &Experiment, dir: &Path) -> Result<Vec<RmseCurves>, HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let curves = rmse_curves(&exp.records);
    let create = |name: &str| -> Result<(PathBuf, BufWriter<File>), HarnessError> {
        let path = dir.join(name);
        let f = File::create(&path).map_err(io_err(&path))?;
        Ok((path, BufWriter::new(f)))
    };
    let (path, w) = create("rmse.csv")?;
    write_rmse_csv(&curves, w).map_err(io_err(&path))?;
    let (path, w) = create("runs.csv")?;
    write_runs_csv(&exp.records, w).map_err(io_err(&path))?;
    let (path, w) = create("truth.csv")?;
    exp.truth.write_csv(w).map_err(|e| match e {
        ScenarioError::Io(source) => HarnessError::Io { path: path.clone(), source },
        ScenarioError::Csv(source) => HarnessError::Csv { path: path.clone(), source },
        other => HarnessError::Scenario(other),
    })?;
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(run: usize, errors: &[(f64, f64)]) -> RunRecord {
        // One mobile sensor; its error at step n is errors[n - 1].0 along x,
        // and the single target copy's error is errors[n - 1].1 along y.
        RunRecord {
            run,
            method: Method::Coslat,
            mobile: vec![0],
            steps: errors
                .iter()
                .map(|&(es, et)| StepRecord {
                    sensor_estimates: vec![Location::new(es, 0.0)],
                    target_estimates: vec![Location::new(0.0, et)],
                    truth: vec![Location::zeros(), Location::zeros()],
                })
                .collect(),
            stats: StepStats::default(),
            released_at: vec![None],
            measurement_digest: String::new(),
        }
    }

    #[test]
    fn perfect_estimates_give_zero_curves() {
        let c = rmse_curves(&[record(0, &[(0.0, 0.0); 4])]);
        assert!(c[0].selfloc.iter().chain(&c[0].track).all(|&v| v == 0.0));
    }

    #[test]
    fn three_four_five() {
        let mut r = record(0, &[(0.0, 0.0)]);
        r.steps[0].sensor_estimates[0] = Location::new(3.0, 4.0);
        let c = rmse_curves(&[r]);
        assert_eq!(c[0].selfloc[0], 5.0);
    }

    #[test]
    fn two_run_manual_aggregation() {
        let a = record(0, &[(1.0, 2.0), (3.0, 0.0)]);
        let b = record(1, &[(2.0, 4.0), (1.0, 1.0)]);
        let c = rmse_curves(&[a, b]);
        let expect_s = [((1.0 + 4.0) / 2.0f64).sqrt(), ((9.0 + 1.0) / 2.0f64).sqrt()];
        let expect_t = [((4.0 + 16.0) / 2.0f64).sqrt(), ((0.0 + 1.0) / 2.0f64).sqrt()];
        for i in 0..2 {
            assert!((c[0].selfloc[i] - expect_s[i]).abs() < 1e-15);
            assert!((c[0].track[i] - expect_t[i]).abs() < 1e-15);
        }
        assert_eq!(c[0].included_runs, 2);
    }

    #[test]
    fn diverged_runs_are_excluded() {
        let good = record(0, &[(1.0, 1.0)]);
        let bad = record(1, &[(1.0, 500.0)]);
        let c = rmse_curves(&[good, bad]);
        assert_eq!(c[0].excluded_runs, 1);
        assert_eq!(c[0].track[0], 1.0);
    }

    #[test]
    fn empty_records_write_header_only() {
        let mut buf = Vec::new();
        write_rmse_csv(&rmse_curves(&[]), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "method,metric,n,rmse\n");
    }

    #[test]
    fn rmse_csv_round_trip() {
        let c = rmse_curves(&[record(0, &[(1.234_567_89, 0.5), (2.0, 1.0 / 3.0)])]);
        let mut buf = Vec::new();
        write_rmse_csv(&c, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(!text.contains('\r'));
        assert!(text.contains("coslat,track,2,0.333333\n"));
        let rows = parse_rmse_csv(&buf[..]).unwrap();
        assert_eq!(rows.len(), 4);
        for row in rows {
            let series = match row.metric {
                Metric::Selfloc => &c[0].selfloc,
                Metric::Track => &c[0].track,
            };
            assert!((series[row.n - 1] - row.rmse).abs() <= 1e-6);
        }
    }

    #[test]
    fn rmse_csv_rejects_malformed() {
        assert!(parse_rmse_csv("".as_bytes()).is_err());
        assert!(parse_rmse_csv("method,metric,n,rmse\ncoslat,track,1\n".as_bytes()).is_err());
        assert!(parse_rmse_csv("method,metric,n,rmse\nfoo,track,1,0.1\n".as_bytes()).is_err());
        assert!(parse_rmse_csv("method,metric,n,rmse\ncoslat,track,1,-1\n".as_bytes()).is_err());
        assert!(parse_rmse_csv("method,metric,n,rmse\ncoslat,track,1,0.1\ncoslat,track,1,0.2\n".as_bytes()).is_err());
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = SimConfig::default();
        let text = cfg.to_toml_string();
        let back = SimConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = SimConfig::from_toml_str("runs = 3\n[scenario]\nscenario = 2\n").unwrap();
        assert_eq!(cfg.runs, 3);
        assert_eq!(cfg.scenario.scenario, 2);
        assert_eq!(cfg.filter, FilterConfig::default());
        assert_eq!(cfg.scenario.sensors.len(), 7);
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(SimConfig::from_toml_str("runs = 0\n").is_err());
        assert!(SimConfig::from_toml_str("[filter]\nparticles = 1\n").is_err());
        assert!(SimConfig::from_toml_str("bogus = 1\n").is_err());
        assert!(SimConfig::from_toml_str("[scenario]\nsigma_v2 = -1.0\n").is_err());
    }

    #[test]
    fn modes_map_to_filter_settings() {
        let mut f = FilterConfig::default();
        Mode::Centralized.apply(&mut f);
        assert_eq!((f.fusion, f.messages), (Fusion::Centralized, MessageScheme::Amp));
        Mode::ExactExtrinsic.apply(&mut f);
        assert_eq!((f.fusion, f.messages), (Fusion::DistributedLc, MessageScheme::ExactExtrinsic));
    }
}
