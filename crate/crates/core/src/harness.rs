//! Experiment runner: builds a scenario, simulates it, runs one estimator
//! pipeline over the log and writes traces, tracks and a summary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, Matrix2};
use serde::{Deserialize, Serialize};

use crate::coupled_mhe::{AugmentedState, CoupledConfig, CoupledMhe};
use crate::ego_mhe::{EgoMhe, EgoMheConfig};
use crate::error::{Error, Result};
use crate::landmark_mhe::{step_all, LandmarkMheConfig, LandmarkTrack};
use crate::metrics::{self, ErrorTrace, StepMetrics};
use crate::models::{EgoState, LandmarkState, SensorKind};
use crate::rls_range::{rls_update, RlsState};
use crate::simulator::{
    self, build_circular_scenario, build_corridor_scenario, CircularParams, CorridorParams,
    Scenario, TrajectoryLog,
};
use crate::weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Decoupled,
    Coupled,
    Rls,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Decoupled => "decoupled",
            Method::Coupled => "coupled",
            Method::Rls => "rls",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoupled" => Ok(Method::Decoupled),
            "coupled" => Ok(Method::Coupled),
            "rls" => Ok(Method::Rls),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// Where the scenario comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum ScenarioSpec {
    Circular(CircularParams),
    Corridor(CorridorParams),
    Inline { scenario: Scenario },
    File { path: PathBuf },
}

impl ScenarioSpec {
    /// Parses a preset name or a path to a scenario JSON file.
    pub fn parse(s: &str) -> Self {
        match s {
            "circular" => ScenarioSpec::Circular(CircularParams::default()),
            "corridor" => ScenarioSpec::Corridor(CorridorParams::default()),
            path => ScenarioSpec::File { path: path.into() },
        }
    }

    pub fn build(&self) -> Result<Scenario> {
        let scenario = match self {
            ScenarioSpec::Circular(p) => build_circular_scenario(p),
            ScenarioSpec::Corridor(p) => build_corridor_scenario(p),
            ScenarioSpec::Inline { scenario } => {
                scenario.validate()?;
                Ok(scenario.clone())
            }
            ScenarioSpec::File { path } => {
                if !path.exists() {
                    return Err(Error::Config(format!(
                        "scenario file '{}' does not exist",
                        path.display()
                    )));
                }
                Scenario::load(path)
            }
        };
        scenario.map_err(|e| match e {
            Error::InvalidParam(msg) => Error::Config(msg),
            other => other,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkInit {
    /// All landmark estimates start at the origin.
    #[default]
    Origin,
    /// Estimates start at the true positions.
    Truth,
}

fn default_true() -> bool {
    true
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSpec,
    pub method: Method,
    #[serde(default)]
    pub ego: EgoMheConfig,
    #[serde(default)]
    pub landmark: LandmarkMheConfig,
    /// RLS weight; defaults to the landmark measurement weight.
    #[serde(with = "weights::rows::option", default)]
    pub rls_weight: Option<DMatrix<f64>>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Landmark-phase workers; 1 runs sequentially.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// When false, timing columns are written as zero so files are reproducible.
    #[serde(default = "default_true")]
    pub record_timing: bool,
    #[serde(default)]
    pub position_only_error: bool,
    #[serde(default)]
    pub landmark_init: LandmarkInit,
    /// Added to the true initial pose to form the estimator's initial pose.
    #[serde(default)]
    pub ego_init_offset: [f64; 3],
    #[serde(default = "default_true")]
    pub write_trajectory: bool,
}

impl ExperimentConfig {
    pub fn new(scenario: ScenarioSpec, method: Method) -> Self {
        Self {
            scenario,
            method,
            ego: EgoMheConfig::default(),
            landmark: LandmarkMheConfig::default(),
            rls_weight: None,
            out_dir: None,
            seed: None,
            workers: 1,
            record_timing: true,
            position_only_error: false,
            landmark_init: LandmarkInit::Origin,
            ego_init_offset: [0.0; 3],
            write_trajectory: true,
        }
    }

    pub fn circular(method: Method) -> Self {
        Self::new(ScenarioSpec::Circular(CircularParams::default()), method)
    }

    pub fn corridor(method: Method) -> Self {
        Self::new(ScenarioSpec::Corridor(CorridorParams::default()), method)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Builds the scenario with the seed override applied.
    pub fn scenario(&self) -> Result<Scenario> {
        let mut s = self.scenario.build()?;
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        Ok(s)
    }

    /// Checks estimator settings against the scenario.
    pub fn validate_for(&self, scenario: &Scenario) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.ego.validate().map_err(cfg_err)?;
        self.landmark.validate().map_err(cfg_err)?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.method == Method::Rls && scenario.sensor.kind != SensorKind::Range {
            return Err(Error::Config("method rls requires the range sensor model".into()));
        }
        if let Some(w) = &self.rls_weight {
            weights::require_psd("rls_weight", w, 2).map_err(cfg_err)?;
        }
        if self.ego_init_offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("ego_init_offset must be finite".into()));
        }
        Ok(())
    }
}

/// Track state of one landmark after one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub method: Method,
    pub step: usize,
    pub id: usize,
    pub est_x: f64,
    pub est_y: f64,
    pub m: u32,
    pub gated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub steps: usize,
    pub num_landmarks: usize,
    pub seed: u64,
    pub final_ego_err: f64,
    pub final_avg_lm_err: f64,
    pub mean_ego_err: f64,
    pub mean_avg_lm_err: f64,
    pub mean_t_ego_ms: f64,
    pub mean_t_lm_mean_ms: f64,
    pub mean_t_total_ms: f64,
    /// Informativity index per landmark at the final step.
    pub informativity: Vec<u32>,
    pub total_updates: u64,
    pub ego_failures: usize,
    pub landmark_failures: usize,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: TrajectoryLog,
    /// Estimates for steps `1..=T`.
    pub ego_estimates: Vec<EgoState>,
    pub landmark_estimates: Vec<Vec<LandmarkState>>,
    pub trace: ErrorTrace,
    pub metrics: Vec<StepMetrics>,
    pub tracks: Vec<TrackRow>,
    pub summary: RunSummary,
}

struct StepTimes {
    ego: Duration,
    lm_mean: Duration,
    total: Duration,
}

trait Pipeline {
    /// Processes the frame of step `k - 1` and produces estimates for step `k`.
    fn step(&mut self, k: usize, log: &TrajectoryLog, rows: &mut Vec<TrackRow>) -> StepTimes;
    fn ego(&self) -> EgoState;
    fn landmarks(&self) -> Vec<LandmarkState>;
    fn ego_failures(&self) -> usize;
    fn landmark_failures(&self) -> usize;
    fn informativity(&self) -> Vec<u32>;
    fn total_updates(&self) -> u64;
}

fn mean_duration(d: impl Iterator<Item = Duration>) -> Duration {
    let (sum, n) = d.fold((Duration::ZERO, 0u32), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        Duration::ZERO
    } else {
        sum / n
    }
}

struct Decoupled {
    ego: EgoMhe,
    tracks: Vec<LandmarkTrack>,
    cfg: LandmarkMheConfig,
    kind: SensorKind,
    pool: Option<rayon::ThreadPool>,
    lm_failures: usize,
    updates: u64,
}

impl Pipeline for Decoupled {
    fn step(&mut self, k: usize, log: &TrajectoryLog, rows: &mut Vec<TrackRow>) -> StepTimes {
        let frame = &log.frames[k - 1];
        let start = Instant::now();
        let prev = self.ego.estimate();
        if let Err(e) = self.ego.step(frame.u, frame.y_s) {
            log::debug!("step {k}: ego {e}");
        }
        let t_ego = start.elapsed();
        let outcomes = step_all(
            &mut self.tracks,
            frame,
            &prev,
            &self.cfg,
            self.kind,
            k,
            self.pool.as_ref(),
        );
        let total = start.elapsed();
        self.lm_failures += outcomes.iter().filter(|o| o.failed).count();
        self.updates += outcomes.iter().filter(|o| o.updated).count() as u64;
        for (t, o) in self.tracks.iter().zip(&outcomes) {
            rows.push(TrackRow {
                method: Method::Decoupled,
                step: k,
                id: t.id,
                est_x: t.estimate.px,
                est_y: t.estimate.py,
                m: t.informativity,
                gated: o.gated,
            });
        }
        let lm_mean = mean_duration(outcomes.iter().filter(|o| o.gated).map(|o| o.elapsed));
        StepTimes {
            ego: t_ego,
            lm_mean,
            total,
        }
    }

    fn ego(&self) -> EgoState {
        self.ego.estimate()
    }

    fn landmarks(&self) -> Vec<LandmarkState> {
        self.tracks.iter().map(|t| t.estimate).collect()
    }

    fn ego_failures(&self) -> usize {
        self.ego.failures()
    }

    fn landmark_failures(&self) -> usize {
        self.lm_failures
    }

    fn informativity(&self) -> Vec<u32> {
        self.tracks.iter().map(|t| t.informativity).collect()
    }

    fn total_updates(&self) -> u64 {
        self.updates
    }
}

struct Coupled {
    est: CoupledMhe,
    steps_done: u32,
}

impl Pipeline for Coupled {
    fn step(&mut self, k: usize, log: &TrajectoryLog, rows: &mut Vec<TrackRow>) -> StepTimes {
        let start = Instant::now();
        let ok = match self.est.step(&log.frames[k - 1]) {
            Ok(_) => true,
            Err(e) => {
                log::debug!("step {k}: coupled {e}");
                false
            }
        };
        let total = start.elapsed();
        if ok {
            self.steps_done += 1;
        }
        for (id, l) in self.est.estimate().landmarks.iter().enumerate() {
            rows.push(TrackRow {
                method: Method::Coupled,
                step: k,
                id,
                est_x: l.px,
                est_y: l.py,
                m: self.steps_done,
                gated: ok,
            });
        }
        StepTimes {
            ego: total,
            lm_mean: Duration::ZERO,
            total,
        }
    }

    fn ego(&self) -> EgoState {
        self.est.estimate().ego
    }

    fn landmarks(&self) -> Vec<LandmarkState> {
        self.est.estimate().landmarks.clone()
    }

    fn ego_failures(&self) -> usize {
        self.est.failures()
    }

    fn landmark_failures(&self) -> usize {
        0
    }

    fn informativity(&self) -> Vec<u32> {
        vec![self.steps_done; self.est.estimate().landmarks.len()]
    }

    fn total_updates(&self) -> u64 {
        self.steps_done as u64 * self.est.estimate().landmarks.len() as u64
    }
}

struct Rls {
    ego: EgoMhe,
    states: Vec<RlsState>,
    initial: Vec<LandmarkState>,
    weight: Matrix2<f64>,
}

impl Rls {
    fn estimate(&self, id: usize) -> LandmarkState {
        self.states[id].estimate.unwrap_or(self.initial[id])
    }
}

impl Pipeline for Rls {
    fn step(&mut self, k: usize, log: &TrajectoryLog, rows: &mut Vec<TrackRow>) -> StepTimes {
        let frame = &log.frames[k - 1];
        let start = Instant::now();
        let prev = self.ego.estimate();
        if let Err(e) = self.ego.step(frame.u, frame.y_s) {
            log::debug!("step {k}: ego {e}");
        }
        let t_ego = start.elapsed();
        let mut elapsed = Vec::new();
        for id in 0..self.states.len() {
            if let Some(y) = frame.measurement(id) {
                let t0 = Instant::now();
                self.states[id] = rls_update(&self.states[id], &prev, y, true, &self.weight);
                elapsed.push(t0.elapsed());
            }
        }
        let total = start.elapsed();
        for id in 0..self.states.len() {
            let est = self.estimate(id);
            rows.push(TrackRow {
                method: Method::Rls,
                step: k,
                id,
                est_x: est.px,
                est_y: est.py,
                m: self.states[id].update_count as u32,
                gated: frame.visible[id],
            });
        }
        StepTimes {
            ego: t_ego,
            lm_mean: mean_duration(elapsed.into_iter()),
            total,
        }
    }

    fn ego(&self) -> EgoState {
        self.ego.estimate()
    }

    fn landmarks(&self) -> Vec<LandmarkState> {
        (0..self.states.len()).map(|id| self.estimate(id)).collect()
    }

    fn ego_failures(&self) -> usize {
        self.ego.failures()
    }

    fn landmark_failures(&self) -> usize {
        0
    }

    fn informativity(&self) -> Vec<u32> {
        self.states.iter().map(|s| s.update_count as u32).collect()
    }

    fn total_updates(&self) -> u64 {
        self.states.iter().map(|s| s.update_count as u64).sum()
    }
}

fn build_pipeline(cfg: &ExperimentConfig, scenario: &Scenario) -> Result<Box<dyn Pipeline>> {
    let o = cfg.ego_init_offset;
    let p = scenario.initial_pose;
    let ego0 = EgoState::new(p.px + o[0], p.py + o[1], p.theta + o[2]);
    let lm0: Vec<LandmarkState> = match cfg.landmark_init {
        LandmarkInit::Origin => vec![LandmarkState::default(); scenario.num_landmarks()],
        LandmarkInit::Truth => scenario.landmarks.clone(),
    };
    let kind = scenario.sensor.kind;
    Ok(match cfg.method {
        Method::Decoupled => {
            let pool = if cfg.workers > 1 {
                Some(
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(cfg.workers)
                        .build()
                        .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
                )
            } else {
                None
            };
            let tracks = lm0
                .iter()
                .enumerate()
                .map(|(id, l)| LandmarkTrack::new(id, *l, cfg.landmark.horizon))
                .collect();
            Box::new(Decoupled {
                ego: EgoMhe::new(cfg.ego.clone(), ego0)?,
                tracks,
                cfg: cfg.landmark.clone(),
                kind,
                pool,
                lm_failures: 0,
                updates: 0,
            })
        }
        Method::Coupled => Box::new(Coupled {
            est: CoupledMhe::new(
                CoupledConfig {
                    ego: cfg.ego.clone(),
                    landmark: cfg.landmark.clone(),
                    kind,
                },
                AugmentedState {
                    ego: ego0,
                    landmarks: lm0,
                },
            )?,
            steps_done: 0,
        }),
        Method::Rls => {
            let w = cfg.rls_weight.as_ref().unwrap_or(&cfg.landmark.r);
            Box::new(Rls {
                ego: EgoMhe::new(cfg.ego.clone(), ego0)?,
                states: vec![RlsState::new(); lm0.len()],
                initial: lm0,
                weight: Matrix2::new(w[(0, 0)], w[(0, 1)], w[(1, 0)], w[(1, 1)]),
            })
        }
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Runs the configured estimator on an existing log without writing files.
pub fn run_on_log(cfg: &ExperimentConfig, log: TrajectoryLog) -> Result<RunOutput> {
    cfg.validate_for(&log.scenario)?;
    let mut pipeline = build_pipeline(cfg, &log.scenario)?;
    let t = log.steps();
    let mut ego_estimates = Vec::with_capacity(t);
    let mut landmark_estimates = Vec::with_capacity(t);
    let mut tracks = Vec::with_capacity(t * log.landmarks().len());
    let mut rows = Vec::with_capacity(t);
    for k in 1..=t {
        let times = pipeline.step(k, &log, &mut tracks);
        ego_estimates.push(pipeline.ego());
        landmark_estimates.push(pipeline.landmarks());
        let (a, b, c) = if cfg.record_timing {
            (ms(times.ego), ms(times.lm_mean), ms(times.total))
        } else {
            (0.0, 0.0, 0.0)
        };
        rows.push((a, b, c));
    }
    let trace = metrics::compute_traces(
        &ego_estimates,
        &log.truth[1..],
        &landmark_estimates,
        log.landmarks(),
        cfg.position_only_error,
    )?;
    let metrics: Vec<StepMetrics> = rows
        .iter()
        .enumerate()
        .map(|(i, &(t_ego_ms, t_lm_mean_ms, t_total_ms))| StepMetrics {
            k: i + 1,
            ego_err: trace.ego[i],
            avg_lm_err: trace.avg_landmark[i],
            t_ego_ms,
            t_lm_mean_ms,
            t_total_ms,
        })
        .collect();
    let col = |f: fn(&StepMetrics) -> f64| metrics.iter().map(f).collect::<Vec<_>>();
    let diverged = trace
        .ego
        .iter()
        .chain(&trace.avg_landmark)
        .any(|v| !v.is_finite());
    let summary = RunSummary {
        method: cfg.method,
        steps: t,
        num_landmarks: log.landmarks().len(),
        seed: log.scenario.seed,
        final_ego_err: trace.ego.last().copied().unwrap_or(0.0),
        final_avg_lm_err: trace.avg_landmark.last().copied().unwrap_or(0.0),
        mean_ego_err: mean(&trace.ego),
        mean_avg_lm_err: mean(&trace.avg_landmark),
        mean_t_ego_ms: mean(&col(|m| m.t_ego_ms)),
        mean_t_lm_mean_ms: mean(&col(|m| m.t_lm_mean_ms)),
        mean_t_total_ms: mean(&col(|m| m.t_total_ms)),
        informativity: pipeline.informativity(),
        total_updates: pipeline.total_updates(),
        ego_failures: pipeline.ego_failures(),
        landmark_failures: pipeline.landmark_failures(),
        diverged,
    };
    Ok(RunOutput {
        log,
        ego_estimates,
        landmark_estimates,
        trace,
        metrics,
        tracks,
        summary,
    })
}

pub fn write_tracks_csv<W: Write>(writer: W, rows: &[TrackRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes metrics.csv, tracks.csv, summary.json and optionally trajectory.csv into `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path, write_trajectory: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    metrics::write_metrics_csv(BufWriter::new(File::create(dir.join("metrics.csv"))?), &out.metrics)?;
    write_tracks_csv(BufWriter::new(File::create(dir.join("tracks.csv"))?), &out.tracks)?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&out.summary)?,
    )?;
    if write_trajectory {
        out.log
            .write_csv(BufWriter::new(File::create(dir.join("trajectory.csv"))?))?;
    }
    Ok(())
}

/// Simulates the configured scenario, runs the estimator and writes outputs
/// when an output directory is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let scenario = cfg.scenario()?;
    cfg.validate_for(&scenario)?;
    let log = simulator::run(&scenario)?;
    let out = run_on_log(cfg, log)?;
    if let Some(dir) = &cfg.out_dir {
        write_outputs(&out, dir, cfg.write_trajectory)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub summary: RunSummary,
    /// Mean ego error relative to the baseline (first) run.
    pub ego_err_ratio: f64,
    pub lm_err_ratio: f64,
    /// Mean total step time relative to the baseline run.
    pub time_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline: Method,
    pub entries: Vec<ComparisonEntry>,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a / b
    }
}

/// Runs every config on the data simulated from the first config's scenario.
/// Outputs of run `i` go to `<out_dir of cfg i>/<method>` when set.
pub fn run_comparison(cfgs: &[ExperimentConfig]) -> Result<ComparisonReport> {
    let first = cfgs
        .first()
        .ok_or_else(|| Error::Config("comparison needs at least one config".into()))?;
    let scenario = first.scenario()?;
    for c in cfgs {
        c.validate_for(&scenario)?;
    }
    let log = simulator::run(&scenario)?;
    let mut summaries = Vec::with_capacity(cfgs.len());
    for c in cfgs {
        let out = run_on_log(c, log.clone())?;
        if let Some(dir) = &c.out_dir {
            write_outputs(&out, &dir.join(c.method.as_str()), c.write_trajectory)?;
        }
        summaries.push(out.summary);
    }
    let base = summaries[0].clone();
    let entries = summaries
        .into_iter()
        .map(|s| ComparisonEntry {
            ego_err_ratio: ratio(s.mean_ego_err, base.mean_ego_err),
            lm_err_ratio: ratio(s.mean_avg_lm_err, base.mean_avg_lm_err),
            time_ratio: ratio(s.mean_t_total_ms, base.mean_t_total_ms),
            summary: s,
        })
        .collect();
    let report = ComparisonReport {
        baseline: first.method,
        entries,
    };
    if let Some(dir) = &first.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::NoiseSpec;

    fn small_corridor(method: Method) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::corridor(method);
        if let ScenarioSpec::Corridor(p) = &mut cfg.scenario {
            p.num_landmarks = 6;
            p.corridor_length = 6.0;
            p.steps = 60;
            p.seed = 3;
        }
        cfg.record_timing = false;
        cfg
    }

    #[test]
    fn rls_with_bearing_sensor_is_a_config_error() {
        let cfg = small_corridor(Method::Rls);
        assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn missing_scenario_file_is_a_config_error() {
        let cfg = ExperimentConfig::new(
            ScenarioSpec::parse("/nonexistent/scenario.json"),
            Method::Decoupled,
        );
        assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn decoupled_run_is_deterministic() {
        let cfg = small_corridor(Method::Decoupled);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.tracks, b.tracks);
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.metrics.len(), 60);
        assert_eq!(a.tracks.len(), 60 * 6);
        assert!(a.summary.total_updates > 0);
    }

    #[test]
    fn rls_runs_on_range_scenario() {
        let mut cfg = small_corridor(Method::Rls);
        if let ScenarioSpec::Corridor(p) = &mut cfg.scenario {
            p.sensor_kind = SensorKind::Range;
            p.noise = NoiseSpec::zero();
        }
        let out = run_experiment(&cfg).unwrap();
        assert!(out.summary.final_ego_err < 1e-9);
        // every landmark seen at least once is recovered exactly
        for (l, m) in out.summary.informativity.iter().enumerate() {
            if *m > 0 {
                let e = out.landmark_estimates.last().unwrap()[l];
                assert!(e.distance(&out.log.landmarks()[l]) < 1e-9);
            }
        }
    }

    #[test]
    fn config_json_uses_defaults() {
        let cfg = ExperimentConfig::from_json(
            r#"{"scenario": {"preset": "circular", "steps": 10}, "method": "coupled"}"#,
        )
        .unwrap();
        assert_eq!(cfg.workers, 1);
        assert!(cfg.record_timing);
        assert_eq!(cfg.ego, EgoMheConfig::default());
        match cfg.scenario {
            ScenarioSpec::Circular(p) => {
                assert_eq!(p.steps, 10);
                assert_eq!(p.num_landmarks, 50);
            }
            _ => panic!("wrong preset"),
        }
        assert!(ExperimentConfig::from_json(r#"{"method": "nope"}"#).is_err());
    }
}
