//! Discrete-event simulation of a multi-processor frame pipeline.
//!
//! Stages form a chain; each runs on one processor and a processor runs one
//! stage at a time. Time is kept in integer microseconds so results are
//! exact and reproducible.
//!
//! Under [`SyncMode::Blocking`] a frame enters the pipeline only after the
//! previous frame has left it. Under [`SyncMode::FenceAsync`] frames are
//! enqueued at the bottleneck rate and overlap: a stage may start once its
//! input has arrived (previous stage done plus transfer time), its processor
//! is free and it has finished the previous frame. Among tasks able to start
//! at the same instant, the smallest (frame, stage) goes first.
//!
//! With one stage per processor the schedule is a monotone max-plus system,
//! so shorter transfers never delay anything. When stages share a processor
//! the greedy, non-preemptive choice can show timing anomalies.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, PipelineError> {
    Err(PipelineError::Config(msg.into()))
}

/// Power figures in watts; watts times milliseconds gives millijoules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Processor {
    pub name: String,
    pub active_power: f64,
    pub idle_power: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub name: String,
    pub processor: String,
    /// Milliseconds per frame.
    pub compute_time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransferMode {
    Copy { cost_ms: f64 },
    Shared,
}

impl TransferMode {
    pub fn cost_ms(self) -> f64 {
        match self {
            TransferMode::Copy { cost_ms } => cost_ms,
            TransferMode::Shared => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferEdge {
    pub from: String,
    pub to: String,
    pub mode: TransferMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    Blocking,
    FenceAsync,
}

impl SyncMode {
    pub fn parse(s: &str) -> Result<Self, PipelineError> {
        match s {
            "blocking" => Ok(SyncMode::Blocking),
            "fence_async" => Ok(SyncMode::FenceAsync),
            other => config_err(format!("unknown sync mode {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub processors: Vec<Processor>,
    pub stages: Vec<Stage>,
    /// One edge between each pair of consecutive stages.
    pub edges: Vec<TransferEdge>,
    pub sync_mode: SyncMode,
    pub n_frames: usize,
}

/// Milliseconds to integer microseconds.
pub fn ticks(ms: f64) -> u64 {
    (ms * 1000.0).round() as u64
}

fn check_time(what: &str, ms: f64) -> Result<(), PipelineError> {
    if !(ms.is_finite() && ms >= 0.0) {
        return config_err(format!(
            "{what} must be a finite non-negative time, got {ms}"
        ));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn from_json(s: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig =
            serde_json::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.stages.is_empty() {
            return config_err("pipeline has no stages");
        }
        if self.n_frames == 0 {
            return config_err("n_frames must be >= 1");
        }
        for (i, p) in self.processors.iter().enumerate() {
            if self.processors[..i].iter().any(|q| q.name == p.name) {
                return config_err(format!("duplicate processor {:?}", p.name));
            }
            for (what, w) in [
                ("active_power", p.active_power),
                ("idle_power", p.idle_power),
            ] {
                if !(w.is_finite() && w >= 0.0) {
                    return config_err(format!(
                        "processor {:?}: {what} must be finite and >= 0",
                        p.name
                    ));
                }
            }
            if p.active_power < p.idle_power {
                return config_err(format!(
                    "processor {:?}: active_power is below idle_power",
                    p.name
                ));
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            if self.stages[..i].iter().any(|q| q.name == s.name) {
                return config_err(format!("duplicate stage {:?}", s.name));
            }
            if self.processor_index(&s.processor).is_none() {
                return config_err(format!(
                    "stage {:?} uses unknown processor {:?}",
                    s.name, s.processor
                ));
            }
            check_time(&format!("stage {:?} compute_time", s.name), s.compute_time)?;
            if ticks(s.compute_time) == 0 {
                return config_err(format!(
                    "stage {:?} compute_time must be at least 1 us",
                    s.name
                ));
            }
        }
        if self.edges.len() + 1 != self.stages.len() {
            return config_err(format!(
                "a chain of {} stages needs {} edges, got {}",
                self.stages.len(),
                self.stages.len() - 1,
                self.edges.len()
            ));
        }
        for (i, e) in self.edges.iter().enumerate() {
            let (a, b) = (&self.stages[i].name, &self.stages[i + 1].name);
            if &e.from != a || &e.to != b {
                return config_err(format!(
                    "edge {i} is {:?} -> {:?}, expected {a:?} -> {b:?} (only chains are supported)",
                    e.from, e.to
                ));
            }
            check_time(&format!("edge {a:?} -> {b:?} cost"), e.mode.cost_ms())?;
        }
        Ok(())
    }

    fn processor_index(&self, name: &str) -> Option<usize> {
        self.processors.iter().position(|p| p.name == name)
    }

    pub fn stage_mut(&mut self, name: &str) -> Result<&mut Stage, PipelineError> {
        self.stages
            .iter_mut()
            .find(|s| s.name == name)
            .ok_or_else(|| PipelineError::Config(format!("unknown stage {name:?}")))
    }

    pub fn processor_mut(&mut self, name: &str) -> Result<&mut Processor, PipelineError> {
        self.processors
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| PipelineError::Config(format!("unknown processor {name:?}")))
    }
}

/// One executed stage of one frame, in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskRecord {
    pub frame: usize,
    pub stage: usize,
    pub processor: usize,
    pub start: u64,
    pub end: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProcessorUsage {
    pub name: String,
    pub busy_ms: f64,
    pub idle_ms: f64,
    pub energy_mj: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimReport {
    /// Mean time from a frame being enqueued to its last stage finishing.
    pub e2e_latency_ms: f64,
    pub max_latency_ms: f64,
    /// Steady-state frames per second.
    pub throughput_fps: f64,
    pub makespan_ms: f64,
    pub processors: Vec<ProcessorUsage>,
    pub energy_per_frame_mj: f64,
    pub tasks: Vec<TaskRecord>,
}

fn ms(t: u64) -> f64 {
    t as f64 / 1000.0
}

/// Largest per-processor sum of stage times, in ticks: the shortest sustainable frame period.
pub fn bottleneck_period(cfg: &PipelineConfig) -> Result<u64, PipelineError> {
    cfg.validate()?;
    let mut load = vec![0u64; cfg.processors.len()];
    for s in &cfg.stages {
        load[cfg.processor_index(&s.processor).expect("validated")] += ticks(s.compute_time);
    }
    Ok(load.into_iter().max().unwrap_or(0))
}

/// Run the pipeline for `cfg.n_frames` frames.
///
/// Frame k is enqueued when the previous frame completes (blocking) or at
/// `k * bottleneck_period` (fence-async). Transfers add latency but occupy
/// no processor, and inter-stage queues are unbounded.
pub fn simulate(cfg: &PipelineConfig) -> Result<SimReport, PipelineError> {
    let period = bottleneck_period(cfg)?;
    let ns = cfg.stages.len();
    let nf = cfg.n_frames;
    let dur: Vec<u64> = cfg.stages.iter().map(|s| ticks(s.compute_time)).collect();
    let copy: Vec<u64> = cfg.edges.iter().map(|e| ticks(e.mode.cost_ms())).collect();
    let proc_of: Vec<usize> = cfg
        .stages
        .iter()
        .map(|s| cfg.processor_index(&s.processor).expect("validated"))
        .collect();

    let mut enqueue = vec![0u64; nf];
    let mut end = vec![vec![0u64; ns]; nf];
    let mut next = vec![0usize; ns];
    let mut proc_free = vec![0u64; cfg.processors.len()];
    let mut tasks = Vec::with_capacity(nf * ns);

    while tasks.len() < nf * ns {
        let mut best: Option<(u64, usize, usize)> = None;
        for i in 0..ns {
            let k = next[i];
            if k >= nf {
                continue;
            }
            let mut t = proc_free[proc_of[i]];
            if i == 0 {
                let arrival = match cfg.sync_mode {
                    SyncMode::FenceAsync => k as u64 * period,
                    SyncMode::Blocking if k == 0 => 0,
                    SyncMode::Blocking => {
                        if next[ns - 1] < k {
                            continue;
                        }
                        end[k - 1][ns - 1]
                    }
                };
                t = t.max(arrival);
            } else {
                if next[i - 1] <= k {
                    continue;
                }
                t = t.max(end[k][i - 1] + copy[i - 1]);
            }
            if k > 0 {
                t = t.max(end[k - 1][i]);
            }
            if best.is_none_or(|b| (t, k, i) < b) {
                best = Some((t, k, i));
            }
        }
        let (t, k, i) = best.expect("some task is always schedulable");
        if i == 0 {
            enqueue[k] = match cfg.sync_mode {
                SyncMode::FenceAsync => k as u64 * period,
                SyncMode::Blocking => t,
            };
        }
        end[k][i] = t + dur[i];
        proc_free[proc_of[i]] = end[k][i];
        next[i] += 1;
        tasks.push(TaskRecord {
            frame: k,
            stage: i,
            processor: proc_of[i],
            start: t,
            end: end[k][i],
        });
    }

    let latencies: Vec<u64> = (0..nf).map(|k| end[k][ns - 1] - enqueue[k]).collect();
    let e2e_latency_ms = latencies.iter().map(|&l| ms(l)).sum::<f64>() / nf as f64;
    let max_latency_ms = ms(*latencies.iter().max().expect("n_frames >= 1"));
    let mut done: Vec<u64> = (0..nf).map(|k| end[k][ns - 1]).collect();
    done.sort_unstable();
    let throughput_fps = steady_throughput(&done, e2e_latency_ms);

    let makespan = tasks.iter().map(|t| t.end).max().unwrap_or(0);
    let processors: Vec<ProcessorUsage> = cfg
        .processors
        .iter()
        .enumerate()
        .map(|(p, spec)| {
            let busy: u64 = tasks
                .iter()
                .filter(|t| t.processor == p)
                .map(|t| t.end - t.start)
                .sum();
            let idle = makespan - busy;
            ProcessorUsage {
                name: spec.name.clone(),
                busy_ms: ms(busy),
                idle_ms: ms(idle),
                energy_mj: ms(busy) * spec.active_power + ms(idle) * spec.idle_power,
            }
        })
        .collect();
    let energy_per_frame_mj = processors.iter().map(|p| p.energy_mj).sum::<f64>() / nf as f64;
    Ok(SimReport {
        e2e_latency_ms,
        max_latency_ms,
        throughput_fps,
        makespan_ms: ms(makespan),
        processors,
        energy_per_frame_mj,
        tasks,
    })
}

/// Completions per second over the last half of the (sorted) completion times.
fn steady_throughput(done: &[u64], latency_ms: f64) -> f64 {
    let m = (done.len() / 2).max(2);
    if done.len() < 2 {
        return if latency_ms > 0.0 {
            1000.0 / latency_ms
        } else {
            f64::INFINITY
        };
    }
    let tail = &done[done.len() - m..];
    let span = ms(tail[m - 1] - tail[0]);
    if span == 0.0 {
        f64::INFINITY
    } else {
        1000.0 * (m - 1) as f64 / span
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub latency_ms: f64,
    pub throughput_fps: f64,
    pub energy_per_frame_mj: f64,
    pub latency_ratio: f64,
    pub throughput_ratio: f64,
    pub energy_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
}

impl CompareTable {
    pub fn row(&self, label: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "label,latency_ms,throughput_fps,energy_per_frame_mj,latency_ratio,throughput_ratio,energy_ratio\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.3},{:.3},{:.3},{:.4},{:.4},{:.4}",
                r.label,
                r.latency_ms,
                r.throughput_fps,
                r.energy_per_frame_mj,
                r.latency_ratio,
                r.throughput_ratio,
                r.energy_ratio
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut s = format!(
            "{:<width$}  {:>10}  {:>10}  {:>12}  {:>8}  {:>8}  {:>8}\n",
            "label", "latency", "fps", "mJ/frame", "lat x", "fps x", "energy x"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>10.3}  {:>10.3}  {:>12.3}  {:>8.3}  {:>8.3}  {:>8.3}",
                r.label,
                r.latency_ms,
                r.throughput_fps,
                r.energy_per_frame_mj,
                r.latency_ratio,
                r.throughput_ratio,
                r.energy_ratio
            );
        }
        s
    }
}

/// Simulate each config; ratios are relative to the first row.
pub fn compare(configs: &[(String, PipelineConfig)]) -> Result<CompareTable, PipelineError> {
    let reports = configs
        .iter()
        .map(|(l, c)| Ok((l.clone(), simulate(c)?)))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let Some((_, base)) = reports.first() else {
        return Ok(CompareTable::default());
    };
    let (bl, bt, be) = (
        base.e2e_latency_ms,
        base.throughput_fps,
        base.energy_per_frame_mj,
    );
    let rows = reports
        .iter()
        .map(|(label, r)| CompareRow {
            label: label.clone(),
            latency_ms: r.e2e_latency_ms,
            throughput_fps: r.throughput_fps,
            energy_per_frame_mj: r.energy_per_frame_mj,
            latency_ratio: r.e2e_latency_ms / bl,
            throughput_ratio: r.throughput_fps / bt,
            energy_ratio: r.energy_per_frame_mj / be,
        })
        .collect();
    Ok(CompareTable { rows })
}

/// Return `cfg` with one parameter set from its textual value.
///
/// Parameters: `copy_cost` (every edge becomes a copy of that many ms),
/// `transfer` (`copy` keeps existing costs, `shared` removes them),
/// `sync_mode`, `n_frames`, `stage_time:<stage>`, `active_power:<processor>`
/// and `idle_power:<processor>`.
pub fn with_param(
    cfg: &PipelineConfig,
    param: &str,
    value: &str,
) -> Result<PipelineConfig, PipelineError> {
    let mut c = cfg.clone();
    let num = || -> Result<f64, PipelineError> {
        value
            .parse::<f64>()
            .map_err(|_| PipelineError::Config(format!("{param}: {value:?} is not a number")))
    };
    match param.split_once(':') {
        None => match param {
            "copy_cost" => {
                let v = num()?;
                c.edges
                    .iter_mut()
                    .for_each(|e| e.mode = TransferMode::Copy { cost_ms: v });
            }
            "transfer" => match value {
                "shared" => c
                    .edges
                    .iter_mut()
                    .for_each(|e| e.mode = TransferMode::Shared),
                "copy" => {
                    let orig = cfg.edges.iter().map(|e| e.mode);
                    for (e, m) in c.edges.iter_mut().zip(orig) {
                        e.mode = TransferMode::Copy {
                            cost_ms: m.cost_ms(),
                        };
                    }
                }
                other => {
                    return config_err(format!("transfer must be copy or shared, got {other:?}"))
                }
            },
            "sync_mode" => c.sync_mode = SyncMode::parse(value)?,
            "n_frames" => {
                c.n_frames = value.parse().map_err(|_| {
                    PipelineError::Config(format!("n_frames: {value:?} is not a count"))
                })?
            }
            other => return config_err(format!("unknown sweep parameter {other:?}")),
        },
        Some(("stage_time", stage)) => c.stage_mut(stage)?.compute_time = num()?,
        Some(("active_power", p)) => c.processor_mut(p)?.active_power = num()?,
        Some(("idle_power", p)) => c.processor_mut(p)?.idle_power = num()?,
        Some(_) => return config_err(format!("unknown sweep parameter {param:?}")),
    }
    c.validate()?;
    Ok(c)
}

/// Simulate `cfg` once per value of `param`.
pub fn sweep(
    cfg: &PipelineConfig,
    param: &str,
    values: &[String],
) -> Result<Vec<(String, SimReport)>, PipelineError> {
    values
        .iter()
        .map(|v| Ok((v.clone(), simulate(&with_param(cfg, param, v)?)?)))
        .collect()
}

/// A named pipeline configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub label: String,
    pub config: PipelineConfig,
}

/// Several scenarios compared against the first, with a free-text note on their origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub comment: String,
    pub scenarios: Vec<Scenario>,
}

impl ScenarioFile {
    pub fn from_json(s: &str) -> Result<Self, PipelineError> {
        let f: ScenarioFile =
            serde_json::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))?;
        if f.scenarios.is_empty() {
            return config_err("scenario file lists no scenarios");
        }
        for sc in &f.scenarios {
            sc.config.validate().map_err(|PipelineError::Config(m)| {
                PipelineError::Config(format!("{}: {m}", sc.label))
            })?;
        }
        Ok(f)
    }

    pub fn get(&self, label: &str) -> Option<&PipelineConfig> {
        self.scenarios
            .iter()
            .find(|s| s.label == label)
            .map(|s| &s.config)
    }

    pub fn compare(&self) -> Result<CompareTable, PipelineError> {
        let named: Vec<(String, PipelineConfig)> = self
            .scenarios
            .iter()
            .map(|s| (s.label.clone(), s.config.clone()))
            .collect();
        compare(&named)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Throughput,
    Latency,
    EnergyPerFrame,
}

impl Metric {
    pub fn of(self, r: &SimReport) -> f64 {
        match self {
            Metric::Throughput => r.throughput_fps,
            Metric::Latency => r.e2e_latency_ms,
            Metric::EnergyPerFrame => r.energy_per_frame_mj,
        }
    }
}

/// Bisect a numeric parameter on `[lo, hi]` until `metric` hits `target`.
///
/// The metric must be monotone in the parameter over the interval and the
/// target must lie between its values at the two ends.
pub fn calibrate(
    cfg: &PipelineConfig,
    param: &str,
    metric: Metric,
    target: f64,
    mut lo: f64,
    mut hi: f64,
) -> Result<f64, PipelineError> {
    let eval = |x: f64| -> Result<f64, PipelineError> {
        Ok(metric.of(&simulate(&with_param(cfg, param, &x.to_string())?)?) - target)
    };
    let (flo, fhi) = (eval(lo)?, eval(hi)?);
    if flo.signum() == fhi.signum() && flo != 0.0 && fhi != 0.0 {
        return config_err(format!(
            "target {target} is not bracketed by {param} in [{lo}, {hi}]"
        ));
    }
    let rising = fhi > flo;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let f = eval(mid)?;
        if f == 0.0 {
            return Ok(mid);
        }
        if (f < 0.0) == rising {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
