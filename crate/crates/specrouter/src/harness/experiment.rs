use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, RequestRecord};
use super::workload::generate_workload;
use super::{schema, Diagnostics, ExperimentMode, RunReport, WindowStats};
use crate::config::RunConfig;
use crate::engine::{RequestContext, Router, StepOutcome};
use crate::error::{Error, Result};
use crate::pool::ModelPool;
use crate::rng::SimRng;
use crate::scheduler::MetricsSnapshot;
use crate::trace::{TraceEvent, TraceLevel};

/// Raw result of one simulated run.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub records: Vec<RequestRecord>,
    pub trace: Vec<TraceEvent>,
    pub diagnostics: Diagnostics,
    pub final_estimates: MetricsSnapshot,
    /// Set when a fatal pool error stopped the run early.
    pub fatal: Option<String>,
}

/// Runs the configured workload under `mode` on a fresh pool. Requests are
/// independent event streams on one clock; each event executes one whole
/// prefill or cycle, and operations on a busy device queue behind it.
pub fn simulate(cfg: &RunConfig, mode: &ExperimentMode, trace: TraceLevel) -> Result<Simulation> {
    let pool = ModelPool::new(&cfg.pool)?;
    let vocab = pool.vocabulary();
    let routing = mode.routing(&pool)?;
    let rng = SimRng::new(cfg.seed, "run");
    let mut router = Router::new(
        pool,
        cfg.scheduler.clone(),
        cfg.engine.clone(),
        cfg.faults.clone(),
        routing,
        cfg.profiler.measurement_noise,
        trace,
        &rng,
    )?;
    let workload = generate_workload(&cfg.workload, &vocab, cfg.seed)?;
    let mut reqs = Vec::with_capacity(workload.len());
    for w in workload {
        reqs.push(RequestContext::new(
            w.request_id,
            w.arrival,
            w.prompts,
            w.max_new_tokens,
            cfg.engine.sampling,
            &rng,
        )?);
    }

    let mut perturbations = cfg.perturbations.clone();
    perturbations.sort_by(|a, b| a.at_time.total_cmp(&b.at_time));
    let mut next_perturbation = 0;

    // arrival times are non-negative, so their bit patterns order correctly
    let mut queue = BinaryHeap::new();
    let mut seq = 0u64;
    for (i, r) in reqs.iter().enumerate() {
        queue.push(Reverse((r.arrival.to_bits(), seq, i)));
        seq += 1;
    }

    let mut diag = Diagnostics::default();
    let mut windows: Vec<usize> = Vec::new();
    let mut fatal = None;
    while let Some(Reverse((bits, _, i))) = queue.pop() {
        let now = f64::from_bits(bits);
        while next_perturbation < perturbations.len() && perturbations[next_perturbation].at_time <= now {
            let p = &perturbations[next_perturbation];
            router.pool_mut().set_latency_factor(&p.model_id, p.factor)?;
            router.trace_mut().push(TraceEvent::Perturbation {
                time: p.at_time,
                model: p.model_id.clone(),
                factor: p.factor,
            });
            next_perturbation += 1;
        }
        match router.step_detailed(&mut reqs[i], now) {
            Ok((outcome, cycle)) => {
                if let Some(c) = cycle {
                    diag.cycles += 1;
                    diag.committed_tokens += c.committed.iter().map(|t| t.len() as u64).sum::<u64>();
                    if c.chain.len() > 1 {
                        windows.push(c.chain.window);
                    }
                }
                if let StepOutcome::Continue(t) = outcome {
                    queue.push(Reverse((t.to_bits(), seq, i)));
                    seq += 1;
                }
            }
            Err(e) => {
                fatal = Some(e.to_string());
                break;
            }
        }
    }

    let records: Vec<RequestRecord> = reqs.iter().map(RequestRecord::from).collect();
    for r in &records {
        for c in &r.chains {
            *diag.chain_frequencies.entry(c.clone()).or_default() += 1;
        }
        diag.failed_cycles += r.failed_cycles;
        diag.fallback_requests += usize::from(r.fallback);
    }
    let pd = router.profiler().diagnostics();
    diag.mean_acceptance_length = pd.mean_acceptance_length();
    diag.pair_acceptance = pd
        .pairs
        .iter()
        .filter_map(|(k, c)| c.rate().map(|r| (k.clone(), r)))
        .collect();
    if !windows.is_empty() {
        diag.draft_window = Some(WindowStats {
            mean: windows.iter().sum::<usize>() as f64 / windows.len() as f64,
            min: *windows.iter().min().expect("nonempty"),
            max: *windows.iter().max().expect("nonempty"),
        });
    }
    Ok(Simulation {
        records,
        final_estimates: router.profiler().snapshot_metrics(),
        trace: router.take_trace(),
        diagnostics: diag,
        fatal,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: RunReport,
    pub trace: Vec<TraceEvent>,
    /// Mean time-per-token of the target-only baseline, when computed.
    pub tmo_tpot: Option<f64>,
}

fn report_from(cfg: &RunConfig, sim: Simulation, tmo_tpot: Option<f64>) -> (RunReport, Vec<TraceEvent>) {
    let metrics = compute_metrics(&sim.records, tmo_tpot, cfg.report.slo_threshold);
    let report = RunReport {
        schema_version: schema(),
        mode: cfg.mode.label(),
        seed: cfg.seed,
        valid: sim.fatal.is_none(),
        error: sim.fatal,
        metrics,
        diagnostics: sim.diagnostics,
        final_estimates: sim.final_estimates,
        requests: sim.records,
    };
    (report, sim.trace)
}

fn baseline_tpot(cfg: &RunConfig) -> Result<Option<f64>> {
    let base = simulate(cfg, &ExperimentMode::Tmo, TraceLevel::Off)?;
    if base.fatal.is_some() {
        return Ok(None);
    }
    Ok(compute_metrics(&base.records, None, cfg.report.slo_threshold).tpot_mean)
}

/// Runs `cfg` and, unless disabled, a target-only baseline over the same
/// workload for the acceleration factor.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let sim = simulate(cfg, &cfg.mode, cfg.trace)?;
    let tmo_tpot = if cfg.mode == ExperimentMode::Tmo {
        compute_metrics(&sim.records, None, cfg.report.slo_threshold).tpot_mean
    } else if cfg.report.tmo_baseline {
        baseline_tpot(cfg)?
    } else {
        None
    };
    let (report, trace) = report_from(cfg, sim, tmo_tpot);
    Ok(ExperimentOutput {
        report,
        trace,
        tmo_tpot,
    })
}

/// Cartesian grid of parameters; an empty list keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    /// Pinned chains; runs are static when given.
    pub chains: Vec<Vec<String>>,
    pub window: Vec<usize>,
    pub arrival_rate: Vec<f64>,
    pub batch_size: Vec<usize>,
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.chains.is_empty() && self.window.is_empty() && self.arrival_rate.is_empty() && self.batch_size.is_empty()
    }
}

/// Every two-level chain `[draft, target]` crossed with `windows`.
pub fn static_two_level_grid(pool: &ModelPool, windows: impl IntoIterator<Item = usize>) -> SweepGrid {
    let target = pool.target_id();
    let tpos = pool
        .models_by_capability()
        .iter()
        .position(|m| m == target)
        .expect("target registered");
    SweepGrid {
        chains: pool.models_by_capability()[..tpos]
            .iter()
            .map(|d| vec![d.clone(), target.to_string()])
            .collect(),
        window: windows.into_iter().collect(),
        ..SweepGrid::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub mode: String,
    pub chain: Option<Vec<String>>,
    pub window: Option<usize>,
    pub arrival_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub report: Option<RunReport>,
    pub error: Option<String>,
}

impl SweepCell {
    pub fn tpot(&self) -> Option<f64> {
        self.report
            .as_ref()
            .filter(|r| r.valid)
            .and_then(|r| r.metrics.tpot_mean)
    }
}

fn expand(base: &RunConfig, grid: &SweepGrid) -> Vec<(SweepCell, RunConfig)> {
    fn axis<T: Clone>(v: &[T]) -> Vec<Option<T>> {
        if v.is_empty() {
            vec![None]
        } else {
            v.iter().cloned().map(Some).collect()
        }
    }
    let mut out = Vec::new();
    for chain in axis(&grid.chains) {
        for window in axis(&grid.window) {
            for rate in axis(&grid.arrival_rate) {
                for batch in axis(&grid.batch_size) {
                    let mut cfg = base.clone();
                    if let Some(w) = window {
                        cfg.scheduler.window = w;
                    }
                    match (&chain, &cfg.mode) {
                        (Some(c), _) => {
                            cfg.mode = ExperimentMode::SsdFixed {
                                chain: c.clone(),
                                window: cfg.scheduler.window,
                            }
                        }
                        (None, ExperimentMode::SsdFixed { chain, .. }) => {
                            cfg.mode = ExperimentMode::SsdFixed {
                                chain: chain.clone(),
                                window: cfg.scheduler.window,
                            }
                        }
                        _ => {}
                    }
                    if let Some(r) = rate {
                        cfg.workload.arrival_rate = r;
                    }
                    if let Some(b) = batch {
                        cfg.workload.batch_size = b;
                    }
                    cfg.trace = TraceLevel::Off;
                    let cell = SweepCell {
                        index: out.len(),
                        mode: cfg.mode.label(),
                        chain: chain.clone(),
                        window,
                        arrival_rate: rate,
                        batch_size: batch,
                        report: None,
                        error: None,
                    };
                    out.push((cell, cfg));
                }
            }
        }
    }
    out
}

/// Runs every grid cell in parallel. Cell failures are recorded in the
/// cell; the target-only baseline is computed once per distinct workload.
pub fn run_sweep(base: &RunConfig, grid: &SweepGrid) -> Result<Vec<SweepCell>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let cells = expand(base, grid);
    let key = |c: &RunConfig| (c.workload.arrival_rate.to_bits(), c.workload.batch_size);
    let mut workloads: BTreeMap<(u64, usize), RunConfig> = BTreeMap::new();
    for (_, c) in &cells {
        workloads.entry(key(c)).or_insert_with(|| c.clone());
    }
    let baselines: BTreeMap<(u64, usize), Option<f64>> = if base.report.tmo_baseline {
        workloads
            .par_iter()
            .map(|(k, c)| (*k, baseline_tpot(c).ok().flatten()))
            .collect()
    } else {
        BTreeMap::new()
    };
    Ok(cells
        .into_par_iter()
        .map(|(mut cell, cfg)| {
            let run = cfg
                .validate()
                .and_then(|_| simulate(&cfg, &cfg.mode, TraceLevel::Off));
            match run {
                Ok(sim) => {
                    let base_tpot = baselines.get(&key(&cfg)).copied().flatten();
                    cell.report = Some(report_from(&cfg, sim, base_tpot).0);
                }
                Err(e) => cell.error = Some(e.to_string()),
            }
            cell
        })
        .collect())
}
