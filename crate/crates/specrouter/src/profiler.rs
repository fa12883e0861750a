//! Timing and acceptance feedback from the engine to the scheduler.

use std::collections::BTreeMap;

use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::dist::ProbDist;
use crate::error::Result;
use crate::model::{StepKind, VerifyCostMode};
use crate::rng::SimRng;
use crate::scheduler::{pair_key, MetricsRegistry, MetricsSnapshot, SchedulerConfig};

/// Monotone simulated time in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SimClock {
    now: f64,
}

impl SimClock {
    pub fn now(&self) -> f64 {
        self.now
    }

    /// Moves the clock to `t`; earlier times are ignored.
    pub fn advance_to(&mut self, t: f64) {
        if t > self.now {
            self.now = t;
        }
    }

    pub fn advance_by(&mut self, dt: f64) {
        debug_assert!(dt >= 0.0);
        self.now += dt;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRecord {
    pub model_id: String,
    pub kind: StepKind,
    pub verify_mode: VerifyCostMode,
    pub token_count: usize,
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairTally {
    pub draft: String,
    pub verifier: String,
    pub accepted: u64,
    pub proposed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistSamples {
    pub draft: String,
    pub verifier: String,
    /// `(proposal, verifier)` distributions at the same positions.
    pub pairs: Vec<(ProbDist, ProbDist)>,
}

/// Everything one cycle observed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationBatch {
    pub timings: Vec<TimingRecord>,
    pub tallies: Vec<PairTally>,
    pub samples: Vec<DistSamples>,
    /// Final-level accepted draft count of every active row.
    pub acceptance_lengths: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairCounters {
    pub accepted: u64,
    pub proposed: u64,
}

impl PairCounters {
    pub fn rate(&self) -> Option<f64> {
        (self.proposed > 0).then(|| self.accepted as f64 / self.proposed as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfilerDiagnostics {
    pub pairs: BTreeMap<String, PairCounters>,
    pub accepted_total: u64,
    pub row_cycles: u64,
    pub dropped_records: u64,
}

impl ProfilerDiagnostics {
    /// Mean accepted draft tokens per speculative row-cycle.
    pub fn mean_acceptance_length(&self) -> Option<f64> {
        (self.row_cycles > 0).then(|| self.accepted_total as f64 / self.row_cycles as f64)
    }
}

#[derive(Debug, Clone)]
pub struct Profiler {
    registry: MetricsRegistry,
    pending: Vec<ObservationBatch>,
    noise: Option<LogNormal<f64>>,
    rng: SimRng,
    diagnostics: ProfilerDiagnostics,
}

impl Profiler {
    /// `noise_sigma` > 0 multiplies every timing by a lognormal factor.
    pub fn new(config: &SchedulerConfig, noise_sigma: f64, rng: SimRng) -> Self {
        let noise = (noise_sigma > 0.0).then(|| LogNormal::new(0.0, noise_sigma).expect("sigma is finite"));
        Self {
            registry: MetricsRegistry::new(config),
            pending: Vec::new(),
            noise,
            rng,
            diagnostics: ProfilerDiagnostics::default(),
        }
    }

    pub fn registry_mut(&mut self) -> &mut MetricsRegistry {
        &mut self.registry
    }

    pub fn record(&mut self, batch: ObservationBatch) {
        self.pending.push(batch);
    }

    /// Applies every pending batch to the metrics registry in arrival order.
    pub fn flush(&mut self) -> Result<()> {
        for batch in std::mem::take(&mut self.pending) {
            self.apply(batch)?;
        }
        Ok(())
    }

    fn apply(&mut self, batch: ObservationBatch) -> Result<()> {
        for t in batch.timings {
            if t.token_count == 0 || t.elapsed <= 0.0 {
                self.diagnostics.dropped_records += 1;
                continue;
            }
            let elapsed = match &self.noise {
                Some(n) => t.elapsed * n.sample(self.rng.inner_mut()),
                None => t.elapsed,
            };
            match (t.kind, t.verify_mode) {
                (StepKind::Prefill, _) => {}
                (StepKind::Decode, _) | (StepKind::Verify, VerifyCostMode::Linear) => {
                    self.registry.update_time(&t.model_id, elapsed / t.token_count as f64)
                }
                (StepKind::Verify, VerifyCostMode::Constant) => self.registry.update_verify_pass(&t.model_id, elapsed),
            }
        }
        for t in batch.tallies {
            let c = self.diagnostics.pairs.entry(pair_key(&t.draft, &t.verifier)).or_default();
            c.accepted += t.accepted;
            c.proposed += t.proposed;
        }
        for s in batch.samples {
            self.registry.update_simscore(&s.draft, &s.verifier, &s.pairs)?;
        }
        self.diagnostics.accepted_total += batch.acceptance_lengths.iter().sum::<u64>();
        self.diagnostics.row_cycles += batch.acceptance_lengths.len() as u64;
        Ok(())
    }

    pub fn snapshot_metrics(&self) -> MetricsSnapshot {
        self.registry.snapshot()
    }

    pub fn diagnostics(&self) -> &ProfilerDiagnostics {
        &self.diagnostics
    }
}
