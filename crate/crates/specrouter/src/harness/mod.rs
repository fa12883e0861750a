//! Workloads, the multi-request event loop, and run metrics.

mod experiment;
mod metrics;
mod workload;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use experiment::{
    run_experiment, run_sweep, simulate, static_two_level_grid, ExperimentOutput, Simulation, SweepCell, SweepGrid,
};
pub use metrics::{compute_metrics, equivalence_check, percentile, summarize, Divergence, Metrics, RequestRecord, Summary};
pub use workload::{generate_workload, LengthDist, LengthProfile, WorkloadRequest, WorkloadSpec};

use crate::engine::{ChainPlan, RoutingMode};
use crate::error::Result;
use crate::pool::ModelPool;
use crate::scheduler::MetricsSnapshot;
use crate::trace::SCHEMA_VERSION;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExperimentMode {
    /// Scheduler-selected chain every cycle.
    #[default]
    Specrouter,
    /// One pinned chain and window.
    SsdFixed { chain: Vec<String>, window: usize },
    /// Target model only.
    Tmo,
}

impl ExperimentMode {
    pub fn label(&self) -> String {
        match self {
            ExperimentMode::Specrouter => "specrouter".into(),
            ExperimentMode::SsdFixed { chain, window } => format!("ssd_fixed[{} W={window}]", chain.join(">")),
            ExperimentMode::Tmo => "tmo".into(),
        }
    }

    /// The pinned chain, validated against `pool`, if any.
    pub fn chain(&self, pool: &ModelPool) -> Result<Option<ChainPlan>> {
        match self {
            ExperimentMode::SsdFixed { chain, window } => {
                let plan = ChainPlan::new(chain.iter().cloned(), *window);
                plan.validate(pool)?;
                Ok(Some(plan))
            }
            _ => Ok(None),
        }
    }

    pub fn routing(&self, pool: &ModelPool) -> Result<RoutingMode> {
        Ok(match self {
            ExperimentMode::Specrouter => RoutingMode::Adaptive,
            ExperimentMode::Tmo => RoutingMode::TargetOnly,
            ExperimentMode::SsdFixed { .. } => RoutingMode::Fixed(self.chain(pool)?.expect("fixed chain")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub mean: f64,
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub cycles: u64,
    pub failed_cycles: u64,
    pub committed_tokens: u64,
    pub fallback_requests: usize,
    /// Accepted draft tokens per speculative row-cycle.
    pub mean_acceptance_length: Option<f64>,
    /// Empirical acceptance rate per `draft->verifier` pair.
    pub pair_acceptance: BTreeMap<String, f64>,
    /// Committed cycles per chain label.
    pub chain_frequencies: BTreeMap<String, u64>,
    /// Draft window over speculative cycles.
    pub draft_window: Option<WindowStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub mode: String,
    pub seed: u64,
    /// False when a fatal error cut the run short.
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub metrics: Metrics,
    pub diagnostics: Diagnostics,
    pub final_estimates: MetricsSnapshot,
    pub requests: Vec<RequestRecord>,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl RunReport {
    pub const CSV_HEADER: &'static str = "schema_version,mode,seed,valid,requests,completed,failed,makespan,total_tokens,goodput_tokens_per_s,request_throughput,ttft_mean,ttft_p50,ttft_p95,tpot_mean,tpot_excluded,tmo_tpot,eaf,slo_threshold,slo_attainment,mean_acceptance_length,cycles";

    pub fn csv_row(&self) -> String {
        let m = &self.metrics;
        let ttft = m.ttft;
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.schema_version,
            quote(&self.mode),
            self.seed,
            self.valid,
            m.requests,
            m.completed,
            m.failed,
            m.makespan,
            m.total_tokens,
            m.goodput_tokens_per_s,
            m.request_throughput,
            opt(ttft.map(|t| t.mean)),
            opt(ttft.map(|t| t.p50)),
            opt(ttft.map(|t| t.p95)),
            opt(m.tpot_mean),
            m.tpot_excluded,
            opt(m.tmo_tpot),
            opt(m.eaf),
            m.slo_threshold,
            m.slo_attainment,
            opt(self.diagnostics.mean_acceptance_length),
            self.diagnostics.cycles,
        )
        .expect("write to string");
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub(crate) fn schema() -> u32 {
    SCHEMA_VERSION
}
