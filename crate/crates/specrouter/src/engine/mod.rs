//! The data plane: prefill, draft, cascaded verification and rollback.
//!
//! A cycle drafts `W` tokens on the first chain model, then every later
//! model verifies the previous level's emission and emits its accepted
//! prefix plus one token of its own. The final level's emission commits.
//! Each level's emitted tokens come with the verifier's distributions at
//! those positions, and the next level uses them as proposal
//! distributions; that keeps stochastic cascades exact.

mod processors;
mod router;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use processors::{draft_row, verify_row, AcceptanceRule, LevelRow, SamplingMode};
pub use router::{RoutingMode, Router, StepOutcome};

use crate::dist::{TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::pool::ModelPool;
use crate::profiler::ObservationBatch;
use crate::rng::SimRng;
use crate::state::StateId;
use crate::trace::LevelTrace;

/// Ordered model chain `[M_1, .., M_N]` ending at the target, with draft
/// window `W`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChainPlan {
    pub models: Vec<String>,
    pub window: usize,
}

impl ChainPlan {
    pub fn new<S: Into<String>>(models: impl IntoIterator<Item = S>, window: usize) -> Self {
        Self {
            models: models.into_iter().map(Into::into).collect(),
            window,
        }
    }

    pub fn target_only(target: &str) -> Self {
        Self::new([target], 1)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn label(&self) -> String {
        self.models.join(">")
    }

    /// Checks the chain ends at the target with strictly increasing
    /// capability.
    pub fn validate(&self, pool: &ModelPool) -> Result<()> {
        if self.models.last().map(String::as_str) != Some(pool.target_id()) {
            return Err(Error::InvalidChain(format!("`{}` does not end at the target", self.label())));
        }
        if self.window == 0 {
            return Err(Error::InvalidChain("window must be at least 1".into()));
        }
        let mut prev: Option<i64> = None;
        for m in &self.models {
            let rank = pool.spec(m)?.rank();
            if prev.is_some_and(|p| p >= rank) {
                return Err(Error::InvalidChain(format!(
                    "`{}` is not strictly increasing in capability",
                    self.label()
                )));
            }
            prev = Some(rank);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefillScope {
    TargetOnly,
    /// The target plus the chain selected for the first cycle.
    #[default]
    InitialChain,
    AllModels,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    #[default]
    Transient,
    /// The model is moved to a fallback device before the retry.
    Oom,
}

impl FaultKind {
    pub fn name(self) -> &'static str {
        match self {
            FaultKind::Transient => "transient",
            FaultKind::Oom => "oom",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultPolicy {
    pub failure_prob_per_step: f64,
    pub failure_kind: FaultKind,
    /// Models subject to faults; empty means all.
    pub models: Vec<String>,
}

impl FaultPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.failure_prob_per_step) {
            return Err(Error::Config("failure_prob_per_step must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn applies_to(&self, model: &str) -> bool {
        self.failure_prob_per_step > 0.0 && (self.models.is_empty() || self.models.iter().any(|m| m == model))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub sampling: SamplingMode,
    /// Intermediate verifiers append a bonus token after a full accept.
    pub intermediate_bonus: bool,
    /// Reclaim the batch-common tail after every rollback.
    pub eager_truncation: bool,
    /// Skip an intermediate level when every candidate is a single token.
    pub skip_single_token_intermediate: bool,
    pub prefill_scope: PrefillScope,
    /// Consecutive failed cycles before switching to the target-only chain.
    pub max_consecutive_failures: u32,
    /// Mutation hook for tests; anything but `standard` breaks exactness.
    #[serde(skip_serializing_if = "AcceptanceRule::is_standard")]
    pub acceptance_rule: AcceptanceRule,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingMode::Greedy,
            intermediate_bonus: true,
            eager_truncation: true,
            skip_single_token_intermediate: false,
            prefill_scope: PrefillScope::InitialChain,
            max_consecutive_failures: 3,
            acceptance_rule: AcceptanceRule::Standard,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_consecutive_failures == 0 {
            return Err(Error::Config("max_consecutive_failures must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-request generation state owned by the router while it runs.
#[derive(Debug, Clone)]
pub struct RequestContext {
    pub request_id: u64,
    pub arrival: f64,
    /// One prompt per batch row.
    pub prompts: Vec<TokenSeq>,
    pub max_new_tokens: usize,
    pub committed: Vec<TokenSeq>,
    pub finished: Vec<bool>,
    pub sampling: SamplingMode,
    pub states: BTreeMap<String, StateId>,
    /// Models removed from this request after a prefill fault.
    pub dropped: BTreeSet<String>,
    pub prefilled: bool,
    pub cycles: u64,
    pub consecutive_failures: u32,
    pub fallback: bool,
    pub prev_chain: Vec<String>,
    pub first_token_time: Option<f64>,
    pub completion_time: Option<f64>,
    pub failure: Option<String>,
    /// Chain label of every committed cycle.
    pub chain_history: Vec<String>,
    pub failed_cycles: u64,
    pub rng: SimRng,
    pub fault_rng: SimRng,
}

impl RequestContext {
    pub fn new(
        request_id: u64,
        arrival: f64,
        prompts: Vec<TokenSeq>,
        max_new_tokens: usize,
        sampling: SamplingMode,
        rng: &SimRng,
    ) -> Result<Self> {
        if prompts.is_empty() || prompts.iter().any(|p| p.is_empty()) {
            return Err(Error::Workload(format!("request {request_id} needs nonempty prompts")));
        }
        if max_new_tokens == 0 {
            return Err(Error::Workload(format!("request {request_id} has max_new_tokens 0")));
        }
        let b = prompts.len();
        Ok(Self {
            request_id,
            arrival,
            prompts,
            max_new_tokens,
            committed: vec![Vec::new(); b],
            finished: vec![false; b],
            sampling,
            states: BTreeMap::new(),
            dropped: BTreeSet::new(),
            prefilled: false,
            cycles: 0,
            consecutive_failures: 0,
            fallback: false,
            prev_chain: Vec::new(),
            first_token_time: None,
            completion_time: None,
            failure: None,
            chain_history: Vec::new(),
            failed_cycles: 0,
            rng: rng.child(&format!("request/{request_id}/sampling")),
            fault_rng: rng.child(&format!("request/{request_id}/faults")),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_done(&self) -> bool {
        self.failure.is_some() || self.finished.iter().all(|&f| f)
    }

    pub fn active(&self) -> Vec<bool> {
        self.finished.iter().map(|f| !f).collect()
    }

    /// Prompt followed by the committed tokens of `row`.
    pub fn full_context(&self, row: usize) -> TokenSeq {
        let mut v = self.prompts[row].clone();
        v.extend_from_slice(&self.committed[row]);
        v
    }

    pub fn context_len(&self, row: usize) -> usize {
        self.prompts[row].len() + self.committed[row].len()
    }

    /// Tokens committed by the longest row.
    pub fn tokens_generated(&self) -> usize {
        self.committed.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Result of one committed cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleOutcome {
    pub chain: ChainPlan,
    /// Tokens committed per row this cycle, after EOS and budget truncation.
    pub committed: Vec<TokenSeq>,
    /// Final-level emission per row before truncation.
    pub final_emitted: Vec<usize>,
    pub levels: Vec<LevelTrace>,
    pub appended: BTreeMap<String, Vec<usize>>,
    pub rolled_back: BTreeMap<String, Vec<usize>>,
    pub observations: ObservationBatch,
    pub start: f64,
    pub end: f64,
}

impl CycleOutcome {
    pub fn latency(&self) -> f64 {
        self.end - self.start
    }

    pub fn committed_counts(&self) -> Vec<usize> {
        self.committed.iter().map(Vec::len).collect()
    }
}

/// First EOS-inclusive prefix of `emitted` that fits in `budget` tokens.
pub fn truncate_emission(emitted: &[TokenId], eos: TokenId, budget: usize) -> (TokenSeq, bool) {
    let mut out = Vec::new();
    for &t in emitted.iter().take(budget) {
        out.push(t);
        if t == eos {
            return (out, true);
        }
    }
    let exhausted = out.len() == budget;
    (out, exhausted)
}
