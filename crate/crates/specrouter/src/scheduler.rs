//! Chain scheduling: EMA metrics, acceptance estimation, latency prediction
//! and minimum-latency chain selection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dist::{dtv, ProbDist};
use crate::engine::ChainPlan;
use crate::error::{Error, Result};
use crate::formulas::expected_accepted_strict;
use crate::model::VerifyCostMode;
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaMapping {
    /// `α = clamp(SimScore, 0, 1)`.
    #[default]
    IdentityClamp,
    /// `α = 1 / (1 + exp(−k (SimScore − s0)))`.
    Logistic { k: f64, s0: f64 },
}

impl AlphaMapping {
    pub fn apply(&self, simscore: f64) -> f64 {
        match *self {
            AlphaMapping::IdentityClamp => simscore.clamp(0.0, 1.0),
            AlphaMapping::Logistic { k, s0 } => 1.0 / (1.0 + (-k * (simscore - s0)).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub alpha_time: f64,
    pub alpha_sim: f64,
    /// Draft window `W`.
    pub window: usize,
    /// Longest chain considered, target included.
    pub max_chain_len: usize,
    pub candidate_cap: usize,
    /// A challenger must beat the incumbent by this fraction; 0 disables.
    pub hysteresis_delta: f64,
    pub alpha_mapping: AlphaMapping,
    /// SimScore assumed for never-observed pairs.
    pub prior_simscore: f64,
    /// Probability of picking a uniformly random candidate instead.
    pub exploration: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            alpha_time: 0.2,
            alpha_sim: 0.1,
            window: 4,
            max_chain_len: 4,
            candidate_cap: 64,
            hysteresis_delta: 0.0,
            alpha_mapping: AlphaMapping::IdentityClamp,
            prior_simscore: 0.5,
            exploration: 0.0,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x <= 1.0;
        if !in_unit(self.alpha_time) || !in_unit(self.alpha_sim) {
            return Err(Error::Config("EMA weights must lie in (0, 1]".into()));
        }
        if self.window == 0 || self.max_chain_len == 0 || self.candidate_cap == 0 {
            return Err(Error::Config("window, max_chain_len and candidate_cap must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.exploration) || self.hysteresis_delta < 0.0 {
            return Err(Error::Config("exploration must lie in [0, 1] and hysteresis_delta be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.prior_simscore) {
            return Err(Error::Config("prior_simscore must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Exponential moving average with first-observation initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ema {
    pub value: f64,
    pub count: u64,
}

impl Ema {
    pub fn first(value: f64) -> Self {
        Self { value, count: 1 }
    }

    pub fn update(&mut self, weight: f64, measured: f64) {
        if self.count == 0 {
            self.value = measured;
        } else {
            self.value = weight * measured + (1.0 - weight) * self.value;
        }
        self.count += 1;
    }
}

pub fn pair_key(draft: &str, verifier: &str) -> String {
    format!("{draft}->{verifier}")
}

/// Point-in-time copy of everything the scheduler reads.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    /// Per-token decode time `T_i`.
    pub ema_time: BTreeMap<String, Ema>,
    /// Time of one constant-mode verification pass.
    pub ema_verify_pass: BTreeMap<String, Ema>,
    /// EMA of mean DTV, keyed by [`pair_key`].
    pub ema_dtv: BTreeMap<String, Ema>,
    pub verify_modes: BTreeMap<String, VerifyCostMode>,
    pub prior_simscore: f64,
    pub alpha_mapping: AlphaMapping,
}

impl MetricsSnapshot {
    /// Current `T_i`, including an unobserved nominal prior.
    pub fn time(&self, model: &str) -> Option<f64> {
        self.ema_time.get(model).map(|e| e.value)
    }

    /// `1 − EMA(DTV)`, or `None` when the pair was never observed.
    pub fn simscore(&self, draft: &str, verifier: &str) -> Option<f64> {
        self.ema_dtv
            .get(&pair_key(draft, verifier))
            .filter(|e| e.count > 0)
            .map(|e| 1.0 - e.value)
    }

    /// Estimated acceptance probability of `verifier` over `draft`'s tokens;
    /// unobserved pairs use the prior.
    pub fn estimate_alpha(&self, draft: &str, verifier: &str) -> f64 {
        let s = self.simscore(draft, verifier).unwrap_or(self.prior_simscore);
        self.alpha_mapping.apply(s)
    }

    fn verify_cost(&self, model: &str, candidates: f64) -> Option<f64> {
        match self.verify_modes.get(model).copied().unwrap_or_default() {
            VerifyCostMode::Constant => self
                .ema_verify_pass
                .get(model)
                .map(|e| e.value)
                .or_else(|| self.time(model)),
            VerifyCostMode::Linear => self.time(model).map(|t| candidates * t),
        }
    }
}

/// Mutable EMA store fed by the profiler.
#[derive(Debug, Clone)]
pub struct MetricsRegistry {
    alpha_time: f64,
    alpha_sim: f64,
    snapshot: MetricsSnapshot,
}

impl MetricsRegistry {
    pub fn new(config: &SchedulerConfig) -> Self {
        Self {
            alpha_time: config.alpha_time,
            alpha_sim: config.alpha_sim,
            snapshot: MetricsSnapshot {
                prior_simscore: config.prior_simscore,
                alpha_mapping: config.alpha_mapping,
                ..MetricsSnapshot::default()
            },
        }
    }

    pub fn set_verify_mode(&mut self, model: &str, mode: VerifyCostMode) {
        self.snapshot.verify_modes.insert(model.to_string(), mode);
    }

    /// Installs nominal per-token and pass times that the first real
    /// observation overwrites.
    pub fn seed_time(&mut self, model: &str, per_token: f64, pass: f64) {
        let prior = |value| Ema { value, count: 0 };
        self.snapshot.ema_time.entry(model.to_string()).or_insert(prior(per_token));
        self.snapshot.ema_verify_pass.entry(model.to_string()).or_insert(prior(pass));
    }

    /// `T_new = α·T_measured + (1 − α)·T_old`; the first observation
    /// initializes.
    pub fn update_time(&mut self, model: &str, measured_per_token: f64) {
        debug_assert!(measured_per_token > 0.0);
        self.snapshot
            .ema_time
            .entry(model.to_string())
            .or_insert(Ema { value: 0.0, count: 0 })
            .update(self.alpha_time, measured_per_token);
    }

    pub fn update_verify_pass(&mut self, model: &str, measured_pass: f64) {
        self.snapshot
            .ema_verify_pass
            .entry(model.to_string())
            .or_insert(Ema { value: 0.0, count: 0 })
            .update(self.alpha_time, measured_pass);
    }

    /// Folds the batch-mean DTV of `(proposal, verifier)` pairs into the
    /// pair's EMA.
    pub fn update_simscore(&mut self, draft: &str, verifier: &str, pairs: &[(ProbDist, ProbDist)]) -> Result<()> {
        if pairs.is_empty() {
            return Ok(());
        }
        let mut total = 0.0;
        for (q, p) in pairs {
            total += dtv(p, q)?;
        }
        let mean = total / pairs.len() as f64;
        self.snapshot
            .ema_dtv
            .entry(pair_key(draft, verifier))
            .or_insert(Ema { value: 0.0, count: 0 })
            .update(self.alpha_sim, mean);
        Ok(())
    }

    /// Seeds pairwise similarities from prefill distributions. `dists[m]`
    /// holds model `m`'s distributions at shared positions; `order` lists
    /// the models in ascending capability. Pairs never observed before are
    /// initialized outright; known pairs receive one EMA update.
    pub fn bootstrap(&mut self, order: &[String], dists: &BTreeMap<String, Vec<ProbDist>>) -> Result<()> {
        let present: Vec<&String> = order.iter().filter(|m| dists.contains_key(*m)).collect();
        for (i, a) in present.iter().enumerate() {
            for b in &present[i + 1..] {
                let (da, db) = (&dists[*a], &dists[*b]);
                let n = da.len().min(db.len());
                if n == 0 {
                    continue;
                }
                let pairs: Vec<(ProbDist, ProbDist)> =
                    da[..n].iter().cloned().zip(db[..n].iter().cloned()).collect();
                self.update_simscore(a, b, &pairs)?;
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        self.snapshot.clone()
    }

    pub fn peek(&self) -> &MetricsSnapshot {
        &self.snapshot
    }
}

/// Every capability-increasing chain ending at `target`, at most
/// `max_chain_len` long, ordered by length then ids and capped.
///
/// `models_by_capability` must be in ascending capability order.
pub fn generate_candidates(
    models_by_capability: &[String],
    target: &str,
    config: &SchedulerConfig,
) -> Vec<ChainPlan> {
    let Some(tpos) = models_by_capability.iter().position(|m| m == target) else {
        return Vec::new();
    };
    let below = &models_by_capability[..tpos];
    let max_drafts = config.max_chain_len.saturating_sub(1).min(below.len());
    let mut chains: Vec<Vec<String>> = Vec::new();
    // subsets as bitmasks keep the capability order of `below`
    let n = below.len();
    for k in 0..=max_drafts {
        let mut level: Vec<Vec<String>> = Vec::new();
        for mask in 0u64..(1u64 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let mut chain: Vec<String> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| below[i].clone()).collect();
            chain.push(target.to_string());
            level.push(chain);
        }
        level.sort();
        chains.extend(level);
        if chains.len() >= config.candidate_cap {
            break;
        }
    }
    chains.truncate(config.candidate_cap);
    chains
        .into_iter()
        .map(|models| ChainPlan {
            models,
            window: config.window,
        })
        .collect()
}

/// Expected seconds per committed token for `chain`.
///
/// The draft costs `W·T_1`; every later level runs one verification pass on
/// the previous level's emission. A level receiving `m` candidates accepts
/// `α(1 − α^m)/(1 − α)` of them in expectation and emits one more token of
/// its own (always with intermediate bonus tokens, otherwise only after a
/// rejection). The final level's emission is what commits.
pub fn predict_effective_time(
    chain: &ChainPlan,
    snapshot: &MetricsSnapshot,
    intermediate_bonus: bool,
) -> Result<f64> {
    let missing = |m: &str| Error::InvalidChain(format!("no latency estimate for `{m}`"));
    let models = &chain.models;
    let Some(first) = models.first() else {
        return Err(Error::InvalidChain("empty chain".into()));
    };
    if models.len() == 1 {
        return snapshot.time(first).ok_or_else(|| missing(first));
    }
    let window = chain.window as f64;
    let mut latency = window * snapshot.time(first).ok_or_else(|| missing(first))?;
    let mut candidates = window;
    let mut tokens = 0.0;
    for j in 1..models.len() {
        let alpha = snapshot.estimate_alpha(&models[j - 1], &models[j]);
        latency += snapshot
            .verify_cost(&models[j], candidates)
            .ok_or_else(|| missing(&models[j]))?;
        let accepted = expected_accepted_strict(alpha, candidates);
        if j + 1 == models.len() {
            tokens = accepted + 1.0;
        } else if intermediate_bonus {
            candidates = accepted + 1.0;
        } else {
            candidates = accepted + 1.0 - alpha.powf(candidates);
        }
    }
    Ok(latency / tokens)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub chain: Vec<String>,
    /// `None` when the chain was skipped for missing metrics.
    pub predicted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub chain: ChainPlan,
    pub predicted: Option<f64>,
    pub candidates: Vec<CandidateScore>,
    pub explored: bool,
}

/// `(T_eff, length, ids)` ordering used for argmin and tie-breaking.
fn better(a: (f64, &ChainPlan), b: (f64, &ChainPlan)) -> bool {
    a.0.total_cmp(&b.0)
        .then(a.1.models.len().cmp(&b.1.models.len()))
        .then_with(|| a.1.models.cmp(&b.1.models))
        .is_lt()
}

#[derive(Debug, Clone)]
pub struct ChainScheduler {
    config: SchedulerConfig,
    intermediate_bonus: bool,
    incumbent: Option<ChainPlan>,
    rng: SimRng,
}

impl ChainScheduler {
    pub fn new(config: SchedulerConfig, intermediate_bonus: bool, rng: SimRng) -> Self {
        Self {
            config,
            intermediate_bonus,
            incumbent: None,
            rng,
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn intermediate_bonus(&self) -> bool {
        self.intermediate_bonus
    }

    pub fn reset_incumbent(&mut self) {
        self.incumbent = None;
    }

    /// Minimum-predicted-latency chain over the candidates built from
    /// `models_by_capability`; falls back to `[target]`.
    pub fn select_chain(
        &mut self,
        models_by_capability: &[String],
        target: &str,
        snapshot: &MetricsSnapshot,
    ) -> Selection {
        let candidates = generate_candidates(models_by_capability, target, &self.config);
        let scored: Vec<(ChainPlan, Option<f64>)> = candidates
            .into_iter()
            .map(|c| {
                let t = predict_effective_time(&c, snapshot, self.intermediate_bonus).ok();
                (c, t)
            })
            .collect();

        let mut best: Option<(f64, &ChainPlan)> = None;
        for (chain, t) in &scored {
            if let Some(t) = *t {
                if best.is_none_or(|b| better((t, chain), b)) {
                    best = Some((t, chain));
                }
            }
        }

        let fallback = ChainPlan {
            models: vec![target.to_string()],
            window: self.config.window,
        };
        let (mut chosen, mut predicted) = match best {
            Some((t, c)) => (c.clone(), Some(t)),
            None => (fallback, None),
        };

        if self.config.hysteresis_delta > 0.0 {
            if let Some(inc) = &self.incumbent {
                let inc_score = scored.iter().find(|(c, _)| c == inc).and_then(|(_, t)| *t);
                if let (Some(ti), Some(tb)) = (inc_score, predicted) {
                    if tb >= ti * (1.0 - self.config.hysteresis_delta) {
                        chosen = inc.clone();
                        predicted = Some(ti);
                    }
                }
            }
        }

        let mut explored = false;
        if self.config.exploration > 0.0 && self.rng.bernoulli(self.config.exploration) {
            let valid: Vec<&(ChainPlan, Option<f64>)> = scored.iter().filter(|(_, t)| t.is_some()).collect();
            if !valid.is_empty() {
                let pick = valid[self.rng.below(valid.len())];
                chosen = pick.0.clone();
                predicted = pick.1;
                explored = true;
            }
        }

        self.incumbent = Some(chosen.clone());
        Selection {
            chain: chosen,
            predicted,
            candidates: scored
                .into_iter()
                .map(|(c, t)| CandidateScore {
                    chain: c.models,
                    predicted: t,
                })
                .collect(),
            explored,
        }
    }
}
