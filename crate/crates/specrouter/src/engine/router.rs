use std::collections::BTreeMap;
use std::sync::Arc;

use super::processors::{draft_row, verify_row};
use super::{truncate_emission, ChainPlan, CycleOutcome, EngineConfig, FaultKind, FaultPolicy, PrefillScope, RequestContext};
use crate::dist::{ProbDist, TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::model::{SimModel, StepKind};
use crate::pool::ModelPool;
use crate::profiler::{DistSamples, ObservationBatch, PairTally, Profiler, TimingRecord};
use crate::rng::SimRng;
use crate::scheduler::{ChainScheduler, SchedulerConfig};
use crate::state::{RollbackCommand, StateManager};
use crate::trace::{LevelTrace, TraceEvent, TraceLevel, TraceSink};

/// How the router picks each cycle's chain.
#[derive(Debug, Clone, PartialEq)]
pub enum RoutingMode {
    /// Ask the scheduler every cycle.
    Adaptive,
    /// Always use this chain (models dropped from a request are skipped).
    Fixed(ChainPlan),
    /// Plain autoregressive decoding with the target.
    TargetOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    /// The request wants to run again at this time.
    Continue(f64),
    /// The request finished (or failed) at this time.
    Done(f64),
}

struct Op {
    end: f64,
    latency: f64,
    fault: Option<String>,
}

enum CycleResult {
    Committed(CycleOutcome),
    Aborted { end: f64, model: String, kind: String },
}

fn common_prefix(a: &[TokenId], b: &[TokenId]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Event-driven engine shared by every request of one run.
pub struct Router {
    pool: ModelPool,
    states: StateManager,
    profiler: Profiler,
    scheduler: ChainScheduler,
    config: EngineConfig,
    faults: FaultPolicy,
    routing: RoutingMode,
    device_free: Vec<f64>,
    trace: TraceSink,
    cycle_counter: u64,
}

impl Router {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pool: ModelPool,
        scheduler_config: SchedulerConfig,
        config: EngineConfig,
        faults: FaultPolicy,
        routing: RoutingMode,
        measurement_noise: f64,
        trace: TraceLevel,
        rng: &SimRng,
    ) -> Result<Self> {
        scheduler_config.validate()?;
        config.validate()?;
        faults.validate()?;
        if let RoutingMode::Fixed(chain) = &routing {
            chain.validate(&pool)?;
        }
        let mut profiler = Profiler::new(&scheduler_config, measurement_noise, rng.child("profiler"));
        for id in pool.models_by_capability() {
            let spec = pool.spec(id)?;
            let reg = profiler.registry_mut();
            reg.set_verify_mode(id, spec.verify_cost_mode);
            reg.seed_time(id, spec.decode_time, spec.decode_time);
        }
        let scheduler = ChainScheduler::new(scheduler_config, config.intermediate_bonus, rng.child("scheduler"));
        let mut states = StateManager::new();
        states.enable_trace(trace == TraceLevel::Full);
        let device_free = vec![0.0; pool.devices().len()];
        Ok(Self {
            pool,
            states,
            profiler,
            scheduler,
            config,
            faults,
            routing,
            device_free,
            trace: TraceSink::new(trace),
            cycle_counter: 0,
        })
    }

    pub fn pool(&self) -> &ModelPool {
        &self.pool
    }

    pub fn pool_mut(&mut self) -> &mut ModelPool {
        &mut self.pool
    }

    pub fn profiler(&self) -> &Profiler {
        &self.profiler
    }

    pub fn profiler_mut(&mut self) -> &mut Profiler {
        &mut self.profiler
    }

    pub fn scheduler(&self) -> &ChainScheduler {
        &self.scheduler
    }

    pub fn states(&self) -> &StateManager {
        &self.states
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn routing(&self) -> &RoutingMode {
        &self.routing
    }

    pub fn trace_mut(&mut self) -> &mut TraceSink {
        &mut self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        let level = self.trace.level();
        std::mem::replace(&mut self.trace, TraceSink::new(level)).into_events()
    }

    /// Reserves device time for one operation starting no earlier than
    /// `ready` and draws its fault.
    fn op(&mut self, req: &mut RequestContext, model: &str, kind: StepKind, tokens: usize, batch: usize, ready: f64) -> Result<Op> {
        let handle = match self.pool.acquire_model(model) {
            Ok(h) => h,
            Err(Error::Unplaceable(m)) => {
                req.dropped.insert(m);
                return Ok(Op {
                    end: ready,
                    latency: 0.0,
                    fault: Some("unplaceable".into()),
                });
            }
            Err(e) => return Err(e),
        };
        let latency = handle.model.step_latency(kind, tokens, batch, handle.placement.multiplier);
        let d = handle.placement.device;
        let start = ready.max(self.device_free[d]);
        let end = start + latency;
        self.device_free[d] = end;
        let fault = (self.faults.applies_to(model) && req.fault_rng.bernoulli(self.faults.failure_prob_per_step))
            .then(|| self.faults.failure_kind.name().to_string());
        if fault.is_some() && self.faults.failure_kind == FaultKind::Oom {
            // nowhere to go: the retry simply runs in place
            let _ = self.pool.demote(model);
        }
        Ok(Op { end, latency, fault })
    }

    fn model(&self, id: &str) -> Result<Arc<SimModel>> {
        Ok(self.pool.model(id)?.clone())
    }

    fn eligible(&self, req: &RequestContext) -> Vec<String> {
        self.pool
            .models_by_capability()
            .iter()
            .filter(|m| !req.dropped.contains(*m))
            .cloned()
            .collect()
    }

    fn flush_state_trace(&mut self, request_id: u64) {
        if self.trace.full() {
            for record in self.states.drain_trace() {
                self.trace.push(TraceEvent::State { request_id, record });
            }
        }
    }

    /// Chain for the next cycle of `req`.
    fn choose_chain(&mut self, req: &RequestContext, now: f64) -> ChainPlan {
        let target = self.pool.target_id().to_string();
        if req.fallback {
            return ChainPlan::target_only(&target);
        }
        match &self.routing {
            RoutingMode::TargetOnly => ChainPlan::target_only(&target),
            RoutingMode::Fixed(c) => ChainPlan {
                models: c.models.iter().filter(|m| !req.dropped.contains(*m)).cloned().collect(),
                window: c.window,
            },
            RoutingMode::Adaptive => {
                let eligible = self.eligible(req);
                let snapshot = self.profiler.snapshot_metrics();
                let sel = self.scheduler.select_chain(&eligible, &target, &snapshot);
                self.trace.push(TraceEvent::Decision {
                    time: now,
                    request_id: req.request_id,
                    cycle: req.cycles,
                    chain: sel.chain.models.clone(),
                    window: sel.chain.window,
                    predicted: sel.predicted,
                    candidates: sel.candidates,
                    explored: sel.explored,
                });
                sel.chain
            }
        }
    }

    fn prefill_models(&mut self, req: &RequestContext, now: f64) -> Vec<String> {
        let target = self.pool.target_id().to_string();
        let mut wanted: Vec<String> = match (self.config.prefill_scope, &self.routing) {
            (PrefillScope::TargetOnly, _) | (_, RoutingMode::TargetOnly) => vec![target.clone()],
            (PrefillScope::AllModels, _) => self.eligible(req),
            (PrefillScope::InitialChain, RoutingMode::Fixed(c)) => c.models.clone(),
            (PrefillScope::InitialChain, RoutingMode::Adaptive) => self.choose_chain(req, now).models,
        };
        if !wanted.contains(&target) {
            wanted.push(target);
        }
        self.pool
            .models_by_capability()
            .iter()
            .filter(|m| wanted.contains(m))
            .cloned()
            .collect()
    }

    /// Prefills the prompts on the scoped models concurrently and bootstraps
    /// pairwise similarities. Returns the completion time.
    pub fn prefill(&mut self, req: &mut RequestContext, now: f64) -> Result<f64> {
        let target = self.pool.target_id().to_string();
        let models = self.prefill_models(req, now);
        let b = req.batch_size();
        let tokens: usize = req.prompts.iter().map(Vec::len).sum();
        let mut end = now;
        let mut done = Vec::new();
        let mut dropped = Vec::new();
        for m in &models {
            let op = self.op(req, m, StepKind::Prefill, tokens, b, now)?;
            end = end.max(op.end);
            if let Some(kind) = op.fault {
                self.trace.push(TraceEvent::Fault {
                    time: op.end,
                    request_id: req.request_id,
                    cycle: 0,
                    model: m.clone(),
                    kind,
                    consecutive: 0,
                });
                if *m == target {
                    req.failure = Some(format!("target prefill failed on `{m}`"));
                    break;
                }
                req.dropped.insert(m.clone());
                dropped.push(m.clone());
                continue;
            }
            let sid = self.states.create_request_state(req.request_id, m, b);
            let rows: Vec<&[TokenId]> = req.prompts.iter().map(Vec::as_slice).collect();
            self.states.append_ragged(sid, &rows)?;
            req.states.insert(m.clone(), sid);
            done.push(m.clone());
        }
        req.prefilled = true;
        if req.failure.is_none() && done.len() >= 2 {
            let mut dists: BTreeMap<String, Vec<ProbDist>> = BTreeMap::new();
            for m in &done {
                let model = self.model(m)?;
                let mut all = Vec::new();
                for p in &req.prompts {
                    all.extend(model.forward_pass(&[], p));
                }
                dists.insert(m.clone(), all);
            }
            let order = self.pool.models_by_capability().to_vec();
            self.profiler.registry_mut().bootstrap(&order, &dists)?;
        }
        req.prev_chain = done.clone();
        self.trace.push(TraceEvent::Prefill {
            time: end,
            request_id: req.request_id,
            models: done,
            dropped,
            latency: end - now,
        });
        self.flush_state_trace(req.request_id);
        Ok(end)
    }

    fn restore(&mut self, req: &RequestContext, start_lens: &BTreeMap<String, Vec<usize>>) -> Result<()> {
        for (m, lens) in start_lens {
            let sid = req.states[m];
            let now = self.states.get(sid)?.logical_lens().to_vec();
            let back: Vec<usize> = now.iter().zip(lens).map(|(n, s)| n - s).collect();
            self.states.logical_rollback(&RollbackCommand {
                state_id: sid,
                lengths: back,
            })?;
            if self.config.eager_truncation {
                self.states.fix_kv_cache(sid)?;
            }
        }
        Ok(())
    }

    fn run_cycle(&mut self, req: &mut RequestContext, chain: &ChainPlan, now: f64) -> Result<CycleResult> {
        let b = req.batch_size();
        let active = req.active();
        let rows: Vec<usize> = (0..b).filter(|&r| active[r]).collect();
        let n_active = rows.len();
        let mode = req.sampling;
        let rule = self.config.acceptance_rule;

        // Align every chain model with the committed sequence.
        let mut ready = now;
        let mut start_lens = BTreeMap::new();
        let mut catchup_fault = None;
        for m in &chain.models {
            let sid = match req.states.get(m) {
                Some(&s) => s,
                None => {
                    let s = self.states.create_request_state(req.request_id, m, b);
                    req.states.insert(m.clone(), s);
                    s
                }
            };
            let lens = self.states.get(sid)?.logical_lens().to_vec();
            let lag: Vec<TokenSeq> = (0..b).map(|r| req.full_context(r)[lens[r]..].to_vec()).collect();
            let billed: usize = rows.iter().map(|&r| lag[r].len()).sum();
            if lag.iter().any(|l| !l.is_empty()) {
                let refs: Vec<&[TokenId]> = lag.iter().map(Vec::as_slice).collect();
                self.states.append_ragged(sid, &refs)?;
            }
            if billed > 0 && !req.prev_chain.contains(m) {
                let op = self.op(req, m, StepKind::Prefill, billed, n_active, now)?;
                ready = ready.max(op.end);
                if let Some(kind) = op.fault {
                    catchup_fault.get_or_insert((m.clone(), kind));
                }
            }
            start_lens.insert(m.clone(), self.states.get(sid)?.logical_lens().to_vec());
        }
        if let Some((model, kind)) = catchup_fault {
            return Ok(CycleResult::Aborted { end: ready, model, kind });
        }

        let contexts: Vec<TokenSeq> = {
            let sid = req.states[&chain.models[0]];
            (0..b)
                .map(|r| self.states.attention_view(sid, r).map(<[TokenId]>::to_vec))
                .collect::<Result<_>>()?
        };
        debug_assert!((0..b).all(|r| contexts[r] == req.full_context(r)));

        let mut obs = ObservationBatch::default();
        let mut levels = Vec::new();
        let mut appended: BTreeMap<String, Vec<TokenSeq>> = BTreeMap::new();
        let mut cursor = ready;

        let abort = |router: &mut Router, req: &mut RequestContext, end: f64, model: &str, kind: String| -> Result<CycleResult> {
            router.restore(req, &start_lens)?;
            Ok(CycleResult::Aborted {
                end,
                model: model.to_string(),
                kind,
            })
        };

        let mut cand: Vec<TokenSeq> = vec![Vec::new(); b];
        let mut props: Vec<Vec<ProbDist>> = vec![Vec::new(); b];
        let mut proposer = String::new();
        let verify_from = if chain.len() == 1 { 0 } else { 1 };

        if chain.len() > 1 {
            let m1 = chain.models[0].clone();
            let op = self.op(req, &m1, StepKind::Decode, chain.window, n_active, cursor)?;
            cursor = op.end;
            if let Some(kind) = op.fault {
                return abort(self, req, cursor, &m1, kind);
            }
            let model = self.model(&m1)?;
            obs.timings.push(TimingRecord {
                model_id: m1.clone(),
                kind: StepKind::Decode,
                verify_mode: model.spec().verify_cost_mode,
                token_count: chain.window,
                elapsed: op.latency,
            });
            for &r in &rows {
                let (t, d) = draft_row(&model, &contexts[r], chain.window, mode, &mut req.rng);
                cand[r] = t;
                props[r] = d;
            }
            let refs: Vec<&[TokenId]> = cand.iter().map(Vec::as_slice).collect();
            self.states.append_ragged(req.states[&m1], &refs)?;
            appended.insert(m1.clone(), cand.clone());
            levels.push(LevelTrace {
                model: m1.clone(),
                accepted: vec![0; b],
                emitted: cand.iter().map(Vec::len).collect(),
            });
            proposer = m1;
        }

        let last = chain.len() - 1;
        let mut final_accepted = vec![0usize; b];
        for j in verify_from..chain.len() {
            let mj = chain.models[j].clone();
            let is_final = j == last;
            if !is_final && self.config.skip_single_token_intermediate && rows.iter().all(|&r| cand[r].len() == 1) {
                continue;
            }
            let model = self.model(&mj)?;
            let width = rows.iter().map(|&r| cand[r].len()).max().unwrap_or(0);
            let kind = if chain.len() == 1 { StepKind::Decode } else { StepKind::Verify };
            let tokens = if chain.len() == 1 { 1 } else { width };
            let op = self.op(req, &mj, kind, tokens, n_active, cursor)?;
            cursor = op.end;
            if let Some(fk) = op.fault {
                return abort(self, req, cursor, &mj, fk);
            }
            obs.timings.push(TimingRecord {
                model_id: mj.clone(),
                kind,
                verify_mode: model.spec().verify_cost_mode,
                token_count: tokens,
                elapsed: op.latency,
            });
            let emit_bonus = is_final || self.config.intermediate_bonus;
            let mut accepted = vec![0; b];
            let mut next_cand = vec![Vec::new(); b];
            let mut next_props = vec![Vec::new(); b];
            let mut tally = (0u64, 0u64);
            let mut pairs = Vec::new();
            for &r in &rows {
                let row = verify_row(&model, &contexts[r], &cand[r], &props[r], mode, rule, emit_bonus, &mut req.rng)?;
                accepted[r] = row.accepted;
                tally.0 += row.accepted as u64;
                tally.1 += cand[r].len() as u64;
                pairs.extend(row.pairs);
                next_cand[r] = row.emitted;
                next_props[r] = row.emitted_dists;
            }
            if !proposer.is_empty() {
                obs.tallies.push(PairTally {
                    draft: proposer.clone(),
                    verifier: mj.clone(),
                    accepted: tally.0,
                    proposed: tally.1,
                });
                obs.samples.push(DistSamples {
                    draft: proposer.clone(),
                    verifier: mj.clone(),
                    pairs,
                });
            }
            let refs: Vec<&[TokenId]> = next_cand.iter().map(Vec::as_slice).collect();
            self.states.append_ragged(req.states[&mj], &refs)?;
            appended.insert(mj.clone(), next_cand.clone());
            levels.push(LevelTrace {
                model: mj.clone(),
                accepted: accepted.clone(),
                emitted: next_cand.iter().map(Vec::len).collect(),
            });
            if is_final {
                final_accepted = accepted;
            }
            cand = next_cand;
            props = next_props;
            proposer = mj;
        }
        if chain.len() > 1 {
            obs.acceptance_lengths = rows.iter().map(|&r| final_accepted[r] as u64).collect();
        }

        // Commit the final emission.
        let eos = self.pool.vocabulary().eos_id();
        let mut committed = vec![Vec::new(); b];
        for &r in &rows {
            let budget = req.max_new_tokens - req.committed[r].len();
            let (toks, done) = truncate_emission(&cand[r], eos, budget);
            req.committed[r].extend_from_slice(&toks);
            if done {
                req.finished[r] = true;
            }
            committed[r] = toks;
        }

        // Roll every model back to its longest prefix agreeing with the commit.
        let mut rolled_back = BTreeMap::new();
        let mut appended_counts = BTreeMap::new();
        for (m, rows_app) in &appended {
            let sid = req.states[m];
            let lengths: Vec<usize> = rows_app
                .iter()
                .zip(&committed)
                .map(|(a, c)| a.len() - common_prefix(a, c))
                .collect();
            self.states.logical_rollback(&RollbackCommand {
                state_id: sid,
                lengths: lengths.clone(),
            })?;
            if self.config.eager_truncation {
                self.states.fix_kv_cache(sid)?;
            }
            appended_counts.insert(m.clone(), rows_app.iter().map(Vec::len).collect());
            rolled_back.insert(m.clone(), lengths);
        }

        self.profiler.record(obs.clone());
        self.profiler.flush()?;

        Ok(CycleResult::Committed(CycleOutcome {
            chain: chain.clone(),
            final_emitted: cand.iter().map(Vec::len).collect(),
            committed,
            levels,
            appended: appended_counts,
            rolled_back,
            observations: obs,
            start: now,
            end: cursor,
        }))
    }

    fn finish(&mut self, req: &mut RequestContext, at: f64) {
        if req.failure.is_none() {
            req.completion_time = Some(at);
        }
        self.states.gc_request(req.request_id);
        self.flush_state_trace(req.request_id);
        self.trace.push(TraceEvent::RequestDone {
            time: at,
            request_id: req.request_id,
            success: req.failure.is_none(),
            tokens: req.committed.iter().map(Vec::len).collect(),
            error: req.failure.clone(),
        });
    }

    /// Runs the next step of `req` (prefill or one cycle) starting at `now`.
    pub fn step(&mut self, req: &mut RequestContext, now: f64) -> Result<StepOutcome> {
        self.step_detailed(req, now).map(|(s, _)| s)
    }

    /// As [`Router::step`], also returning the committed cycle if one ran.
    pub fn step_detailed(&mut self, req: &mut RequestContext, now: f64) -> Result<(StepOutcome, Option<CycleOutcome>)> {
        if req.is_done() {
            return Ok((StepOutcome::Done(now), None));
        }
        if !req.prefilled {
            let end = self.prefill(req, now)?;
            if req.failure.is_some() {
                self.finish(req, end);
                return Ok((StepOutcome::Done(end), None));
            }
            return Ok((StepOutcome::Continue(end), None));
        }

        let chain = self.choose_chain(req, now);
        self.cycle_counter += 1;
        self.states.set_cycle(self.cycle_counter);
        req.cycles += 1;
        let result = self.run_cycle(req, &chain, now)?;
        self.flush_state_trace(req.request_id);
        match result {
            CycleResult::Committed(out) => {
                req.consecutive_failures = 0;
                req.prev_chain = chain.models.clone();
                req.chain_history.push(chain.label());
                let end = out.end;
                if req.first_token_time.is_none() && out.committed.iter().any(|c| !c.is_empty()) {
                    req.first_token_time = Some(end);
                }
                self.trace.push(TraceEvent::Cycle {
                    time: end,
                    request_id: req.request_id,
                    cycle: req.cycles,
                    chain: chain.models.clone(),
                    window: chain.window,
                    levels: out.levels.clone(),
                    committed: out.committed_counts(),
                    latency: out.latency(),
                    fallback: req.fallback,
                    tokens: self.trace.full().then(|| out.committed.clone()),
                });
                if req.is_done() {
                    self.finish(req, end);
                    return Ok((StepOutcome::Done(end), Some(out)));
                }
                Ok((StepOutcome::Continue(end), Some(out)))
            }
            CycleResult::Aborted { end, model, kind } => {
                req.consecutive_failures += 1;
                req.failed_cycles += 1;
                self.trace.push(TraceEvent::Fault {
                    time: end,
                    request_id: req.request_id,
                    cycle: req.cycles,
                    model: model.clone(),
                    kind: kind.clone(),
                    consecutive: req.consecutive_failures,
                });
                if req.fallback {
                    req.failure = Some(format!("target-only fallback failed: {kind} fault on `{model}`"));
                    self.finish(req, end);
                    return Ok((StepOutcome::Done(end), None));
                }
                if req.consecutive_failures >= self.config.max_consecutive_failures {
                    req.fallback = true;
                    req.consecutive_failures = 0;
                    self.trace.push(TraceEvent::Fallback {
                        time: end,
                        request_id: req.request_id,
                        cycle: req.cycles,
                    });
                }
                Ok((StepOutcome::Continue(end), None))
            }
        }
    }

    /// Runs `req` to completion in isolation, starting at its arrival.
    pub fn core_generate(&mut self, req: &mut RequestContext) -> Result<f64> {
        let mut now = req.arrival;
        loop {
            match self.step(req, now)? {
                StepOutcome::Continue(t) => now = t,
                StepOutcome::Done(t) => return Ok(t),
            }
        }
    }
}
