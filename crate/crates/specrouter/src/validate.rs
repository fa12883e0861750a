//! Built-in formula-versus-simulation checks.
//!
//! Each check drives the real engine and compares what it measures with the
//! closed forms in [`crate::formulas`] or with the scheduler's own
//! predictions. Tolerances scale with [`ValidateOptions::tol_scale`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dist::{dtv, overlap, ProbDist, TokenId};
use crate::engine::{
    draft_row, verify_row, AcceptanceRule, ChainPlan, EngineConfig, FaultPolicy, RequestContext, Router, RoutingMode,
    SamplingMode, StepOutcome,
};
use crate::error::Result;
use crate::formulas::{expected_accepted, theoretical_speedup};
use crate::harness::{run_experiment, ExperimentMode, WorkloadSpec};
use crate::model::{FamilyConfig, ModelSpec, SimModel};
use crate::pool::{DeviceSpec, ModelPool, PoolConfig};
use crate::rng::SimRng;
use crate::scheduler::{pair_key, predict_effective_time, ChainScheduler, Ema, MetricsSnapshot, SchedulerConfig};
use crate::trace::TraceLevel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidateOptions {
    pub seed: u64,
    /// Multiplies every tolerance; 0 demands exact agreement.
    pub tol_scale: f64,
    pub acceptance_rule: AcceptanceRule,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            seed: 2024,
            tol_scale: 1.0,
            acceptance_rule: AcceptanceRule::Standard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: String,
    pub case: String,
    pub observed: f64,
    pub expected: f64,
    /// Allowed deviation; relative when `relative` is set.
    pub tolerance: f64,
    pub relative: bool,
    pub passed: bool,
}

impl CheckResult {
    fn absolute(check: &str, case: String, observed: f64, expected: f64, tolerance: f64) -> Self {
        Self {
            check: check.into(),
            case,
            observed,
            expected,
            tolerance,
            relative: false,
            passed: (observed - expected).abs() <= tolerance,
        }
    }

    fn relative(check: &str, case: String, observed: f64, expected: f64, tolerance: f64) -> Self {
        Self {
            check: check.into(),
            case,
            observed,
            expected,
            tolerance,
            relative: true,
            passed: (observed / expected - 1.0).abs() <= tolerance,
        }
    }

    fn at_least(check: &str, case: String, observed: f64, expected: f64) -> Self {
        Self {
            check: check.into(),
            case,
            observed,
            expected,
            tolerance: 0.0,
            relative: false,
            passed: observed >= expected,
        }
    }
}

/// Peaked family with EOS disabled, so that `dtv(p, uniform)` barely varies
/// across contexts and generation never stops early.
pub fn calibration_family(seed: u64) -> FamilyConfig {
    FamilyConfig {
        logit_scale: 6.0,
        eos_logit_bias: -1e3,
        ..FamilyConfig::new(16, 0, seed)
    }
}

fn random_context(rng: &mut SimRng, vocab: usize) -> Vec<TokenId> {
    let len = rng.range_inclusive(4, 12);
    (0..len).map(|_| 1 + rng.below(vocab - 1) as TokenId).collect()
}

/// Monte Carlo mean of `dtv(target, uniform)` over random contexts.
pub fn mean_distance_to_uniform(family: &FamilyConfig, samples: usize, rng: &mut SimRng) -> f64 {
    let target = SimModel::new(ModelSpec::new("t", 1.0), family.clone()).expect("valid target");
    let u = ProbDist::uniform(family.vocab_size);
    let total: f64 = (0..samples)
        .map(|_| dtv(&target.next_dist(&random_context(rng, family.vocab_size)), &u).expect("same size"))
        .sum();
    total / samples as f64
}

/// Mixture weight realizing mean acceptance `alpha` against the target.
pub fn calibrated_eps(alpha: f64, mean_distance: f64) -> f64 {
    ((1.0 - alpha) / mean_distance).clamp(0.0, 1.0)
}

/// Empirical acceptance rate of single-token verification versus the mean
/// overlap of the same contexts.
pub fn check_acceptance_rate(opts: &ValidateOptions) -> Vec<CheckResult> {
    const EVENTS: usize = 50_000;
    let family = FamilyConfig::new(8, 0, opts.seed);
    [0.1, 0.3, 0.6]
        .par_iter()
        .map(|&eps| {
            let target = SimModel::new(ModelSpec::new("t", 1.0), family.clone()).expect("valid");
            let draft = SimModel::new(ModelSpec::new("d", 0.1).with_eps(eps), family.clone()).expect("valid");
            let mut rng = SimRng::new(opts.seed, format!("acceptance/{eps}"));
            let (mut accepted, mut expected) = (0usize, 0.0);
            for _ in 0..EVENTS {
                let ctx = random_context(&mut rng, family.vocab_size);
                let (cand, q) = draft_row(&draft, &ctx, 1, SamplingMode::Stochastic, &mut rng);
                expected += overlap(&target.next_dist(&ctx), &q[0]).expect("same size");
                let row = verify_row(&target, &ctx, &cand, &q, SamplingMode::Stochastic, opts.acceptance_rule, false, &mut rng)
                    .expect("shapes agree");
                accepted += row.accepted;
            }
            CheckResult::absolute(
                "acceptance_rate",
                format!("eps={eps}"),
                accepted as f64 / EVENTS as f64,
                expected / EVENTS as f64,
                0.01 * opts.tol_scale,
            )
        })
        .collect()
}

fn two_level_pool(family: FamilyConfig, eps: f64, c: f64) -> PoolConfig {
    PoolConfig {
        family,
        devices: vec![DeviceSpec::new("gpu", 4)],
        models: vec![ModelSpec::new("draft", 0.1 * c).with_eps(eps), ModelSpec::new("target", 0.1)],
        target_model_id: "target".into(),
    }
}

/// Mean tokens emitted by the final level per two-level cycle (accepted
/// drafts plus the verifier's own token), measured before any truncation.
fn mean_cycle_tokens(pool_cfg: &PoolConfig, gamma: usize, cycles: usize, opts: &ValidateOptions, label: &str) -> Result<f64> {
    let pool = ModelPool::new(pool_cfg)?;
    let rng = SimRng::new(opts.seed, label);
    let engine = EngineConfig {
        sampling: SamplingMode::Stochastic,
        acceptance_rule: opts.acceptance_rule,
        ..EngineConfig::default()
    };
    let mut router = Router::new(
        pool,
        SchedulerConfig::default(),
        engine,
        FaultPolicy::default(),
        RoutingMode::Fixed(ChainPlan::new(["draft", "target"], gamma)),
        0.0,
        TraceLevel::Off,
        &rng,
    )?;
    let mut prompt_rng = rng.child("prompts");
    let (mut seen, mut tokens) = (0usize, 0usize);
    let mut id = 0;
    while seen < cycles {
        let prompt = random_context(&mut prompt_rng, pool_cfg.family.vocab_size);
        let mut req = RequestContext::new(id, 0.0, vec![prompt], 256, SamplingMode::Stochastic, &rng)?;
        id += 1;
        let mut now = 0.0;
        loop {
            let (outcome, cycle) = router.step_detailed(&mut req, now)?;
            if let Some(c) = cycle {
                if seen < cycles {
                    seen += 1;
                    tokens += c.final_emitted[0];
                }
            }
            match outcome {
                StepOutcome::Continue(t) => now = t,
                StepOutcome::Done(_) => break,
            }
        }
    }
    Ok(tokens as f64 / seen as f64)
}

const ALPHAS: [f64; 3] = [0.3, 0.6, 0.9];
const GAMMAS: [usize; 3] = [2, 4, 8];

/// Mean committed tokens per two-level cycle versus the geometric formula.
pub fn check_expected_tokens(opts: &ValidateOptions) -> Vec<CheckResult> {
    let family = calibration_family(opts.seed);
    let d = mean_distance_to_uniform(&family, 4000, &mut SimRng::new(opts.seed, "calibration"));
    let grid: Vec<(f64, usize)> = ALPHAS.iter().flat_map(|&a| GAMMAS.iter().map(move |&g| (a, g))).collect();
    grid.par_iter()
        .map(|&(alpha, gamma)| {
            let pool = two_level_pool(family.clone(), calibrated_eps(alpha, d), 0.1);
            let case = format!("alpha={alpha} gamma={gamma}");
            let expected = expected_accepted(alpha, gamma as u32);
            match mean_cycle_tokens(&pool, gamma, 10_000, opts, &format!("tokens/{case}")) {
                Ok(obs) => CheckResult::relative("expected_tokens", case, obs, expected, 0.05 * opts.tol_scale),
                Err(_) => CheckResult::relative("expected_tokens", case, f64::NAN, expected, 0.05 * opts.tol_scale),
            }
        })
        .collect()
}

/// Simulated-clock acceleration of a fixed two-level chain over the target
/// alone versus the closed-form speedup, constant-cost verification.
pub fn check_speedup(opts: &ValidateOptions) -> Vec<CheckResult> {
    let family = calibration_family(opts.seed);
    let d = mean_distance_to_uniform(&family, 4000, &mut SimRng::new(opts.seed, "calibration"));
    let mut grid = Vec::new();
    for &alpha in &ALPHAS {
        for &gamma in &GAMMAS {
            for &c in &[0.05, 0.1, 0.3] {
                grid.push((alpha, gamma, c));
            }
        }
    }
    grid.par_iter()
        .map(|&(alpha, gamma, c)| {
            let case = format!("alpha={alpha} gamma={gamma} c={c}");
            let expected = theoretical_speedup(alpha, gamma as u32, c);
            let mut cfg = RunConfig::example();
            cfg.seed = opts.seed;
            cfg.pool = two_level_pool(family.clone(), calibrated_eps(alpha, d), c);
            cfg.engine.sampling = SamplingMode::Stochastic;
            cfg.engine.acceptance_rule = opts.acceptance_rule;
            cfg.mode = ExperimentMode::SsdFixed {
                chain: vec!["draft".into(), "target".into()],
                window: gamma,
            };
            // arrivals far enough apart that requests never queue on the device
            cfg.workload = WorkloadSpec {
                arrival_rate: 1e-5,
                num_requests: 24,
                input_len: crate::harness::LengthDist::Fixed { n: 8 },
                output_len: crate::harness::LengthDist::Fixed { n: 512 },
                batch_size: 1,
                seed: None,
            };
            let observed = run_experiment(&cfg)
                .ok()
                .and_then(|o| o.report.metrics.eaf)
                .unwrap_or(f64::NAN);
            CheckResult::relative("speedup", case, observed, expected, 0.10 * opts.tol_scale)
        })
        .collect()
}

/// Random pool for the selection check: 2–5 models, drafts cheaper than
/// the target, mixed divergence and noise.
pub fn random_selection_pool(rng: &mut SimRng, index: usize) -> PoolConfig {
    let n = rng.range_inclusive(2, 5);
    let target_time = rng.range_f64(0.05, 0.2);
    let mut models = Vec::new();
    for i in 0..n - 1 {
        let c = (rng.range_f64(0.01f64.ln(), 0.5f64.ln())).exp();
        models.push(
            ModelSpec::new(format!("m{i}"), target_time * c)
                .with_eps(rng.range_f64(0.0, 0.6))
                .with_noise(rng.range_f64(0.0, 1.5)),
        );
    }
    models.push(ModelSpec::new("target", target_time));
    PoolConfig {
        family: FamilyConfig {
            eos_logit_bias: -1e3,
            ..FamilyConfig::new(32, 0, 1000 + index as u64)
        },
        devices: vec![DeviceSpec::new("gpu", 16)],
        models,
        target_model_id: "target".into(),
    }
}

/// Snapshot holding the true latencies and Monte Carlo similarities of
/// every ordered pair.
pub fn oracle_snapshot(pool: &ModelPool, config: &SchedulerConfig, contexts: usize, rng: &mut SimRng) -> MetricsSnapshot {
    let mut snap = MetricsSnapshot {
        prior_simscore: config.prior_simscore,
        alpha_mapping: config.alpha_mapping,
        ..MetricsSnapshot::default()
    };
    let ids = pool.models_by_capability().to_vec();
    let ctxs: Vec<Vec<TokenId>> = (0..contexts)
        .map(|_| random_context(rng, pool.vocabulary().size()))
        .collect();
    let dists: Vec<Vec<ProbDist>> = ids
        .iter()
        .map(|m| {
            let model = pool.model(m).expect("registered");
            ctxs.iter().map(|c| model.next_dist(c)).collect()
        })
        .collect();
    for (i, m) in ids.iter().enumerate() {
        let spec = pool.spec(m).expect("registered");
        snap.ema_time.insert(m.clone(), Ema::first(spec.decode_time));
        snap.ema_verify_pass.insert(m.clone(), Ema::first(spec.decode_time));
        snap.verify_modes.insert(m.clone(), spec.verify_cost_mode);
        for (j, v) in ids.iter().enumerate().skip(i + 1) {
            let mean = dists[i]
                .iter()
                .zip(&dists[j])
                .map(|(p, q)| dtv(p, q).expect("same size"))
                .sum::<f64>()
                / contexts as f64;
            snap.ema_dtv.insert(pair_key(m, v), Ema::first(mean));
        }
    }
    snap
}

/// Exhaustive argmin over every capability-increasing chain, independent
/// of the scheduler's enumeration.
pub fn brute_force_selection(
    order: &[String],
    target: &str,
    snap: &MetricsSnapshot,
    config: &SchedulerConfig,
    bonus: bool,
) -> Option<(Vec<String>, f64)> {
    let drafts: Vec<&String> = order.iter().take_while(|m| *m != target).collect();
    let mut best: Option<(Vec<String>, f64)> = None;
    for mask in 0u32..(1 << drafts.len()) {
        let mut chain: Vec<String> = drafts
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, m)| (*m).clone())
            .collect();
        if chain.len() + 1 > config.max_chain_len {
            continue;
        }
        chain.push(target.to_string());
        let plan = ChainPlan::new(chain.clone(), config.window);
        let Ok(t) = predict_effective_time(&plan, snap, bonus) else {
            continue;
        };
        let better = match &best {
            None => true,
            Some((bc, bt)) => t < *bt || (t == *bt && (chain.len(), &chain) < (bc.len(), bc)),
        };
        if better {
            best = Some((chain, t));
        }
    }
    best
}

/// Measured mean time-per-token of a pinned chain on a short workload.
pub fn measure_chain(pool: &PoolConfig, chain: &[String], window: usize, seed: u64) -> Option<f64> {
    let mut cfg = RunConfig::example();
    cfg.seed = seed;
    cfg.pool = pool.clone();
    cfg.engine.sampling = SamplingMode::Stochastic;
    cfg.report.tmo_baseline = false;
    cfg.mode = ExperimentMode::SsdFixed {
        chain: chain.to_vec(),
        window,
    };
    cfg.workload = WorkloadSpec {
        arrival_rate: 1e-5,
        num_requests: 8,
        input_len: crate::harness::LengthDist::Fixed { n: 8 },
        output_len: crate::harness::LengthDist::Fixed { n: 192 },
        batch_size: 1,
        seed: None,
    };
    run_experiment(&cfg).ok()?.report.metrics.tpot_mean
}

/// Selection equals the exhaustive argmin on 100 random pools, and the
/// selected chain measures within 10% of the best measured candidate on at
/// least 90 of them.
pub fn check_chain_selection(opts: &ValidateOptions) -> Vec<CheckResult> {
    const POOLS: usize = 100;
    let outcomes: Vec<(bool, bool)> = (0..POOLS)
        .into_par_iter()
        .map(|i| {
            let mut rng = SimRng::new(opts.seed, format!("selection/{i}"));
            let pool_cfg = random_selection_pool(&mut rng, i);
            let pool = ModelPool::new(&pool_cfg).expect("valid random pool");
            let config = SchedulerConfig {
                window: rng.range_inclusive(1, 8),
                ..SchedulerConfig::default()
            };
            let snap = oracle_snapshot(&pool, &config, 400, &mut rng);
            let order = pool.models_by_capability().to_vec();
            let mut sched = ChainScheduler::new(config.clone(), true, rng.child("scheduler"));
            let selected = sched.select_chain(&order, "target", &snap);
            let oracle = brute_force_selection(&order, "target", &snap, &config, true);
            let exact = oracle.as_ref().is_some_and(|(c, _)| *c == selected.chain.models);

            let candidates = crate::scheduler::generate_candidates(&order, "target", &config);
            let measured: Vec<(Vec<String>, f64)> = candidates
                .iter()
                .filter_map(|c| measure_chain(&pool_cfg, &c.models, config.window, opts.seed).map(|t| (c.models.clone(), t)))
                .collect();
            let best = measured.iter().map(|(_, t)| *t).fold(f64::INFINITY, f64::min);
            let chosen = measured
                .iter()
                .find(|(c, _)| *c == selected.chain.models)
                .map(|(_, t)| *t);
            let close = chosen.is_some_and(|t| t <= best * (1.0 + 0.10 * opts.tol_scale));
            (exact, close)
        })
        .collect();
    let exact = outcomes.iter().filter(|o| o.0).count() as f64;
    let close = outcomes.iter().filter(|o| o.1).count() as f64;
    vec![
        CheckResult::at_least("selection_exact", format!("{POOLS} pools"), exact, POOLS as f64),
        CheckResult::at_least("selection_latency", format!("{POOLS} pools"), close, 90.0),
    ]
}

pub fn run_all(opts: &ValidateOptions) -> Vec<CheckResult> {
    let mut out = check_acceptance_rate(opts);
    out.extend(check_expected_tokens(opts));
    out.extend(check_speedup(opts));
    out.extend(check_chain_selection(opts));
    out
}

/// Fixed-width pass/fail table.
pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = format!(
        "{:<18} {:<30} {:>12} {:>12} {:>10}  {}\n",
        "check", "case", "observed", "expected", "tolerance", "result"
    );
    for r in results {
        let tol = if r.relative {
            format!("{:.1}%", r.tolerance * 100.0)
        } else {
            format!("{}", r.tolerance)
        };
        s.push_str(&format!(
            "{:<18} {:<30} {:>12.5} {:>12.5} {:>10}  {}\n",
            r.check,
            r.case,
            r.observed,
            r.expected,
            tol,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    s
}
