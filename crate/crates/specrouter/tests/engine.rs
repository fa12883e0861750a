use specrouter::dist::{TokenId, TokenSeq};
use specrouter::engine::{
    ChainPlan, EngineConfig, FaultKind, FaultPolicy, PrefillScope, RequestContext, Router, RoutingMode, SamplingMode,
    StepOutcome,
};
use specrouter::model::{FamilyConfig, ModelSpec, SimModel};
use specrouter::pool::{DeviceSpec, ModelPool, PoolConfig};
use specrouter::rng::SimRng;
use specrouter::scheduler::SchedulerConfig;
use specrouter::trace::TraceLevel;

// Oracle: plain greedy decoding of the target.
fn greedy_reference(target: &SimModel, prompt: &[TokenId], max_new: usize) -> TokenSeq {
    let mut ctx = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new {
        let t = target.next_dist(&ctx).argmax();
        ctx.push(t);
        out.push(t);
        if t == target.family().eos_id {
            break;
        }
    }
    out
}

fn pool_config() -> PoolConfig {
    PoolConfig {
        family: FamilyConfig::new(16, 0, 3),
        devices: vec![DeviceSpec::new("gpu", 8)],
        models: vec![
            ModelSpec::new("s", 0.001).with_eps(0.3).with_noise(1.0),
            ModelSpec::new("m", 0.01).with_eps(0.1).with_noise(0.5),
            ModelSpec::new("t", 0.1),
        ],
        target_model_id: "t".into(),
    }
}

#[test]
fn greedy_three_level_matches_reference() {
    let cfg = pool_config();
    let pool = ModelPool::new(&cfg).unwrap();
    let target = pool.model("t").unwrap().clone();
    let rng = SimRng::new(1, "test");
    let mut router = Router::new(
        pool,
        SchedulerConfig::default(),
        EngineConfig::default(),
        FaultPolicy::default(),
        RoutingMode::Fixed(ChainPlan::new(["s", "m", "t"], 4)),
        0.0,
        TraceLevel::Off,
        &rng,
    )
    .unwrap();
    let prompts = vec![vec![1, 2, 3], vec![4, 5, 6, 7]];
    let mut req = RequestContext::new(0, 0.0, prompts.clone(), 100, SamplingMode::Greedy, &rng).unwrap();
    router.core_generate(&mut req).unwrap();
    for (r, p) in prompts.iter().enumerate() {
        assert_eq!(req.committed[r], greedy_reference(&target, p, 100));
    }
}

fn router(cfg: &PoolConfig, routing: RoutingMode, engine: EngineConfig, faults: FaultPolicy, seed: u64) -> Router {
    let pool = ModelPool::new(cfg).unwrap();
    Router::new(
        pool,
        SchedulerConfig::default(),
        engine,
        faults,
        routing,
        0.0,
        TraceLevel::Off,
        &SimRng::new(seed, "test"),
    )
    .unwrap()
}

fn request(id: u64, prompts: Vec<TokenSeq>, max_new: usize, mode: SamplingMode) -> RequestContext {
    RequestContext::new(id, 0.0, prompts, max_new, mode, &SimRng::new(id, "req")).unwrap()
}

fn assert_matches_reference(cfg: &PoolConfig, req: &RequestContext) {
    let pool = ModelPool::new(cfg).unwrap();
    let target = pool.model(&cfg.target_model_id).unwrap();
    for (r, p) in req.prompts.iter().enumerate() {
        assert_eq!(req.committed[r], greedy_reference(target, p, req.max_new_tokens), "row {r}");
    }
}

#[test]
fn transient_draft_faults_keep_output_lossless() {
    let cfg = pool_config();
    let faults = FaultPolicy {
        failure_prob_per_step: 0.2,
        failure_kind: FaultKind::Transient,
        models: vec!["s".into()],
    };
    let mut r = router(&cfg, RoutingMode::Fixed(ChainPlan::new(["s", "m", "t"], 3)), EngineConfig::default(), faults, 2);
    let mut req = request(0, vec![vec![2, 3], vec![5]], 80, SamplingMode::Greedy);
    r.core_generate(&mut req).unwrap();
    assert!(req.failed_cycles > 0);
    assert!(req.failure.is_none());
    assert_matches_reference(&cfg, &req);
}

#[test]
fn repeated_failures_switch_to_target_only() {
    let cfg = pool_config();
    let faults = FaultPolicy {
        failure_prob_per_step: 0.999_999,
        failure_kind: FaultKind::Transient,
        models: vec!["s".into()],
    };
    let engine = EngineConfig {
        max_consecutive_failures: 3,
        prefill_scope: PrefillScope::TargetOnly,
        ..EngineConfig::default()
    };
    let mut r = router(&cfg, RoutingMode::Fixed(ChainPlan::new(["s", "t"], 4)), engine, faults, 3);
    let mut req = request(0, vec![vec![4, 4, 1]], 30, SamplingMode::Greedy);
    r.core_generate(&mut req).unwrap();
    assert!(req.fallback);
    assert_eq!(req.failed_cycles, 3);
    assert!(req.chain_history.iter().all(|c| c == "t"));
    assert_matches_reference(&cfg, &req);
}

#[test]
fn target_prefill_fault_fails_request() {
    let cfg = pool_config();
    let faults = FaultPolicy {
        failure_prob_per_step: 0.999_999,
        failure_kind: FaultKind::Transient,
        models: vec!["t".into()],
    };
    let mut r = router(&cfg, RoutingMode::TargetOnly, EngineConfig::default(), faults, 4);
    let mut req = request(0, vec![vec![1]], 10, SamplingMode::Greedy);
    r.core_generate(&mut req).unwrap();
    assert!(req.failure.is_some());
    assert!(req.completion_time.is_none());
    assert_eq!(r.states().live_states(), 0);
}

#[test]
fn failure_during_fallback_fails_request() {
    let cfg = pool_config();
    let faults = FaultPolicy {
        failure_prob_per_step: 0.6,
        failure_kind: FaultKind::Transient,
        models: Vec::new(),
    };
    let engine = EngineConfig {
        max_consecutive_failures: 1,
        ..EngineConfig::default()
    };
    let failed = (0..40u64).any(|seed| {
        let mut r = router(&cfg, RoutingMode::Fixed(ChainPlan::new(["s", "t"], 2)), engine.clone(), faults.clone(), seed);
        let mut req = request(seed, vec![vec![3, 1]], 40, SamplingMode::Greedy);
        r.core_generate(&mut req).unwrap();
        req.fallback && req.failure.as_deref().is_some_and(|e| e.contains("fallback"))
    });
    assert!(failed);
}

#[test]
fn oom_faults_demote_and_stay_lossless() {
    let mut cfg = pool_config();
    cfg.devices.push(DeviceSpec::cpu_fallback("cpu", 8, 10.0));
    let faults = FaultPolicy {
        failure_prob_per_step: 0.3,
        failure_kind: FaultKind::Oom,
        models: vec!["m".into()],
    };
    let mut r = router(&cfg, RoutingMode::Fixed(ChainPlan::new(["s", "m", "t"], 4)), EngineConfig::default(), faults, 5);
    let mut req = request(0, vec![vec![9, 2, 7]], 60, SamplingMode::Greedy);
    r.core_generate(&mut req).unwrap();
    assert!(req.failed_cycles > 0);
    assert_eq!(r.pool().resident_device("m"), Some(1));
    assert_matches_reference(&cfg, &req);
}

#[test]
fn unplaceable_draft_is_dropped() {
    let mut cfg = pool_config();
    cfg.models[0] = cfg.models[0].clone().with_memory(100);
    let mut r = router(&cfg, RoutingMode::Fixed(ChainPlan::new(["s", "t"], 4)), EngineConfig::default(), FaultPolicy::default(), 6);
    let mut req = request(0, vec![vec![1, 2]], 20, SamplingMode::Greedy);
    r.core_generate(&mut req).unwrap();
    assert!(req.dropped.contains("s"));
    assert!(req.failure.is_none());
    assert_matches_reference(&cfg, &req);
}

#[test]
fn single_token_budget_and_eos() {
    let mut cfg = pool_config();
    let mut r = router(&cfg, RoutingMode::Fixed(ChainPlan::new(["s", "m", "t"], 6)), EngineConfig::default(), FaultPolicy::default(), 7);
    let mut req = request(0, vec![vec![1], vec![2, 3]], 1, SamplingMode::Greedy);
    r.core_generate(&mut req).unwrap();
    assert!(req.committed.iter().all(|c| c.len() == 1));
    assert_eq!(req.cycles, 1);

    cfg.family.eos_logit_bias = 4.0;
    let mut r = router(&cfg, RoutingMode::Fixed(ChainPlan::new(["s", "t"], 6)), EngineConfig::default(), FaultPolicy::default(), 8);
    let prompts: Vec<TokenSeq> = (1..8).map(|i| vec![i, i + 1]).collect();
    let mut req = request(1, prompts, 50, SamplingMode::Greedy);
    r.core_generate(&mut req).unwrap();
    assert!(req.committed.iter().any(|c| c.len() < 50 && c.last() == Some(&0)));
    assert_matches_reference(&cfg, &req);
}

#[test]
fn model_states_stay_prefixes_of_committed_output() {
    let cfg = pool_config();
    for eager in [true, false] {
        let engine = EngineConfig {
            sampling: SamplingMode::Stochastic,
            eager_truncation: eager,
            ..EngineConfig::default()
        };
        let mut r = router(&cfg, RoutingMode::Adaptive, engine, FaultPolicy::default(), 9);
        let mut req = request(0, vec![vec![1, 2, 3], vec![4], vec![5, 6]], 60, SamplingMode::Stochastic);
        let mut now = 0.0;
        loop {
            let (out, cycle) = r.step_detailed(&mut req, now).unwrap();
            if let (StepOutcome::Continue(_), Some(c)) = (&out, cycle) {
                for m in &c.chain.models {
                    let sid = req.states[m];
                    for row in 0..req.batch_size() {
                        let view = r.states().attention_view(sid, row).unwrap();
                        let full = req.full_context(row);
                        assert!(full.starts_with(view), "{m} row {row} diverged from the commit");
                    }
                    assert!(r.states().is_prefix_valid(sid).unwrap());
                    let state = r.states().get(sid).unwrap();
                    if eager {
                        assert_eq!(state.physical_len(), state.logical_lens().iter().copied().max().unwrap());
                    }
                }
            }
            match out {
                StepOutcome::Continue(t) => now = t,
                StepOutcome::Done(_) => break,
            }
        }
        assert_eq!(r.states().live_states(), 0);
    }
}

#[test]
fn target_only_costs_one_decode_per_token() {
    let cfg = pool_config();
    let mut r = router(&cfg, RoutingMode::TargetOnly, EngineConfig::default(), FaultPolicy::default(), 10);
    let mut req = request(0, vec![vec![1, 2]], 25, SamplingMode::Greedy);
    let end = r.core_generate(&mut req).unwrap();
    let first = req.first_token_time.unwrap();
    let n = req.committed[0].len();
    assert!(((end - first) / (n - 1) as f64 - 0.1).abs() < 1e-9);
}
