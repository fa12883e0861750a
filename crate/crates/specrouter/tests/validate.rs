use specrouter::engine::AcceptanceRule;
use specrouter::validate::{brute_force_selection, check_acceptance_rate, check_expected_tokens, format_table, ValidateOptions};

#[test]
fn acceptance_check_passes_with_standard_rule() {
    let r = check_acceptance_rate(&ValidateOptions::default());
    assert_eq!(r.len(), 3);
    assert!(r.iter().all(|c| c.passed), "{}", format_table(&r));
}

#[test]
fn corrupted_acceptance_rule_fails_checks() {
    let opts = ValidateOptions {
        acceptance_rule: AcceptanceRule::AlwaysAccept,
        ..ValidateOptions::default()
    };
    assert!(check_acceptance_rate(&opts).iter().all(|c| !c.passed));
    assert!(check_expected_tokens(&opts).iter().any(|c| !c.passed));
}

#[test]
fn zero_tolerance_reports_failures() {
    let opts = ValidateOptions {
        tol_scale: 0.0,
        ..ValidateOptions::default()
    };
    let r = check_acceptance_rate(&opts);
    assert!(r.iter().any(|c| !c.passed));
    assert!(format_table(&r).contains("FAIL"));
}

#[test]
fn brute_force_skips_chains_over_depth_limit() {
    use specrouter::scheduler::{pair_key, Ema, MetricsSnapshot, SchedulerConfig};
    let order: Vec<String> = ["a", "b", "c", "t"].iter().map(|s| s.to_string()).collect();
    let mut snap = MetricsSnapshot::default();
    for (m, t) in [("a", 0.001), ("b", 0.002), ("c", 0.003), ("t", 0.1)] {
        snap.ema_time.insert(m.into(), Ema::first(t));
        snap.ema_verify_pass.insert(m.into(), Ema::first(t));
    }
    for (x, y) in [("a", "b"), ("b", "c"), ("c", "t"), ("a", "c"), ("a", "t"), ("b", "t")] {
        snap.ema_dtv.insert(pair_key(x, y), Ema::first(0.01));
    }
    let cfg = SchedulerConfig {
        max_chain_len: 2,
        ..SchedulerConfig::default()
    };
    let (chain, _) = brute_force_selection(&order, "t", &snap, &cfg, true).unwrap();
    assert_eq!(chain.len(), 2);
}
