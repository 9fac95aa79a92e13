use setchain::bench::*;
use setchain::simnet::SimTime;

#[test]
fn idle_run_completes_one_epoch_per_period() {
    let s = Scenario { add_rate: 0, duration: SimTime(100_000), ..Default::default() };
    let r = run_scenario(&s).unwrap();
    assert!(r.passed(), "{:?}", r.property_violations);
    // 100_000 / 200 = 500, less a little pipeline warm-up.
    assert!((490..=500).contains(&r.epochs_completed), "{}", r.epochs_completed);
}

#[test]
fn aggregation_sends_fewer_messages_per_add() {
    let (fast, agg) = h3_scenarios();
    let short = |s: Scenario| Scenario { duration: SimTime(10_000), ..s };
    let fast = run_scenario(&short(fast)).unwrap();
    let agg = run_scenario(&short(agg)).unwrap();
    let ratio = compare(&agg, &fast, Metric::MessagesPerAdd).unwrap();
    assert!(ratio < 1.0, "{ratio}");
    assert!(agg.adds_per_sec > fast.adds_per_sec);
}

#[test]
fn windows_tile_the_run() {
    let s = Scenario { add_rate: 50_000, duration: SimTime(10_000), ..Default::default() };
    let r = run_scenario(&s).unwrap();
    assert_eq!(r.windows.len(), 10);
    assert_eq!(r.windows[0].start, SimTime::ZERO);
    assert_eq!(r.windows[9].end, s.duration);
    for w in r.windows.windows(2) {
        assert_eq!(w[0].end, w[1].start);
    }
    assert!(stationarity(&r).unwrap() > 0.0);
}

#[test]
fn builtins_validate_and_round_trip() {
    for name in ["default", "h1", "h3-fast", "h3-fast-agg", "h4-none", "h4-silent", "h5"] {
        let s = builtin(name).unwrap();
        s.validate().unwrap();
        let back: Scenario = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back.key(), s.key());
    }
    assert!(builtin("nope").is_none());
    assert!(serde_json::from_str::<Scenario>(r#"{"bogus": 1}"#).is_err());
}

#[test]
fn silent_adversary_keeps_stamping_at_n10() {
    let (none, silent) = h4_scenarios();
    let short = |s: Scenario| Scenario { duration: SimTime(10_000), add_rate: 50_000, ..s };
    let a = run_scenario(&short(none)).unwrap();
    let b = run_scenario(&short(silent)).unwrap();
    assert!(a.passed() && b.passed());
    assert!(compare(&b, &a, Metric::AddsPerSec).unwrap() > 0.5);
}
