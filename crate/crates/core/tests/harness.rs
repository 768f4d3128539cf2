mod common;

use std::time::Duration;

use common::{profile, script, virtual_facility};
use iccs_core::harness::{Facility, HarnessError, LaunchOptions};

#[test]
fn profile_counts_match_scaling() {
    let cfg = profile();
    assert_eq!(cfg.point_count(), 1875);
    assert_eq!(cfg.plc.point_count(), 583);
    assert_eq!(cfg.feps.len(), 13);
}

#[test]
fn virtual_launch_is_ready_and_shutdown_empties_registry() {
    let mut fac = virtual_facility();
    assert!(fac.rollup().snapshot().ready);
    assert!(fac.ready_elapsed() < Duration::from_secs(10));
    let bus = fac.bus().clone();
    assert!(!bus.names().is_empty());
    fac.shutdown();
    assert!(bus.names().is_empty(), "{:?}", bus.names());
}

#[test]
fn tcp_address_clash_is_port_unavailable() {
    let mut o = LaunchOptions::virtual_clock();
    o.tcp_addr = Some("127.0.0.1:0".into());
    let a = Facility::launch(profile(), o).unwrap();
    let mut o = LaunchOptions::virtual_clock();
    o.tcp_addr = Some(a.tcp_addr().unwrap().to_string());
    match Facility::launch(profile(), o) {
        Err(HarnessError::PortUnavailable(_)) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("second launch on the same address succeeded"),
    }
}

#[test]
fn single_shot_script_passes_and_fills_every_histogram() {
    let fac = virtual_facility();
    let report = match iccs_core::harness::run_script(&fac, &script("single_shot.script")) {
        Ok(r) => r,
        Err(e) => panic!("{e}"),
    };
    println!("{}", report.render());
    assert!(report.passed());
    let m = fac.metrics_report().unwrap();
    for h in iccs_core::harness::metrics::HISTOGRAMS {
        assert!(m.histograms.get(h).is_some_and(|s| s.count > 0), "{h} empty");
    }
}

#[test]
fn abort_script_is_safe() {
    let fac = virtual_facility();
    let report = iccs_core::harness::run_script(&fac, &script("abort_shot.script")).unwrap_or_else(|e| panic!("{e}"));
    assert!(report.passed(), "{}", report.render());
}

#[test]
fn killed_fep_goes_down_and_relaunch_recovers_with_higher_incarnation() {
    let fac = virtual_facility();
    let before = fac.fep("fep03").unwrap().incarnation();
    fac.kill_fep("fep03").unwrap();
    fac.advance(fac.config().heartbeat * 4);
    let s = fac.rollup().subsystem("fep/fep03").unwrap();
    assert!(!s.ready);
    assert_eq!(s.down, vec!["fep03".to_string()]);
    assert!(!fac.rollup().snapshot().ready);
    let after = fac.restart_fep("fep03").unwrap();
    assert!(after > before);
    assert!(fac.rollup().snapshot().ready);
}

#[test]
fn malformed_script_names_the_line() {
    let e = iccs_core::harness::parse_script("align all\nload_plan x.plan\nhold T-four 2s\n").unwrap_err();
    assert_eq!(e.line, 3);
}

#[test]
fn abort_at_t_minus_two_is_aborted_and_safe() {
    let fac = virtual_facility();
    let mut s = iccs_core::harness::parse_script(
        "load_plan short.plan shot=s-abort2\nabort_at T-2\ncountdown\nexpect outcome aborted\nexpect abort_safety pass\n",
    )
    .unwrap();
    s.base = Some(common::root().join("plans"));
    let r = iccs_core::harness::run_script(&fac, &s).unwrap_or_else(|e| panic!("{e}"));
    assert!(r.passed(), "{}", r.render());
    assert!(r.audits.iter().any(|a| a.name == "abort_safety" && a.passed));
}

#[test]
fn failing_step_stops_under_stop_policy_and_not_under_continue() {
    let fac = virtual_facility();
    let s = iccs_core::harness::parse_script("expect outcome completed\nadvance 100ms\n").unwrap();
    match iccs_core::harness::run_script(&fac, &s) {
        Err(iccs_core::harness::ScriptError::StepFailed { line, .. }) => assert_eq!(line, 1),
        other => panic!("{other:?}"),
    }
    let s = iccs_core::harness::parse_script("policy continue\nexpect outcome completed\nadvance 100ms\n").unwrap();
    let r = iccs_core::harness::run_script(&fac, &s).unwrap();
    assert_eq!(r.steps.len(), 3);
    assert!(!r.passed());
}

#[test]
fn metrics_before_any_sample_is_no_data() {
    let fac = virtual_facility();
    fac.metrics().clear();
    assert_eq!(fac.metrics_report(), Err(iccs_core::harness::MetricsError::NoData));
}
