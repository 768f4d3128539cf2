mod common;

use std::collections::BTreeSet;
use std::time::Duration;

use common::{plan, virtual_facility};
use iccs_core::director::{Control, ControlKind, DirectorError, ShotOutcome, ShotPhase, DIRECTOR};
use iccs_core::supervisors::ArmedPoint;

fn director_lines(fac: &iccs_core::harness::Facility) -> Vec<(u64, String)> {
    fac.services()
        .events
        .records()
        .into_iter()
        .filter(|r| r.source == DIRECTOR)
        .map(|r| (r.time.as_nanos(), r.payload))
        .collect()
}

#[test]
fn completed_shot_recovers_every_armed_point() {
    let fac = virtual_facility();
    let d = fac.director();
    d.load_plan(plan("short.plan", "d-complete")).unwrap();
    let out = d.run_countdown().unwrap();
    let ShotOutcome::Completed { fired, recovery, .. } = out else {
        panic!("{out:?}")
    };
    assert_eq!(fired, 1600);
    assert!(recovery.complete());
    assert_eq!(recovery.expected, d.armed().len());
    let stored = fac.services().archive.fetch("d-complete");
    let points = stored.iter().filter(|f| f.record.source.starts_with("pt/")).count();
    assert_eq!(points, recovery.expected);
    assert!(stored.iter().all(|f| f.verified()));
    assert_eq!(d.phase(), ShotPhase::Complete);
}

#[test]
fn hold_at_t_minus_four_for_two_seconds() {
    let fac = virtual_facility();
    let d = fac.director();
    let p = plan("short.plan", "d-hold");
    let planned = p.countdown_length();
    d.load_plan(p).unwrap();
    d.schedule_control(Control {
        at: Duration::from_secs(4),
        kind: ControlKind::Hold {
            reason: "test".into(),
            duration: Some(Duration::from_secs(2)),
        },
    });
    assert!(!d.run_countdown().unwrap().is_aborted());
    let lines = director_lines(&fac);
    let first_tick = lines.iter().find(|(_, l)| l.starts_with("tick d-hold")).unwrap().0;
    let fire = lines.iter().find(|(_, l)| l.starts_with("fire d-hold")).unwrap().0;
    assert_eq!(Duration::from_nanos(fire - first_tick), planned + Duration::from_secs(2));
    let resume = lines.iter().position(|(_, l)| l.starts_with("resume d-hold")).unwrap();
    let next_tick = lines[resume..].iter().find(|(_, l)| l.starts_with("tick ")).unwrap();
    assert_eq!(next_tick.1, "tick d-hold 4000 counting");
}

#[test]
fn fep_killed_after_arming_gives_partial_recovery_of_exactly_its_points() {
    let fac = virtual_facility();
    let d = fac.director().clone();
    d.load_plan(plan("short.plan", "d-partial")).unwrap();
    d.schedule_control(Control {
        at: Duration::from_millis(200),
        kind: ControlKind::Hold {
            reason: "kill window".into(),
            duration: None,
        },
    });
    let runner = {
        let d = d.clone();
        std::thread::spawn(move || d.run_countdown())
    };
    while d.phase() != ShotPhase::Held {
        assert!(!runner.is_finished(), "countdown ended before the hold");
        std::hint::spin_loop();
    }
    let armed_on_victim: BTreeSet<String> = d
        .armed()
        .into_iter()
        .filter(|a: &ArmedPoint| a.fep_id == "fep09")
        .map(|a| a.point_id)
        .collect();
    assert!(!armed_on_victim.is_empty());
    fac.kill_fep("fep09").unwrap();
    d.resume().unwrap();
    let out = runner.join().unwrap().unwrap();
    let ShotOutcome::Completed { recovery, .. } = out else {
        panic!("{out:?}")
    };
    assert!(!recovery.complete());
    let missing: BTreeSet<String> = recovery.missing.iter().cloned().collect();
    assert_eq!(missing, armed_on_victim);
    assert_eq!(recovery.recovered + missing.len(), recovery.expected);
    assert!(recovery.verified);
}

#[test]
fn phase_rules() {
    let fac = virtual_facility();
    let d = fac.director();
    assert!(matches!(d.run_countdown(), Err(DirectorError::IllegalPhase { .. })));
    assert!(matches!(d.hold("x", None), Err(DirectorError::IllegalPhase { .. })));
    assert!(matches!(d.abort("x"), Err(DirectorError::IllegalPhase { .. })));

    let mut p = plan("short.plan", "d-bad");
    p.participants.push("sup/nobody".into());
    assert_eq!(d.load_plan(p), Err(DirectorError::UnknownParticipant("sup/nobody".into())));

    let mut p = plan("short.plan", "d-bad");
    p.marks.reverse();
    assert!(matches!(d.load_plan(p), Err(DirectorError::InvalidMarks(_))));

    let mut p = plan("short.plan", "d-bad");
    p.goals.insert("beam01".into(), 1e9);
    assert!(matches!(d.load_plan(p), Err(DirectorError::GoalRejected(_))));
    assert_eq!(d.phase(), ShotPhase::Idle);
}

#[test]
fn open_interlock_blocks_the_countdown() {
    let fac = virtual_facility();
    let d = fac.director();
    fac.set_field("facility/key", false).unwrap();
    fac.advance(Duration::from_millis(200));
    d.load_plan(plan("short.plan", "d-interlock")).unwrap();
    match d.run_countdown() {
        Err(DirectorError::PermissiveDenied { action, failing }) => {
            assert_eq!(action, "shot/fire");
            assert!(failing.contains(&"facility/key".to_string()));
        }
        other => panic!("{other:?}"),
    }
    assert!(d.fired().is_empty());
}

#[test]
fn faulted_subsystem_blocks_the_countdown() {
    let fac = virtual_facility();
    let d = fac.director();
    fac.inject_fault("beam02/opt004", "cracked").unwrap();
    d.load_plan(plan("short.plan", "d-fault")).unwrap();
    match d.run_countdown() {
        Err(DirectorError::ParticipantNotReady { participant, reason }) => {
            assert_eq!(participant, "sup/optics");
            assert!(reason.contains("beam02/opt004"), "{reason}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn abort_during_countdown_stops_ticks_and_dumps_charge() {
    let fac = virtual_facility();
    let d = fac.director();
    d.load_plan(plan("short.plan", "d-abort")).unwrap();
    d.schedule_control(Control {
        at: Duration::from_millis(1000),
        kind: ControlKind::Abort { reason: "test".into() },
    });
    let out = d.run_countdown().unwrap();
    assert_eq!(
        out,
        ShotOutcome::Aborted {
            shot_id: "d-abort".into(),
            t_minus_ms: 1000,
            reason: "test".into()
        }
    );
    let lines = director_lines(&fac);
    let a = lines.iter().position(|(_, l)| l.starts_with("abort d-abort")).unwrap();
    assert!(!lines[a..].iter().any(|(_, l)| l.starts_with("tick ") || l.starts_with("fire ")));
    let audits = iccs_core::director::audit::audit_countdown(&fac.services().events.records(), "d-abort");
    assert!(audits.iter().all(|f| f.passed), "{audits:?}");
    let safety = iccs_core::director::audit::abort_safety(
        fac.bus(),
        "d-abort",
        &fac.fep_ids(),
        &fac.participants(),
        fac.deadline(),
    );
    assert!(safety.passed, "{}", safety.detail);
}
