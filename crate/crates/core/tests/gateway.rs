mod common;

use std::io::Read;
use std::time::{Duration, Instant};

use common::{plan, profile};
use iccs_core::director::ShotPhase;
use iccs_core::harness::gateway::{StatusView, MULTIPART_BOUNDARY};
use iccs_core::harness::{Facility, HarnessError, LaunchOptions};
use serde_json::{json, Value};

fn launch(wall: bool) -> (Facility, String) {
    let mut o = if wall { LaunchOptions::wall_clock() } else { LaunchOptions::virtual_clock() };
    o.gateway_addr = Some("127.0.0.1:0".into());
    let fac = Facility::launch(profile(), o).unwrap();
    let base = format!("http://{}", fac.gateway_addr().unwrap());
    (fac, base)
}

fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder().timeout(Duration::from_secs(10)).build().unwrap()
}

#[test]
fn status_alerts_and_shot() {
    let (fac, base) = launch(false);
    let c = client();
    let s: StatusView = c.get(format!("{base}/status")).send().unwrap().json().unwrap();
    assert!(s.rollup.ready);
    assert_eq!(s.shot.phase, ShotPhase::Idle);
    fac.services().alerts.raise("test", iccs_core::services::Severity::Serious, "over temp");
    let a: Vec<Value> = c.get(format!("{base}/alerts")).send().unwrap().json().unwrap();
    assert_eq!(a.len(), 1);
    assert_eq!(a[0]["text"], "over temp");
    let shot: Value = c.get(format!("{base}/shot")).send().unwrap().json().unwrap();
    assert_eq!(shot["phase"], "idle");
}

#[test]
fn commands_respect_reservations() {
    let (_fac, base) = launch(false);
    let c = client();
    let cmd = json!({"operator": "op1", "point_id": "beam01/mx", "command": {"cmd": "move_relative", "delta": 5}});
    let r = c.post(format!("{base}/command")).json(&cmd).send().unwrap();
    assert!(r.status().is_success(), "{:?}", r.text());

    let r = c
        .post(format!("{base}/reserve"))
        .json(&json!({"operator": "op1", "resource": "beam01/mx"}))
        .send()
        .unwrap();
    assert!(r.status().is_success());
    let r = c
        .post(format!("{base}/reserve"))
        .json(&json!({"operator": "op2", "resource": "beam01/mx"}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 409);

    let r = c.post(format!("{base}/command")).json(&cmd).send().unwrap();
    assert!(r.status().is_success(), "{:?}", r.text());
    let other = json!({"operator": "op2", "point_id": "beam01/mx", "command": {"cmd": "move_relative", "delta": 5}});
    let r = c.post(format!("{base}/command")).json(&other).send().unwrap();
    assert_eq!(r.status(), 409);
    let e: Value = r.json().unwrap();
    assert_eq!(e["kind"], "NotReservationHolder");

    let r = c
        .post(format!("{base}/reserve"))
        .json(&json!({"operator": "op1", "resource": "beam01/mx", "action": "release"}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 204);
    let unknown = json!({"operator": "op1", "point_id": "beam99/mx", "command": {"cmd": "stop"}});
    assert_eq!(c.post(format!("{base}/command")).json(&unknown).send().unwrap().status(), 404);
}

#[test]
fn hold_resume_abort_over_http() {
    let (fac, base) = launch(true);
    let c = client();
    assert_eq!(c.post(format!("{base}/shot/hold")).send().unwrap().status(), 409);
    let d = fac.director().clone();
    d.load_plan(plan("short.plan", "gw-shot")).unwrap();
    let runner = std::thread::spawn(move || d.run_countdown());
    let t0 = Instant::now();
    while fac.director().phase() != ShotPhase::Counting {
        assert!(t0.elapsed() < Duration::from_secs(5));
        std::thread::sleep(Duration::from_millis(5));
    }
    let r = c.post(format!("{base}/shot/hold")).json(&json!({"reason": "wind"})).send().unwrap();
    assert!(r.status().is_success());
    let s: Value = r.json().unwrap();
    assert_eq!(s["phase"], "held");
    assert_eq!(s["hold_reason"], "wind");
    std::thread::sleep(Duration::from_millis(300));
    let s: Value = c.get(format!("{base}/shot")).send().unwrap().json().unwrap();
    assert_eq!(s["phase"], "held");
    let s: Value = c.post(format!("{base}/shot/resume")).send().unwrap().json().unwrap();
    assert_eq!(s["phase"], "counting");
    let r = c.post(format!("{base}/shot/abort")).json(&json!({"reason": "test"})).send().unwrap();
    assert!(r.status().is_success());
    let out = runner.join().unwrap().unwrap();
    assert!(out.is_aborted());
    let s: Value = c.get(format!("{base}/shot")).send().unwrap().json().unwrap();
    assert_eq!(s["phase"], "aborted");
    assert_eq!(s["abort_reason"], "test");
}

fn read_until(r: &mut impl Read, needle: &[u8], limit: usize) -> Vec<u8> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    while buf.len() < limit {
        let n = r.read(&mut chunk).unwrap();
        if n == 0 {
            break;
        }
        buf.extend_from_slice(&chunk[..n]);
        if buf.windows(needle.len()).any(|w| w == needle) {
            break;
        }
    }
    buf
}

#[test]
fn events_stream_carries_ticks_and_alerts() {
    let (fac, base) = launch(true);
    let mut r = client().get(format!("{base}/events")).send().unwrap();
    assert!(r.headers()[reqwest::header::CONTENT_TYPE].to_str().unwrap().starts_with("text/event-stream"));
    std::thread::sleep(Duration::from_millis(200));
    fac.services().alerts.raise("test", iccs_core::services::Severity::Critical, "estop pressed");
    let got = read_until(&mut r, b"estop pressed", 1 << 20);
    let text = String::from_utf8_lossy(&got);
    assert!(text.contains("event: alert/critical"), "{text}");
}

#[test]
fn video_is_multipart_8bit_pgm() {
    let (_fac, base) = launch(true);
    let mut r = client().get(format!("{base}/video/beam01/cam?frames=3")).send().unwrap();
    let ct = r.headers()[reqwest::header::CONTENT_TYPE].to_str().unwrap().to_string();
    assert_eq!(ct, format!("multipart/x-mixed-replace; boundary={MULTIPART_BOUNDARY}"));
    let mut body = Vec::new();
    r.read_to_end(&mut body).unwrap();
    let text = String::from_utf8_lossy(&body);
    assert_eq!(text.matches("--frame\r\n").count(), 3);
    assert_eq!(text.matches("P5\n64 64\n255\n").count(), 3);
    let header = "P5\n64 64\n255\n";
    let at = body.windows(header.len()).position(|w| w == header.as_bytes()).unwrap();
    assert!(body.len() >= at + header.len() + 64 * 64);

    let r = client().get(format!("{base}/video/beam99/cam")).send().unwrap();
    assert_eq!(r.status(), 404);
}

#[test]
fn gateway_address_clash_is_port_unavailable() {
    let (fac, _) = launch(false);
    let mut o = LaunchOptions::virtual_clock();
    o.gateway_addr = Some(fac.gateway_addr().unwrap().to_string());
    assert!(matches!(Facility::launch(profile(), o), Err(HarnessError::PortUnavailable(_))));
}
