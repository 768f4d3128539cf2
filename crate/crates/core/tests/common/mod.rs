#![allow(dead_code)]

use std::path::PathBuf;

use iccs_core::director::plan::{parse_plan, ShotPlan};
use iccs_core::harness::{load_config, load_script, Facility, FacilityConfig, LaunchOptions, Script};

pub fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn profile() -> FacilityConfig {
    load_config(root().join("profiles/8beam.cfg")).unwrap()
}

pub fn plan(name: &str, shot: &str) -> ShotPlan {
    let text = std::fs::read_to_string(root().join("plans").join(name)).unwrap();
    let mut p = parse_plan(&text).unwrap();
    p.shot_id = shot.to_string();
    p
}

pub fn script(name: &str) -> Script {
    load_script(root().join("scripts").join(name)).unwrap()
}

pub fn virtual_facility() -> Facility {
    Facility::launch(profile(), LaunchOptions::virtual_clock()).unwrap()
}

pub fn wall_facility() -> Facility {
    Facility::launch(profile(), LaunchOptions::wall_clock()).unwrap()
}
