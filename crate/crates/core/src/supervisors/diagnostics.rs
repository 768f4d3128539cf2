//! Diagnostics collection: arm sources for a shot, gather and reduce their
//! data afterwards.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ack, ArmedPoint, Ctx, MarkAck, MarkAction, SupError, Supervisor};
use crate::fep::{fep_target, DeviceKind, FepRequest, ShotDataRecord, ShotPayload, Summary};
use crate::services::{EventCategory, Severity};
use crate::wire;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagEntry {
    pub point_id: String,
    pub kind: DeviceKind,
    pub summary: Option<Summary>,
    pub energy_j: Option<f64>,
    pub acquired_at_ps: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagBundle {
    pub shot_id: String,
    pub source: String,
    pub entries: Vec<DiagEntry>,
    /// Armed points whose data could not be read.
    pub missing: Vec<String>,
}

fn entry(r: &ShotDataRecord) -> DiagEntry {
    DiagEntry {
        point_id: r.point_id.clone(),
        kind: r.kind,
        summary: r.summary,
        energy_j: match r.payload {
            ShotPayload::Energy { joules } => Some(joules),
            _ => None,
        },
        acquired_at_ps: r.acquired_at_ps,
    }
}

/// Fetches every source's shot data from its FEP, reduces it and archives
/// the bundle under `(shot_id, ctx.name)`. Missing sources are flagged in
/// the stored bundle and reported as `PartialCollection`.
pub fn collect_diagnostics(ctx: &Ctx, shot_id: &str, sources: &[ArmedPoint]) -> Result<DiagBundle, SupError> {
    let mut by_fep: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for s in sources {
        by_fep.entry(&s.fep_id).or_default().insert(&s.point_id);
    }
    let mut entries = Vec::new();
    let mut missing = Vec::new();
    for (fep, points) in by_fep {
        let got: Result<Vec<ShotDataRecord>, SupError> = ctx.call(
            &fep_target(fep),
            &FepRequest::ReadShotData {
                shot_id: shot_id.to_string(),
            },
        );
        let recs: BTreeMap<String, ShotDataRecord> = got
            .map(|v| v.into_iter().map(|r| (r.point_id.clone(), r)).collect())
            .unwrap_or_default();
        for p in points {
            match recs.get(p) {
                Some(r) => entries.push(entry(r)),
                None => missing.push(p.to_string()),
            }
        }
    }
    let bundle = DiagBundle {
        shot_id: shot_id.to_string(),
        source: ctx.name.clone(),
        entries,
        missing: missing.clone(),
    };
    if sources.is_empty() {
        ctx.services
            .alerts
            .raise(&ctx.name, Severity::Warning, &format!("no armed diagnostics for {shot_id}"));
    }
    ctx.services
        .store(shot_id, &ctx.name, &wire::to_bytes(&bundle), true)
        .map_err(|e| SupError::Storage(e.to_string()))?;
    ctx.log(
        EventCategory::ShotPhase,
        &format!(
            "diagnostics {shot_id} collected={} missing={}",
            bundle.entries.len(),
            missing.len()
        ),
    );
    if missing.is_empty() {
        Ok(bundle)
    } else {
        Err(SupError::PartialCollection { missing })
    }
}

/// A diagnostics supervisor with a fixed source set.
pub struct Diagnostics {
    pub sources: Vec<ArmedPoint>,
    armed: BTreeMap<String, Vec<ArmedPoint>>,
}

impl Diagnostics {
    pub fn new(sources: Vec<ArmedPoint>) -> Self {
        Diagnostics {
            sources,
            armed: BTreeMap::new(),
        }
    }

    fn resources(points: &[ArmedPoint]) -> Vec<String> {
        points.iter().map(|p| p.point_id.clone()).collect()
    }

    fn disarm(&mut self, ctx: &Ctx, shot_id: &str) -> Vec<String> {
        let armed = self.armed.remove(shot_id).unwrap_or_default();
        let feps: BTreeSet<&str> = armed.iter().map(|a| a.fep_id.as_str()).collect();
        let mut done = Vec::new();
        for f in feps {
            let r: Result<Vec<String>, SupError> = ctx.call(
                &fep_target(f),
                &FepRequest::Disarm {
                    shot_id: Some(shot_id.to_string()),
                },
            );
            if let Ok(v) = r {
                done.extend(v);
            }
        }
        ctx.release_all(&Self::resources(&self.sources));
        done
    }
}

impl Supervisor for Diagnostics {
    fn on_mark(&mut self, ctx: &Ctx, shot_id: &str, action: MarkAction) -> Result<MarkAck, SupError> {
        let mut a = ack(ctx, action);
        if action != MarkAction::Arm {
            if action == MarkAction::FinalCheck {
                ctx.reserve_all(&Self::resources(self.armed.get(shot_id).map_or(&[][..], |v| v)))?;
            }
            return Ok(a);
        }
        ctx.reserve_all(&Self::resources(&self.sources))?;
        let mut by_fep: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for s in &self.sources {
            by_fep.entry(&s.fep_id).or_default().push(s.point_id.clone());
        }
        let armed = self.armed.entry(shot_id.to_string()).or_default();
        for (fep, points) in by_fep {
            let r: Vec<String> = ctx.call(
                &fep_target(fep),
                &FepRequest::Arm {
                    shot_id: shot_id.to_string(),
                    points,
                },
            )?;
            armed.extend(r.into_iter().map(|p| ArmedPoint {
                fep_id: fep.to_string(),
                point_id: p,
            }));
        }
        a.armed = armed.clone();
        Ok(a)
    }

    fn on_abort(&mut self, ctx: &Ctx, shot_id: &str) -> Vec<String> {
        self.disarm(ctx, shot_id)
    }

    fn on_post_shot(&mut self, ctx: &Ctx, shot_id: &str) -> Result<Option<DiagBundle>, SupError> {
        let armed = self.armed.remove(shot_id).unwrap_or_default();
        let out = collect_diagnostics(ctx, shot_id, &armed);
        ctx.release_all(&Self::resources(&self.sources));
        out.map(Some)
    }
}
