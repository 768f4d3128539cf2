//! Beam control: automatic alignment over the bus.

use std::collections::BTreeMap;
use std::time::Duration;

use super::alignment::{run_alignment, AlignError, AlignmentConfig, AlignmentRig, AlignmentStep, AlignmentTrace};
use super::{ack, Ctx, MarkAck, MarkAction, SupError, SupRequest, Supervisor};
use crate::fep::{point_target, CommandAck, FepRequest, Frame, Health, PointCommand, StatusReading, Value};
use crate::services::EventCategory;
use crate::wire::{self, reply_from};

const SETTLE_STEP: Duration = Duration::from_millis(50);
const SETTLE_LIMIT: u32 = 4000;

struct BusRig<'a> {
    ctx: &'a Ctx,
    cfg: &'a AlignmentConfig,
}

impl BusRig<'_> {
    fn status(&self, point: &str) -> Result<StatusReading, AlignError> {
        self.ctx
            .call(
                &point_target(point),
                &FepRequest::Status {
                    point_id: point.to_string(),
                },
            )
            .map_err(|e| AlignError::DeviceFault(e.to_string()))
    }

    fn position(&self, point: &str) -> Result<i64, AlignError> {
        let r = self.status(point)?;
        if r.health == Health::Fault {
            return Err(AlignError::DeviceFault(format!(
                "{point}: {}",
                r.reason.unwrap_or_default()
            )));
        }
        match r.value {
            Value::Steps(p) => Ok(p),
            v => Err(AlignError::DeviceFault(format!("{point} is not a motor ({v:?})"))),
        }
    }

    fn jog(&self, point: &str, delta: i64) -> Result<(), AlignError> {
        if delta == 0 {
            return Ok(());
        }
        let req = FepRequest::Command {
            point_id: point.to_string(),
            command: PointCommand::MoveRelative { delta },
            caller: self.ctx.name.clone(),
        };
        match wire::call::<_, CommandAck>(&self.ctx.bus, &point_target(point), &req, self.ctx.deadline) {
            Ok(_) => Ok(()),
            Err(e) if e.remote_kind() == Some("NotReservationHolder") => {
                Err(AlignError::ReservationMissing(point.to_string()))
            }
            Err(e) => Err(AlignError::DeviceFault(format!("{point}: {e}"))),
        }
    }
}

impl AlignmentRig for BusRig<'_> {
    fn grab(&mut self) -> Result<Frame, AlignError> {
        self.ctx
            .call(
                &point_target(&self.cfg.camera_id),
                &FepRequest::GrabFrame {
                    camera_id: self.cfg.camera_id.clone(),
                },
            )
            .map_err(|e| AlignError::DeviceFault(e.to_string()))
    }

    fn move_by(&mut self, dx: i64, dy: i64) -> Result<(), AlignError> {
        let (mx, my) = (&self.cfg.motor_x, &self.cfg.motor_y);
        let want = (self.position(mx)? + dx, self.position(my)? + dy);
        self.jog(mx, dx)?;
        self.jog(my, dy)?;
        for _ in 0..SETTLE_LIMIT {
            if (self.position(mx)?, self.position(my)?) == want {
                return Ok(());
            }
            self.ctx.driver.advance(SETTLE_STEP);
        }
        Err(AlignError::DeviceFault(format!("{mx}/{my} did not settle")))
    }

    fn progress(&mut self, step: &AlignmentStep) {
        let _ = self
            .ctx
            .bus
            .publish(&format!("align/{}", self.cfg.beam_id), wire::to_bytes(step));
    }
}

/// Runs the loop against the live facility. Both motors must already be
/// reserved by `ctx.name`.
pub fn align_beam(ctx: &Ctx, cfg: &AlignmentConfig) -> Result<AlignmentTrace, AlignError> {
    for m in [&cfg.motor_x, &cfg.motor_y] {
        if ctx.services.reservations.holder_of(m).as_deref() != Some(ctx.name.as_str()) {
            return Err(AlignError::ReservationMissing(m.clone()));
        }
    }
    run_alignment(cfg, &mut BusRig { ctx, cfg })
}

pub struct BeamControl {
    pub beams: BTreeMap<String, AlignmentConfig>,
    runs: u64,
}

impl BeamControl {
    pub fn new(beams: impl IntoIterator<Item = AlignmentConfig>) -> Self {
        BeamControl {
            beams: beams.into_iter().map(|c| (c.beam_id.clone(), c)).collect(),
            runs: 0,
        }
    }

    /// Reserve, align, release, archive the trace.
    pub fn align(&mut self, ctx: &Ctx, beam_id: &str) -> Result<AlignmentTrace, SupError> {
        let cfg = self
            .beams
            .get(beam_id)
            .ok_or_else(|| SupError::NotReady(format!("no alignment config for {beam_id}")))?
            .clone();
        let motors = [cfg.motor_x.clone(), cfg.motor_y.clone()];
        ctx.reserve_all(&motors)?;
        let result = align_beam(ctx, &cfg);
        ctx.release_all(&motors);
        let trace = result?;
        self.runs += 1;
        let key = format!("align-{}-{}", beam_id.replace('/', "_"), self.runs);
        ctx.services
            .store(&key, "sup/beam_control", &wire::to_bytes(&trace), false)
            .map_err(|e| SupError::Storage(e.to_string()))?;
        ctx.log(
            EventCategory::DeviceStatus,
            &format!(
                "aligned {beam_id} converged={} corrections={} error={:.4}",
                trace.converged,
                trace.corrections(),
                trace.final_error().unwrap_or(f64::NAN)
            ),
        );
        Ok(trace)
    }
}

impl Supervisor for BeamControl {
    fn on_mark(&mut self, ctx: &Ctx, _shot_id: &str, action: MarkAction) -> Result<MarkAck, SupError> {
        Ok(ack(ctx, action))
    }

    fn other(&mut self, ctx: &Ctx, req: SupRequest) -> Vec<u8> {
        match req {
            SupRequest::Align { beam_id } => reply_from(self.align(ctx, &beam_id)),
            r => reply_from::<(), SupError>(Err(SupError::Unsupported(format!("{r:?}")))),
        }
    }
}
