use serde::{Deserialize, Serialize};

use super::{accuracy_report, build_schedule, execute, validate, JitterModel, TimingLimits, TriggerRequest, TriggerSchedule};
use crate::bus::{Bus, BusError, Endpoint, ServiceHandle};
use crate::timing::report::FiredRecord;
use crate::wire::{self, err_reply, ok_reply, reply_from};

pub const TIMING_TARGET: &str = "svc/timing";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TimingRequest {
    Build {
        shot_id: String,
        requests: Vec<TriggerRequest>,
    },
    Validate {
        schedule: TriggerSchedule,
    },
    Execute {
        schedule: TriggerSchedule,
        model: JitterModel,
        seed: u64,
    },
    Report {
        records: Vec<FiredRecord>,
    },
}

/// `svc/timing` on the bus. The operations are pure, so the handler keeps
/// no state beyond the limits.
pub struct TimingHost {
    handle: ServiceHandle,
}

impl TimingHost {
    pub fn start(bus: &Bus, limits: TimingLimits) -> Result<Self, BusError> {
        let ep = Endpoint::inproc("svc-timing", bus.next_incarnation("svc-timing"));
        let handle = bus.serve(&ep, &[TIMING_TARGET], move |req| match wire::from_bytes(req.payload()) {
            Ok(TimingRequest::Build { shot_id, requests }) => reply_from(build_schedule(&shot_id, requests, limits)),
            Ok(TimingRequest::Validate { schedule }) => ok_reply(validate(&schedule)),
            Ok(TimingRequest::Execute { schedule, model, seed }) => reply_from(execute(&schedule, model, seed)),
            Ok(TimingRequest::Report { records }) => reply_from(accuracy_report(&records)),
            Err(e) => err_reply("BadRequest", e),
        })?;
        Ok(TimingHost { handle })
    }

    pub fn stop(self) {
        self.handle.stop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SimClock;
    use crate::timing::AccuracyReport;
    use crate::wire::call;
    use std::time::Duration;

    #[test]
    fn build_execute_report_over_bus() {
        let bus = Bus::new(SimClock::new_virtual());
        let host = TimingHost::start(&bus, TimingLimits::default()).unwrap();
        let d = Duration::from_secs(1);
        let s: TriggerSchedule = call(
            &bus,
            TIMING_TARGET,
            &TimingRequest::Build {
                shot_id: "s1".into(),
                requests: vec![TriggerRequest::new("a", 5, 1), TriggerRequest::new("b", -5, 1)],
            },
            d,
        )
        .unwrap();
        assert_eq!(s.entries[0].channel_id, "b");
        let recs: Vec<FiredRecord> = call(
            &bus,
            TIMING_TARGET,
            &TimingRequest::Execute {
                schedule: s,
                model: JitterModel::Zero,
                seed: 0,
            },
            d,
        )
        .unwrap();
        let rep: AccuracyReport = call(&bus, TIMING_TARGET, &TimingRequest::Report { records: recs }, d).unwrap();
        assert_eq!(rep.max_error_ps, 0);
        let err = call::<_, TriggerSchedule>(
            &bus,
            TIMING_TARGET,
            &TimingRequest::Build {
                shot_id: "s2".into(),
                requests: vec![TriggerRequest::new("a", 3_000_000_000_000, 1)],
            },
            d,
        )
        .unwrap_err();
        assert_eq!(err.remote_kind(), Some("OutOfWindow"));
        host.stop();
    }
}
