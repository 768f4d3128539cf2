//! Front-end processors hosting simulated device control points.

pub mod devices;
pub mod host;
pub mod runtime;

pub use devices::{DeviceKind, DeviceParams, Frame, MotorState, Summary, Waveform};
pub use host::{fep_target, point_target, video_stream, FepHost, FepInfo, FepRequest, FepStartError};
pub use runtime::{
    beam_of, point_seed, CommandAck, Fep, FepConfig, FepError, Health, PointCommand, PointConfig, ShotDataRecord,
    ShotPayload, StatusReading, Value,
};
