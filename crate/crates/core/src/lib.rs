//! Layered supervisory control framework for a laser facility at desk scale.
//!
//! Supervisors coordinate front-end processors (FEPs) over a distribution
//! bus; framework services provide alerts, an event log, reservations and a
//! shot-data archive; a shot director runs the countdown and triggers a
//! picosecond timing schedule at T-0.

pub mod bus;
pub mod clock;
pub mod director;
pub mod fep;
pub mod harness;
pub mod plc;
pub mod services;
pub mod supervisors;
pub mod timing;
pub mod wire;

pub use bus::{Bus, BusError, Endpoint};
pub use clock::{ClockMode, SimClock, SimTime};
