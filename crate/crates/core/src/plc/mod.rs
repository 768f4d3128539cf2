//! Industrial-controls segment: permissive chains over latching interlock
//! inputs, plus first-order slow process channels.

mod host;
mod slow;

pub use host::{PlcHandle, PlcRequest, PlcSnapshot, PLC_TARGET};
pub use slow::{SlowChannel, SlowKind};

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::wire::ErrorKind;

pub const DEFAULT_SCAN_PERIOD: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterlockInput {
    pub input_id: String,
    /// Field state as last reported.
    pub field: bool,
    /// Polarity that counts as safe; anything else trips the latch.
    pub safe: bool,
    pub latched_trip: bool,
}

impl InterlockInput {
    pub fn new(input_id: impl Into<String>, safe: bool) -> Self {
        InterlockInput {
            input_id: input_id.into(),
            field: safe,
            safe,
            latched_trip: false,
        }
    }

    /// Value seen by chains: a latched trip pins the unsafe polarity.
    pub fn value(&self) -> bool {
        if self.latched_trip {
            !self.safe
        } else {
            self.field
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Literal {
    pub input_id: String,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermissiveChain {
    pub action_id: String,
    pub required: Vec<Literal>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailingTerm {
    pub input_id: String,
    pub required: bool,
    pub actual: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "permit", rename_all = "snake_case")]
pub enum Permit {
    Allow,
    Deny { failing: Vec<FailingTerm> },
}

impl Permit {
    pub fn allowed(&self) -> bool {
        matches!(self, Permit::Allow)
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Serialize, Deserialize)]
pub enum PlcError {
    #[error("unknown action {0}")]
    UnknownAction(String),
    #[error("chain {action} references unknown input {input}")]
    UnknownInput { action: String, input: String },
    #[error("chain {0} has no literals")]
    EmptyChain(String),
    #[error("duplicate id {0}")]
    Duplicate(String),
    #[error("unknown channel {0}")]
    UnknownChannel(String),
    #[error("setpoint {setpoint} outside [{min}, {max}] for {channel}")]
    SetpointOutOfBounds {
        channel: String,
        setpoint: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid channel parameters for {0}")]
    InvalidChannel(String),
}

impl ErrorKind for PlcError {
    fn kind(&self) -> &'static str {
        match self {
            PlcError::UnknownAction(_) => "UnknownAction",
            PlcError::UnknownInput { .. } => "UnknownInput",
            PlcError::EmptyChain(_) => "EmptyChain",
            PlcError::Duplicate(_) => "Duplicate",
            PlcError::UnknownChannel(_) => "UnknownChannel",
            PlcError::SetpointOutOfBounds { .. } => "SetpointOutOfBounds",
            PlcError::InvalidChannel(_) => "InvalidChannel",
        }
    }
}

/// Conjunction of literals against `value`. Lists every failing literal.
pub fn evaluate_literals(required: &[Literal], mut value: impl FnMut(&str) -> bool) -> Permit {
    let failing: Vec<FailingTerm> = required
        .iter()
        .filter_map(|l| {
            let actual = value(&l.input_id);
            (actual != l.required).then(|| FailingTerm {
                input_id: l.input_id.clone(),
                required: l.required,
                actual,
            })
        })
        .collect();
    if failing.is_empty() {
        Permit::Allow
    } else {
        Permit::Deny { failing }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanOutput {
    pub scan: u64,
    pub permits: BTreeMap<String, Permit>,
    pub new_trips: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct PlcSegment {
    inputs: BTreeMap<String, InterlockInput>,
    chains: BTreeMap<String, PermissiveChain>,
    channels: BTreeMap<String, SlowChannel>,
    pending: BTreeMap<String, bool>,
    scans: u64,
    last: BTreeMap<String, Permit>,
}

impl PlcSegment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_input(&mut self, input: InterlockInput) -> Result<(), PlcError> {
        if self.inputs.contains_key(&input.input_id) {
            return Err(PlcError::Duplicate(input.input_id));
        }
        self.inputs.insert(input.input_id.clone(), input);
        Ok(())
    }

    pub fn add_chain(&mut self, chain: PermissiveChain) -> Result<(), PlcError> {
        if chain.required.is_empty() {
            return Err(PlcError::EmptyChain(chain.action_id));
        }
        if self.chains.contains_key(&chain.action_id) {
            return Err(PlcError::Duplicate(chain.action_id));
        }
        if let Some(l) = chain.required.iter().find(|l| !self.inputs.contains_key(&l.input_id)) {
            return Err(PlcError::UnknownInput {
                action: chain.action_id.clone(),
                input: l.input_id.clone(),
            });
        }
        self.chains.insert(chain.action_id.clone(), chain);
        Ok(())
    }

    pub fn add_channel(&mut self, ch: SlowChannel) -> Result<(), PlcError> {
        if !ch.is_well_formed() {
            return Err(PlcError::InvalidChannel(ch.channel_id));
        }
        if self.channels.contains_key(&ch.channel_id) {
            return Err(PlcError::Duplicate(ch.channel_id));
        }
        self.channels.insert(ch.channel_id.clone(), ch);
        Ok(())
    }

    pub fn input(&self, id: &str) -> Option<&InterlockInput> {
        self.inputs.get(id)
    }

    pub fn inputs(&self) -> impl Iterator<Item = &InterlockInput> {
        self.inputs.values()
    }

    pub fn chains(&self) -> impl Iterator<Item = &PermissiveChain> {
        self.chains.values()
    }

    pub fn channels(&self) -> impl Iterator<Item = &SlowChannel> {
        self.channels.values()
    }

    pub fn channel(&self, id: &str) -> Option<&SlowChannel> {
        self.channels.get(id)
    }

    pub fn scans(&self) -> u64 {
        self.scans
    }

    pub fn point_count(&self) -> usize {
        self.inputs.len() + self.chains.len() + self.channels.len()
    }

    /// Evaluates against current effective values (latches included).
    pub fn evaluate(&self, action_id: &str) -> Result<Permit, PlcError> {
        let chain = self
            .chains
            .get(action_id)
            .ok_or_else(|| PlcError::UnknownAction(action_id.to_string()))?;
        Ok(evaluate_literals(&chain.required, |id| self.inputs[id].value()))
    }

    /// Queues a field change for the next scan.
    pub fn set_field(&mut self, input_id: &str, value: bool) -> Result<(), PlcError> {
        if !self.inputs.contains_key(input_id) {
            return Err(PlcError::UnknownInput {
                action: String::new(),
                input: input_id.to_string(),
            });
        }
        self.pending.insert(input_id.to_string(), value);
        Ok(())
    }

    /// One synchronous full scan: apply queued and given field inputs, latch
    /// unsafe inputs, re-evaluate every chain.
    pub fn scan_cycle(&mut self, field_inputs: &BTreeMap<String, bool>) -> ScanOutput {
        let mut pending = std::mem::take(&mut self.pending);
        pending.extend(field_inputs.iter().map(|(k, v)| (k.clone(), *v)));
        for (id, v) in pending {
            if let Some(i) = self.inputs.get_mut(&id) {
                i.field = v;
            }
        }
        let mut new_trips = Vec::new();
        for i in self.inputs.values_mut() {
            if i.field != i.safe && !i.latched_trip {
                i.latched_trip = true;
                new_trips.push(i.input_id.clone());
            }
        }
        self.scans += 1;
        let permits: BTreeMap<String, Permit> = self
            .chains
            .values()
            .map(|c| {
                (
                    c.action_id.clone(),
                    evaluate_literals(&c.required, |id| self.inputs[id].value()),
                )
            })
            .collect();
        self.last = permits.clone();
        ScanOutput {
            scan: self.scans,
            permits,
            new_trips,
        }
    }

    pub fn last_permits(&self) -> &BTreeMap<String, Permit> {
        &self.last
    }

    /// Clears latches whose field input is currently safe.
    pub fn reset_trips(&mut self) -> Vec<String> {
        let mut cleared = Vec::new();
        for i in self.inputs.values_mut() {
            if i.latched_trip && i.field == i.safe {
                i.latched_trip = false;
                cleared.push(i.input_id.clone());
            }
        }
        cleared
    }

    pub fn latched(&self) -> Vec<String> {
        self.inputs
            .values()
            .filter(|i| i.latched_trip)
            .map(|i| i.input_id.clone())
            .collect()
    }

    pub fn command_slow(&mut self, channel_id: &str, setpoint: f64) -> Result<f64, PlcError> {
        let ch = self
            .channels
            .get_mut(channel_id)
            .ok_or_else(|| PlcError::UnknownChannel(channel_id.to_string()))?;
        ch.command(setpoint)
    }

    pub fn advance_channels(&mut self, dt: Duration) {
        for ch in self.channels.values_mut() {
            ch.advance(dt);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lit(id: &str, required: bool) -> Literal {
        Literal {
            input_id: id.into(),
            required,
        }
    }

    fn door_segment() -> PlcSegment {
        let mut s = PlcSegment::new();
        s.add_input(InterlockInput::new("door/bay1_closed", true)).unwrap();
        s.add_input(InterlockInput::new("vac/ok", true)).unwrap();
        s.add_chain(PermissiveChain {
            action_id: "shutter/beam01/open".into(),
            required: vec![lit("door/bay1_closed", true), lit("vac/ok", true)],
        })
        .unwrap();
        s
    }

    #[test]
    fn allow_and_deny_lists_all_terms() {
        let mut s = door_segment();
        assert!(s.evaluate("shutter/beam01/open").unwrap().allowed());
        let mut f = BTreeMap::new();
        f.insert("door/bay1_closed".to_string(), false);
        f.insert("vac/ok".to_string(), false);
        let out = s.scan_cycle(&f);
        match &out.permits["shutter/beam01/open"] {
            Permit::Deny { failing } => assert_eq!(failing.len(), 2),
            p => panic!("{p:?}"),
        }
    }

    #[test]
    fn unknown_references() {
        let mut s = door_segment();
        assert!(matches!(s.evaluate("nope"), Err(PlcError::UnknownAction(_))));
        let err = s
            .add_chain(PermissiveChain {
                action_id: "x".into(),
                required: vec![lit("ghost", true)],
            })
            .unwrap_err();
        assert_eq!(
            err,
            PlcError::UnknownInput {
                action: "x".into(),
                input: "ghost".into()
            }
        );
    }

    #[test]
    fn latch_then_reset() {
        let mut s = door_segment();
        let open = BTreeMap::from([("door/bay1_closed".to_string(), false)]);
        let closed = BTreeMap::from([("door/bay1_closed".to_string(), true)]);
        let out = s.scan_cycle(&open);
        assert_eq!(out.new_trips, vec!["door/bay1_closed"]);
        let out = s.scan_cycle(&closed);
        assert!(!out.permits["shutter/beam01/open"].allowed());
        assert_eq!(s.reset_trips(), vec!["door/bay1_closed"]);
        assert!(s.scan_cycle(&closed).permits["shutter/beam01/open"].allowed());
        assert!(s.reset_trips().is_empty());
    }

    #[test]
    fn reset_with_door_still_open_keeps_latch() {
        let mut s = door_segment();
        let open = BTreeMap::from([("door/bay1_closed".to_string(), false)]);
        s.scan_cycle(&open);
        assert!(s.reset_trips().is_empty());
        assert_eq!(s.latched(), vec!["door/bay1_closed"]);
    }

    #[test]
    fn idempotent_scan() {
        let mut s = door_segment();
        let a = s.scan_cycle(&BTreeMap::new());
        let b = s.scan_cycle(&BTreeMap::new());
        assert_eq!(a.permits, b.permits);
    }

    #[test]
    fn exhaustive_eight_literals() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pol: Vec<bool> = (0..8).map(|_| rng.random()).collect();
        let req: Vec<Literal> = (0..8).map(|i| lit(&format!("i{i}"), pol[i])).collect();
        for v in 0u32..256 {
            let bits = |id: &str| (v >> id[1..].parse::<u32>().unwrap()) & 1 == 1;
            let oracle = (0..8).all(|i| ((v >> i) & 1 == 1) == pol[i]);
            assert_eq!(evaluate_literals(&req, bits).allowed(), oracle);
        }
    }

    proptest! {
        #[test]
        fn flipping_to_unsafe_never_allows(n in 1usize..10, pol in proptest::collection::vec(any::<bool>(), 10), flip in 0usize..10) {
            let req: Vec<Literal> = (0..n).map(|i| lit(&format!("i{i}"), pol[i])).collect();
            let flip = flip % n;
            let all_ok = |id: &str| { let i: usize = id[1..].parse().unwrap(); pol[i] };
            prop_assert!(evaluate_literals(&req, all_ok).allowed());
            let flipped = |id: &str| { let i: usize = id[1..].parse().unwrap(); if i == flip { !pol[i] } else { pol[i] } };
            prop_assert!(!evaluate_literals(&req, flipped).allowed());
        }
    }
}
