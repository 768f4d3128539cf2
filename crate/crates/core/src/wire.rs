//! JSON payload conventions for bus request/reply between components.
//!
//! The bus treats payloads as opaque bytes; every service in this crate
//! speaks JSON and wraps replies in [`Reply`].

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bus::{Bus, BusError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteError {
    /// Error variant name, e.g. `"NotReservationHolder"`.
    pub kind: String,
    pub message: String,
}

impl RemoteError {
    pub fn new(kind: impl Into<String>, message: impl std::fmt::Display) -> Self {
        RemoteError {
            kind: kind.into(),
            message: message.to_string(),
        }
    }
}

impl std::fmt::Display for RemoteError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reply<T> {
    Ok(T),
    Err(RemoteError),
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum CallError {
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("{0}")]
    Remote(RemoteError),
    #[error("undecodable payload: {0}")]
    Decode(String),
}

impl CallError {
    /// Remote error kind, if the service answered with an error.
    pub fn remote_kind(&self) -> Option<&str> {
        match self {
            CallError::Remote(r) => Some(&r.kind),
            _ => None,
        }
    }
}

pub fn to_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("wire types always serialize")
}

pub fn from_bytes<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, CallError> {
    serde_json::from_slice(bytes).map_err(|e| CallError::Decode(e.to_string()))
}

pub fn ok_reply<T: Serialize>(value: T) -> Vec<u8> {
    to_bytes(&Reply::Ok(value))
}

pub fn err_reply(kind: &str, message: impl std::fmt::Display) -> Vec<u8> {
    to_bytes(&Reply::<()>::Err(RemoteError::new(kind, message)))
}

pub fn reply_from<T: Serialize, E: ErrorKind>(r: Result<T, E>) -> Vec<u8> {
    match r {
        Ok(v) => ok_reply(v),
        Err(e) => err_reply(e.kind(), &e),
    }
}

/// Error types that name their variant for the wire.
pub trait ErrorKind: std::fmt::Display {
    fn kind(&self) -> &'static str;
}

/// Sends a JSON request and decodes a [`Reply`].
pub fn call<Req: Serialize, Resp: DeserializeOwned>(
    bus: &Bus,
    target: &str,
    req: &Req,
    deadline: Duration,
) -> Result<Resp, CallError> {
    let raw = bus.request(target, to_bytes(req), deadline)?;
    match from_bytes::<Reply<Resp>>(&raw)? {
        Reply::Ok(v) => Ok(v),
        Reply::Err(e) => Err(CallError::Remote(e)),
    }
}

/// Serde adapter storing bytes as base64 text.
pub mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Blob {
        #[serde(with = "b64")]
        data: Vec<u8>,
    }

    #[test]
    fn base64_field() {
        let b = Blob { data: vec![0, 255, 7] };
        let s = String::from_utf8(to_bytes(&b)).unwrap();
        assert_eq!(s, r#"{"data":"AP8H"}"#);
        assert_eq!(from_bytes::<Blob>(s.as_bytes()).unwrap(), b);
    }

    #[test]
    fn reply_shape() {
        let ok = String::from_utf8(ok_reply(3)).unwrap();
        assert_eq!(ok, r#"{"ok":3}"#);
        let err: Reply<u32> = from_bytes(&err_reply("NotHolder", "x")).unwrap();
        assert!(matches!(err, Reply::Err(e) if e.kind == "NotHolder"));
    }
}
