//! Bit-exact textual encodings for f64 values in persistent artifacts.
//!
//! Two modes, declared once per file:
//! - `hex`: the raw IEEE-754 bit pattern as 16 lowercase hex digits. Always
//!   bit-exact, including the sign of zero.
//! - `dec`: shortest round-trip decimal (Rust's `Display` for f64), which
//!   parses back to the identical bits for every finite value.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FloatMode {
    Hex,
    Dec,
}

impl std::fmt::Display for FloatMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FloatMode::Hex => write!(f, "hex"),
            FloatMode::Dec => write!(f, "dec"),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FloatParseError {
    #[error("invalid hex float field {0:?}: expected 16 hex digits")]
    BadHex(String),
    #[error("invalid decimal float field {0:?}")]
    BadDecimal(String),
    #[error("expected a {expected} float field, found {found:?}")]
    WrongMode { expected: FloatMode, found: String },
}

pub fn encode_f64(value: f64, mode: FloatMode) -> String {
    match mode {
        FloatMode::Hex => format!("{:016x}", value.to_bits()),
        FloatMode::Dec => format!("{value}"),
    }
}

pub fn decode_f64(text: &str, mode: FloatMode) -> Result<f64, FloatParseError> {
    match mode {
        FloatMode::Hex => {
            if text.len() != 16 {
                return Err(FloatParseError::BadHex(text.to_string()));
            }
            u64::from_str_radix(text, 16)
                .map(f64::from_bits)
                .map_err(|_| FloatParseError::BadHex(text.to_string()))
        }
        FloatMode::Dec => text
            .parse::<f64>()
            .map_err(|_| FloatParseError::BadDecimal(text.to_string())),
    }
}

/// A float field as it appears in a JSON record: either a plain number
/// (`dec` mode) or a hex bit-pattern string (`hex` mode).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FloatField {
    Num(f64),
    Text(String),
}

impl FloatField {
    pub fn encode(value: f64, mode: FloatMode) -> Self {
        match mode {
            FloatMode::Hex => FloatField::Text(encode_f64(value, mode)),
            FloatMode::Dec => FloatField::Num(value),
        }
    }

    pub fn decode(&self, mode: FloatMode) -> Result<f64, FloatParseError> {
        match (self, mode) {
            (FloatField::Num(v), FloatMode::Dec) => Ok(*v),
            (FloatField::Text(s), FloatMode::Hex) => decode_f64(s, FloatMode::Hex),
            (FloatField::Num(v), FloatMode::Hex) => Err(FloatParseError::WrongMode {
                expected: FloatMode::Hex,
                found: format!("{v}"),
            }),
            (FloatField::Text(s), FloatMode::Dec) => Err(FloatParseError::WrongMode {
                expected: FloatMode::Dec,
                found: s.clone(),
            }),
        }
    }
}
