//! Byte-aligned ternary message codec.
//!
//! Layout of one codeword (all integers little-endian):
//!
//! ```text
//! offset  size          field
//! 0       1             version (= 1)
//! 1       4             d, element count (u32)
//! 5       8             r, threshold (f64)
//! 13      ceil(d / 5)   payload, five trits per byte
//! ```
//!
//! Each payload byte holds up to five base-3 digits, least significant digit
//! first, with the digit mapping `-1 -> 0`, `0 -> 1`, `+1 -> 2`. A full byte
//! therefore ranges over `0..=242`. In the final byte, digit positions beyond
//! `d` are zero. A `.tern` file is a plain concatenation of codewords.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VERSION: u8 = 1;
pub const TRITS_PER_BYTE: usize = 5;
/// Version byte plus the 32-bit element count.
pub const HEADER_BITS: usize = 40;
pub const THRESHOLD_BITS: usize = 64;
const PREFIX_BYTES: usize = (HEADER_BITS + THRESHOLD_BITS) / 8;
const MAX_BYTE: u8 = 242;
const POW3: [u8; TRITS_PER_BYTE] = [1, 3, 9, 27, 81];

/// One balanced ternary digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Trit {
    Minus,
    Zero,
    Plus,
}

impl Trit {
    pub fn value(self) -> i8 {
        match self {
            Trit::Minus => -1,
            Trit::Zero => 0,
            Trit::Plus => 1,
        }
    }

    fn digit(self) -> u8 {
        (self.value() + 1) as u8
    }

    fn from_digit(digit: u8) -> Self {
        match digit {
            0 => Trit::Minus,
            1 => Trit::Zero,
            _ => Trit::Plus,
        }
    }
}

impl TryFrom<i8> for Trit {
    type Error = Error;

    fn try_from(v: i8) -> Result<Self> {
        match v {
            -1 => Ok(Trit::Minus),
            0 => Ok(Trit::Zero),
            1 => Ok(Trit::Plus),
            other => Err(Error::InvalidArgument(format!("{other} is not a trit"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TernaryCodeword {
    pub d: u32,
    pub r: f64,
    pub payload: Vec<u8>,
}

pub fn payload_len(d: usize) -> usize {
    d.div_ceil(TRITS_PER_BYTE)
}

pub fn encode(levels: &[Trit], r: f64) -> Result<TernaryCodeword> {
    let d = u32::try_from(levels.len()).map_err(|_| {
        Error::InvalidArgument(format!(
            "{} trits exceed the u32 length field",
            levels.len()
        ))
    })?;
    let payload = levels
        .chunks(TRITS_PER_BYTE)
        .map(|chunk| {
            chunk
                .iter()
                .zip(POW3)
                .map(|(t, p)| t.digit() * p)
                .sum::<u8>()
        })
        .collect();
    Ok(TernaryCodeword { d, r, payload })
}

pub fn decode(c: &TernaryCodeword) -> Result<(Vec<Trit>, f64)> {
    let d = c.d as usize;
    if c.payload.len() != payload_len(d) {
        return Err(Error::MalformedCodeword(format!(
            "payload has {} bytes, header d = {d} requires {}",
            c.payload.len(),
            payload_len(d)
        )));
    }
    let mut levels = Vec::with_capacity(d);
    for (i, &byte) in c.payload.iter().enumerate() {
        if byte > MAX_BYTE {
            return Err(Error::MalformedCodeword(format!(
                "payload byte {i} = {byte} exceeds {MAX_BYTE}"
            )));
        }
        let digits = (d - i * TRITS_PER_BYTE).min(TRITS_PER_BYTE);
        let mut rest = byte;
        for _ in 0..digits {
            levels.push(Trit::from_digit(rest % 3));
            rest /= 3;
        }
        if rest != 0 {
            return Err(Error::MalformedCodeword(format!(
                "payload byte {i} = {byte} has nonzero padding digits"
            )));
        }
    }
    Ok((levels, c.r))
}

impl TernaryCodeword {
    pub fn encoded_len(&self) -> usize {
        PREFIX_BYTES + self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(VERSION);
        out.extend_from_slice(&self.d.to_le_bytes());
        out.extend_from_slice(&self.r.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses one codeword from the front of `bytes`, returning it and the
    /// number of bytes consumed. The payload is length-checked but not
    /// digit-checked; [`decode`] validates digits.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < PREFIX_BYTES {
            return Err(Error::MalformedCodeword(format!(
                "truncated header: {} of {PREFIX_BYTES} bytes",
                bytes.len()
            )));
        }
        if bytes[0] != VERSION {
            return Err(Error::MalformedCodeword(format!(
                "version {} (expected {VERSION})",
                bytes[0]
            )));
        }
        let d = u32::from_le_bytes(bytes[1..5].try_into().expect("4 bytes"));
        let r = f64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes"));
        let len = payload_len(d as usize);
        let end = PREFIX_BYTES + len;
        if bytes.len() < end {
            return Err(Error::MalformedCodeword(format!(
                "truncated payload: {} of {len} bytes",
                bytes.len() - PREFIX_BYTES
            )));
        }
        let payload = bytes[PREFIX_BYTES..end].to_vec();
        Ok((Self { d, r, payload }, end))
    }
}

/// `32 d / (8 ceil(d/5) + header + 64)`: bits of a 32-bit float message over
/// bits of the ternary codeword.
pub fn compression_ratio(d: usize) -> f64 {
    let coded = 8 * payload_len(d) + HEADER_BITS + THRESHOLD_BITS;
    (32 * d) as f64 / coded as f64
}

pub fn write_tern<W: Write>(mut writer: W, codewords: &[TernaryCodeword]) -> Result<()> {
    for c in codewords {
        writer.write_all(&c.to_bytes())?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_tern<R: Read>(mut reader: R) -> Result<Vec<TernaryCodeword>> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let mut out = Vec::new();
    let mut offset = 0;
    while offset < bytes.len() {
        let (c, used) = TernaryCodeword::from_bytes(&bytes[offset..])?;
        decode(&c)?;
        out.push(c);
        offset += used;
    }
    Ok(out)
}
