//! Byte-level helpers shared by the snapshot, batch and onion formats.

use std::io::{Read, Write};
use std::net::{Ipv4Addr, Ipv6Addr};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::model::{DomainName, QType, RecordAnswer, RecordKey};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("unexpected end of input")]
    Truncated,
    #[error("varint overflows 64 bits")]
    VarintOverflow,
    #[error("invalid answer tag {0}")]
    BadTag(u8),
    #[error("invalid record type code {0}")]
    BadQType(u8),
    #[error("invalid encoded name")]
    BadName,
    #[error("decompression failed: {0}")]
    Inflate(String),
}

pub fn put_varint(out: &mut Vec<u8>, mut value: u64) {
    while value >= 0x80 {
        out.push((value as u8) | 0x80);
        value >>= 7;
    }
    out.push(value as u8);
}

pub fn zigzag(value: i64) -> u64 {
    ((value << 1) ^ (value >> 63)) as u64
}

pub fn unzigzag(value: u64) -> i64 {
    ((value >> 1) as i64) ^ -((value & 1) as i64)
}

pub fn varint_len(value: u64) -> usize {
    let bits = 64 - value.max(1).leading_zeros() as usize;
    bits.div_ceil(7)
}

/// Root-first length-prefixed labels, terminated by a zero byte.
pub fn put_name(out: &mut Vec<u8>, name: &DomainName) {
    for label in name.labels() {
        out.push(label.len() as u8);
        out.extend_from_slice(label);
    }
    out.push(0);
}

pub fn put_answer(out: &mut Vec<u8>, answer: &RecordAnswer) {
    out.push(answer.tag());
    match answer {
        RecordAnswer::A(ip) => out.extend_from_slice(&ip.octets()),
        RecordAnswer::Aaaa(ip) => out.extend_from_slice(&ip.octets()),
        RecordAnswer::Cname(name) => put_name(out, name),
    }
}

pub fn put_key(out: &mut Vec<u8>, key: &RecordKey) {
    put_name(out, &key.name);
    out.push(key.qtype.code());
}

/// Cursor over an input buffer.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    pub fn remaining(&self) -> usize {
        self.buf.len().saturating_sub(self.pos)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        let b = *self.buf.get(self.pos).ok_or(WireError::Truncated)?;
        self.pos += 1;
        Ok(b)
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(WireError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    pub fn u64_le(&mut self) -> Result<u64, WireError> {
        let raw = self.bytes(8)?;
        Ok(u64::from_le_bytes(raw.try_into().expect("8 bytes")))
    }

    pub fn varint(&mut self) -> Result<u64, WireError> {
        let mut value = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.u8()?;
            let part = u64::from(b & 0x7f);
            if shift == 63 && part > 1 {
                return Err(WireError::VarintOverflow);
            }
            value |= part << shift;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(WireError::VarintOverflow)
    }

    pub fn name(&mut self) -> Result<DomainName, WireError> {
        let mut labels = Vec::new();
        loop {
            let len = self.u8()? as usize;
            if len == 0 {
                break;
            }
            labels.push(self.bytes(len)?);
        }
        DomainName::from_root_labels(labels).map_err(|_| WireError::BadName)
    }

    pub fn qtype(&mut self) -> Result<QType, WireError> {
        let code = self.u8()?;
        QType::from_code(code).ok_or(WireError::BadQType(code))
    }

    pub fn key(&mut self) -> Result<RecordKey, WireError> {
        let name = self.name()?;
        Ok(RecordKey::new(name, self.qtype()?))
    }

    pub fn answer(&mut self) -> Result<RecordAnswer, WireError> {
        match self.u8()? {
            1 => {
                let raw: [u8; 4] = self.bytes(4)?.try_into().expect("4 bytes");
                Ok(RecordAnswer::A(Ipv4Addr::from(raw)))
            }
            2 => {
                let raw: [u8; 16] = self.bytes(16)?.try_into().expect("16 bytes");
                Ok(RecordAnswer::Aaaa(Ipv6Addr::from(raw)))
            }
            3 => Ok(RecordAnswer::Cname(self.name()?)),
            tag => Err(WireError::BadTag(tag)),
        }
    }
}

pub fn deflate(body: &[u8]) -> Vec<u8> {
    let mut enc = DeflateEncoder::new(Vec::with_capacity(body.len() / 2 + 16), Compression::default());
    enc.write_all(body).expect("in-memory write");
    enc.finish().expect("in-memory write")
}

pub fn inflate(data: &[u8]) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(data.len() * 3);
    DeflateDecoder::new(data)
        .read_to_end(&mut out)
        .map_err(|e| WireError::Inflate(e.to_string()))?;
    Ok(out)
}
