//! Language-neutral value encoding used for task payloads and literals.
//!
//! Binary layout (all integers little-endian):
//!
//! | tag  | body                                        |
//! |------|---------------------------------------------|
//! | 0x01 | `i64`                                       |
//! | 0x02 | `f64` (IEEE-754 bits)                       |
//! | 0x03 | `u32` length, then that many raw bytes      |
//! | 0x04 | `u32` count, then `count` encoded scalars   |
//!
//! Lists are flat: a list element is never itself a list.

use serde::{Deserialize, Serialize};
use thiserror::Error;

const TAG_INT: u8 = 0x01;
const TAG_FLOAT: u8 = 0x02;
const TAG_BYTES: u8 = 0x03;
const TAG_LIST: u8 = 0x04;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Value {
    Int(i64),
    Float(f64),
    Bytes(Vec<u8>),
    List(Vec<Value>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("payload truncated at offset {0}")]
    Truncated(usize),
    #[error("unknown tag 0x{tag:02x} at offset {offset}")]
    UnknownTag { tag: u8, offset: usize },
    #[error("nested list at offset {0}")]
    NestedList(usize),
    #[error("{0} trailing bytes after value")]
    Trailing(usize),
}

impl Value {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Value::Int(v) => {
                out.push(TAG_INT);
                out.extend_from_slice(&v.to_le_bytes());
            }
            Value::Float(v) => {
                out.push(TAG_FLOAT);
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            Value::Bytes(b) => {
                out.push(TAG_BYTES);
                out.extend_from_slice(&(b.len() as u32).to_le_bytes());
                out.extend_from_slice(b);
            }
            Value::List(items) => {
                out.push(TAG_LIST);
                out.extend_from_slice(&(items.len() as u32).to_le_bytes());
                for item in items {
                    debug_assert!(!matches!(item, Value::List(_)), "lists are flat");
                    item.encode_into(out);
                }
            }
        }
    }

    pub fn decode(buf: &[u8]) -> Result<Value, CodecError> {
        let mut cursor = Cursor { buf, pos: 0 };
        let v = cursor.value(true)?;
        if cursor.pos != buf.len() {
            return Err(CodecError::Trailing(buf.len() - cursor.pos));
        }
        Ok(v)
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            Value::Float(v) => Some(*v),
            Value::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            Value::Bytes(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(items) => Some(items),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        self.as_bytes().and_then(|b| std::str::from_utf8(b).ok())
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<Vec<u8>> for Value {
    fn from(v: Vec<u8>) -> Self {
        Value::Bytes(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Bytes(v.as_bytes().to_vec())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Bytes(v.into_bytes())
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CodecError> {
        let end = self.pos.checked_add(n).ok_or(CodecError::Truncated(self.pos))?;
        let slice = self.buf.get(self.pos..end).ok_or(CodecError::Truncated(self.pos))?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn value(&mut self, allow_list: bool) -> Result<Value, CodecError> {
        let offset = self.pos;
        let tag = self.take(1)?[0];
        match tag {
            TAG_INT => Ok(Value::Int(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))),
            TAG_FLOAT => Ok(Value::Float(f64::from_bits(u64::from_le_bytes(
                self.take(8)?.try_into().unwrap(),
            )))),
            TAG_BYTES => {
                let n = self.u32()? as usize;
                Ok(Value::Bytes(self.take(n)?.to_vec()))
            }
            TAG_LIST if allow_list => {
                let n = self.u32()? as usize;
                let mut items = Vec::with_capacity(n.min(1 << 16));
                for _ in 0..n {
                    items.push(self.value(false)?);
                }
                Ok(Value::List(items))
            }
            TAG_LIST => Err(CodecError::NestedList(offset)),
            tag => Err(CodecError::UnknownTag { tag, offset }),
        }
    }
}
