//! Tensor container: a 4-byte little-endian header length, a UTF-8 JSON
//! header, then raw little-endian `f32` payloads in header order.
//!
//! Tensor `offset` and `len` are byte counts relative to the first payload byte.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CheckpointError, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

/// Serializes `fields` plus `format_version` and the tensor table into container bytes.
pub fn encode(mut fields: Map<String, Value>, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        let len = (t.numel() * 4) as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len,
        });
        offset += len;
    }
    fields.insert("format_version".into(), FORMAT_VERSION.into());
    fields.insert("tensors".into(), serde_json::to_value(&entries)?);
    let header = serde_json::to_vec(&Value::Object(fields))?;
    let header_len = u32::try_from(header.len()).map_err(|_| crate::Error::Overflow("container header"))?;
    let mut out = Vec::with_capacity(4 + header.len() + offset as usize);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decoded container: the header object and its tensors in header order.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub header: Map<String, Value>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Decoded {
    pub fn take(&mut self, name: &str) -> Result<Tensor, CheckpointError> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
        Ok(self.tensors.remove(i).1)
    }

    /// Deserializes header field `key`; absent or `null` gives `None`.
    pub fn field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<Option<T>, CheckpointError> {
        match self.header.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| CheckpointError::BadHeader(format!("field `{key}`: {e}"))),
        }
    }

    pub fn required<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T, CheckpointError> {
        self.field(key)?
            .ok_or_else(|| CheckpointError::BadHeader(format!("missing field `{key}`")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Decoded, CheckpointError> {
    let Some(len_bytes) = bytes.get(..4) else {
        return Err(CheckpointError::TruncatedHeader {
            declared: 4,
            actual: bytes.len() as u64,
        });
    };
    let header_len = u64::from(u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")));
    let rest = &bytes[4..];
    if header_len > rest.len() as u64 {
        return Err(CheckpointError::TruncatedHeader {
            declared: header_len,
            actual: rest.len() as u64,
        });
    }
    let (header, payload) = rest.split_at(header_len as usize);
    let header: Value = serde_json::from_slice(header).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    let Value::Object(mut header) = header else {
        return Err(CheckpointError::BadHeader("header is not a JSON object".into()));
    };
    let version = header
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| CheckpointError::BadHeader("missing format_version".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(CheckpointError::BadVersion {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    let entries: Vec<TensorEntry> = header
        .remove("tensors")
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| CheckpointError::BadHeader(format!("tensor table: {e}")))?
        .unwrap_or_default();
    let mut tensors = Vec::with_capacity(entries.len());
    let mut previous_end = 0u64;
    for e in entries {
        let numel = e.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        let expected = numel.and_then(|n| n.checked_mul(4));
        if e.shape.contains(&0) || expected != Some(e.len) {
            return Err(CheckpointError::LengthMismatch {
                name: e.name,
                len: e.len,
                expected: expected.unwrap_or(u64::MAX),
            });
        }
        if e.offset < previous_end {
            return Err(CheckpointError::Overlap { name: e.name });
        }
        let end = e.offset.checked_add(e.len).unwrap_or(u64::MAX);
        if end > payload.len() as u64 {
            return Err(CheckpointError::TruncatedPayload {
                name: e.name,
                offset: e.offset,
                end,
                payload: payload.len() as u64,
            });
        }
        previous_end = end;
        let data = payload[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        let t = Tensor::new(&e.shape, data).expect("length checked against shape");
        tensors.push((e.name, t));
    }
    Ok(Decoded { header, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let a = Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5);
        let b = Tensor::full(&[4], f32::MIN_POSITIVE);
        let mut fields = Map::new();
        fields.insert("kind".into(), "test".into());
        encode(fields, &[("a".into(), &a), ("b".into(), &b)]).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let bytes = sample();
        let mut d = decode(&bytes).unwrap();
        assert_eq!(d.header["kind"], "test");
        let a = d.take("a").unwrap();
        let b = d.take("b").unwrap();
        assert_eq!(a.shape(), &[2, 3]);
        assert!(a.data().iter().enumerate().all(|(i, v)| v.to_bits() == (i as f32 - 2.5).to_bits()));
        assert!(b.data().iter().all(|v| v.to_bits() == f32::MIN_POSITIVE.to_bits()));
        assert_eq!(d.take("c").unwrap_err(), CheckpointError::MissingTensor("c".into()));
    }

    #[test]
    fn header_longer_than_file() {
        let mut bytes = sample();
        bytes[..4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(CheckpointError::TruncatedHeader { .. })));
        assert!(matches!(decode(&bytes[..2]), Err(CheckpointError::TruncatedHeader { .. })));
    }

    #[test]
    fn truncated_payload() {
        let bytes = sample();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            decode(cut),
            Err(CheckpointError::TruncatedPayload { ref name, .. }) if name == "b"
        ));
    }

    fn rewrite_header(bytes: &[u8], edit: impl FnOnce(&mut Value)) -> Vec<u8> {
        let n = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let mut header: Value = serde_json::from_slice(&bytes[4..4 + n]).unwrap();
        edit(&mut header);
        let h = serde_json::to_vec(&header).unwrap();
        let mut out = (h.len() as u32).to_le_bytes().to_vec();
        out.extend(h);
        out.extend_from_slice(&bytes[4 + n..]);
        out
    }

    #[test]
    fn bad_version_and_overlap_are_distinct() {
        let bytes = sample();
        let v = rewrite_header(&bytes, |h| h["format_version"] = 99.into());
        assert_eq!(
            decode(&v).unwrap_err(),
            CheckpointError::BadVersion {
                found: 99,
                expected: FORMAT_VERSION
            }
        );
        let o = rewrite_header(&bytes, |h| h["tensors"][1]["offset"] = 4.into());
        assert_eq!(decode(&o).unwrap_err(), CheckpointError::Overlap { name: "b".into() });
        let l = rewrite_header(&bytes, |h| h["tensors"][0]["len"] = 20.into());
        assert!(matches!(decode(&l), Err(CheckpointError::LengthMismatch { .. })));
        let mut junk = bytes.clone();
        junk[4] = b'#';
        assert!(matches!(decode(&junk), Err(CheckpointError::BadHeader(_))));
    }
}
