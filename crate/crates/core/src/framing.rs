//! Length-prefixed JSON records: a 4-byte big-endian payload length followed
//! by the payload. Shared by the store log and the event logs.

use std::io::{self, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

pub fn encode<T: Serialize>(value: &T) -> io::Result<Vec<u8>> {
    let payload = serde_json::to_vec(value)?;
    let len = u32::try_from(payload.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "record too large"))?;
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn write_record<W: Write, T: Serialize>(w: &mut W, value: &T) -> io::Result<usize> {
    let bytes = encode(value)?;
    w.write_all(&bytes)?;
    Ok(bytes.len())
}

#[derive(Debug)]
pub struct Decoded<T> {
    pub records: Vec<T>,
    /// Byte length of the well-formed prefix. Anything after it is a torn tail.
    pub valid_len: usize,
}

impl<T> Decoded<T> {
    pub fn torn(&self, total: usize) -> bool {
        self.valid_len < total
    }
}

/// Decodes records until the first incomplete or unparsable one.
pub fn decode_all<T: DeserializeOwned>(bytes: &[u8]) -> Decoded<T> {
    let mut records = Vec::new();
    let mut pos = 0;
    while bytes.len() - pos >= 4 {
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let Some(payload) = bytes.get(pos + 4..pos + 4 + len) else { break };
        match serde_json::from_slice(payload) {
            Ok(r) => records.push(r),
            Err(_) => break,
        }
        pos += 4 + len;
    }
    Decoded { records, valid_len: pos }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_big_endian_length() {
        let bytes = encode(&"ab").unwrap();
        assert_eq!(&bytes[..4], &[0, 0, 0, 4]);
        assert_eq!(&bytes[4..], b"\"ab\"");
    }

    proptest! {
        #[test]
        fn any_truncation_yields_a_record_prefix(values in prop::collection::vec(any::<i64>(), 0..20), cut in any::<prop::sample::Index>()) {
            let mut buf = Vec::new();
            for v in &values {
                write_record(&mut buf, v).unwrap();
            }
            let cut = cut.index(buf.len() + 1);
            let d: Decoded<i64> = decode_all(&buf[..cut]);
            prop_assert_eq!(&d.records[..], &values[..d.records.len()]);
            prop_assert!(d.valid_len <= cut);
            if cut == buf.len() {
                prop_assert_eq!(d.records.len(), values.len());
            }
        }
    }
}
