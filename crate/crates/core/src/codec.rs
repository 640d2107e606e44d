//! Bit-exact JSON encoding of `f64` arrays: base64 of little-endian bytes.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A flat `f64` array that serializes losslessly as a base64 string.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct F64Blob(pub Vec<f64>);

impl Serialize for F64Blob {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = self.0.iter().flat_map(|v| v.to_le_bytes()).collect();
        s.serialize_str(&STANDARD.encode(bytes))
    }
}

impl<'de> Deserialize<'de> for F64Blob {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = STANDARD.decode(text).map_err(serde::de::Error::custom)?;
        if bytes.len() % 8 != 0 {
            return Err(serde::de::Error::custom(
                "f64 blob length is not a multiple of 8 bytes",
            ));
        }
        Ok(F64Blob(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        ))
    }
}

/// A row-major matrix block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixBlob {
    pub rows: usize,
    pub cols: usize,
    pub data: F64Blob,
}

impl MatrixBlob {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self {
            rows,
            cols,
            data: F64Blob(data),
        }
    }
}
