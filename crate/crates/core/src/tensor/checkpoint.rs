//! Single-file parameter container.
//!
//! Layout: the 8-byte magic `FCMNET01`, a UTF-8 JSON header describing every
//! array (name, shape, byte offset relative to the end of the header), then
//! the arrays themselves as little-endian `f64`, back to back.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FCMNET01";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form metadata (configuration, step counters).
    pub meta: serde_json::Value,
    pub params: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let arrays = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = ArrayEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel() * 8;
                e
            })
            .collect();
        let header = Header {
            meta: self.meta.clone(),
            arrays,
        };
        let mut out = MAGIC.to_vec();
        serde_json::to_writer(&mut out, &header)?;
        out.reserve(offset);
        for (_, t) in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "missing FCMNET01 magic".into(),
            });
        }
        let body = &bytes[MAGIC.len()..];
        let mut stream = serde_json::Deserializer::from_slice(body).into_iter::<Header>();
        let header = match stream.next() {
            Some(Ok(h)) => h,
            Some(Err(e)) => {
                return Err(Error::Format {
                    offset: MAGIC.len() + stream.byte_offset(),
                    msg: format!("bad header: {e}"),
                })
            }
            None => {
                return Err(Error::Format {
                    offset: MAGIC.len(),
                    msg: "missing header".into(),
                })
            }
        };
        let data_start = MAGIC.len() + stream.byte_offset();
        let data = &bytes[data_start..];
        let mut params = Vec::with_capacity(header.arrays.len());
        let mut expected = 0;
        for e in header.arrays {
            let numel: usize = e.shape.iter().product();
            let end = e.offset + numel * 8;
            if e.offset != expected || end > data.len() {
                return Err(Error::Format {
                    offset: data_start + e.offset.min(data.len()),
                    msg: format!(
                        "array `{}` ({} bytes at offset {}) does not fit the {}-byte data section",
                        e.name,
                        numel * 8,
                        e.offset,
                        data.len()
                    ),
                });
            }
            let values = data[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push((e.name, Tensor::new(e.shape, values)?));
            expected = end;
        }
        if expected != data.len() {
            return Err(Error::Format {
                offset: data_start + expected,
                msg: format!("{} trailing bytes", data.len() - expected),
            });
        }
        Ok(Checkpoint {
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
