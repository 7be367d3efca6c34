//! Checkpoint files: one line of JSON header, then every tensor as
//! little-endian `f64`, concatenated in header order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{PvadError, Result};

const FORMAT: &str = "pvad-ckpt";
const DTYPE: &str = "f64le";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Header {
    format: String,
    dtype: String,
    step: u64,
    metadata: serde_json::Value,
    params: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub step: u64,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: ParamSet, step: u64, metadata: serde_json::Value) -> Self {
        Self {
            params,
            step,
            metadata,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            format: FORMAT.to_string(),
            dtype: DTYPE.to_string(),
            step: self.step,
            metadata: self.metadata.clone(),
            params: self
                .params
                .iter()
                .map(|(name, p)| TensorEntry {
                    name: name.clone(),
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (_, p) in self.params.iter() {
            let mut buf = Vec::with_capacity(p.value.len() * 8);
            for v in p.value.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from<R: Read>(r: R, origin: &Path) -> Result<Self> {
        let malformed = |reason: String| PvadError::Malformed {
            path: origin.to_path_buf(),
            reason,
        };
        let mut reader = BufReader::new(r);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: Header = serde_json::from_str(line.trim_end())
            .map_err(|e| malformed(format!("bad header: {e}")))?;
        if header.format != FORMAT || header.dtype != DTYPE {
            return Err(malformed(format!(
                "unsupported format {}/{}",
                header.format, header.dtype
            )));
        }
        let mut params = ParamSet::new();
        for entry in header.params {
            let n: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            reader
                .read_exact(&mut raw)
                .map_err(|_| malformed(format!("truncated data for `{}`", entry.name)))?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let value = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| malformed(e.to_string()))?;
            params.insert(entry.name, value, entry.trainable);
        }
        let mut rest = Vec::new();
        reader.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(malformed(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            params,
            step: header.step,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(f, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bitwise(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..5, step in any::<u64>()) {
            let mut r = rng::stream(seed, "ckpt", 0);
            let mut p = ParamSet::new();
            p.insert_uniform("a.w", &[rows, cols], 1e3, &mut r);
            p.insert_uniform("a.b", &[cols], 1e-3, &mut r);
            p.get_mut("a.b").unwrap().trainable = false;
            let ck = Checkpoint::new(p, step, serde_json::json!({"K": 4, "frozen": true}));
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::read_from(&bytes[..], Path::new("mem")).unwrap();
            prop_assert_eq!(&back, &ck);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut p = ParamSet::new();
        p.insert_filled("w", &[3], 1.5);
        let bytes = Checkpoint::new(p, 0, serde_json::Value::Null).to_bytes().unwrap();
        let err = Checkpoint::read_from(&bytes[..bytes.len() - 1], Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
