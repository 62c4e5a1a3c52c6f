//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DSPCKPT1"
//! u32 section_count
//! per section:  u32 name_len, name (UTF-8), u32 layer_count
//! per layer, sections in index order:
//!     u32 out_dim, u32 in_dim,
//!     out_dim·in_dim f64 weights (row-major), out_dim f64 biases
//! ```
//!
//! Activations are not stored: every layer but the last of a section is
//! ReLU, the last is linear.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Activation, DenseLayer, MlpParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DSPCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub params: MlpParams,
}

pub fn write_checkpoint<W: Write>(mut out: W, sections: &[Section]) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(sections.len() as u32).to_le_bytes())?;
    for s in sections {
        out.write_all(&(s.name.len() as u32).to_le_bytes())?;
        out.write_all(s.name.as_bytes())?;
        out.write_all(&(s.params.layers.len() as u32).to_le_bytes())?;
    }
    for s in sections {
        for layer in &s.params.layers {
            out.write_all(&(layer.out_dim() as u32).to_le_bytes())?;
            out.write_all(&(layer.in_dim() as u32).to_le_bytes())?;
            for w in layer.weight.iter() {
                out.write_all(&w.to_le_bytes())?;
            }
            for b in layer.bias.iter() {
                out.write_all(&b.to_le_bytes())?;
            }
        }
    }
    out.flush()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint(format!("{what} size overflows")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<Section>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a DSPCKPT1 file".into()));
    }
    let n_sections = cur.u32("section count")?;
    let mut index = Vec::new();
    for _ in 0..n_sections {
        let len = cur.u32("section name length")?;
        let name = std::str::from_utf8(cur.take(len, "section name")?)
            .map_err(|_| Error::Checkpoint("section name is not UTF-8".into()))?
            .to_string();
        let layers = cur.u32("layer count")?;
        if layers == 0 {
            return Err(Error::Checkpoint(format!("section {name} has no layers")));
        }
        index.push((name, layers));
    }
    let mut sections = Vec::with_capacity(index.len());
    for (name, n_layers) in index {
        let mut layers = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let out_dim = cur.u32("layer out dim")?;
            let in_dim = cur.u32("layer in dim")?;
            let weights = cur.f64s(out_dim * in_dim, "weights")?;
            let bias = cur.f64s(out_dim, "biases")?;
            let activation = if k + 1 == n_layers {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(DenseLayer {
                weight: Array2::from_shape_vec((out_dim, in_dim), weights).expect("length checked"),
                bias: Array1::from(bias),
                activation,
            });
        }
        let params = MlpParams::new(layers).map_err(|e| Error::Checkpoint(format!("section {name}: {e}")))?;
        sections.push(Section { name, params });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last layer",
            bytes.len() - cur.pos
        )));
    }
    Ok(sections)
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<Section>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    decode_checkpoint(&bytes)
}

pub fn save_checkpoint(path: &Path, sections: &[Section]) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, sections).expect("writing to memory cannot fail");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<Section>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn exact_byte_layout() {
        let layer = DenseLayer::new(array![[1.0, 2.0]], array![0.5], Activation::Identity).unwrap();
        let sections = vec![Section {
            name: "n".into(),
            params: MlpParams::new(vec![layer]).unwrap(),
        }];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sections).unwrap();
        let mut expected = b"DSPCKPT1".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.push(b'n');
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        for v in [1.0f64, 2.0, 0.5] {
            expected.extend(v.to_le_bytes());
        }
        assert_eq!(buf, expected);
        assert_eq!(decode_checkpoint(&buf).unwrap(), sections);
    }

    #[test]
    fn round_trip_preserves_bits() {
        let sections = vec![
            Section {
                name: "a".into(),
                params: MlpParams::init(&[3, 5, 5, 2], 1).unwrap(),
            },
            Section {
                name: "b".into(),
                params: MlpParams::init(&[2, 4], 2).unwrap(),
            },
        ];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sections).unwrap();
        assert_eq!(decode_checkpoint(&buf).unwrap(), sections);
    }

    #[test]
    fn corruption_is_detected() {
        let sections = vec![Section {
            name: "a".into(),
            params: MlpParams::init(&[3, 2], 1).unwrap(),
        }];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sections).unwrap();
        assert!(decode_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let mut bad = buf;
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(_))));
        assert!(decode_checkpoint(b"").is_err());
    }
}
