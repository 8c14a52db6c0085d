//! Named parameters, momentum buffers, and the flat `SRTN1` parameter file.
//!
//! File layout (all integers 64-bit little-endian):
//!
//! ```text
//! "SRTN1"
//! repeated until EOF:
//!   name_len, name bytes (UTF-8), rank, extents[rank], values (f32 LE) × Π extents
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng as StreamRng;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 5] = b"SRTN1";

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Main-path feature extractor.
    Backbone,
    /// Segmenter of the last exit; the only head kept for inference.
    FinalHead,
    /// Classifiers and non-final segmenters.
    ExitHead,
    /// Feature adapters used only by the feature distillation term.
    Adapter,
}

impl ParamGroup {
    /// Kept by [`crate::arch::Model::strip_exits`].
    pub fn is_main_path(self) -> bool {
        matches!(self, ParamGroup::Backbone | ParamGroup::FinalHead)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
    pub velocity: Vec<T>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, group: ParamGroup, tensor: Tensor<T>) -> Self {
        let velocity = vec![T::zero(); tensor.len()];
        Parameter {
            name: name.into(),
            group,
            tensor,
            velocity,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.len()
    }
}

/// Ordered parameter registry with unique names.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, param: Parameter<T>) -> Result<ParamId> {
        if self.by_name.contains_key(&param.name) {
            return Err(Error::ModelConfig(format!("duplicate parameter name `{}`", param.name)));
        }
        let id = self.params.len();
        self.by_name.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn count(&self, keep: impl Fn(&Parameter<T>) -> bool) -> usize {
        self.params.iter().filter(|p| keep(p)).map(Parameter::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }
}

/// Zero-mean uniform weights with bound `sqrt(1 / fan_in)`.
pub fn uniform_init<T: Real>(shape: &[usize], fan_in: usize, rng: &mut StreamRng) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("extents are positive")
}

/// Serializes named tensors in the `SRTN1` layout, values rounded to f32.
pub fn encode_records<'a, T: Real>(records: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                what: self.what.to_string(),
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            }),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bounded(&mut self, limit: u64, field: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        if v > limit {
            return Err(Error::Format {
                what: self.what.to_string(),
                offset: at,
                msg: format!("{field} {v} exceeds {limit}"),
            });
        }
        Ok(v as usize)
    }
}

/// Parses an `SRTN1` buffer into named f32 tensors.
pub fn decode_records(bytes: &[u8], what: &str) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut cur = Cursor { bytes, pos: 0, what };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format {
            what: what.to_string(),
            offset: 0,
            msg: "missing SRTN1 magic".into(),
        });
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let name_at = cur.pos;
        let name_len = cur.bounded(4096, "name length")?;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format {
                what: what.to_string(),
                offset: name_at + 8,
                msg: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let rank = cur.bounded(8, "rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = cur.pos;
            let d = cur.bounded(1 << 32, "extent")?;
            if d == 0 {
                return Err(Error::Format {
                    what: what.to_string(),
                    offset: at,
                    msg: "zero extent".into(),
                });
            }
            shape.push(d);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn write_records_file<'a, T: Real>(
    path: &Path,
    records: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_records(records))?;
    Ok(())
}

pub fn read_records_file(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path)?;
    decode_records(&bytes, &path.display().to_string())
}
