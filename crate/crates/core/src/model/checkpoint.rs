//! Versioned binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PVCKPT\0\0" | version u32 | dtype u8 (0 = f32, 1 = f64)
//! n_layers n_heads d_model d_ff max_seq_len vocab_size: u32 each | dropout f64
//! step u64 | seed u64 | adam_t u64
//! tensor count u32, then per tensor:
//!     name length u16, name bytes, rank u8, dims u32 × rank, offset u64, numel u64
//! tensor data (offset and numel counted in elements)
//! ```
//!
//! Model tensors use the names of [`ParamLayout`]; optimizer moments, when
//! present, are stored as `adam.m.<name>` and `adam.v.<name>`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use super::{Model, ModelConfig, ModelError, ParamLayout, ParamSet};
use crate::optim::AdamState;
use crate::scalar::{DType, Scalar};

const MAGIC: &[u8; 8] = b"PVCKPT\0\0";
const VERSION: u32 = 1;

/// A model together with the training progress needed to resume it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub model: Model<S>,
    /// Optimizer updates applied so far.
    pub step: u64,
    /// Seed that drives initialization, data order and dropout masks.
    pub seed: u64,
    pub optimizer: Option<AdamState<S>>,
}

/// Checkpoint of either precision, as found on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = read_file(path)?;
        let header = parse_header(&bytes)?;
        match header.dtype {
            DType::F32 => Ok(AnyCheckpoint::F32(Checkpoint::decode(&bytes)?)),
            DType::F64 => Ok(AnyCheckpoint::F64(Checkpoint::decode(&bytes)?)),
        }
    }

    /// Single-precision view, converting if necessary.
    pub fn into_f32(self) -> Checkpoint<f32> {
        match self {
            AnyCheckpoint::F32(c) => c,
            AnyCheckpoint::F64(c) => c.convert(),
        }
    }

    pub fn into_f64(self) -> Checkpoint<f64> {
        match self {
            AnyCheckpoint::F32(c) => c.convert(),
            AnyCheckpoint::F64(c) => c,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyCheckpoint::F32(c) => c.model.config(),
            AnyCheckpoint::F64(c) => c.model.config(),
        }
    }
}

/// Fixed-size fields at the start of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: DType,
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader, ModelError> {
    parse_header(&read_file(path)?)
}

fn read_file(path: &Path) -> Result<Vec<u8>, ModelError> {
    fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Malformed(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

struct Parsed {
    header: CheckpointHeader,
    adam_t: u64,
    tensors: Vec<(String, Vec<usize>, usize, usize)>,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<CheckpointHeader, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    parse_fixed(&mut r).map(|(h, _)| h)
}

fn parse_fixed(r: &mut Reader<'_>) -> Result<(CheckpointHeader, u64), ModelError> {
    if r.take(MAGIC.len())? != MAGIC {
        return Err(ModelError::Malformed(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::Malformed(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let code = r.u8()?;
    let dtype = DType::from_code(code)
        .ok_or_else(|| ModelError::Malformed(format!("unknown dtype code {code}")))?;
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        n_layers: dims[0],
        n_heads: dims[1],
        d_model: dims[2],
        d_ff: dims[3],
        max_seq_len: dims[4],
        vocab_size: dims[5],
        dropout: r.f64()?,
    };
    config.validate()?;
    let step = r.u64()?;
    let seed = r.u64()?;
    let adam_t = r.u64()?;
    Ok((
        CheckpointHeader {
            version,
            dtype,
            config,
            step,
            seed,
        },
        adam_t,
    ))
}

fn parse(bytes: &[u8]) -> Result<Parsed, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    let (header, adam_t) = parse_fixed(&mut r)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| ModelError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let offset = r.u64()? as usize;
        let numel = r.u64()? as usize;
        tensors.push((name, shape, offset, numel));
    }
    Ok(Parsed {
        header,
        adam_t,
        tensors,
        data_start: r.pos,
    })
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(model: Model<S>, seed: u64) -> Self {
        Checkpoint {
            model,
            step: 0,
            seed,
            optimizer: None,
        }
    }

    pub fn convert<T: Scalar>(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.convert(),
            step: self.step,
            seed: self.seed,
            optimizer: self.optimizer.as_ref().map(|s| AdamState {
                m: s.m.convert(),
                v: s.v.convert(),
                t: s.t,
            }),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, ModelError> {
        let params = self.model.params();
        if let Some(name) = params.first_non_finite() {
            return Err(ModelError::NonFinite(name.to_string()));
        }
        let cfg = self.model.config();
        let layout = params.layout();
        let mut sets: Vec<(&str, &ParamSet<S>)> = vec![("", params)];
        if let Some(opt) = &self.optimizer {
            sets.push(("adam.m.", &opt.m));
            sets.push(("adam.v.", &opt.v));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(S::DTYPE.code());
        for d in [
            cfg.n_layers,
            cfg.n_heads,
            cfg.d_model,
            cfg.d_ff,
            cfg.max_seq_len,
            cfg.vocab_size,
        ] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&cfg.dropout.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let adam_t = self.optimizer.as_ref().map_or(0, |o| o.t);
        out.extend_from_slice(&adam_t.to_le_bytes());
        out.extend_from_slice(&((layout.tensors().len() * sets.len()) as u32).to_le_bytes());
        let mut offset = 0u64;
        for (prefix, _) in &sets {
            for t in layout.tensors() {
                let name = format!("{prefix}{}", t.name);
                out.extend_from_slice(&(name.len() as u16).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                out.push(t.shape.len() as u8);
                for &d in &t.shape {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                out.extend_from_slice(&offset.to_le_bytes());
                out.extend_from_slice(&(t.len as u64).to_le_bytes());
                offset += t.len as u64;
            }
        }
        out.reserve(offset as usize * S::DTYPE.size());
        for (_, set) in &sets {
            for &x in set.as_slice() {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ModelError> {
        let parsed = parse(bytes)?;
        let header = &parsed.header;
        if header.dtype != S::DTYPE {
            return Err(ModelError::DTypeMismatch {
                found: header.dtype.name(),
                expected: S::DTYPE.name(),
            });
        }
        let layout = Arc::new(ParamLayout::new(&header.config));
        let size = S::DTYPE.size();
        let data = &bytes[parsed.data_start..];
        let read_set = |prefix: &str| -> Result<Option<ParamSet<S>>, ModelError> {
            let mut values = Vec::with_capacity(layout.total());
            for t in layout.tensors() {
                let name = format!("{prefix}{}", t.name);
                let Some((_, shape, offset, numel)) = parsed.tensors.iter().find(|e| e.0 == name)
                else {
                    if prefix.is_empty() {
                        return Err(ModelError::Malformed(format!("missing tensor `{name}`")));
                    }
                    return Ok(None);
                };
                if *shape != t.shape || *numel != t.len {
                    return Err(ModelError::Malformed(format!(
                        "tensor `{name}` has shape {shape:?}, config implies {:?}",
                        t.shape
                    )));
                }
                let start = offset * size;
                let end = start + numel * size;
                if end > data.len() {
                    return Err(ModelError::Malformed(format!(
                        "tensor `{name}` runs past the end of the file"
                    )));
                }
                values.extend(data[start..end].chunks_exact(size).map(S::read_le));
            }
            Ok(Some(ParamSet::from_data(layout.clone(), values)))
        };
        let params = read_set("")?.expect("model tensors are required");
        if let Some(name) = params.first_non_finite() {
            return Err(ModelError::NonFinite(name.to_string()));
        }
        let optimizer = match (read_set("adam.m.")?, read_set("adam.v.")?) {
            (Some(m), Some(v)) => Some(AdamState {
                m,
                v,
                t: parsed.adam_t,
            }),
            (None, None) => None,
            _ => {
                return Err(ModelError::Malformed(
                    "optimizer state is incomplete".into(),
                ))
            }
        };
        Ok(Checkpoint {
            model: Model::from_parts(header.config, params)?,
            step: header.step,
            seed: header.seed,
            optimizer,
        })
    }

    /// Writes to a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let bytes = self.encode()?;
        let io = |source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
            w.write_all(&bytes).map_err(io)?;
            w.into_inner()
                .map_err(|e| io(e.into_error()))?
                .sync_all()
                .map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::decode(&read_file(path)?)
    }
}
