//! SYDW checkpoint files: every named parameter tensor, every BN running
//! buffer, the epoch, and a config hash, in a little-endian binary layout:
//!
//!   magic "SYDW" | u32 version=1 | u32 tensor_count
//!   tensor_count * { u16 name_len | name | u8 dtype | u8 rank | rank*u32 dims | data }
//!   u64 config_hash

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::model::Model;
use crate::error::{Result, SydError};
use crate::tensor::{Dtype, Scalar};

pub const SYDW_MAGIC: &[u8; 4] = b"SYDW";
pub const SYDW_VERSION: u32 = 1;

/// Epoch travels as a one-element tensor under this reserved name.
const EPOCH_KEY: &str = "meta.epoch";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub config_hash: u64,
}

struct RawEntry {
    dtype: Dtype,
    dims: Vec<usize>,
    bytes: Vec<u8>,
}

fn write_entry<T: Scalar>(out: &mut impl Write, name: &str, dims: &[usize], data: &[T]) -> Result<()> {
    let name_bytes = name.as_bytes();
    out.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    out.write_all(name_bytes)?;
    out.write_all(&[T::DTYPE.code(), dims.len() as u8])?;
    for &d in dims {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * T::DTYPE.byte_width());
    for v in data {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Save every parameter and buffer plus the epoch marker.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &mut Model<T>,
    epoch: usize,
    config_hash: u64,
) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, Vec<T>)> = Vec::new();
    model.walk_params(&mut |name, t| {
        entries.push((name, t.shape().to_vec(), t.data().to_vec()));
    });
    model.walk_buffers(&mut |name, buf| {
        entries.push((name, vec![buf.len()], buf.clone()));
    });
    entries.push((EPOCH_KEY.to_string(), vec![1], vec![T::from_f64(epoch as f64)]));

    let file = File::create(path).map_err(|e| SydError::from(e).with_path(path))?;
    let mut out = BufWriter::new(file);
    out.write_all(SYDW_MAGIC)?;
    out.write_all(&SYDW_VERSION.to_le_bytes())?;
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, dims, data) in &entries {
        write_entry(&mut out, name, dims, data)?;
    }
    out.write_all(&config_hash.to_le_bytes())?;
    out.flush()?;
    Ok(())
}

fn read_exact_at(input: &mut impl Read, buf: &mut [u8], offset: &mut u64, what: &str) -> Result<()> {
    match input.read_exact(buf) {
        Ok(()) => {
            *offset += buf.len() as u64;
            Ok(())
        }
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(SydError::Format {
            offset: *offset,
            message: format!("truncated while reading {what}"),
        }),
        Err(e) => Err(e.into()),
    }
}

fn read_raw(path: &Path) -> Result<(BTreeMap<String, RawEntry>, u64)> {
    let file = File::open(path).map_err(|e| SydError::from(e).with_path(path))?;
    let mut input = BufReader::new(file);
    let mut offset = 0u64;

    let mut magic = [0u8; 4];
    read_exact_at(&mut input, &mut magic, &mut offset, "magic")?;
    if &magic != SYDW_MAGIC {
        return Err(SydError::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {SYDW_MAGIC:?}"),
        });
    }
    let mut u32buf = [0u8; 4];
    read_exact_at(&mut input, &mut u32buf, &mut offset, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != SYDW_VERSION {
        return Err(SydError::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    read_exact_at(&mut input, &mut u32buf, &mut offset, "tensor count")?;
    let count = u32::from_le_bytes(u32buf);

    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        read_exact_at(&mut input, &mut u16buf, &mut offset, "name length")?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact_at(&mut input, &mut name_bytes, &mut offset, "name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| SydError::Format {
            offset,
            message: "tensor name is not UTF-8".into(),
        })?;
        let mut two = [0u8; 2];
        read_exact_at(&mut input, &mut two, &mut offset, "dtype/rank")?;
        let dtype = Dtype::from_code(two[0]).ok_or_else(|| SydError::Format {
            offset,
            message: format!("unknown dtype code {}", two[0]),
        })?;
        let rank = two[1] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            read_exact_at(&mut input, &mut u32buf, &mut offset, "dimension")?;
            dims.push(u32::from_le_bytes(u32buf) as usize);
        }
        let numel: usize = dims.iter().product();
        let mut bytes = vec![0u8; numel * dtype.byte_width()];
        read_exact_at(&mut input, &mut bytes, &mut offset, "tensor data")?;
        entries.insert(name, RawEntry { dtype, dims, bytes });
    }
    let mut hash_buf = [0u8; 8];
    read_exact_at(&mut input, &mut hash_buf, &mut offset, "config hash")?;
    let config_hash = u64::from_le_bytes(hash_buf);

    let mut probe = [0u8; 1];
    if input.read(&mut probe)? != 0 {
        return Err(SydError::Format {
            offset,
            message: "trailing bytes after config hash".into(),
        });
    }
    Ok((entries, config_hash))
}

fn decode_values<T: Scalar>(entry: &RawEntry) -> Vec<T> {
    let width = entry.dtype.byte_width();
    entry
        .bytes
        .chunks_exact(width)
        .map(|chunk| match entry.dtype {
            Dtype::F32 => T::from_f64(f32::read_le(chunk).to_f64()),
            Dtype::F64 => T::from_f64(f64::read_le(chunk)),
        })
        .collect()
}

/// Fill the model's parameters and buffers from a checkpoint. Every model
/// tensor must be present with a matching shape; bit-exact when the stored
/// dtype equals the model dtype.
pub fn load_checkpoint<T: Scalar>(path: &Path, model: &mut Model<T>) -> Result<CheckpointMeta> {
    let (entries, config_hash) = read_raw(path)?;
    let mut error: Option<SydError> = None;
    let mut seen = 1usize; // the epoch entry

    model.walk_params(&mut |name, t| {
        if error.is_some() {
            return;
        }
        match entries.get(&name) {
            None => error = Some(SydError::Format {
                offset: 0,
                message: format!("checkpoint is missing tensor '{name}'"),
            }),
            Some(e) => {
                if e.dims != t.shape() {
                    error = Some(SydError::ShapeMismatch {
                        op: "load_checkpoint",
                        lhs: t.shape().to_vec(),
                        rhs: e.dims.clone(),
                    });
                } else {
                    let vals: Vec<T> = decode_values(e);
                    t.data_mut().copy_from_slice(&vals);
                    t.clear_grad();
                    seen += 1;
                }
            }
        }
    });
    model.walk_buffers(&mut |name, buf| {
        if error.is_some() {
            return;
        }
        match entries.get(&name) {
            None => error = Some(SydError::Format {
                offset: 0,
                message: format!("checkpoint is missing buffer '{name}'"),
            }),
            Some(e) => {
                if e.dims != [buf.len()] {
                    error = Some(SydError::ShapeMismatch {
                        op: "load_checkpoint",
                        lhs: vec![buf.len()],
                        rhs: e.dims.clone(),
                    });
                } else {
                    *buf = decode_values(e);
                    seen += 1;
                }
            }
        }
    });
    if let Some(e) = error {
        return Err(e);
    }
    if seen != entries.len() {
        return Err(SydError::Format {
            offset: 0,
            message: format!(
                "checkpoint has {} tensors but the model consumed {seen}; geometry mismatch",
                entries.len()
            ),
        });
    }
    let epoch_entry = entries.get(EPOCH_KEY).ok_or_else(|| SydError::Format {
        offset: 0,
        message: "checkpoint is missing the epoch marker".into(),
    })?;
    let epoch = decode_values::<f64>(epoch_entry)[0] as usize;
    Ok(CheckpointMeta { epoch, config_hash })
}

/// FNV-1a 64-bit: stable across platforms, used for the config hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
