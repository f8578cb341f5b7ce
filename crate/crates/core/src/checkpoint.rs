//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GSAN" | version u32 | spec_len u32 | spec text (the network config format)
//! tensor_count u32
//! per tensor: name_len u16 | name | dtype u8 (0 = f32, 1 = i8)
//!             ndim u8 | dims u32 * ndim | fnv1a u64 | payload_len u32 | payload
//! ```
//!
//! The network spec is embedded so a checkpoint loads without a sidecar.
//! Shift layers are stored as the proxy array plus derived `s` and `p` arrays
//! (both i8); on load the derived arrays are checked against re-quantization.
//! Every tensor carries its payload length and an FNV-1a checksum, so both
//! truncation and in-place corruption fail the load.

use std::fs;
use std::path::Path;

use crate::config::{emit_network_config, parse_network_config};
use crate::error::{Error, Result};
use crate::ghost::{build_network, Model};
use crate::params::ParamKind;
use crate::shift::quantize_shift;

const MAGIC: &[u8; 4] = b"GSAN";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_I8: u8 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct TensorRecord {
    name: String,
    dtype: u8,
    dims: Vec<u32>,
    payload: Vec<u8>,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, dtype: u8, dims: &[u32], payload: &[u8]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&fnv1a(payload).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
}

/// Serialize a model. Deterministic: same model bytes in, same bytes out.
pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let spec_text = emit_network_config(&model.spec);
    let mut records: Vec<(String, u8, Vec<u32>, Vec<u8>)> = Vec::new();
    for entry in model.store.entries() {
        let dims: Vec<u32> = entry.shape.iter().map(|&d| d as u32).collect();
        let payload: Vec<u8> = entry.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        records.push((entry.name.clone(), DTYPE_F32, dims.clone(), payload));
        if entry.kind == ParamKind::ShiftProxy {
            let base = entry.name.strip_suffix(".proxy").unwrap_or(&entry.name);
            let mut s_arr = Vec::with_capacity(entry.len());
            let mut p_arr = Vec::with_capacity(entry.len());
            for &proxy in &entry.data {
                let q = quantize_shift(
                    proxy,
                    crate::shift::DEFAULT_P_MIN,
                    crate::shift::DEFAULT_P_MAX,
                )?;
                s_arr.push(q.s as u8);
                p_arr.push(q.p as u8);
            }
            records.push((format!("{base}.s"), DTYPE_I8, dims.clone(), s_arr));
            records.push((format!("{base}.p"), DTYPE_I8, dims, p_arr));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(spec_text.len() as u32).to_le_bytes());
    out.extend_from_slice(spec_text.as_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, dtype, dims, payload) in &records {
        push_tensor(&mut out, name, *dtype, dims, payload);
    }
    Ok(out)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(model)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Parse checkpoint bytes back into a model. Rejects unknown versions and any
/// tensor whose length or checksum fails before touching model state.
pub fn load_checkpoint_bytes(bytes: &[u8], origin: impl AsRef<Path>) -> Result<Model> {
    let path = origin.as_ref();
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad magic {magic:02x?}, expected \"GSAN\""),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 4,
            message: format!("unsupported checkpoint version {version}, expected {VERSION}"),
        });
    }
    let spec_len = r.u32("spec length")? as usize;
    let spec_offset = r.pos as u64;
    let spec_text =
        std::str::from_utf8(r.take(spec_len, "spec text")?).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: spec_offset,
            message: format!("spec blob is not UTF-8: {e}"),
        })?;
    let spec = parse_network_config(spec_text)?;

    let count = r.u32("tensor count")? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name_offset = r.pos as u64;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                offset: name_offset,
                message: format!("tensor name is not UTF-8: {e}"),
            })?
            .to_string();
        let dtype = r.u8("dtype")?;
        let ndim = r.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dimension")?);
        }
        let checksum = r.u64("checksum")?;
        let payload_len = r.u32("payload length")? as usize;
        let elem_size = match dtype {
            DTYPE_F32 => 4,
            DTYPE_I8 => 1,
            other => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: r.pos as u64,
                    message: format!("unknown dtype tag {other} for tensor {name}"),
                })
            }
        };
        let expected_len = dims.iter().product::<u32>() as usize * elem_size;
        if payload_len != expected_len {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: r.pos as u64,
                message: format!(
                    "tensor {name}: payload length {payload_len} does not match shape {dims:?}"
                ),
            });
        }
        let payload_offset = r.pos as u64;
        let payload = r.take(payload_len, "tensor payload")?.to_vec();
        if fnv1a(&payload) != checksum {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: payload_offset,
                message: format!("tensor {name}: checksum mismatch, payload corrupted"),
            });
        }
        records.push(TensorRecord {
            name,
            dtype,
            dims,
            payload,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: r.pos as u64,
            message: format!("{} trailing bytes after tensor table", bytes.len() - r.pos),
        });
    }

    // rebuild the network from the embedded spec, then overwrite every
    // parameter by name
    let mut model = build_network(&spec, 0)?;
    let find = |name: &str| -> Result<&TensorRecord> {
        records
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Validation(format!("checkpoint is missing tensor {name}")))
    };

    let names: Vec<String> = model
        .store
        .entries()
        .iter()
        .map(|e| e.name.clone())
        .collect();
    let mut expected_tensors = 0usize;
    for name in &names {
        let id = model.store.find(name).expect("freshly listed");
        let entry_kind = model.store.entry(id).kind;
        let rec = find(name)?;
        expected_tensors += 1;
        if rec.dtype != DTYPE_F32 {
            return Err(Error::Validation(format!("tensor {name} has wrong dtype")));
        }
        let want_shape: Vec<u32> = model
            .store
            .entry(id)
            .shape
            .iter()
            .map(|&d| d as u32)
            .collect();
        if rec.dims != want_shape {
            return Err(Error::Validation(format!(
                "tensor {name}: shape {:?} does not match model shape {:?}",
                rec.dims, want_shape
            )));
        }
        let values: Vec<f32> = rec
            .payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.store.data_mut(id).copy_from_slice(&values);

        if entry_kind == ParamKind::ShiftProxy {
            let base = name.strip_suffix(".proxy").unwrap_or(name);
            let s_rec = find(&format!("{base}.s"))?;
            let p_rec = find(&format!("{base}.p"))?;
            expected_tensors += 2;
            for (i, &proxy) in model.store.data(id).iter().enumerate() {
                let q = quantize_shift(
                    proxy,
                    crate::shift::DEFAULT_P_MIN,
                    crate::shift::DEFAULT_P_MAX,
                )?;
                if s_rec.payload[i] as i8 != q.s || p_rec.payload[i] as i8 != q.p {
                    return Err(Error::Validation(format!(
                        "tensor {base}: stored (s, p) disagree with quantized proxies at index {i}"
                    )));
                }
            }
        }
    }
    if records.len() != expected_tensors {
        return Err(Error::Validation(format!(
            "checkpoint has {} tensors, model expects {expected_tensors}",
            records.len()
        )));
    }
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint_bytes(&bytes, path)
}
