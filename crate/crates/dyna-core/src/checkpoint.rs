//! Binary model checkpoints.
//!
//! Layout: magic `"DYNA"`, format version u32 LE, architecture tag string
//! (length u32 + bytes), then per-tensor records to EOF — name length u32,
//! name bytes, ndim u32, dims u32 x ndim, payload little-endian f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{DynaError, Result};
use crate::segnet::{parse_arch_tag, SegModelState};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"DYNA";
pub const MODEL_VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(DynaError::Format(format!("unreasonable string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| DynaError::Format("non-utf8 string".into()))
}

/// Serialize a model into any writer.
pub fn write_model(w: &mut impl Write, model: &SegModelState) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    write_u32(w, MODEL_VERSION)?;
    write_str(w, model.arch())?;
    for (name, tensor) in model.named_tensors() {
        write_str(w, &name)?;
        write_u32(w, tensor.dims().len() as u32)?;
        for &d in tensor.dims() {
            write_u32(w, d as u32)?;
        }
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Parse a model from a reader that contains exactly one checkpoint.
pub fn read_model(r: &mut impl Read) -> Result<SegModelState> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(DynaError::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != MODEL_VERSION {
        return Err(DynaError::Format(format!(
            "unsupported checkpoint version {version} (this build reads {MODEL_VERSION})"
        )));
    }
    let arch = read_str(r)?;
    let (in_ch, out_ch) = parse_arch_tag(&arch)?;
    let mut model = SegModelState::skeleton(in_ch, out_ch);

    let expected: Vec<String> = model.named_tensors().iter().map(|(n, _)| n.clone()).collect();
    let mut seen = vec![false; expected.len()];
    loop {
        // records run to EOF; a clean EOF before a name starts the exit path
        let name = match read_str(r) {
            Ok(n) => n,
            Err(DynaError::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        };
        let ndim = read_u32(r)? as usize;
        if ndim > 8 {
            return Err(DynaError::Format(format!("tensor {name}: unreasonable rank {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(r)? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = vec![0.0f64; len];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let idx = expected
            .iter()
            .position(|n| n == &name)
            .ok_or_else(|| DynaError::Format(format!("unknown tensor {name:?} in checkpoint")))?;
        if seen[idx] {
            return Err(DynaError::Format(format!("duplicate tensor {name:?}")));
        }
        seen[idx] = true;
        let slot = model.tensor_by_name_mut(&name).expect("known name");
        if slot.dims() != dims.as_slice() {
            return Err(DynaError::Format(format!(
                "tensor {name:?}: shape {dims:?} does not match architecture {:?}",
                slot.dims()
            )));
        }
        *slot = Tensor::from_vec(&dims, data)?;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(DynaError::Format(format!(
            "checkpoint is missing tensor {:?}",
            expected[missing]
        )));
    }
    Ok(model)
}

pub fn save_model(path: &Path, model: &SegModelState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SegModelState> {
    let mut r = BufReader::new(File::open(path)?);
    read_model(&mut r)
}
