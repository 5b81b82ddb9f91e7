//! Binary checkpoint format, bit-exact on round trip.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "XMCKPT01"
//! config_len       u32      followed by the model config as canonical text
//! param_count      u32
//! per parameter:
//!   name_len       u32      followed by the UTF-8 name
//!   rank           u32
//!   dims           rank x u64
//!   payload        numel x f32 (raw bits)
//! ```
//!
//! Parameters appear in the model's visit order. Loading rebuilds the model
//! from the embedded config and requires every parameter exactly once with
//! matching shape and finite values; trailing bytes are an error.

use std::io::{Read, Write};
use std::path::Path;

use crate::encoder::EncoderModel;
use crate::runfile::{model_config_canonical, parse_model_config_text};
use crate::{Error, Result, Tensor};

const MAGIC: &[u8; 8] = b"XMCKPT01";

pub fn save(model: &EncoderModel, path: &Path) -> Result<()> {
    let mut named: Vec<(String, &Tensor)> = Vec::new();
    model.params.visit(&mut |name, t| named.push((name, t)));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let config_text = model_config_canonical(&model.config);
    write_u32(&mut out, config_text.len() as u32);
    out.extend_from_slice(config_text.as_bytes());
    write_u32(&mut out, named.len() as u32);
    for (name, tensor) in named {
        write_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        write_u32(&mut out, tensor.rank() as u32);
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<EncoderModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };

    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic string".into()));
    }
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?
        .to_string();
    let config = parse_model_config_text(&config_text)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;

    let param_count = r.u32()? as usize;
    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' holds non-finite values"
            )));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("parameter '{name}': {e}")))?;
        tensors.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last parameter",
            bytes.len() - r.pos
        )));
    }

    // Rebuild a model of the right architecture, then swap in every stored
    // tensor by name.
    let mut model = EncoderModel::init(config, 0)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let expected = model.params.names();
    if expected.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters for this config, found {}",
            expected.len(),
            tensors.len()
        )));
    }
    let mut idx = 0;
    let mut failure: Option<String> = None;
    model.params.visit_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        let (stored_name, stored) = &tensors[idx];
        if *stored_name != name {
            failure = Some(format!(
                "parameter order mismatch: expected '{name}', found '{stored_name}'"
            ));
        } else if stored.shape() != t.shape() {
            failure = Some(format!(
                "parameter '{name}': shape {:?} does not match config shape {:?}",
                stored.shape(),
                t.shape()
            ));
        } else {
            *t = stored.clone();
        }
        idx += 1;
    });
    if let Some(msg) = failure {
        return Err(Error::Checkpoint(msg));
    }
    Ok(model)
}

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
