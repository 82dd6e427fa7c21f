//! Model files: `b"RSGG"`, `u32` version, `u64` header length, JSON header,
//! then every array as little-endian `f64`. All integers little-endian.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"RSGG";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    arrays: Vec<ArrayEntry>,
}

pub fn write_model(model: &Model, mut w: impl Write) -> Result<()> {
    let header = Header {
        config: model.config().clone(),
        arrays: model
            .params
            .iter()
            .map(|p| ArrayEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(&MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in model.params.iter() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("truncated file while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn read_model(mut r: impl Read) -> Result<Model> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut bytes = buf.as_slice();
    if take(&mut bytes, 4, "magic")? != MODEL_MAGIC {
        return Err(Error::Format("bad magic, not a model file".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().expect("4 bytes"));
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {MODEL_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8, "header length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Format("header length overflow".into()))?;
    let header: Header = serde_json::from_slice(take(&mut bytes, len, "header")?)
        .map_err(|e| Error::Format(format!("header: {e}")))?;

    let mut model = Model::new(header.config).map_err(|e| Error::Format(format!("header config: {e}")))?;
    if header.arrays.len() != model.params.len() {
        return Err(Error::Format(format!(
            "header lists {} arrays, config implies {}",
            header.arrays.len(),
            model.params.len()
        )));
    }
    let declared: usize = header.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
    if bytes.len() != declared * 8 {
        return Err(Error::Format(format!(
            "payload has {} bytes, header declares {}",
            bytes.len(),
            declared * 8
        )));
    }
    for entry in &header.arrays {
        let id = model
            .params
            .id(&entry.name)
            .ok_or_else(|| Error::Format(format!("unexpected array `{}`", entry.name)))?;
        let param = model.params.get_mut(id);
        if param.value.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!(
                "array `{}` has shape {:?}, config implies {:?}",
                entry.name,
                entry.shape,
                param.value.shape()
            )));
        }
        let raw = take(&mut bytes, param.value.len() * 8, &entry.name)?;
        for (v, chunk) in param.value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        param
            .value
            .ensure_finite(&entry.name)
            .map_err(|_| Error::Format(format!("non-finite weight in `{}`", entry.name)))?;
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(model, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    read_model(std::fs::File::open(path)?)
}
