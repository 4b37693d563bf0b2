//! Binary checkpoint format (little-endian):
//!
//! ```text
//! "QNW1" | u32 tensor_count
//! per tensor: u16 name_len | name (UTF-8) | u8 rank | u32 dims[rank] | f32 data
//! trailing UTF-8 block of `key=value` lines (config echo + training metadata)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{self, Reader};
use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 4] = b"QNW1";

const CONFIG_KEYS: [&str; 5] = ["resolution", "fov_h_deg", "architecture", "disparity_norm", "output_offset"];

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.values.len() * 4);
    out.extend_from_slice(MAGIC);
    let shapes = params.config.tensor_shapes();
    out.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
    let mut offset = 0;
    for (name, shape) in &shapes {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let len: usize = shape.iter().product();
        for v in &params.values[offset..offset + len] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        offset += len;
    }
    for (k, v) in params.config.echo() {
        out.extend_from_slice(format!("{k}={v}\n").as_bytes());
    }
    for (k, v) in &params.meta {
        out.extend_from_slice(format!("{k}={v}\n").as_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "not a QNW1 checkpoint"));
    }
    let count = r.u32("tensor_count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let field = |what: &str| format!("tensor[{i}].{what}");
        let name_len = r.u16(&field("name_len"))? as usize;
        let name = std::str::from_utf8(r.take(name_len, &field("name"))?)
            .map_err(|_| Error::format(field("name"), "invalid UTF-8"))?
            .to_string();
        let rank = r.u8(&field("rank"))? as usize;
        let shape = (0..rank).map(|_| r.u32(&field("dims")).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| Error::format(field("dims"), "size overflow"))?;
        let data = r.f32_vec(len, &field("data"))?;
        tensors.push((name, shape, data));
    }
    let text = std::str::from_utf8(r.rest()).map_err(|_| Error::format("metadata", "invalid UTF-8"))?;
    let mut all = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("metadata", format!("line without '=': {line:?}")))?;
        all.insert(k.to_string(), v.to_string());
    }
    let config = ModelConfig::from_echo(&all)?;
    let meta = all.into_iter().filter(|(k, _)| !CONFIG_KEYS.contains(&k.as_str())).collect();

    let expected = config.tensor_shapes();
    if expected.len() != tensors.len() {
        return Err(Error::format(
            "tensor_count",
            format!("checkpoint has {} tensors, its architecture needs {}", tensors.len(), expected.len()),
        ));
    }
    let mut values = Vec::new();
    for ((name, shape, data), (want_name, want_shape)) in tensors.into_iter().zip(&expected) {
        if &name != want_name || &shape != want_shape {
            return Err(Error::format(
                name.clone(),
                format!("found {name} {shape:?}, architecture expects {want_name} {want_shape:?}"),
            ));
        }
        values.extend(data);
    }
    Ok(ModelParams { config, values, meta })
}

pub fn save_params(params: &ModelParams, path: &Path) -> Result<()> {
    io::write_atomic(path, &encode(params))
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    decode(&io::read(path)?)
}

/// Loads a checkpoint and rejects it unless its tensors match `expected`.
pub fn load_params_for(path: &Path, expected: &ModelConfig) -> Result<ModelParams> {
    let params = load_params(path)?;
    let found = params.config.tensor_shapes();
    let want = expected.tensor_shapes();
    if params.config.resolution != expected.resolution {
        return Err(Error::Config(format!(
            "checkpoint resolution {} does not match expected {}",
            params.config.resolution, expected.resolution
        )));
    }
    for i in 0..found.len().max(want.len()) {
        if found.get(i) != want.get(i) {
            let show = |t: Option<&(String, Vec<usize>)>| {
                t.map_or("<none>".to_string(), |(n, s)| format!("{n} {s:?}"))
            };
            return Err(Error::Config(format!(
                "checkpoint tensor {} does not match expected {}",
                show(found.get(i)),
                show(want.get(i))
            )));
        }
    }
    Ok(params)
}
