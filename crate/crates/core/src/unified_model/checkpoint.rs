//! Checkpoint file format.
//!
//! Layout: magic bytes `UASR`, a little-endian u32 format version, then
//! length-prefixed named sections in fixed order: `config` (JSON model
//! configuration), `stats` (JSON normalization statistics), `params`
//! (binary tensor table). Everything is little-endian; tensors are written
//! in name order, so save -> load -> save is byte-identical.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::NormalizationStats;
use crate::params::{ParamTensor, ParameterStore, Partition};

use super::{tensor_catalog, Model, ModelConfig, ModelMode};

const MAGIC: [u8; 4] = *b"UASR";
const FORMAT_VERSION: u32 = 1;
const SECTIONS: [&str; 3] = ["config", "stats", "params"];

fn partition_byte(p: Partition) -> u8 {
    match p {
        Partition::ScFe => 0,
        Partition::McFe => 1,
        Partition::Backend => 2,
    }
}

fn partition_from_byte(b: u8) -> Result<Partition> {
    match b {
        0 => Ok(Partition::ScFe),
        1 => Ok(Partition::McFe),
        2 => Ok(Partition::Backend),
        _ => Err(Error::Checkpoint(format!("unknown partition tag {b}"))),
    }
}

fn encode_params(store: &ParameterStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, tensor) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(partition_byte(tensor.partition));
        out.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
        for &d in &tensor.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {}",
                self.context
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn decode_params(buf: &[u8]) -> Result<ParameterStore> {
    let mut r = Reader {
        buf,
        pos: 0,
        context: "section 'params'",
    };
    let count = r.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid tensor name encoding".into()))?;
        let partition = partition_from_byte(r.u8()?)?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f64()?);
        }
        store.insert(
            name,
            ParamTensor {
                shape,
                data,
                partition,
            },
        )?;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes in section 'params'".into()));
    }
    Ok(store)
}

/// Write the model to `path`. Bit-exact: saving a loaded checkpoint again
/// reproduces the file byte for byte.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let config_json = serde_json::to_vec(&model.config)
        .map_err(|e| Error::Checkpoint(format!("config encoding failed: {e}")))?;
    let stats_json = serde_json::to_vec(&model.stats)
        .map_err(|e| Error::Checkpoint(format!("stats encoding failed: {e}")))?;
    let params = encode_params(&model.store);

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, payload) in SECTIONS.iter().zip([&config_json, &stats_json, &params]) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(payload);
    }
    let mut f = std::fs::File::create(path).map_err(Error::io(path))?;
    f.write_all(&out).map_err(Error::io(path))?;
    Ok(())
}

/// Load a model, validating magic, version, section completeness, and that
/// the tensor table matches the embedded configuration's catalog.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let buf = std::fs::read(path).map_err(Error::io(path))?;

    if buf.len() < 8 || buf[..4] != MAGIC {
        return Err(Error::Checkpoint("missing UASR magic bytes".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }

    let mut pos = 8;
    let mut sections: Vec<(String, &[u8])> = Vec::new();
    for expected in SECTIONS {
        let context = format!("section '{expected}'");
        if pos + 4 > buf.len() {
            return Err(Error::Checkpoint(format!("missing {context}")));
        }
        let name_len = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if pos + name_len + 8 > buf.len() {
            return Err(Error::Checkpoint(format!("truncated while reading {context} header")));
        }
        let name = String::from_utf8(buf[pos..pos + name_len].to_vec())
            .map_err(|_| Error::Checkpoint("invalid section name".into()))?;
        pos += name_len;
        if name != expected {
            return Err(Error::Checkpoint(format!(
                "expected section '{expected}', found '{name}'"
            )));
        }
        let payload_len = u64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        if pos + payload_len > buf.len() {
            return Err(Error::Checkpoint(format!("truncated while reading {context} payload")));
        }
        sections.push((name, &buf[pos..pos + payload_len]));
        pos += payload_len;
    }
    if pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after final section".into()));
    }

    let config: ModelConfig = serde_json::from_slice(sections[0].1)
        .map_err(|e| Error::Checkpoint(format!("bad section 'config': {e}")))?;
    config.validate()?;
    let stats: NormalizationStats = serde_json::from_slice(sections[1].1)
        .map_err(|e| Error::Checkpoint(format!("bad section 'stats': {e}")))?;
    let store = decode_params(sections[2].1)?;

    // tensor table must match the configuration's catalog exactly
    let catalog = tensor_catalog(&config);
    if catalog.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "tensor count {} does not match the configuration's catalog ({})",
            store.len(),
            catalog.len()
        )));
    }
    for spec in &catalog {
        let tensor = store.get(&spec.name).map_err(|_| {
            Error::Checkpoint(format!("missing tensor {} for this configuration", spec.name))
        })?;
        if tensor.shape != spec.shape || tensor.partition != spec.partition {
            return Err(Error::Checkpoint(format!(
                "tensor {} has mismatched shape or partition",
                spec.name
            )));
        }
    }

    Ok(Model {
        config,
        stats,
        store,
    })
}

/// Load a checkpoint for use in the given mode. Fails with a structured
/// "partition missing" error when the checkpoint was saved without a
/// frontend the requested mode needs; on success the returned model routes
/// inputs according to `mode`.
pub fn load_checkpoint_expecting(path: &Path, mode: ModelMode) -> Result<Model> {
    let mut model = load_checkpoint(path)?;
    let present = model.store.partitions_present();
    for required in mode.required_partitions() {
        if !present.contains(&required) {
            return Err(Error::Checkpoint(format!(
                "partition missing: {} (checkpoint was saved in {} mode, requested {})",
                required.tag(),
                model.config.mode.label(),
                mode.label()
            )));
        }
    }
    model.config.mode = mode;
    Ok(model)
}
