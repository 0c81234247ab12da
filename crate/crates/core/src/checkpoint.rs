//! `MFW1` checkpoints.
//!
//! Layout, little-endian, no padding:
//!
//! ```text
//! magic        4 bytes  "MFW1"
//! version      u32      1
//! entry count  u32
//! per entry:
//!   name length u32, name (UTF-8)
//!   rank u32, dims u32 × rank
//!   payload f32 × product(dims)
//! ```
//!
//! Entries are written in model traversal order. Random-mixing matrices are
//! stored under their path prefixed with `frozen.`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::models::{Model, ModelConfig};
use crate::tensor::file::{read_exact, read_shape_and_payload, read_u32, write_shape_and_payload};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MFW1";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const FROZEN_PREFIX: &str = "frozen.";

const MAX_NAME_LEN: u32 = 4096;

/// Writes named tensors as a checkpoint stream.
pub fn write_entries<'a, W, I>(entries: I, mut sink: W) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = (String, &'a Tensor)>,
    I::IntoIter: ExactSizeIterator,
{
    let entries = entries.into_iter();
    sink.write_all(CHECKPOINT_MAGIC)?;
    sink.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    sink.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        sink.write_all(&(name.len() as u32).to_le_bytes())?;
        sink.write_all(name.as_bytes())?;
        write_shape_and_payload(tensor, &mut sink)?;
    }
    sink.flush()
}

/// Reads every entry of a checkpoint stream, in file order.
pub fn read_entries<R: Read>(mut source: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    read_exact(&mut source, &mut magic, "checkpoint magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!(
            "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut source, "checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut source, "entry count")?;
    let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
    let mut seen = std::collections::HashSet::new();
    for i in 0..count {
        let len = read_u32(&mut source, "entry name length")?;
        if len == 0 || len > MAX_NAME_LEN {
            return Err(Error::format(format!("entry {i}: invalid name length {len}")));
        }
        let mut name = vec![0u8; len as usize];
        read_exact(&mut source, &mut name, "entry name")?;
        let name = String::from_utf8(name).map_err(|_| Error::format(format!("entry {i}: name is not UTF-8")))?;
        let tensor = read_shape_and_payload(&mut source, &format!("tensor `{name}`"))?;
        if !seen.insert(name.clone()) {
            return Err(Error::format(format!("duplicate tensor `{name}`")));
        }
        entries.push((name, tensor));
    }
    Ok(entries)
}

/// Checkpoint names of a model's tensors in traversal order.
pub fn manifest(model: &Model) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    model.visit("", &mut |name, t, frozen| {
        out.push((checkpoint_name(name, frozen), t.shape().to_vec()));
    });
    out
}

fn checkpoint_name(path: &str, frozen: bool) -> String {
    if frozen {
        format!("{FROZEN_PREFIX}{path}")
    } else {
        path.to_string()
    }
}

pub fn save<W: Write>(model: &Model, sink: W) -> std::io::Result<()> {
    let mut entries = Vec::new();
    model.visit("", &mut |name, t, frozen| entries.push((checkpoint_name(name, frozen), t)));
    write_entries(entries, sink)
}

pub fn load<R: Read>(config: &ModelConfig, source: R) -> Result<Model> {
    let entries = read_entries(source)?;
    let mut model = Model::zeroed(config)?;
    let mut by_name: HashMap<String, Tensor> = entries.into_iter().collect();
    let mut failure = None;
    model.visit_mut("", &mut |path, slot, frozen| {
        if failure.is_some() {
            return;
        }
        let name = checkpoint_name(path, frozen);
        match by_name.remove(&name) {
            None => failure = Some(Error::MissingTensor(name)),
            Some(t) if t.shape() != slot.shape() => {
                failure = Some(Error::ShapeMismatch {
                    name,
                    expected: slot.shape().to_vec(),
                    found: t.shape().to_vec(),
                })
            }
            Some(t) => *slot = t,
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = by_name.into_keys().min() {
        return Err(Error::UnexpectedTensor(extra));
    }
    Ok(model)
}

pub fn save_file(model: &Model, path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    save(model, BufWriter::new(file)).map_err(|e| Error::io(&display, e))
}

pub fn load_file(config: &ModelConfig, path: &Path) -> Result<Model> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    load(config, BufReader::new(file))
}
