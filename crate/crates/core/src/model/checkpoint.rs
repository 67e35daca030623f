//! Checkpoint files: a text header followed by raw little-endian `f32` data.
//!
//! ```text
//! mad-checkpoint v1
//! config {"embed_dim":128,...}
//! vocab <sha256 of the vocabulary manifest>
//! manifest <line count>
//! <vocabulary manifest lines>
//! tensors <count>
//! tensor <name> <rows> <cols> f32 <byte offset>
//! ...
//! data
//! <raw bytes>
//! ```
//! Byte offsets are relative to the first byte after the `data` line.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{cast, Float, ParamStore};
use crate::vocab::Vocab;

const MAGIC: &str = "mad-checkpoint v1";

/// Serializes `model` together with the vocabulary it was trained with.
pub fn to_bytes<T: Float>(model: &Model<T>, vocab: &Vocab) -> Result<Vec<u8>> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("config {}\n", serde_json::to_string(model.config())?));
    header.push_str(&format!("vocab {}\n", vocab.fingerprint()));
    let manifest = vocab.manifest();
    let lines: Vec<&str> = manifest.lines().collect();
    header.push_str(&format!("manifest {}\n", lines.len()));
    for line in &lines {
        header.push_str(line);
        header.push('\n');
    }
    header.push_str(&format!("tensors {}\n", model.params().len()));
    let mut offset = 0usize;
    for (_, name, value) in model.params().iter() {
        header.push_str(&format!("tensor {name} {} {} f32 {offset}\n", value.nrows(), value.ncols()));
        offset += value.len() * 4;
    }
    header.push_str("data\n");
    let mut out = header.into_bytes();
    out.reserve(offset);
    for (_, _, value) in model.params().iter() {
        for x in value.iter() {
            let v = x.to_f32().unwrap_or(f32::NAN);
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save<T: Float>(path: impl AsRef<Path>, model: &Model<T>, vocab: &Vocab) -> Result<()> {
    let bytes = to_bytes(model, vocab)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// A decoded checkpoint.
#[derive(Debug)]
pub struct Checkpoint<T: Float> {
    pub model: Model<T>,
    pub vocab: Vocab,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn from_bytes<T: Float>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut pos = 0usize;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
    };
    if next_line()? != MAGIC {
        return Err(bad("not a checkpoint (bad magic line)"));
    }
    let field = |line: &str, key: &str| -> Result<String> {
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected `{key}` line, found `{line}`")))
    };
    let config: ModelConfig = serde_json::from_str(&field(next_line()?, "config")?)?;
    let fingerprint = field(next_line()?, "vocab")?;
    let n_manifest: usize = field(next_line()?, "manifest")?.parse().map_err(|_| bad("bad manifest count"))?;
    let mut manifest = String::new();
    for _ in 0..n_manifest {
        manifest.push_str(next_line()?);
        manifest.push('\n');
    }
    let vocab = Vocab::from_manifest(&manifest)?;
    if vocab.fingerprint() != fingerprint {
        return Err(bad("vocabulary fingerprint does not match the embedded manifest"));
    }
    let n_tensors: usize = field(next_line()?, "tensors")?.parse().map_err(|_| bad("bad tensor count"))?;
    let mut entries = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let line = field(next_line()?, "tensor")?;
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 5 || parts[3] != "f32" {
            return Err(bad(format!("malformed tensor line `{line}`")));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("malformed tensor line `{line}`")));
        entries.push((parts[0].to_string(), num(parts[1])?, num(parts[2])?, num(parts[4])?));
    }
    if next_line()? != "data" {
        return Err(bad("missing data marker"));
    }
    let data = &bytes[pos..];
    let mut params = ParamStore::new();
    for (name, rows, cols, offset) in entries {
        let len = rows * cols * 4;
        let chunk = data.get(offset..offset + len).ok_or_else(|| bad(format!("tensor {name} exceeds the data section")))?;
        let values: Vec<T> = chunk
            .chunks_exact(4)
            .map(|b| cast::<T>(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        params.insert(name, Array2::from_shape_vec((rows, cols), values).expect("sized above"));
    }
    if config.vocab_size != vocab.total_size() {
        return Err(bad(format!("model vocab_size {} but vocabulary has {}", config.vocab_size, vocab.total_size())));
    }
    let model = Model::from_params(config, params)?;
    Ok(Checkpoint { model, vocab })
}

pub fn load<T: Float>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and checks that it was written with `expected`.
pub fn load_for<T: Float>(path: impl AsRef<Path>, expected: &Vocab) -> Result<Checkpoint<T>> {
    let ck = load(path)?;
    if ck.vocab.fingerprint() != expected.fingerprint() {
        return Err(bad("checkpoint was trained with a different vocabulary"));
    }
    Ok(ck)
}
