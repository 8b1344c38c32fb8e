//! Single-file model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VTAB"                      4 bytes magic
//! version                     u32, currently 1
//! manifest_len                u64, then manifest_len bytes of UTF-8 text
//! vocab_len                   u64, then vocab_len bytes: one token per line, in id order
//! tensor section              every tensor in index order:
//!                             u64 rank, rank x u64 extents, f64 values (row-major)
//! ```
//!
//! The manifest is line oriented, `key value` pairs followed by the tensor
//! index:
//!
//! ```text
//! dim 128
//! heads 8
//! layers 2
//! classes 2
//! seed 0
//! numeric_norm scale-then-norm
//! head_generation 0
//! vocab_size 57
//! tensors 27
//! tensor embedding.tokens 2 57 128 0
//! ...
//! ```
//!
//! Each `tensor` line holds the parameter name, rank, extents and the byte
//! offset of the record inside the tensor section.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;

pub const MAGIC: &[u8; 4] = b"VTAB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Verbatim reconstruction; the vocabulary is frozen so unseen words
    /// fall into the overflow buckets.
    #[default]
    Exact,
    /// Same parameters, but the vocabulary may grow and the head may be
    /// replaced: the entry point for finetuning and incremental training.
    Extend,
}

impl std::str::FromStr for LoadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact" => Ok(LoadMode::Exact),
            "extend" => Ok(LoadMode::Extend),
            other => Err(Error::Config(format!("unknown load mode `{other}`"))),
        }
    }
}

fn manifest_text(model: &Model) -> String {
    let c = &model.config;
    let mut m = String::new();
    let mut line = |k: &str, v: String| {
        m.push_str(k);
        m.push(' ');
        m.push_str(&v);
        m.push('\n');
    };
    line("dim", c.dim.to_string());
    line("heads", c.heads.to_string());
    line("layers", c.layers.to_string());
    line("classes", c.classes.to_string());
    line("seed", c.seed.to_string());
    line("numeric_norm", c.numeric_norm.as_str().to_string());
    line("head_generation", model.head_generation.to_string());
    line("vocab_size", model.vocab.len().to_string());
    line("tensors", model.store.len().to_string());
    let mut offset = 0usize;
    for (_, p) in model.store.iter() {
        let extents: Vec<String> = p.value.shape().iter().map(|e| e.to_string()).collect();
        m.push_str(&format!(
            "tensor {} {} {} {offset}\n",
            p.name,
            p.value.rank(),
            extents.join(" ")
        ));
        offset += p.value.encoded_len();
    }
    m
}

/// Serializes a model to bytes.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let manifest = manifest_text(model);
    let vocab = model.vocab.to_text();
    let tensor_bytes: usize = model.store.iter().map(|(_, p)| p.value.encoded_len()).sum();
    let mut out = Vec::with_capacity(24 + manifest.len() + vocab.len() + tensor_bytes);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&(vocab.len() as u64).to_le_bytes());
    out.extend_from_slice(vocab.as_bytes());
    for (_, p) in model.store.iter() {
        p.value.write_to(&mut out).expect("writing to a Vec cannot fail");
    }
    Ok(out)
}

/// Writes the checkpoint to a sibling temp file and renames it into place,
/// so `path` either keeps its old contents or holds the complete new file.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    let tmp = temp_path(path);
    let written = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = written {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn temp_path(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    path.with_file_name(format!(".{name}.tmp{}", std::process::id()))
}

pub fn load_checkpoint(path: impl AsRef<Path>, mode: LoadMode) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, mode)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated file: {what} needs {n} bytes at offset {}, {} available",
                    self.pos,
                    self.bytes.len().saturating_sub(self.pos)
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self, what: &str) -> Result<&'a str> {
        let len = usize::try_from(self.u64(what)?)
            .map_err(|_| Error::Checkpoint(format!("{what} length overflows")))?;
        std::str::from_utf8(self.take(len, what)?)
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

struct Manifest {
    config: ModelConfig,
    head_generation: u64,
    vocab_size: usize,
    index: Vec<IndexEntry>,
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    let mut index = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let bad = |msg: &str| Error::Checkpoint(format!("manifest line {}: {msg}", n + 1));
        let mut parts = line.split_whitespace();
        let Some(key) = parts.next() else { continue };
        if key == "tensor" {
            let nums = |s: Option<&str>| -> Result<usize> {
                s.and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("malformed tensor entry"))
            };
            let name = parts.next().ok_or_else(|| bad("tensor entry without name"))?;
            let rank = nums(parts.next())?;
            if rank > 8 {
                return Err(bad("implausible tensor rank"));
            }
            let shape = (0..rank).map(|_| nums(parts.next())).collect::<Result<Vec<_>>>()?;
            let offset = nums(parts.next())?;
            if parts.next().is_some() {
                return Err(bad("trailing fields in tensor entry"));
            }
            index.push(IndexEntry {
                name: name.to_string(),
                shape,
                offset,
            });
        } else {
            let value = parts.next().ok_or_else(|| bad("missing value"))?;
            if parts.next().is_some() || fields.insert(key, value).is_some() {
                return Err(bad("duplicate or malformed field"));
            }
        }
    }
    let get = |k: &str| -> Result<&str> {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("manifest lacks `{k}`")))
    };
    let num = |k: &str| -> Result<u64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("manifest field `{k}` is not an integer")))
    };
    let config = ModelConfig {
        dim: num("dim")? as usize,
        heads: num("heads")? as usize,
        layers: num("layers")? as usize,
        classes: num("classes")? as usize,
        seed: num("seed")?,
        numeric_norm: get("numeric_norm")?.parse()?,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("manifest hyperparameters: {e}")))?;
    let tensors = num("tensors")? as usize;
    if tensors != index.len() {
        return Err(Error::Checkpoint(format!(
            "manifest declares {tensors} tensors but indexes {}",
            index.len()
        )));
    }
    Ok(Manifest {
        config,
        head_generation: num("head_generation")?,
        vocab_size: num("vocab_size")? as usize,
        index,
    })
}

/// Parses and validates a checkpoint image.
pub fn from_bytes(bytes: &[u8], mode: LoadMode) -> Result<Model> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}: unsupported format or version",
            String::from_utf8_lossy(magic),
            std::str::from_utf8(MAGIC).expect("ascii")
        )));
    }
    let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, this build reads version {VERSION}"
        )));
    }
    let manifest = parse_manifest(cur.text("manifest")?)?;
    let vocab = Vocabulary::from_text(cur.text("vocabulary")?)?;
    if vocab.len() != manifest.vocab_size {
        return Err(Error::Checkpoint(format!(
            "manifest vocab_size {} but vocabulary section has {} tokens",
            manifest.vocab_size,
            vocab.len()
        )));
    }

    let section = &bytes[cur.pos..];
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut expected_offset = 0usize;
    for entry in &manifest.index {
        if entry.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` indexed at offset {} but its record starts at {expected_offset}",
                entry.name, entry.offset
            )));
        }
        let mut reader = section.get(entry.offset..).unwrap_or(&[]);
        let t = Tensor::read_from(&mut reader).map_err(|e| {
            Error::Checkpoint(format!("tensor `{}`: {e}", entry.name))
        })?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has shape {:?}, index says {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )));
        }
        expected_offset += t.encoded_len();
        if tensors.insert(entry.name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("tensor `{}` indexed twice", entry.name)));
        }
    }
    if expected_offset != section.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the tensor section",
            section.len() - expected_offset
        )));
    }

    let mut model = Model::with_vocab(manifest.config, vocab)?;
    model.head_generation = manifest.head_generation;
    let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter `{name}`")))?;
        model.store.replace(id, t);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unknown parameter `{extra}` in checkpoint")));
    }
    model
        .validate()
        .map_err(|e| Error::Checkpoint(format!("inconsistent parameters: {e}")))?;
    match mode {
        LoadMode::Exact => model.vocab.freeze(),
        LoadMode::Extend => model.vocab.unfreeze(),
    }
    Ok(model)
}
