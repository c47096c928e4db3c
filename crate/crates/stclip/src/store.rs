//! Named parameter collection with per-entry freeze flags, plus the STCK
//! checkpoint format.
//!
//! STCK layout (all integers little-endian):
//!   magic "STCK" | u32 version | u32 tensor count
//!   per tensor: u16 name length | UTF-8 name | u8 ndim | u32 dims... | f32 payload
//!   trailing u32 CRC32 over everything before it
//!
//! Freeze flags are not persisted; training applies its freeze mask after
//! loading.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::autograd::GradStore;
use crate::tensor::Tensor;

pub const STCK_MAGIC: &[u8; 4] = b"STCK";
pub const STCK_VERSION: u32 = 1;

struct Entry<S: Scalar> {
    tensor: Tensor<S>,
    frozen: bool,
}

/// Ordered map of named parameters. Iteration order is insertion order and
/// therefore stable across runs.
pub struct ParamStore<S: Scalar> {
    entries: IndexMap<String, Entry<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    /// Insert a trainable parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, tensor: Tensor<S>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Input(format!("duplicate parameter name '{name}'")));
        }
        self.entries.insert(
            name.to_string(),
            Entry {
                tensor: tensor.with_grad(),
                frozen: false,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<Tensor<S>> {
        self.entries
            .get(name)
            .map(|e| e.tensor.clone())
            .ok_or_else(|| Error::Input(format!("unknown parameter '{name}'")))
    }

    /// Replace a parameter's value; shape must be unchanged and the entry
    /// must not be frozen.
    pub fn set(&mut self, name: &str, tensor: Tensor<S>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter '{name}'")))?;
        if entry.frozen {
            return Err(Error::Input(format!(
                "parameter '{name}' is frozen and cannot be updated"
            )));
        }
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::Dim(format!(
                "parameter '{name}': new shape does not match stored shape"
            )));
        }
        entry.tensor = tensor.with_grad();
        Ok(())
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter '{name}'")))?;
        if entry.frozen != frozen {
            // Frozen tensors drop gradient tracking so backward skips them.
            entry.tensor = if frozen {
                entry.tensor.detach()
            } else {
                entry.tensor.detach().with_grad()
            };
            entry.frozen = frozen;
        }
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> Result<bool> {
        self.entries
            .get(name)
            .map(|e| e.frozen)
            .ok_or_else(|| Error::Input(format!("unknown parameter '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Tensor<S>, bool)> + '_ {
        self.entries
            .iter()
            .map(|(n, e)| (n.as_str(), e.tensor.clone(), e.frozen))
    }

    /// Apply a freeze predicate to every entry.
    pub fn apply_freeze<F: Fn(&str) -> bool>(&mut self, frozen: F) {
        let names: Vec<String> = self.entries.keys().cloned().collect();
        for name in names {
            let f = frozen(&name);
            self.set_frozen(&name, f).expect("name exists");
        }
    }

    /// One plain SGD step over the unfrozen entries, in store order.
    pub fn sgd_step(&mut self, grads: &GradStore<S>, lr: f64) {
        for entry in self.entries.values_mut() {
            if entry.frozen {
                continue;
            }
            if let Some(g) = grads.grad_f64(&entry.tensor) {
                let updated: Vec<S> = entry
                    .tensor
                    .data()
                    .iter()
                    .zip(g.iter())
                    .map(|(&p, &gv)| S::from_f64(p.as_f64() - lr * gv))
                    .collect();
                entry.tensor =
                    Tensor::from_vec(entry.tensor.shape().to_vec(), updated)
                        .expect("shape preserved")
                        .with_grad();
            }
        }
    }

    /// CRC32 of each tensor's f32 payload, keyed by name.
    pub fn checksums(&self) -> BTreeMap<String, u32> {
        self.entries
            .iter()
            .map(|(name, e)| {
                let mut hasher = crc32fast::Hasher::new();
                for v in e.tensor.data() {
                    hasher.update(&(v.as_f64() as f32).to_le_bytes());
                }
                (name.clone(), hasher.finalize())
            })
            .collect()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, entry) in &self.entries {
            out.entries.insert(
                name.clone(),
                Entry {
                    tensor: entry.tensor.cast::<T>().with_grad(),
                    frozen: entry.frozen,
                },
            );
        }
        out
    }

    /// Total number of scalar elements across all entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }
}

impl<S: Scalar> Clone for ParamStore<S> {
    fn clone(&self) -> Self {
        let mut entries = IndexMap::new();
        for (name, e) in &self.entries {
            entries.insert(
                name.clone(),
                Entry {
                    tensor: e.tensor.clone(),
                    frozen: e.frozen,
                },
            );
        }
        ParamStore { entries }
    }
}

/// Serialize the store to the STCK format. Payloads are written as f32.
pub fn save_checkpoint<S: Scalar>(store: &ParamStore<S>, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(STCK_MAGIC);
    buf.extend_from_slice(&STCK_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, tensor, _) in store.iter() {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Input(format!("parameter name too long: '{name}'")));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.ndim() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&buf);
    buf.extend_from_slice(&hasher.finalize().to_le_bytes());

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub struct LoadedCheckpoint<S: Scalar> {
    pub store: ParamStore<S>,
    /// Names present in the file but absent from the caller's known set.
    pub warnings: Vec<String>,
}

/// Read an STCK file. `known_names`, when given, is used only to produce
/// forward-compatibility warnings for unrecognized tensors.
pub fn load_checkpoint<S: Scalar>(
    path: &Path,
    known_names: Option<&[String]>,
) -> Result<LoadedCheckpoint<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes, known_names)
}

fn parse_checkpoint<S: Scalar>(
    bytes: &[u8],
    known_names: Option<&[String]>,
) -> Result<LoadedCheckpoint<S>> {
    let fail = |offset: usize, message: &str| Error::Format {
        offset: offset as u64,
        message: message.to_string(),
    };
    let need = |offset: usize, len: usize| -> Result<()> {
        if offset + len > bytes.len() {
            Err(fail(bytes.len(), "file truncated"))
        } else {
            Ok(())
        }
    };

    need(0, 4)?;
    if &bytes[0..4] != STCK_MAGIC {
        return Err(fail(0, "bad magic, expected 'STCK'"));
    }
    need(4, 4)?;
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != STCK_VERSION {
        return Err(fail(4, &format!("unsupported version {version}")));
    }
    need(8, 4)?;
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;

    if bytes.len() < 16 {
        return Err(fail(bytes.len(), "file truncated"));
    }
    let body_end = bytes.len() - 4;
    let stored_crc = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&bytes[..body_end]);
    if hasher.finalize() != stored_crc {
        return Err(fail(body_end, "CRC32 mismatch"));
    }

    let mut store = ParamStore::new();
    let mut warnings = Vec::new();
    let mut off = 12usize;
    for _ in 0..count {
        need(off, 2)?;
        let name_len = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
        off += 2;
        need(off, name_len)?;
        let name = std::str::from_utf8(&bytes[off..off + name_len])
            .map_err(|_| fail(off, "parameter name is not valid UTF-8"))?
            .to_string();
        off += name_len;
        need(off, 1)?;
        let ndim = bytes[off] as usize;
        off += 1;
        if ndim == 0 {
            return Err(fail(off - 1, "tensor must have at least one dimension"));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            need(off, 4)?;
            let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            if d == 0 {
                return Err(fail(off, "tensor dimension must be positive"));
            }
            shape.push(d);
            off += 4;
        }
        let numel: usize = shape.iter().product();
        need(off, numel * 4)?;
        if off + numel * 4 > body_end {
            return Err(fail(body_end, "file truncated"));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let p = off + i * 4;
            data.push(S::from_f64(
                f32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()) as f64,
            ));
        }
        off += numel * 4;
        if let Some(known) = known_names {
            if !known.iter().any(|k| k == &name) {
                warnings.push(name.clone());
            }
        }
        store.insert(&name, Tensor::from_vec(shape, data)?)?;
    }
    if off != body_end {
        return Err(fail(off, "trailing bytes before CRC"));
    }
    Ok(LoadedCheckpoint { store, warnings })
}
