//! Named parameter storage and the `DGQ1` binary checkpoint container.
//!
//! Layout: magic `DGQ1`, then per entry until end of file: name length
//! (u64 LE), UTF-8 name, rank (u64 LE), dims (u64 LE each), payload of
//! little-endian `f64` values.

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DGQ1";

/// Suffixes of entries that hold normalization statistics rather than
/// learned parameters.
pub const RUNNING_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

pub fn is_running_stat(name: &str) -> bool {
    RUNNING_SUFFIXES.iter().any(|s| name.ends_with(s))
}

/// Ordered map from parameter name to tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Learned (optimizer-visible) entries, excluding running statistics.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|(k, _)| !is_running_stat(k))
    }

    /// Number of learned scalars.
    pub fn parameter_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    /// Bit-level equality of names, order, shapes and values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((a, ta), (b, tb))| a == b && ta.bit_eq(tb))
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for (name, t) in self.iter() {
            out.extend((name.len() as u64).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |detail: String| Error::format(origin, detail);
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(bad("missing DGQ1 magic header".into()));
        }
        let mut cursor = Cursor { bytes, pos: 4 };
        let mut store = Self::new();
        while cursor.pos < bytes.len() {
            let name_len = cursor.u64().ok_or_else(|| bad("truncated name length".into()))? as usize;
            let raw = cursor.take(name_len).ok_or_else(|| bad("truncated name".into()))?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| bad("parameter name is not UTF-8".into()))?
                .to_owned();
            let rank = cursor.u64().ok_or_else(|| bad(format!("`{name}`: truncated rank")))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cursor.u64().ok_or_else(|| bad(format!("`{name}`: truncated dims")))? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let v = cursor.f64().ok_or_else(|| bad(format!("`{name}`: truncated payload")))?;
                data.push(T::lit(v));
            }
            let tensor = Tensor::new(&shape, data).map_err(|e| bad(format!("`{name}`: {e}")))?;
            if store.contains(&name) {
                return Err(bad(format!("duplicate entry `{name}`")));
            }
            store.insert(name, tensor);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// Entry-by-entry comparison of two stores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StoreDiff {
    /// Names whose values differ at bit level.
    pub changed: Vec<String>,
}

/// Compares two stores of identical architecture.
pub fn diff_stores<T: Real>(before: &ParamStore<T>, after: &ParamStore<T>) -> Result<StoreDiff> {
    let names_a: Vec<&str> = before.names().collect();
    let names_b: Vec<&str> = after.names().collect();
    if names_a != names_b {
        return Err(Error::Contract("architecture mismatch: parameter names differ".into()));
    }
    let mut changed = Vec::new();
    for ((name, a), (_, b)) in before.iter().zip(after.iter()) {
        if a.shape() != b.shape() {
            return Err(Error::Contract(format!("architecture mismatch: `{name}` shape {:?} vs {:?}", a.shape(), b.shape())));
        }
        if !a.bit_eq(b) {
            changed.push(name.to_owned());
        }
    }
    Ok(StoreDiff { changed })
}
