use std::io::{Read, Write};

use indexmap::IndexMap;
use ndarray::Array2;

use crate::{Error, Result};

/// Named, shaped real parameters. Insertion order is the canonical order
/// for serialization and flattening.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: IndexMap<String, Array2<f64>>,
}

/// Gradients with the same key/shape structure as a [`ParamSet`].
pub type GradSet = ParamSet;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        let name = name.into();
        assert!(!self.tensors.contains_key(&name), "duplicate parameter `{name}`");
        self.tensors.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.tensors.values()
    }

    pub(crate) fn value_at(&self, i: usize) -> &Array2<f64> {
        &self.tensors[i]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Zeros with the same structure.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.raw_dim())))
                .collect(),
        }
    }

    pub fn same_structure(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.values().flat_map(|t| t.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        debug_assert!(self.same_structure(other));
        for (a, b) in self.tensors.values_mut().zip(other.tensors.values()) {
            a.scaled_add(scale, b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|x| x * s);
        }
    }

    /// Largest absolute elementwise difference (infinite on structure mismatch).
    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        if !self.same_structure(other) {
            return f64::INFINITY;
        }
        self.values()
            .zip(other.values())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of every value.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.same_structure(other)
            && self
                .values()
                .zip(other.values())
                .all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values().flat_map(|t| t.iter().copied()).collect()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Check names and shapes against a reference layout.
    pub fn check_layout(&self, reference: &ParamSet) -> Result<()> {
        for (name, r) in reference.iter() {
            match self.get(name) {
                None => {
                    return Err(Error::ShapeMismatch {
                        name: name.to_string(),
                        expected: r.shape().to_vec(),
                        got: vec![],
                    })
                }
                Some(t) if t.shape() != r.shape() => {
                    return Err(Error::ShapeMismatch {
                        name: name.to_string(),
                        expected: r.shape().to_vec(),
                        got: t.shape().to_vec(),
                    })
                }
                _ => {}
            }
        }
        if self.len() != reference.len() {
            let extra = self.names().find(|n| reference.get(n).is_none()).unwrap_or("?");
            return Err(Error::ShapeMismatch { name: extra.to_string(), expected: vec![], got: vec![] });
        }
        Ok(())
    }

    /// Binary block: `u32 count`, then per parameter `u32 name_len, name,
    /// u32 ndim, u64 dims.., f64 payload` (all little-endian, row-major).
    pub fn write_block(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&2u32.to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for x in t.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_block(r: &mut impl Read) -> Result<Self> {
        let count = read_u32(r)? as usize;
        let mut out = ParamSet::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            if len > 1 << 16 {
                return Err(corrupt("name length"));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| corrupt("truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| corrupt("name not utf-8"))?;
            let ndim = read_u32(r)?;
            if ndim != 2 {
                return Err(corrupt("tensor rank"));
            }
            let rows = read_u64(r)? as usize;
            let cols = read_u64(r)? as usize;
            let n = rows.checked_mul(cols).filter(|&n| n <= 1 << 28).ok_or_else(|| corrupt("tensor size"))?;
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes).map_err(|_| corrupt("truncated payload"))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Array2::from_shape_vec((rows, cols), data).map_err(|_| corrupt("shape"))?;
            if out.get(&name).is_some() {
                return Err(corrupt("duplicate parameter"));
            }
            out.insert(name, t);
        }
        Ok(out)
    }
}

fn corrupt(what: &str) -> Error {
    Error::CorruptCheckpoint(what.to_string())
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated"))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated"))?;
    Ok(u64::from_le_bytes(b))
}
