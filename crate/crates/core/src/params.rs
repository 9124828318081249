//! Named parameter collections.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered `name -> tensor` map. Iteration is lexicographic by name, which
/// fixes the order of every accumulation over parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamMap {
    entries: BTreeMap<String, Tensor>,
}

impl ParamMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::UnboundLeaf(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Same names and the same shapes, entry by entry.
    pub fn is_compatible(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.is_compatible(other) {
            return Ok(());
        }
        for (name, t) in self.iter() {
            match other.get(name) {
                None => return Err(Error::Incompatible(format!("`{name}` missing on one side"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::Incompatible(format!(
                        "`{name}` has shape {:?} vs {:?}",
                        t.shape(),
                        o.shape()
                    )))
                }
                _ => {}
            }
        }
        Err(Error::Incompatible(format!(
            "{} vs {} entries",
            self.len(),
            other.len()
        )))
    }

    /// Entry-by-entry combination of two compatible maps.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_compatible(other)?;
        let mut out = Self::new();
        for ((name, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            out.insert(name.clone(), a.zip_with(b, "zip_map", &f)?);
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.map(&f))).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        self.map(|_| 0.0)
    }

    /// Euclidean norm over every entry of every tensor jointly.
    pub fn global_norm(&self) -> f64 {
        self.entries.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }

    /// Largest absolute elementwise difference between compatible maps.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        let diff = self.zip_map(other, |a, b| (a - b).abs())?;
        Ok(diff
            .entries
            .values()
            .flat_map(|t| t.data().iter().copied())
            .fold(0.0, f64::max))
    }

    /// Entries whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

impl FromIterator<(String, Tensor)> for ParamMap {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Elementwise `θ − θ0` over compatible maps.
pub fn param_delta(theta: &ParamMap, theta0: &ParamMap) -> Result<ParamMap> {
    theta.zip_map(theta0, |a, b| a - b)
}
