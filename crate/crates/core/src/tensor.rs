//! Named tensor sets and the linear arithmetic the merging method is built on.
//!
//! Tensors store `f32` values; every reduction and every linear combination
//! accumulates in `f64` and rounds once on the way out.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Role of a tensor inside a model state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    /// Trainable weights that inherit from the pre-trained base.
    Parameter,
    /// Non-gradient training state such as batch-norm running statistics.
    Buffer,
    /// The appended classification layer; no pre-trained counterpart.
    Head,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Parameter => "parameter",
            Kind::Buffer => "buffer",
            Kind::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Option<Kind> {
        match s {
            "parameter" => Some(Kind::Parameter),
            "buffer" => Some(Kind::Buffer),
            "head" => Some(Kind::Head),
            _ => None,
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dense row-major `f32` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} has a zero dimension"
            )));
        }
        let expected = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::ShapeMismatch(format!("shape {shape:?} overflows")))?;
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor of shape {shape:?}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Mutable access for in-crate kernels. Callers keep entries finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Euclidean norm accumulated in `f64`.
    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub tensor: Tensor,
    pub kind: Kind,
}

/// Ordered map from tensor name to tensor and kind.
///
/// Iteration is lexicographic by name (byte order), which every
/// order-dependent computation in this crate relies on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensorSet {
    entries: BTreeMap<String, Entry>,
}

impl NamedTensorSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a tensor; returns the previous entry.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, kind: Kind) -> Option<Entry> {
        self.entries.insert(name.into(), Entry { tensor, kind })
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Entry> {
        self.entries.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Entry> {
        self.entries.remove(name)
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

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Subset containing only entries of the given kind.
    pub fn filter_kind(&self, kind: Kind) -> NamedTensorSet {
        self.filter(|_, e| e.kind == kind)
    }

    pub fn filter(&self, mut keep: impl FnMut(&str, &Entry) -> bool) -> NamedTensorSet {
        NamedTensorSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, v)| keep(k, v))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Total number of scalar elements across all tensors.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    /// Same names, same kinds, same shapes.
    pub fn check_compatible(&self, other: &NamedTensorSet) -> Result<()> {
        for name in self.entries.keys() {
            if !other.entries.contains_key(name) {
                return Err(Error::ShapeMismatch(format!(
                    "`{name}` missing from right operand"
                )));
            }
        }
        for (name, b) in &other.entries {
            let a = self.entries.get(name).ok_or_else(|| {
                Error::ShapeMismatch(format!("`{name}` missing from left operand"))
            })?;
            if a.kind != b.kind {
                return Err(Error::ShapeMismatch(format!(
                    "`{name}` is {} on the left but {} on the right",
                    a.kind, b.kind
                )));
            }
            if a.tensor.shape != b.tensor.shape {
                return Err(Error::ShapeMismatch(format!(
                    "`{name}` has shape {:?} on the left but {:?} on the right",
                    a.tensor.shape, b.tensor.shape
                )));
            }
        }
        Ok(())
    }

    pub fn is_compatible(&self, other: &NamedTensorSet) -> bool {
        self.check_compatible(other).is_ok()
    }

    /// Applies `f` elementwise over the values of two compatible sets.
    pub(crate) fn zip_map(
        &self,
        other: &NamedTensorSet,
        mut f: impl FnMut(f32, f32) -> f32,
    ) -> Result<NamedTensorSet> {
        self.check_compatible(other)?;
        let mut out = BTreeMap::new();
        for ((name, a), b) in self.entries.iter().zip(other.entries.values()) {
            let data: Vec<f32> = a
                .tensor
                .data
                .iter()
                .zip(&b.tensor.data)
                .map(|(&x, &y)| f(x, y))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.clone()));
            }
            out.insert(
                name.clone(),
                Entry {
                    tensor: Tensor {
                        shape: a.tensor.shape.clone(),
                        data,
                    },
                    kind: a.kind,
                },
            );
        }
        Ok(NamedTensorSet { entries: out })
    }

    pub(crate) fn map_values(&self, mut f: impl FnMut(f32) -> f32) -> NamedTensorSet {
        NamedTensorSet {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    let data = e.tensor.data.iter().map(|&v| f(v)).collect();
                    (
                        k.clone(),
                        Entry {
                            tensor: Tensor {
                                shape: e.tensor.shape.clone(),
                                data,
                            },
                            kind: e.kind,
                        },
                    )
                })
                .collect(),
        }
    }
}

impl FromIterator<(String, Entry)> for NamedTensorSet {
    fn from_iter<I: IntoIterator<Item = (String, Entry)>>(iter: I) -> Self {
        NamedTensorSet {
            entries: iter.into_iter().collect(),
        }
    }
}

/// `alpha * a + beta * b`, elementwise, accumulated in `f64`.
///
/// Subtraction is `combine(a, b, 1.0, -1.0)`.
pub fn combine(
    a: &NamedTensorSet,
    b: &NamedTensorSet,
    alpha: f64,
    beta: f64,
) -> Result<NamedTensorSet> {
    a.zip_map(b, |x, y| {
        (alpha * f64::from(x) + beta * f64::from(y)) as f32
    })
}

/// `lambda * v`, elementwise.
pub fn scale(v: &NamedTensorSet, lambda: f64) -> NamedTensorSet {
    if lambda == 1.0 {
        return v.clone();
    }
    v.map_values(|x| (lambda * f64::from(x)) as f32)
}

/// Cosine similarity of one layer pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCosine {
    pub cosine: f64,
    /// Set when either side has zero norm; `cosine` is then reported as 0.
    pub zero_norm: bool,
}

/// Per-name cosine similarity between two compatible sets.
pub fn layer_cosine(
    a: &NamedTensorSet,
    b: &NamedTensorSet,
) -> Result<BTreeMap<String, LayerCosine>> {
    a.check_compatible(b)?;
    Ok(a.entries
        .iter()
        .zip(b.entries.values())
        .map(|((name, x), y)| (name.clone(), cosine(x.tensor.data(), y.tensor.data())))
        .collect())
}

pub(crate) fn cosine(x: &[f32], y: &[f32]) -> LayerCosine {
    let (mut dot, mut nx, mut ny) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    if nx == 0.0 || ny == 0.0 {
        return LayerCosine {
            cosine: 0.0,
            zero_norm: true,
        };
    }
    LayerCosine {
        cosine: (dot / (nx.sqrt() * ny.sqrt())).clamp(-1.0, 1.0),
        zero_norm: false,
    }
}
