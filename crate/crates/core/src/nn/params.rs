use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, IxDyn};
use rand::Rng as _;

use crate::error::{PvadError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub trainable: bool,
}

/// Named parameter tensors, keyed by a dotted path such as `pvad.lstm0.w_ih`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

fn shape_err(path: &str, expected: &[usize], got: &[usize]) -> PvadError {
    PvadError::Shape {
        path: path.to_string(),
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>, trainable: bool) {
        self.entries.insert(name.into(), Param { value, trainable });
    }

    /// Registers a tensor filled from uniform(-bound, bound).
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut Rng) {
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-bound..=bound));
        self.insert(name, value, true);
    }

    pub fn insert_filled(&mut self, name: &str, shape: &[usize], fill: f64) {
        self.insert(name, ArrayD::from_elem(IxDyn(shape), fill), true);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| PvadError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| PvadError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<ArrayView2<'_, f64>> {
        let p = self.get(name)?;
        if p.value.shape() != [rows, cols] {
            return Err(shape_err(name, &[rows, cols], p.value.shape()));
        }
        Ok(p.value.view().into_dimensionality().expect("checked shape"))
    }

    pub fn vector(&self, name: &str, len: usize) -> Result<ArrayView1<'_, f64>> {
        let p = self.get(name)?;
        if p.value.shape() != [len] {
            return Err(shape_err(name, &[len], p.value.shape()));
        }
        Ok(p.value.view().into_dimensionality().expect("checked shape"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            p.trainable = trainable;
        }
    }

    /// Moves every entry whose name starts with `prefix` into a new set.
    pub fn split_off_prefix(&mut self, prefix: &str) -> ParamSet {
        let names: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        let mut out = ParamSet::new();
        for n in names {
            let p = self.entries.remove(&n).expect("listed key");
            out.entries.insert(n, p);
        }
        out
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.entries.extend(other.entries);
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Gradient accumulators, one per parameter, with identical shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    entries: BTreeMap<String, ArrayD<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let entries = params
            .iter()
            .map(|(k, p)| (k.clone(), ArrayD::zeros(p.value.raw_dim())))
            .collect();
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.entries
            .get(name)
            .ok_or_else(|| PvadError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| PvadError::MissingParam(name.to_string()))
    }

    pub fn matrix_mut(&mut self, name: &str) -> Result<ArrayViewMut2<'_, f64>> {
        let g = self.get_mut(name)?;
        let shape = g.shape().to_vec();
        g.view_mut()
            .into_dimensionality()
            .map_err(|_| shape_err(name, &[0, 0], &shape))
    }

    pub fn vector_mut(&mut self, name: &str) -> Result<ArrayViewMut1<'_, f64>> {
        let g = self.get_mut(name)?;
        let shape = g.shape().to_vec();
        g.view_mut()
            .into_dimensionality()
            .map_err(|_| shape_err(name, &[0], &shape))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    /// Adds `other` into `self`; both must cover the same names.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (k, g) in other.entries.iter() {
            let dst = self.get_mut(k)?;
            if dst.shape() != g.shape() {
                return Err(shape_err(k, dst.shape(), g.shape()));
            }
            *dst += g;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.entries.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their joint L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}
