//! Named parameter storage shared by the featurizer and encoder.

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut1, ArrayViewMut2, ArrayViewMut3, Ix1, Ix2, Ix3, IxDyn};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::rng::Rng;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, ArrayD::ones(IxDyn(shape)))
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng));
        self.add(name, t)
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut Rng) -> ParamId {
        let t = ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-bound..=bound));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.tensors[id.0]
    }

    pub fn v1(&self, id: ParamId) -> ArrayView1<'_, f64> {
        self.tensors[id.0].view().into_dimensionality::<Ix1>().expect("rank-1 parameter")
    }

    pub fn v2(&self, id: ParamId) -> ArrayView2<'_, f64> {
        self.tensors[id.0].view().into_dimensionality::<Ix2>().expect("rank-2 parameter")
    }

    pub fn v3(&self, id: ParamId) -> ArrayView3<'_, f64> {
        self.tensors[id.0].view().into_dimensionality::<Ix3>().expect("rank-3 parameter")
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.tensors.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect())
    }

    /// SHA-256 over names, shapes and the raw bits of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Gradients, one tensor per parameter of the store they were created from.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(Vec<ArrayD<f64>>);

impl Grads {
    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.0[id.0]
    }

    pub fn m1(&mut self, id: ParamId) -> ArrayViewMut1<'_, f64> {
        self.0[id.0].view_mut().into_dimensionality::<Ix1>().expect("rank-1 gradient")
    }

    pub fn m2(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        self.0[id.0].view_mut().into_dimensionality::<Ix2>().expect("rank-2 gradient")
    }

    pub fn m3(&mut self, id: ParamId) -> ArrayViewMut3<'_, f64> {
        self.0[id.0].view_mut().into_dimensionality::<Ix3>().expect("rank-3 gradient")
    }

    pub fn iter(&self) -> impl Iterator<Item = &ArrayD<f64>> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ArrayD<f64>> {
        self.0.iter_mut()
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.0 {
            t.mapv_inplace(|v| v * s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}
