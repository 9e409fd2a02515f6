//! Named parameters and the per-forward binding of parameters onto a tape.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::rng::keyed_stream;
use crate::tensor::{fnv_mix, fnv_start, Tensor};

pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::full(shape, 1.0))
    }

    /// Normal(0, std²) truncated at ±2·std, drawn from a stream keyed by
    /// `(seed, name)`.
    pub fn trunc_normal(name: impl Into<String>, shape: &[usize], std: f32, seed: u64) -> Self {
        let name = name.into();
        let mut rng = keyed_stream(seed, &name);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f32 = rand_distr::StandardNormal.sample(&mut rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        Self::new(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn normal(name: impl Into<String>, shape: &[usize], std: f32, seed: u64) -> Self {
        let name = name.into();
        let mut rng = keyed_stream(seed, &name);
        let dist = Normal::new(0.0f32, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
        Self::new(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Matrices get weight decay; biases, norms, embeddings and prompt
    /// tokens do not.
    pub fn decays(&self) -> bool {
        self.name.ends_with(".weight")
    }
}

/// Anything that owns named parameters in a stable order.
pub trait Parameters {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn param_names(&self) -> Vec<String> {
        self.params().iter().map(|p| p.name.clone()).collect()
    }

    /// Combined digest of every parameter's name and bits.
    fn checksum(&self) -> u64 {
        self.params().iter().fold(fnv_start(), |h, p| {
            let h = p.name.bytes().fold(h, |h, b| fnv_mix(h, b as u64));
            fnv_mix(h, p.value.checksum())
        })
    }

    /// Per-parameter digests keyed by name.
    fn checksums(&self) -> BTreeMap<String, u64> {
        self.params()
            .iter()
            .map(|p| (p.name.clone(), p.value.checksum()))
            .collect()
    }
}

/// Which parameter names receive gradients in a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainableSet {
    names: HashSet<String>,
}

impl TrainableSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            names: names.into_iter().map(Into::into).collect(),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.names.iter()
    }

    pub fn sorted(&self) -> Vec<String> {
        let mut v: Vec<String> = self.names.iter().cloned().collect();
        v.sort();
        v
    }
}

/// A tape plus the mapping from trainable parameter names to their leaves.
pub struct Graph<'a> {
    pub tape: Tape,
    trainable: &'a TrainableSet,
    bound: Vec<(String, Var)>,
    leaves: HashMap<String, Var>,
}

static NO_TRAINABLE: std::sync::OnceLock<TrainableSet> = std::sync::OnceLock::new();

impl<'a> Graph<'a> {
    pub fn new(trainable: &'a TrainableSet) -> Self {
        Self {
            tape: Tape::new(),
            trainable,
            bound: Vec::new(),
            leaves: HashMap::new(),
        }
    }

    /// A graph where nothing requires gradients.
    pub fn inference() -> Graph<'static> {
        Graph::new(NO_TRAINABLE.get_or_init(TrainableSet::none))
    }

    /// Leaf for `p`. Binding the same name twice returns the first leaf, so
    /// its gradient collects every use.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.leaves.get(&p.name) {
            return v;
        }
        let rg = self.trainable.contains(&p.name);
        let v = self.tape.leaf(p.value.clone(), rg);
        if rg {
            self.bound.push((p.name.clone(), v));
        }
        self.leaves.insert(p.name.clone(), v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn backward_scaled(&mut self, loss: Var, seed: f32) -> Result<()> {
        self.tape.backward_scaled(loss, seed)
    }

    /// Gradients of every bound trainable parameter, after `backward`.
    pub fn param_grads(&self) -> Vec<(&str, &Tensor)> {
        self.bound
            .iter()
            .filter_map(|(n, v)| self.tape.grad(*v).map(|g| (n.as_str(), g)))
            .collect()
    }
}

/// Gradient accumulator keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    grads: BTreeMap<String, Vec<f32>>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, graph: &Graph<'_>) {
        for (name, g) in graph.param_grads() {
            self.add(name, g.data());
        }
    }

    /// Adds `grad` to the entry for `name`.
    pub fn add(&mut self, name: &str, grad: &[f32]) {
        let slot = self
            .grads
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        for (s, &v) in slot.iter_mut().zip(grad) {
            *s += v;
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f32>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn clear(&mut self) {
        self.grads.clear();
    }
}
