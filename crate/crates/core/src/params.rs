//! Named parameter storage shared by the model, optimizer and checkpoints.

use crate::tensor::{mix64, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Stable 64-bit FNV-1a of a parameter name, used to derive per-tensor seeds.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Independent generator for one named tensor under a model seed.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ name_hash(name)))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            tensor: tensor.with_requires_grad(trainable),
        });
        ParamId(self.params.len() - 1)
    }

    /// Adds a Gaussian-initialized tensor seeded from `(seed, name)`.
    pub fn add_randn(
        &mut self,
        seed: u64,
        name: &str,
        shape: &[usize],
        std: f64,
        trainable: bool,
    ) -> ParamId {
        let mut rng = param_rng(seed, name);
        self.add(name, Tensor::randn(shape, std, &mut rng), trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable())
            .map(|(id, _)| id)
            .collect()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings(
            self.params
                .iter()
                .map(|p| tape.leaf(p.tensor.clone()))
                .collect(),
        )
    }

    /// Records every parameter as a constant; for inference-only passes.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bindings {
        Bindings(
            self.params
                .iter()
                .map(|p| tape.constant(p.tensor.detached()))
                .collect(),
        )
    }
}

/// Tape handles for every parameter, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    /// Wraps leaves created elsewhere (e.g. by the finite-difference checker),
    /// one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradients of every parameter after `tape.backward`, `None` for frozen ones.
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Vec<f64>>> {
        self.0
            .iter()
            .map(|&v| tape.grad(v).map(<[f64]>::to_vec))
            .collect()
    }
}
