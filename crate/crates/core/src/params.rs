//! Named parameter storage and per-tape parameter binding.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of linear weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in store order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrites values from `other` by name; every parameter of `self`
    /// must be present with the same shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for i in 0..self.values.len() {
            let name = &self.names[i];
            let id = other
                .id(name)
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks parameter {name}")))?;
            let src = other.get(id);
            if src.shape() != self.values[i].shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    src.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }
}

/// Creates parameters with the default initialization scheme: linear
/// weights N(0, 0.02^2), norms gamma=1 beta=0, biases 0.
pub struct ParamBuilder {
    pub store: ParamStore,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.insert(name, t)
    }

    pub fn weight(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.normal(name, shape, INIT_STD)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.store.insert(name, Tensor::zeros(shape))
    }

    pub fn full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.store.insert(name, Tensor::full(shape, value))
    }

    pub fn tensor(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.store.insert(name, value)
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

/// Which parameters receive gradients on a tape.
#[derive(Clone, Debug, Default)]
pub enum Trainable {
    #[default]
    All,
    Nothing,
    /// Only parameters whose name starts with one of the prefixes.
    Only(Vec<String>),
    /// Everything except parameters whose name starts with one of the prefixes.
    Except(Vec<String>),
}

impl Trainable {
    pub fn allows(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Only(p) => p.iter().any(|p| name.starts_with(p.as_str())),
            Trainable::Except(p) => !p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// Lazily materializes parameters as tape leaves.
pub struct Binding<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    trainable: Trainable,
    vars: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Binding<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, trainable: Trainable) -> Self {
        Self { tape, store, trainable, vars: RefCell::new(vec![None; store.len()]) }
    }

    /// Binds every parameter to an existing tape variable, in store order.
    pub fn from_vars(tape: &'t Tape, store: &'s ParamStore, vars: &[Var<'t>]) -> Self {
        assert_eq!(vars.len(), store.len(), "one variable per parameter");
        Self { tape, store, trainable: Trainable::All, vars: RefCell::new(vars.iter().copied().map(Some).collect()) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let requires = self.trainable.allows(self.store.name(id));
        let v = self.tape.leaf(self.store.get(id).clone(), requires);
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    /// Gradients of every trainable parameter that was used on the tape.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = v.as_ref()?;
                if !v.requires_grad() {
                    return None;
                }
                Some((ParamId(i), grads.tensor(v)))
            })
            .collect()
    }
}
