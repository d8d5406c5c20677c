use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Real, Tensor, Var, Tape};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter table owned by one model.
#[derive(Clone, Debug)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// `(name, f32 value)` pairs in registration order.
    pub fn to_table(&self) -> Vec<(String, Tensor<f32>)> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().map(Tensor::cast))
            .collect()
    }

    /// Overwrites every parameter from a table; names and shapes must match.
    pub fn load_table(&mut self, table: &[(String, Tensor<f32>)]) -> Result<(), String> {
        let by_name: HashMap<&str, &Tensor<f32>> =
            table.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (i, name) in self.names.iter().enumerate() {
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| format!("missing parameter {name}"))?;
            if t.shape() != self.values[i].shape() {
                return Err(format!(
                    "parameter {name}: shape {:?} != expected {:?}",
                    t.shape(),
                    self.values[i].shape()
                ));
            }
            self.values[i] = t.cast();
        }
        Ok(())
    }
}

/// Registers parameters under a dotted name prefix with seeded init.
pub struct ParamBuilder<'a, F: Real> {
    store: &'a mut ParamStore<F>,
    prefix: String,
    rng: &'a mut ChaCha8Rng,
}

impl<'a, F: Real> ParamBuilder<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, prefix: &str, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            prefix: prefix.to_owned(),
            rng,
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, F> {
        ParamBuilder {
            prefix: self.full(name),
            store: self.store,
            rng: self.rng,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_owned()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<F>) -> ParamId {
        let full = self.full(name);
        self.store.add(full, value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::full(shape, F::one()))
    }

    /// Glorot uniform over `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-a..a)).collect();
        self.tensor(name, Tensor::from_f64(shape, &data).expect("shape"))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.tensor(name, Tensor::from_f64(shape, &data).expect("shape"))
    }
}

/// Forward-pass context binding one [`ParamStore`] to a tape.
///
/// Parameters are copied onto the tape on first use. With `trainable` unset
/// they become constants, so no gradient can reach them.
pub struct Ctx<'t, 's, F: Real> {
    pub tape: &'t Tape<F>,
    store: &'s ParamStore<F>,
    trainable: bool,
    train: bool,
    rng: RefCell<ChaCha8Rng>,
    bound: RefCell<Vec<Option<Var<'t, F>>>>,
}

impl<'t, 's, F: Real> Ctx<'t, 's, F> {
    /// Context in training mode (dropout active) with a dropout seed.
    pub fn train(tape: &'t Tape<F>, store: &'s ParamStore<F>, trainable: bool, seed: u64) -> Self {
        Self::build(tape, store, trainable, true, seed)
    }

    /// Inference context: dropout disabled.
    pub fn eval(tape: &'t Tape<F>, store: &'s ParamStore<F>, trainable: bool) -> Self {
        Self::build(tape, store, trainable, false, 0)
    }

    fn build(tape: &'t Tape<F>, store: &'s ParamStore<F>, trainable: bool, train: bool, seed: u64) -> Self {
        Self {
            tape,
            store,
            trainable,
            train,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var<'t, F> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.trainable);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Inverted dropout: kept units scaled by `1 / (1 - p)` in training,
    /// identity otherwise.
    pub fn dropout(&self, x: Var<'t, F>, p: f64) -> Var<'t, F> {
        if !self.train || p <= 0.0 {
            return x;
        }
        let shape = x.shape();
        let keep = 1.0 / (1.0 - p);
        let mut rng = self.rng.borrow_mut();
        let n: usize = shape.iter().product();
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { F::of(keep) })
            .collect();
        let mask = self.tape.constant(Tensor::new(shape, mask).expect("mask shape"));
        x.mul(&mask).expect("same shape")
    }

    /// Gradients of every bound parameter after a backward pass, indexed by
    /// [`ParamId`]. Unbound or unreached parameters yield `None`.
    pub fn grads(&self) -> Vec<Option<Tensor<F>>> {
        self.bound
            .borrow()
            .iter()
            .map(|b| b.and_then(|v| v.grad()))
            .collect()
    }

    /// Ids of parameters that have been placed on the tape.
    pub fn bound_ids(&self) -> Vec<ParamId> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.map(|_| ParamId(i)))
            .collect()
    }
}
