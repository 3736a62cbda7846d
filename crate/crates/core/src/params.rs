//! Named parameter storage shared by the encoder, decoder and heads.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Tape, Var};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: Array2<F>,
    /// Whether decoupled weight decay applies to this tensor.
    pub decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<F>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Array2<F>> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    /// Binds every parameter as a borrowed leaf on `tape`.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, F>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(&p.value)).collect(),
        }
    }

    /// Converts every parameter to another element type.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.mapv(|v| G::lit(v.as_f64())),
                    decay: p.decay,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|p| p.value.iter().any(|v| !v.is_finite()))
            .map(|p| p.name.as_str())
    }
}

/// Tape variables for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Parameter initializers.
pub(crate) struct Init<'r, R: Rng> {
    pub rng: &'r mut R,
}

impl<R: Rng> Init<'_, R> {
    /// Glorot-uniform weight of shape `fan_in × fan_out`.
    pub fn xavier<F: Real>(&mut self, fan_in: usize, fan_out: usize) -> Array2<F> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Array2::from_shape_simple_fn((fan_in, fan_out), || F::lit(dist.sample(self.rng)))
    }

    pub fn normal<F: Real>(&mut self, rows: usize, cols: usize, std: f64) -> Array2<F> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Array2::from_shape_simple_fn((rows, cols), || F::lit(dist.sample(self.rng)))
    }
}

/// Ids of an affine map `x W + b`, with `W` stored as `in × out`.
#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearIds {
    pub(crate) fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        init: &mut Init<'_, R>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.xavier(fan_in, fan_out), true);
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, fan_out)), false);
        Self { weight, bias }
    }

    pub fn apply<F: Real>(&self, tape: &mut Tape<'_, F>, b: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, b.var(self.weight));
        tape.add_row(y, b.var(self.bias))
    }
}

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormIds {
    pub(crate) fn new<F: Real>(store: &mut ParamStore<F>, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Array2::ones((1, width)), false);
        let beta = store.add(format!("{name}.beta"), Array2::zeros((1, width)), false);
        Self { gamma, beta }
    }

    pub fn apply<F: Real>(&self, tape: &mut Tape<'_, F>, b: &Bound, x: Var) -> Var {
        tape.layer_norm(x, b.var(self.gamma), b.var(self.beta), LN_EPS)
    }
}

/// Two-layer GELU perceptron.
#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

impl MlpIds {
    pub(crate) fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        init: &mut Init<'_, R>,
        name: &str,
        width: usize,
        hidden: usize,
    ) -> Self {
        Self {
            fc1: LinearIds::new(store, init, &format!("{name}.fc1"), width, hidden),
            fc2: LinearIds::new(store, init, &format!("{name}.fc2"), hidden, width),
        }
    }

    pub fn apply<F: Real>(&self, tape: &mut Tape<'_, F>, b: &Bound, x: Var) -> Var {
        let h = self.fc1.apply(tape, b, x);
        let h = tape.gelu(h);
        self.fc2.apply(tape, b, h)
    }
}
