//! Parameter initialization and per-tape parameter binding.

use std::cell::RefCell;

use crate::numeric::{ParamId, ParamStore, RngStream, Tape, Tensor, Var};

/// Registers named, seeded parameters into a [`ParamStore`].
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    rng: RngStream,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: RngStream::new(seed, crate::numeric::hash_bytes(b"params")),
        }
    }

    /// Glorot-uniform weight of shape `[out, in]`.
    pub fn xavier(&mut self, name: &str, out: usize, inp: usize) -> ParamId {
        self.uniform(name, &[out, inp], (6.0 / (out + inp) as f64).sqrt())
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], a: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.uniform_range(-a, a)).collect();
        self.store.insert(name, Tensor::new(shape, data).unwrap())
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], sd: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| sd * self.rng.normal()).collect();
        self.store.insert(name, Tensor::new(shape, data).unwrap())
    }

    pub fn full(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.store.insert(name, Tensor::full(shape, v))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.full(name, shape, 0.0)
    }
}

/// Lazily places each parameter on a tape at most once.
pub struct Bound<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    vars: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Bound<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self {
            tape,
            store,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.index()].get_or_insert_with(|| self.tape.param(self.store, id))
    }

    pub fn value(&self, id: ParamId) -> &'s Tensor {
        self.store.get(id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }
}
