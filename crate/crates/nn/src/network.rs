use ndarray::Array4;
use rand::RngCore;

use crate::module::{Cache, Mode, Module};
use crate::params::{Builder, Grads, ParamStore};
use crate::Scalar;

/// Momentum used when folding batch statistics into running estimates.
pub const BN_MOMENTUM: f64 = 0.1;

/// A module tree together with the parameters it owns.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub module: Module,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Network<T> {
    pub fn build(rng: &mut dyn RngCore, f: impl FnOnce(&mut Builder<'_, T>) -> Module) -> Self {
        let mut store = ParamStore::new();
        let module = {
            let mut b = Builder::new(&mut store, rng);
            f(&mut b)
        };
        Self { module, store }
    }

    pub fn forward(&self, x: Array4<T>, mode: Mode) -> (Array4<T>, Cache<T>) {
        self.module.forward(&self.store, x, mode)
    }

    pub fn apply(&self, x: Array4<T>, mode: Mode) -> Array4<T> {
        self.module.apply(&self.store, x, mode)
    }

    pub fn backward(&self, cache: &Cache<T>, dy: Array4<T>, grads: Option<&mut Grads<T>>) -> Array4<T> {
        self.module.backward(&self.store, cache, dy, grads)
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.store.zero_grads()
    }

    pub fn commit_stats(&mut self, cache: &Cache<T>) {
        self.module.commit_stats(cache, &mut self.store, BN_MOMENTUM);
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network { module: self.module.clone(), store: self.store.cast() }
    }
}
