//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::array::Tensor;
use crate::tensor::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: first/second moments per parameter and the step count.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = |store: &ParamStore<T>| {
            store
                .iter()
                .map(|(_, _, v)| vec![T::zero(); v.len()])
                .collect::<Vec<_>>()
        };
        Adam {
            config,
            m: zeros(store),
            v: zeros(store),
            t: 0,
        }
    }

    /// One update. Parameters whose gradient is `None` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Invalid(format!(
                "adam: {} gradients for {} parameters ({} moment slots)",
                grads.len(),
                store.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = T::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.t as i32));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for (id, grad) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let Some(grad) = grad else { continue };
            let i = id.index();
            let p = store.value_mut(id);
            if grad.len() != p.len() {
                return Err(Error::shape(
                    "adam",
                    format!("gradient {:?} for parameter {:?}", grad.shape(), p.shape()),
                ));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
