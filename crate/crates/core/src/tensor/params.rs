//! Named parameter storage and the two parameterized layers every block uses.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::array::Tensor;
use crate::tensor::graph::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learnable tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Weight initialization for a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Init {
    /// Fan-in uniform, bound `sqrt(6 / fan_in)`; zero bias.
    #[default]
    Kaiming,
    /// All-zero weights and bias.
    Zero,
}

/// Convolution parameters: `(C_out, C_in, k, k)` weights plus a bias per output channel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Registers `{prefix}.weight` / `{prefix}.bias`. Odd `k` with `same` padding.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = match init {
            Init::Kaiming => {
                let bound = (6.0 / (cin * k * k) as f64).sqrt();
                Tensor::uniform([cout, cin, k, k], -bound, bound, rng)
            }
            Init::Zero => Tensor::zeros([cout, cin, k, k]),
        };
        Conv2d {
            weight: store.add(format!("{prefix}.weight"), weight),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros([cout, 1, 1, 1])),
            stride: 1,
            padding: (k - 1) / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }

    pub fn out_channels<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.weight).shape().n()
    }
}

/// Running statistics of a batch-norm layer. Not learnable.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// False until the first train-mode update or checkpoint load.
    pub initialized: bool,
}

/// Batch normalization with affine parameters and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm<T: Scalar> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnState<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full([1, channels, 1, 1], T::one())),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros([1, channels, 1, 1])),
            state: BnState {
                running_mean: vec![T::zero(); channels],
                running_var: vec![T::one(); channels],
                initialized: false,
            },
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
        }
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates; eval mode uses the running estimates.
    pub fn forward(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, train: bool) -> Result<Var> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        if train {
            let (y, moments) = g.batch_norm(x, gamma, beta, None, self.eps)?;
            let m = moments.expect("train mode yields batch moments");
            let unbias = if m.count > 1 {
                m.count as f64 / (m.count - 1) as f64
            } else {
                1.0
            };
            let mo = self.momentum;
            for c in 0..m.mean.len() {
                let rm = self.state.running_mean[c].as_f64();
                let rv = self.state.running_var[c].as_f64();
                self.state.running_mean[c] = T::of((1.0 - mo) * rm + mo * m.mean[c]);
                self.state.running_var[c] = T::of((1.0 - mo) * rv + mo * m.var[c] * unbias);
            }
            self.state.initialized = true;
            Ok(y)
        } else {
            if !self.state.initialized {
                return Err(Error::Uninitialized { op: "batch_norm" });
            }
            let (y, _) = g.batch_norm(
                x,
                gamma,
                beta,
                Some((&self.state.running_mean, &self.state.running_var)),
                self.eps,
            )?;
            Ok(y)
        }
    }

    pub fn channels(&self) -> usize {
        self.state.running_mean.len()
    }
}
