//! Named parameter sets and classic SGD with momentum and L2 weight decay.

use super::tensor::{Scalar, Tensor, TensorError};
use super::{cast, TensorResult};

/// An ordered list of named tensors. Iteration order is insertion order and
/// stays stable across save/load, so optimizer state and checkpoints line up
/// by position.
#[derive(Clone)]
pub struct ParamSet<T: Scalar = f32> {
    items: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { items: Vec::new() }
    }

    /// Adds a named tensor. Names must be unique.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> TensorResult<()> {
        let name = name.into();
        if self.items.iter().any(|(n, _)| *n == name) {
            return Err(TensorError::InvalidArg {
                op: "param_set",
                msg: format!("duplicate parameter name {name}"),
            });
        }
        self.items.push((name, tensor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.items.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.items.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.items.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in &self.items {
            t.zero_grad();
        }
    }

    pub fn set_requires_grad(&self, on: bool) {
        for (_, t) in &self.items {
            t.set_requires_grad(on);
        }
    }

    /// Deep copy: fresh buffers, gradients not carried over.
    pub fn deep_clone(&self) -> Self {
        let items = self
            .items
            .iter()
            .map(|(n, t)| {
                let copy = Tensor::leaf(t.to_vec(), t.shape(), t.requires_grad());
                (n.clone(), copy)
            })
            .collect();
        ParamSet { items }
    }

    /// True when every tensor holds bitwise-identical values.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.items.len() == other.items.len()
            && self.items.iter().zip(&other.items).all(|((an, at), (bn, bt))| {
                an == bn
                    && at.shape() == bt.shape()
                    && at.with_data(|a| {
                        bt.with_data(|b| {
                            a.iter()
                                .zip(b)
                                .all(|(x, y)| x.to_f64().unwrap().to_bits() == y.to_f64().unwrap().to_bits())
                        })
                    })
            })
    }
}

/// SGD state: hyperparameters plus per-parameter velocity buffers.
///
/// The update rule, pinned exactly for reproducibility:
///
/// ```text
/// v <- momentum * v + grad + weight_decay * theta
/// theta <- theta - lr * v
/// ```
///
/// Weight decay enters as an additive gradient term (L2), not decoupled.
#[derive(Clone)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f32>>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> TensorResult<Self> {
        if learning_rate <= 0.0 {
            return Err(TensorError::InvalidArg {
                op: "sgd",
                msg: "learning_rate must be > 0".into(),
            });
        }
        if !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
            return Err(TensorError::InvalidArg {
                op: "sgd",
                msg: "momentum must be in [0,1) and weight_decay >= 0".into(),
            });
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub(crate) fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    pub(crate) fn set_velocity(&mut self, v: Vec<Vec<f32>>) {
        self.velocity = v;
    }
}

/// One optimizer step over every parameter in the set.
///
/// Every parameter must carry a gradient; velocity buffers are created lazily
/// on the first step.
pub fn sgd_step(params: &ParamSet<f32>, state: &mut SgdState) -> TensorResult<()> {
    if state.velocity.is_empty() {
        state.velocity = params
            .iter()
            .map(|(_, t)| vec![0.0f32; t.numel()])
            .collect();
    }
    let m = cast::<f32>(state.momentum);
    let wd = cast::<f32>(state.weight_decay);
    let lr = cast::<f32>(state.learning_rate);
    for ((name, t), vel) in params.iter().zip(state.velocity.iter_mut()) {
        let grad = t.grad().ok_or_else(|| TensorError::MissingGrad {
            name: name.to_string(),
        })?;
        t.with_data_mut(|theta| {
            for i in 0..theta.len() {
                vel[i] = m * vel[i] + grad[i] + wd * theta[i];
                theta[i] -= lr * vel[i];
            }
        });
    }
    Ok(())
}
