use hdan_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ParamStore;

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

const FIRST: &str = "optim.m.";
const SECOND: &str = "optim.v.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adaptive moments with decoupled weight decay.
    Adam,
    /// Heavy-ball momentum with weight decay folded into the gradient.
    SgdMomentum,
}

/// Optimizer state for one parameter store. Moment buffers are allocated
/// the first time a parameter receives a gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    momentum: f64,
    steps: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64, momentum: f64, store: &ParamStore) -> Self {
        Self {
            kind,
            weight_decay,
            momentum,
            steps: 0,
            first: vec![None; store.len()],
            second: vec![None; store.len()],
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update. Parameters without a gradient are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = ADAM_BETAS;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (id, param) in store.iter_mut() {
            let i = id.index();
            let Some(g) = grads[i].as_ref() else {
                continue;
            };
            if !param.kind.is_trainable() {
                continue;
            }
            if g.shape() != param.tensor.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient {:?} for {} of shape {:?}",
                    g.shape(),
                    param.name,
                    param.tensor.shape()
                )));
            }
            let shape = param.tensor.shape().to_vec();
            let zeros = || Tensor::zeros(&shape);
            let p = param.tensor.data_mut();
            let g = g.data();
            let m = self.first[i].get_or_insert_with(zeros).data_mut();
            match self.kind {
                OptimizerKind::Adam => {
                    let v = self.second[i].get_or_insert_with(zeros).data_mut();
                    for j in 0..p.len() {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                        let update = (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                        p[j] -= lr * (update + self.weight_decay * p[j]);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    for j in 0..p.len() {
                        m[j] = self.momentum * m[j] + g[j] + self.weight_decay * p[j];
                        p[j] -= lr * m[j];
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment buffers as `optim.m.<param>` / `optim.v.<param>` tensors.
    pub(crate) fn named_state(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (prefix, buffers) in [(FIRST, &self.first), (SECOND, &self.second)] {
            for ((_, param), buf) in store.iter().zip(buffers) {
                if let Some(t) = buf {
                    out.push((format!("{prefix}{}", param.name), t.clone()));
                }
            }
        }
        out
    }

    /// Rebuild from saved buffers; tensors without the optimizer prefix are
    /// ignored.
    pub(crate) fn restore(
        kind: OptimizerKind,
        weight_decay: f64,
        momentum: f64,
        steps: u64,
        store: &ParamStore,
        tensors: &[(String, Tensor)],
    ) -> Result<Self> {
        let mut opt = Self::new(kind, weight_decay, momentum, store);
        opt.steps = steps;
        for (name, t) in tensors {
            let (slot, param) = if let Some(p) = name.strip_prefix(FIRST) {
                (&mut opt.first, p)
            } else if let Some(p) = name.strip_prefix(SECOND) {
                (&mut opt.second, p)
            } else {
                continue;
            };
            let id = store.id(param).ok_or_else(|| {
                Error::Checkpoint(format!("optimizer state for unknown parameter {param}"))
            })?;
            if store.tensor(id).len() != t.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state {name} has the wrong size"
                )));
            }
            slot[id.index()] = Some(t.clone());
        }
        Ok(opt)
    }
}
