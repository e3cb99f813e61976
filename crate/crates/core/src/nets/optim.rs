//! First-order optimizers over [`ParamStore`]s.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::Result;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adam with the usual defaults (0.9, 0.999, 1e-8). Moments are tracked per
/// array name; arrays absent from a gradient set are left untouched and do
/// not advance their step counter.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    state: HashMap<String, (Matrix, Matrix, i32)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).ok_or_else(|| {
                crate::error::Error::Shape(format!("gradient for unknown parameter `{name}`"))
            })?;
            let (m, v, t) = self.state.entry(name.clone()).or_insert_with(|| {
                (
                    Matrix::zeros(g.rows(), g.cols()),
                    Matrix::zeros(g.rows(), g.cols()),
                    0,
                )
            });
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t);
            let bc2 = 1.0 - self.beta2.powi(*t);
            let (b1, b2) = (self.beta1, self.beta2);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent `p -= lr * g`.
pub fn sgd_step(params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
    params.axpy(-lr, grads)
}

/// Either optimizer behind one interface.
pub enum Optimizer {
    Adam(Adam),
    Sgd(f64),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr)),
            OptimizerKind::Sgd => Optimizer::Sgd(lr),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.step(params, grads),
            Optimizer::Sgd(lr) => sgd_step(params, grads, *lr),
        }
    }
}
