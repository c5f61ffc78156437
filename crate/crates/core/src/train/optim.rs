//! SGD with momentum and ADAM.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamId;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "SGD",
            Self::Adam => "ADAM",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "SGD" => Ok(Self::Sgd),
            "ADAM" => Ok(Self::Adam),
            _ => Err(Error::Config(format!("unknown optimizer `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Peak learning rate.
    pub lr: f64,
    /// SGD momentum coefficient.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.1,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }

    pub fn adam() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            ..Self::sgd()
        }
    }

    pub fn for_kind(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(),
            OptimizerKind::Adam => Self::adam(),
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::sgd()
    }
}

/// `m = mu m - lr (g + wd w)`, then `w += m`.
pub fn sgd_update(w: &mut [f64], g: &[f64], m: &mut [f64], lr: f64, mu: f64, wd: f64) {
    for ((w, g), m) in w.iter_mut().zip(g).zip(m.iter_mut()) {
        *m = mu * *m - lr * (g + wd * *w);
        *w += *m;
    }
}

/// One ADAM update at step `t` (1-based). `eps` sits inside the square
/// root: `w -= lr m_hat / sqrt(v_hat + eps)`.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    w: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    wd: f64,
) {
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for (((w, g), m), v) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        let g = g + wd * *w;
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w -= lr * m_hat / (v_hat + eps).sqrt();
    }
}

/// Optimizer with its moment buffers, indexed by parameter id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    /// Learning rate of the next step.
    pub lr: f64,
    /// Weight decay currently in force.
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to every trainable parameter. Parameters without
    /// a gradient are updated with a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}` has {} at element {i}",
                    params.get(*id).name,
                    g.data()[i]
                )));
            }
        }
        if self.m.len() < params.len() {
            self.m.resize(params.len(), Vec::new());
            self.v.resize(params.len(), Vec::new());
        }
        self.t += 1;
        let mut gi = 0;
        let ids: Vec<ParamId> = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect();
        let mut zeros = Vec::new();
        for id in ids {
            while gi < grads.len() && grads[gi].0 < id {
                gi += 1;
            }
            let n = params.value(id).len();
            let g: &[f64] = if gi < grads.len() && grads[gi].0 == id {
                grads[gi].1.data()
            } else {
                zeros.resize(n, 0.0);
                &zeros[..n]
            };
            let wd = if params.get(id).role.decays() {
                self.weight_decay
            } else {
                0.0
            };
            if self.m[id].len() != n {
                self.m[id] = vec![0.0; n];
            }
            let w = params.value_mut(id).data_mut();
            match self.cfg.kind {
                OptimizerKind::Sgd => {
                    sgd_update(w, g, &mut self.m[id], self.lr, self.cfg.momentum, wd)
                }
                OptimizerKind::Adam => {
                    if self.v[id].len() != n {
                        self.v[id] = vec![0.0; n];
                    }
                    adam_update(
                        w,
                        g,
                        &mut self.m[id],
                        &mut self.v[id],
                        self.t,
                        self.lr,
                        self.cfg.beta1,
                        self.cfg.beta2,
                        self.cfg.eps,
                        wd,
                    )
                }
            }
        }
        Ok(())
    }
}
