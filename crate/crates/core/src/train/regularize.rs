//! Weight regularizers that pull latent weights toward binary values.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sharpness of the `tanh` relaxation behind the entropy regularizer.
pub const ENTROPY_SHARPNESS: f64 = 10.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegKind {
    #[default]
    None,
    /// `sum |alpha - |W||`.
    R1,
    /// `sum (alpha - |W|)^2`.
    R2,
    /// Per-layer `|H_e - H(p)|` with `p` the relaxed fraction of `+1` weights.
    Re,
}

impl fmt::Display for RegKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "NONE",
            Self::R1 => "R1",
            Self::R2 => "R2",
            Self::Re => "RE",
        })
    }
}

impl FromStr for RegKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_uppercase().as_str() {
            "NONE" => Self::None,
            "R1" | "RD" => Self::R1,
            "R2" => Self::R2,
            "RE" => Self::Re,
            _ => return Err(Error::Config(format!("unknown regularizer `{s}`"))),
        })
    }
}

/// Total loss is `cross_entropy + reg_lambda * regularizer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub reg: RegKind,
    /// Target magnitude for R1 and R2.
    pub reg_alpha: f64,
    pub reg_lambda: f64,
    /// Wanted entropy for RE, in bits.
    pub entropy_target: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            reg: RegKind::None,
            reg_alpha: 1.0,
            reg_lambda: 0.0,
            entropy_target: 1.0,
        }
    }
}

impl LossSpec {
    pub fn is_active(&self) -> bool {
        self.reg != RegKind::None && self.reg_lambda != 0.0
    }
}

/// Binary entropy in bits; zero at the endpoints.
pub fn binary_entropy(p: f64) -> f64 {
    let h = |q: f64| if q > 0.0 { -q * q.log2() } else { 0.0 };
    h(p) + h(1.0 - p)
}

fn relaxed_plus_fraction(w: &[f64]) -> f64 {
    w.iter()
        .map(|v| ((ENTROPY_SHARPNESS * v).tanh() + 1.0) / 2.0)
        .sum::<f64>()
        / w.len() as f64
}

/// Entropy of the `{-1, +1}` frequency of `sign(w)`, counted exactly.
pub fn hard_weight_entropy(w: &Tensor) -> f64 {
    let plus = w.data().iter().filter(|v| **v >= 0.0).count();
    binary_entropy(plus as f64 / w.len() as f64)
}

/// Value of the regularizer over a list of weight tensors (one per layer).
pub fn regularization_loss(spec: &LossSpec, weights: &[&Tensor]) -> f64 {
    let a = spec.reg_alpha;
    match spec.reg {
        RegKind::None => 0.0,
        RegKind::R1 => weights
            .iter()
            .flat_map(|w| w.data())
            .map(|v| (a - v.abs()).abs())
            .sum(),
        RegKind::R2 => weights
            .iter()
            .flat_map(|w| w.data())
            .map(|v| (a - v.abs()).powi(2))
            .sum(),
        RegKind::Re => weights
            .iter()
            .map(|w| (spec.entropy_target - binary_entropy(relaxed_plus_fraction(w.data()))).abs())
            .sum(),
    }
}

fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Tape {
    /// Records the regularizer of a single layer's weights.
    pub fn regularizer(&mut self, w: Var, spec: &LossSpec) -> Var {
        let spec = spec.clone();
        let wv = self.value(w);
        let y = Tensor::scalar(regularization_loss(&spec, &[wv]));
        self.record(
            y,
            &[w],
            Box::new(move |args| {
                let g = args.grad.item();
                let w = args.inputs[0];
                let a = spec.reg_alpha;
                let out = match spec.reg {
                    RegKind::None => Tensor::zeros(w.shape()),
                    RegKind::R1 => w.map(|v| -g * signum0(a - v.abs()) * signum0(v)),
                    RegKind::R2 => w.map(|v| -2.0 * g * (a - v.abs()) * signum0(v)),
                    RegKind::Re => {
                        let n = w.len() as f64;
                        let p = relaxed_plus_fraction(w.data());
                        let dh_dp = if p > 0.0 && p < 1.0 {
                            ((1.0 - p) / p).log2()
                        } else {
                            0.0
                        };
                        let outer = -signum0(spec.entropy_target - binary_entropy(p)) * dh_dp;
                        w.map(|v| {
                            let t = (ENTROPY_SHARPNESS * v).tanh();
                            g * outer * ENTROPY_SHARPNESS * (1.0 - t * t) / (2.0 * n)
                        })
                    }
                };
                vec![Some(out)]
            }),
        )
    }
}
