//! Pre-binarization normalization of features and weights.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{BnStats, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamRole, ParamStore};
use crate::tensor::{channel_stats, Tensor};

/// Smallest standard deviation used as a divisor.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormKind {
    None,
    /// Channel-wise learnable bias (features).
    Lb,
    /// Division by the per-channel batch standard deviation (features).
    Std,
    /// Zero mean and unit standard deviation over the whole tensor (weights).
    Mstd,
    /// As `Mstd`, additionally divided by `b`.
    Mstdb,
    /// Batch normalization (features).
    Bn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Center {
    Mean,
    Median,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizerSpec {
    pub kind: NormKind,
    /// Standard-deviation divisor for `Mstdb`.
    pub b: f64,
    /// Centering statistic for `Mstd`/`Mstdb`.
    pub center: Center,
}

impl NormalizerSpec {
    pub fn new(kind: NormKind) -> Self {
        Self {
            kind,
            b: std::f64::consts::SQRT_2,
            center: Center::Mean,
        }
    }

    pub fn none() -> Self {
        Self::new(NormKind::None)
    }

    pub fn is_feature_kind(&self) -> bool {
        matches!(
            self.kind,
            NormKind::None | NormKind::Lb | NormKind::Std | NormKind::Bn
        )
    }

    pub fn is_weight_kind(&self) -> bool {
        matches!(self.kind, NormKind::None | NormKind::Mstd | NormKind::Mstdb)
    }
}

impl Default for NormalizerSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl fmt::Display for NormalizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.kind {
            NormKind::None => "NONE",
            NormKind::Lb => "FN_LB",
            NormKind::Std => "FN_STD",
            NormKind::Bn => "FN_BN",
            NormKind::Mstd => "WN_MSTD",
            NormKind::Mstdb => "WN_MSTDB",
        })
    }
}

impl FromStr for NormalizerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s.trim().to_ascii_uppercase().as_str() {
            "NONE" => NormKind::None,
            "FN_LB" | "LB" => NormKind::Lb,
            "FN_STD" | "STD" => NormKind::Std,
            "FN_BN" | "BN" => NormKind::Bn,
            "WN_MSTD" | "MSTD" => NormKind::Mstd,
            "WN_MSTDB" | "MSTDB" => NormKind::Mstdb,
            _ => return Err(Error::Config(format!("unknown normalizer `{s}`"))),
        };
        Ok(Self::new(kind))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics only.
    Eval,
    /// Batch statistics without touching running statistics.
    Calibrate,
}

/// Folded-out batch-norm values for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNormParams {
    pub fn identity(channels: usize, eps: f64) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0 - eps; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Eval-mode output as `scale * y + shift` per channel.
    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        let mut scale = Vec::with_capacity(self.channels());
        let mut shift = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let s = (self.var[c] + self.eps).sqrt();
            scale.push(self.gamma[c] / s);
            shift.push(self.beta[c] - self.gamma[c] * self.mean[c] / s);
        }
        (scale, shift)
    }
}

/// A batch-norm layer: learnable affine parameters plus running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(params: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = params.add(
            format!("{name}.gamma"),
            ParamRole::BnGamma,
            Tensor::full(&[channels], 1.0),
        );
        let beta = params.add(
            format!("{name}.beta"),
            ParamRole::BnBeta,
            Tensor::zeros(&[channels]),
        );
        Self {
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        params: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let g = params.on_tape(tape, self.gamma);
        let b = params.on_tape(tape, self.beta);
        let stats = match mode {
            Mode::Eval => BnStats::Running {
                mean: &self.running_mean,
                var: &self.running_var,
            },
            Mode::Train | Mode::Calibrate => BnStats::Batch,
        };
        let (y, batch) = tape.batch_norm(x, g, b, stats, self.eps)?;
        if let (Mode::Train, Some((mean, var))) = (mode, batch) {
            self.update_running(&mean, &var);
        }
        Ok(y)
    }

    /// `running = momentum * batch + (1 - momentum) * running`.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(mean) {
            *r = m * b + (1.0 - m) * *r;
        }
        for (r, b) in self.running_var.iter_mut().zip(var) {
            *r = (m * b + (1.0 - m) * *r).max(0.0);
        }
    }

    pub fn params(&self, store: &ParamStore) -> BatchNormParams {
        BatchNormParams {
            gamma: store.value(self.gamma).data().to_vec(),
            beta: store.value(self.beta).data().to_vec(),
            mean: self.running_mean.clone(),
            var: self.running_var.clone(),
            eps: self.eps,
        }
    }
}

/// Model-side state of a feature normalizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeatureNorm {
    None,
    Lb { bias: ParamId },
    Std,
    Bn(BatchNorm),
}

impl FeatureNorm {
    pub fn build(
        spec: &NormalizerSpec,
        params: &mut ParamStore,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(match spec.kind {
            NormKind::None => Self::None,
            NormKind::Lb => Self::Lb {
                bias: params.add(
                    format!("{name}.bias"),
                    ParamRole::FeatureBias,
                    Tensor::zeros(&[channels]),
                ),
            },
            NormKind::Std => Self::Std,
            NormKind::Bn => Self::Bn(BatchNorm::new(params, name, channels)),
            other => {
                return Err(Error::Config(format!(
                    "{other:?} is not a feature normalizer"
                )))
            }
        })
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        params: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        match self {
            Self::None => Ok(x),
            Self::Lb { bias } => {
                let b = params.on_tape(tape, *bias);
                tape.add_channel(x, b)
            }
            Self::Std => Ok(tape.std_normalize_channels(x)),
            Self::Bn(bn) => bn.forward(tape, params, x, mode),
        }
    }
}

impl Tape {
    /// `x / max(sigma_c, SIGMA_FLOOR)` with `sigma_c` the per-channel
    /// population standard deviation over every non-channel axis.
    pub fn std_normalize_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[1];
        let spatial: usize = xv.shape()[2..].iter().product();
        let (mean, var) = channel_stats(xv);
        let raw: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        let sigma: Vec<f64> = raw.iter().map(|s| s.max(SIGMA_FLOOR)).collect();
        let mut y = xv.clone();
        for (i, p) in y.data_mut().chunks_mut(spatial).enumerate() {
            let s = sigma[i % c];
            p.iter_mut().for_each(|v| *v /= s);
        }
        let m = (xv.len() / c) as f64;
        self.record(
            y,
            &[x],
            Box::new(move |a| {
                let x = a.inputs[0];
                let mut sum_gx = vec![0.0; c];
                for (i, (gp, xp)) in a
                    .grad
                    .data()
                    .chunks(spatial)
                    .zip(x.data().chunks(spatial))
                    .enumerate()
                {
                    sum_gx[i % c] += gp.iter().zip(xp).map(|(g, x)| g * x).sum::<f64>();
                }
                let mut gx = a.grad.clone();
                for (i, (gp, xp)) in gx
                    .data_mut()
                    .chunks_mut(spatial)
                    .zip(x.data().chunks(spatial))
                    .enumerate()
                {
                    let ch = i % c;
                    let s = sigma[ch];
                    // d sigma / d x_i = (x_i - mu) / (m sigma); zero when floored
                    let k = if raw[ch] > SIGMA_FLOOR {
                        sum_gx[ch] / (s * s * s * m)
                    } else {
                        0.0
                    };
                    for (g, xv) in gp.iter_mut().zip(xp) {
                        *g = *g / s - k * (xv - mean[ch]);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// `(w - center(w)) / (max(sigma(w), SIGMA_FLOOR) * b)` over the whole
    /// tensor, `sigma` the population standard deviation.
    pub fn standardize(&mut self, w: Var, b: f64, center: Center) -> Var {
        let wv = self.value(w);
        let n = wv.len() as f64;
        let mean = wv.sum() / n;
        let raw = (wv
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n)
            .sqrt();
        let sigma = raw.max(SIGMA_FLOOR);
        let (c, median_weights) = match center {
            Center::Mean => (mean, Vec::new()),
            Center::Median => median_with_weights(wv.data()),
        };
        let y = wv.map(|v| (v - c) / (sigma * b));
        self.record(
            y,
            &[w],
            Box::new(move |a| {
                let w = a.inputs[0];
                let g = a.grad.data();
                let sum_g: f64 = g.iter().sum();
                let sum_gd: f64 = g.iter().zip(w.data()).map(|(g, v)| g * (v - c)).sum();
                let sb = sigma * b;
                let ks = if raw > SIGMA_FLOOR {
                    sum_gd / (sb * sigma * n * sigma)
                } else {
                    0.0
                };
                let mut out: Vec<f64> = g
                    .iter()
                    .zip(w.data())
                    .map(|(g, v)| g / sb - ks * (v - mean))
                    .collect();
                match center {
                    Center::Mean => out.iter_mut().for_each(|o| *o -= sum_g / (sb * n)),
                    Center::Median => {
                        for &(i, wgt) in &median_weights {
                            out[i] -= wgt * sum_g / sb;
                        }
                    }
                }
                vec![Some(Tensor::new(w.shape().to_vec(), out).unwrap())]
            }),
        )
    }
}

/// Median and the elements it is taken from, with their weights.
fn median_with_weights(v: &[f64]) -> (f64, Vec<(usize, f64)>) {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let n = v.len();
    if n % 2 == 1 {
        (v[idx[n / 2]], vec![(idx[n / 2], 1.0)])
    } else {
        let (a, b) = (idx[n / 2 - 1], idx[n / 2]);
        ((v[a] + v[b]) / 2.0, vec![(a, 0.5), (b, 0.5)])
    }
}

/// Applies a feature normalizer outside of training. `Lb` uses `bias` (zeros
/// if absent); `Bn` uses `bn` and updates its running statistics in train mode.
pub fn normalize_feature(
    spec: &NormalizerSpec,
    x: &Tensor,
    mode: Mode,
    bias: Option<&[f64]>,
    bn: Option<&mut BatchNormParams>,
    momentum: f64,
) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = match spec.kind {
        NormKind::None => xv,
        NormKind::Lb => {
            let b = bias.map(|b| b.to_vec()).unwrap_or_else(|| vec![0.0; c]);
            let b = tape.constant(Tensor::new(vec![b.len()], b)?);
            tape.add_channel(xv, b)?
        }
        NormKind::Std => tape.std_normalize_channels(xv),
        NormKind::Bn => {
            let bn = bn.ok_or_else(|| Error::Config("FN_BN needs batch-norm parameters".into()))?;
            if bn.channels() != c {
                return Err(Error::Shape(format!(
                    "{} batch-norm channels for {c} input channels",
                    bn.channels()
                )));
            }
            let g = tape.constant(Tensor::from_vec(bn.gamma.clone()));
            let b = tape.constant(Tensor::from_vec(bn.beta.clone()));
            let stats = match mode {
                Mode::Eval => BnStats::Running {
                    mean: &bn.mean,
                    var: &bn.var,
                },
                _ => BnStats::Batch,
            };
            let (y, batch) = tape.batch_norm(xv, g, b, stats, bn.eps)?;
            if let (Mode::Train, Some((mean, var))) = (mode, batch) {
                for c in 0..bn.channels() {
                    bn.mean[c] = momentum * mean[c] + (1.0 - momentum) * bn.mean[c];
                    bn.var[c] = (momentum * var[c] + (1.0 - momentum) * bn.var[c]).max(0.0);
                }
            }
            y
        }
        other => {
            return Err(Error::Config(format!(
                "{other:?} is not a feature normalizer"
            )))
        }
    };
    Ok(tape.value(y).clone())
}

/// Applies a weight normalizer to a whole weight tensor.
pub fn normalize_weight(spec: &NormalizerSpec, w: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let wv = tape.constant(w.clone());
    let y = match spec.kind {
        NormKind::None => wv,
        NormKind::Mstd => tape.standardize(wv, 1.0, spec.center),
        NormKind::Mstdb => {
            if !(spec.b > 0.0) {
                return Err(Error::Config(format!(
                    "MSTDB divisor must be positive, got {}",
                    spec.b
                )));
            }
            tape.standardize(wv, spec.b, spec.center)
        }
        other => {
            return Err(Error::Config(format!(
                "{other:?} is not a weight normalizer"
            )))
        }
    };
    Ok(tape.value(y).clone())
}
