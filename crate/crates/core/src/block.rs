//! The generalized building block: a binary convolution unit with pluggable
//! repairs (normalizers, binarizers, scaling factor, activation) and the
//! residual wiring that joins two such units into a ResNet block.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::ops::{channel_layout, planes, planes_mut};
use crate::autograd::{conv2d_real, ConvGeometry, ParamId, Tape, Var};
use crate::binarize::{BinarizerKind, BinarizerSpec, Ste, TrainingProgress};
use crate::error::{Error, Result};
use crate::normalize::{normalize_weight, BatchNorm, FeatureNorm, Mode, NormKind, NormalizerSpec};
use crate::params::{ParamRole, ParamStore};
use crate::tensor::Tensor;

/// Padding value of binary convolutions, so the border stays in `{-1, +1}`.
pub const BINARY_PAD: f64 = -1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScalingFactorSpec {
    #[default]
    None,
    /// Mean absolute weight per output channel, recomputed every pass.
    Am,
    /// Learnable per-channel factor initialized to one.
    Lf,
    /// Learnable factor initialized from a calibration pass.
    Lfi,
}

impl fmt::Display for ScalingFactorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "NONE",
            Self::Am => "AM",
            Self::Lf => "LF",
            Self::Lfi => "LFI",
        })
    }
}

impl FromStr for ScalingFactorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_uppercase().as_str() {
            "NONE" => Self::None,
            "AM" => Self::Am,
            "LF" => Self::Lf,
            "LFI" => Self::Lfi,
            _ => return Err(Error::Config(format!("unknown scaling factor `{s}`"))),
        })
    }
}

/// Per-output-channel scaling factor.
///
/// `y_real` and `y_bin` are the real and binary convolution outputs of one
/// calibration pass and are only read for `Lfi`.
pub fn scaling_factor(
    spec: ScalingFactorSpec,
    w: &Tensor,
    y_real: Option<&Tensor>,
    y_bin: Option<&Tensor>,
) -> Result<Option<Vec<f64>>> {
    let o = *w
        .shape()
        .first()
        .ok_or_else(|| Error::Shape("scaling factor of a scalar weight".into()))?;
    Ok(match spec {
        ScalingFactorSpec::None => None,
        ScalingFactorSpec::Am => Some(
            w.data()
                .chunks(w.len() / o)
                .map(|r| r.iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64)
                .collect(),
        ),
        ScalingFactorSpec::Lf => Some(vec![1.0; o]),
        ScalingFactorSpec::Lfi => {
            let (Some(y_real), Some(y_bin)) = (y_real, y_bin) else {
                return Err(Error::Init(
                    "LFI needs real and binary outputs of a calibration pass".into(),
                ));
            };
            Some(lfi_ratio(y_real, y_bin)?)
        }
    })
}

fn lfi_ratio(y_real: &Tensor, y_bin: &Tensor) -> Result<Vec<f64>> {
    y_real.expect_same_shape(y_bin)?;
    let c = y_real.shape()[1];
    let spatial = y_real.shape()[2..].iter().product();
    let mut num = vec![0.0; c];
    let mut den = vec![0.0; c];
    for ((ch, r), (_, b)) in planes(y_real.data(), c, spatial).zip(planes(y_bin.data(), c, spatial))
    {
        num[ch] += r.iter().map(|v| v.abs()).sum::<f64>();
        den[ch] += b.iter().map(|v| v.abs()).sum::<f64>();
    }
    num.iter()
        .zip(&den)
        .enumerate()
        .map(|(ch, (n, d))| {
            if *d == 0.0 {
                Err(Error::Init(format!(
                    "binary output of channel {ch} is all zero"
                )))
            } else {
                Ok(n / d)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActivationKind {
    None,
    /// Identity here; the hard-tanh lives in the LC_1 backward.
    #[default]
    HtanhId,
    Relu,
    Prelu,
    Rprelu,
    Dprelu,
}

/// `max(alpha x, beta (x - gamma)) + zeta` with a variant deciding which
/// coefficients are learnable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    /// Initial negative slope of the PReLU variants.
    pub alpha_init: f64,
}

impl ActivationSpec {
    pub fn new(kind: ActivationKind) -> Self {
        Self {
            kind,
            alpha_init: 0.25,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, ActivationKind::None | ActivationKind::HtanhId)
    }
}

impl Default for ActivationSpec {
    fn default() -> Self {
        Self::new(ActivationKind::default())
    }
}

impl fmt::Display for ActivationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.kind {
            ActivationKind::None => "NONE",
            ActivationKind::HtanhId => "HTANH_ID",
            ActivationKind::Relu => "RELU",
            ActivationKind::Prelu => "PRELU",
            ActivationKind::Rprelu => "RPRELU",
            ActivationKind::Dprelu => "DPRELU",
        })
    }
}

impl FromStr for ActivationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s.trim().to_ascii_uppercase().as_str() {
            "NONE" => ActivationKind::None,
            "HTANH_ID" | "I&H" => ActivationKind::HtanhId,
            "RELU" => ActivationKind::Relu,
            "PRELU" => ActivationKind::Prelu,
            "RPRELU" => ActivationKind::Rprelu,
            "DPRELU" => ActivationKind::Dprelu,
            _ => return Err(Error::Config(format!("unknown activation `{s}`"))),
        };
        Ok(Self::new(kind))
    }
}

/// Concrete per-channel activation coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub zeta: Vec<f64>,
}

impl ActivationParams {
    pub fn uniform(channels: usize, alpha: f64, beta: f64, gamma: f64, zeta: f64) -> Self {
        Self {
            alpha: vec![alpha; channels],
            beta: vec![beta; channels],
            gamma: vec![gamma; channels],
            zeta: vec![zeta; channels],
        }
    }

    /// Initial coefficients of `spec`.
    pub fn initial(spec: &ActivationSpec, channels: usize) -> Self {
        let (a, b, g, z) = initial_coefficients(spec);
        Self::uniform(channels, a, b, g, z)
    }
}

fn initial_coefficients(spec: &ActivationSpec) -> (f64, f64, f64, f64) {
    match spec.kind {
        ActivationKind::None | ActivationKind::HtanhId => (1.0, 1.0, 0.0, 0.0),
        ActivationKind::Relu => (0.0, 1.0, 0.0, 0.0),
        ActivationKind::Prelu | ActivationKind::Rprelu | ActivationKind::Dprelu => {
            (spec.alpha_init, 1.0, 0.0, 0.0)
        }
    }
}

fn prelu_value(x: f64, a: f64, b: f64, g: f64, z: f64) -> f64 {
    (a * x).max(b * (x - g)) + z
}

/// Applies the activation elementwise to an `[N, C, ...]` tensor.
pub fn activation_apply(p: &ActivationParams, x: &Tensor) -> Result<Tensor> {
    let (c, spatial) = channel_layout(x, p.alpha.len())?;
    for v in [&p.beta, &p.gamma, &p.zeta] {
        channel_layout(x, v.len())?;
    }
    let mut y = x.clone();
    for (ch, plane) in planes_mut(y.data_mut(), c, spatial) {
        plane
            .iter_mut()
            .for_each(|v| *v = prelu_value(*v, p.alpha[ch], p.beta[ch], p.gamma[ch], p.zeta[ch]));
    }
    Ok(y)
}

impl Tape {
    /// `max(a x, b (x - g)) + z` with per-channel `a, b, g, z`. Ties take the
    /// `a x` branch.
    pub fn prelu_family(&mut self, x: Var, a: Var, b: Var, g: Var, z: Var) -> Result<Var> {
        let p = ActivationParams {
            alpha: self.value(a).data().to_vec(),
            beta: self.value(b).data().to_vec(),
            gamma: self.value(g).data().to_vec(),
            zeta: self.value(z).data().to_vec(),
        };
        let y = activation_apply(&p, self.value(x))?;
        let (c, spatial) = channel_layout(self.value(x), p.alpha.len())?;
        Ok(self.record(
            y,
            &[x, a, b, g, z],
            Box::new(move |args| {
                let x = args.inputs[0];
                let mut gx = args.grad.clone();
                let mut ga = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let mut gg = vec![0.0; c];
                let mut gz = vec![0.0; c];
                for ((ch, gp), (_, xp)) in
                    planes_mut(gx.data_mut(), c, spatial).zip(planes(x.data(), c, spatial))
                {
                    let (a, b, g) = (p.alpha[ch], p.beta[ch], p.gamma[ch]);
                    for (gv, &xv) in gp.iter_mut().zip(xp) {
                        let go = *gv;
                        gz[ch] += go;
                        if a * xv >= b * (xv - g) {
                            ga[ch] += go * xv;
                            *gv = go * a;
                        } else {
                            gb[ch] += go * (xv - g);
                            gg[ch] -= go * b;
                            *gv = go * b;
                        }
                    }
                }
                let t = |v: Vec<f64>| Some(Tensor::from_vec(v));
                vec![Some(gx), t(ga), t(gb), t(gg), t(gz)]
            }),
        ))
    }

    /// Mean absolute value of every row `w[o, ...]`.
    pub fn mean_abs_rows(&mut self, w: Var) -> Var {
        let wv = self.value(w);
        let o = wv.shape()[0];
        let row = wv.len() / o;
        let y: Vec<f64> = wv
            .data()
            .chunks(row)
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>() / row as f64)
            .collect();
        self.record(
            Tensor::from_vec(y),
            &[w],
            Box::new(move |a| {
                let g = a.grad.data();
                let out = a.inputs[0]
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let s = if *v > 0.0 {
                            1.0
                        } else if *v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g[i / row] * s / row as f64
                    })
                    .collect();
                vec![Some(
                    Tensor::new(a.inputs[0].shape().to_vec(), out).unwrap(),
                )]
            }),
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResidualMode {
    /// One shortcut around both convolutions.
    #[default]
    Single,
    /// A shortcut around every convolution.
    Double,
}

impl fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Single => "2R_N",
            Self::Double => "2R_Y",
        })
    }
}

impl FromStr for ResidualMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_uppercase().as_str() {
            "2R_N" | "SINGLE" | "N" => Self::Single,
            "2R_Y" | "DOUBLE" | "Y" => Self::Double,
            _ => return Err(Error::Config(format!("unknown residual mode `{s}`"))),
        })
    }
}

/// Training stage. Stage one keeps weights real; stage two binarizes them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

/// Everything a forward pass needs besides the data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pass {
    pub mode: Mode,
    pub progress: TrainingProgress,
    pub stage: Stage,
}

impl Pass {
    pub fn train(progress: TrainingProgress, stage: Stage) -> Self {
        Self {
            mode: Mode::Train,
            progress,
            stage,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            progress: TrainingProgress::end(),
            stage: Stage::Two,
        }
    }
}

/// One option per repair category, plus the unit's width and stride.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub feature_binarizer: BinarizerSpec,
    pub weight_binarizer: BinarizerSpec,
    pub feature_norm: NormalizerSpec,
    pub weight_norm: NormalizerSpec,
    pub scaling: ScalingFactorSpec,
    pub activation: ActivationSpec,
    pub residual: ResidualMode,
    pub channels: usize,
    pub stride: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            feature_binarizer: BinarizerSpec::lc(1.0),
            weight_binarizer: BinarizerSpec::lc(1.0),
            feature_norm: NormalizerSpec::none(),
            weight_norm: NormalizerSpec::none(),
            scaling: ScalingFactorSpec::None,
            activation: ActivationSpec::default(),
            residual: ResidualMode::Single,
            channels: 16,
            stride: 1,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        self.feature_binarizer.validate()?;
        self.weight_binarizer.validate()?;
        if !self.feature_norm.is_feature_kind() {
            return Err(Error::Config(format!(
                "{} cannot normalize features",
                self.feature_norm
            )));
        }
        if !self.weight_norm.is_weight_kind() {
            return Err(Error::Config(format!(
                "{} cannot normalize weights",
                self.weight_norm
            )));
        }
        if self.weight_norm.kind == NormKind::Mstdb && !(self.weight_norm.b > 0.0) {
            return Err(Error::Config(format!(
                "MSTDB divisor must be positive, got {}",
                self.weight_norm.b
            )));
        }
        if self.channels == 0 || self.stride == 0 {
            return Err(Error::Config(
                "block channels and stride must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Kaiming-normal weights for fan-in `I * Kh * Kw`.
pub fn kaiming_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| normal.sample(rng))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Coef {
    Fixed(f64),
    Learned(ParamId),
}

impl Coef {
    fn on_tape(&self, tape: &mut Tape, params: &ParamStore, channels: usize) -> Var {
        match *self {
            Coef::Fixed(v) => tape.constant(Tensor::full(&[channels], v)),
            Coef::Learned(id) => params.on_tape(tape, id),
        }
    }

    pub fn values(&self, params: &ParamStore, channels: usize) -> Vec<f64> {
        match *self {
            Coef::Fixed(v) => vec![v; channels],
            Coef::Learned(id) => params.value(id).data().to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub spec: ActivationSpec,
    pub channels: usize,
    pub alpha: Coef,
    pub beta: Coef,
    pub gamma: Coef,
    pub zeta: Coef,
}

impl Activation {
    pub fn new(spec: ActivationSpec, params: &mut ParamStore, name: &str, channels: usize) -> Self {
        let (a, b, g, z) = initial_coefficients(&spec);
        let learn = |params: &mut ParamStore, coef: &str, v: f64| {
            Coef::Learned(params.add(
                format!("{name}.{coef}"),
                ParamRole::Activation,
                Tensor::full(&[channels], v),
            ))
        };
        let (la, lb, lg, lz) = match spec.kind {
            ActivationKind::Prelu => (true, false, false, false),
            ActivationKind::Rprelu => (true, false, true, true),
            ActivationKind::Dprelu => (true, true, true, true),
            _ => (false, false, false, false),
        };
        let mut coef = |on: bool, n: &str, v: f64| {
            if on {
                learn(params, n, v)
            } else {
                Coef::Fixed(v)
            }
        };
        Self {
            spec,
            channels,
            alpha: coef(la, "alpha", a),
            beta: coef(lb, "beta", b),
            gamma: coef(lg, "gamma", g),
            zeta: coef(lz, "zeta", z),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: Var) -> Result<Var> {
        if self.spec.is_identity() {
            return Ok(x);
        }
        let c = self.channels;
        let a = self.alpha.on_tape(tape, params, c);
        let b = self.beta.on_tape(tape, params, c);
        let g = self.gamma.on_tape(tape, params, c);
        let z = self.zeta.on_tape(tape, params, c);
        tape.prelu_family(x, a, b, g, z)
    }

    pub fn params(&self, store: &ParamStore) -> ActivationParams {
        let c = self.channels;
        ActivationParams {
            alpha: self.alpha.values(store, c),
            beta: self.beta.values(store, c),
            gamma: self.gamma.values(store, c),
            zeta: self.zeta.values(store, c),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ScalingFactor {
    None,
    Am,
    Learned { param: ParamId, calibrate: bool },
}

/// Normalize, binarize, convolve, scale, batch-normalize, optionally add a
/// residual, activate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryConv {
    pub weight: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub feature_norm: FeatureNorm,
    pub feature_clip: Option<ParamId>,
    pub weight_clip: Option<ParamId>,
    pub scaling: ScalingFactor,
    pub bn: BatchNorm,
    pub activation: Activation,
    /// LFI values computed by the last calibration pass.
    #[serde(skip)]
    pub pending_init: Option<Vec<f64>>,
}

impl BinaryConv {
    pub fn new<R: Rng + ?Sized>(
        cfg: &BlockConfig,
        params: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = params.add(
            format!("{name}.weight"),
            ParamRole::BinaryConvWeight,
            kaiming_normal(&[out_channels, in_channels, 3, 3], rng),
        );
        let feature_norm = FeatureNorm::build(
            &cfg.feature_norm,
            params,
            &format!("{name}.fnorm"),
            in_channels,
        )?;
        let clip = |params: &mut ParamStore, spec: &BinarizerSpec, which: &str| {
            (spec.kind == BinarizerKind::LcA).then(|| {
                params.add(
                    format!("{name}.{which}_clip"),
                    ParamRole::Clip,
                    Tensor::full(&[1], spec.learnable_clip_init),
                )
            })
        };
        let feature_clip = clip(params, &cfg.feature_binarizer, "feature");
        let weight_clip = clip(params, &cfg.weight_binarizer, "weight");
        let scaling = match cfg.scaling {
            ScalingFactorSpec::None => ScalingFactor::None,
            ScalingFactorSpec::Am => ScalingFactor::Am,
            kind => ScalingFactor::Learned {
                param: params.add(
                    format!("{name}.alpha"),
                    ParamRole::ScalingFactor,
                    Tensor::full(&[out_channels], 1.0),
                ),
                calibrate: kind == ScalingFactorSpec::Lfi,
            },
        };
        let bn = BatchNorm::new(params, &format!("{name}.bn"), out_channels);
        let activation =
            Activation::new(cfg.activation, params, &format!("{name}.act"), out_channels);
        Ok(Self {
            weight,
            in_channels,
            out_channels,
            stride,
            feature_norm,
            feature_clip,
            weight_clip,
            scaling,
            bn,
            activation,
            pending_init: None,
        })
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.stride, 1, BINARY_PAD)
    }

    fn ste(
        spec: &BinarizerSpec,
        params: &ParamStore,
        clip: Option<ParamId>,
        pass: &Pass,
    ) -> Result<Ste> {
        Ste::resolve(
            spec,
            Some(pass.progress),
            clip.map(|c| params.value(c).item()),
        )
    }

    /// Normalized and binarized weights as recorded on `tape`, plus the
    /// normalized weights before binarization.
    fn weights_on_tape(
        &self,
        cfg: &BlockConfig,
        tape: &mut Tape,
        params: &ParamStore,
        pass: &Pass,
    ) -> Result<(Var, Var)> {
        let w = params.on_tape(tape, self.weight);
        let wn = match cfg.weight_norm.kind {
            NormKind::None => w,
            NormKind::Mstd => tape.standardize(w, 1.0, cfg.weight_norm.center),
            NormKind::Mstdb => tape.standardize(w, cfg.weight_norm.b, cfg.weight_norm.center),
            other => return Err(Error::Config(format!("{other:?} cannot normalize weights"))),
        };
        let (ste, clip) = match pass.stage {
            Stage::One => (Ste::Identity, None),
            Stage::Two => (
                Self::ste(&cfg.weight_binarizer, params, self.weight_clip, pass)?,
                self.weight_clip.map(|c| params.on_tape(tape, c)),
            ),
        };
        Ok((tape.binarize(wn, ste, clip)?, wn))
    }

    /// The `{-1, +1}` weights an exported model uses.
    pub fn binary_weights(&self, cfg: &BlockConfig, params: &ParamStore) -> Result<Tensor> {
        let wn = normalize_weight(&cfg.weight_norm, params.value(self.weight))?;
        Ok(crate::binarize::sign_forward(&wn))
    }

    /// Current per-channel scaling factor, `None` when the unit has none.
    pub fn alpha(&self, cfg: &BlockConfig, params: &ParamStore) -> Result<Option<Vec<f64>>> {
        Ok(match &self.scaling {
            ScalingFactor::None => None,
            ScalingFactor::Am => {
                let wn = normalize_weight(&cfg.weight_norm, params.value(self.weight))?;
                scaling_factor(ScalingFactorSpec::Am, &wn, None, None)?
            }
            ScalingFactor::Learned { param, .. } => Some(params.value(*param).data().to_vec()),
        })
    }

    pub fn forward(
        &mut self,
        cfg: &BlockConfig,
        tape: &mut Tape,
        params: &ParamStore,
        x: Var,
        residual: Option<Var>,
        pass: Pass,
    ) -> Result<Var> {
        let xn = self.feature_norm.forward(tape, params, x, pass.mode)?;
        let fste = Self::ste(&cfg.feature_binarizer, params, self.feature_clip, &pass)?;
        let fclip = self.feature_clip.map(|c| params.on_tape(tape, c));
        let xb = tape.binarize(xn, fste, fclip)?;
        let (wb, wn) = self.weights_on_tape(cfg, tape, params, &pass)?;
        let mut y = tape.conv2d(xb, wb, self.geometry())?;
        match &self.scaling {
            ScalingFactor::None => {}
            ScalingFactor::Am => {
                let alpha = tape.mean_abs_rows(wn);
                y = tape.mul_channel(y, alpha)?;
            }
            ScalingFactor::Learned { param, calibrate } => {
                let alpha = if pass.mode == Mode::Calibrate && *calibrate {
                    let init = self.calibrate(tape, xn, wn)?;
                    let alpha = tape.constant(Tensor::from_vec(init.clone()));
                    self.pending_init = Some(init);
                    alpha
                } else {
                    params.on_tape(tape, *param)
                };
                y = tape.mul_channel(y, alpha)?;
            }
        }
        y = self.bn.forward(tape, params, y, pass.mode)?;
        if let Some(r) = residual {
            if tape.value(r).shape() != tape.value(y).shape() {
                return Err(Error::Config(format!(
                    "residual of shape {:?} cannot be added to {:?}",
                    tape.value(r).shape(),
                    tape.value(y).shape()
                )));
            }
            y = tape.add(y, r)?;
        }
        self.activation.forward(tape, params, y)
    }

    /// `mean|y_real| / mean|y_bin|` with `y_real` the convolution of the
    /// normalized features and weights before binarization and `y_bin` the
    /// convolution of their signs.
    fn calibrate(&self, tape: &Tape, xn: Var, wn: Var) -> Result<Vec<f64>> {
        let xb = crate::binarize::sign_forward(tape.value(xn));
        let wb = crate::binarize::sign_forward(tape.value(wn));
        let y_bin = conv2d_real(&xb, &wb, &self.geometry())?;
        let y_real = conv2d_real(
            tape.value(xn),
            tape.value(wn),
            &ConvGeometry::new(self.stride, 1, 0.0),
        )?;
        lfi_ratio(&y_real, &y_bin)
    }

    /// Moves calibrated LFI values into the parameter store.
    pub fn apply_calibration(&mut self, params: &mut ParamStore) {
        if let (Some(init), ScalingFactor::Learned { param, calibrate }) =
            (self.pending_init.take(), &mut self.scaling)
        {
            *params.value_mut(*param) = Tensor::from_vec(init);
            *calibrate = false;
        }
    }

    pub fn needs_calibration(&self) -> bool {
        matches!(
            self.scaling,
            ScalingFactor::Learned {
                calibrate: true,
                ..
            }
        )
    }
}

/// Real 1x1 projection with batch norm for blocks that change shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shortcut {
    pub weight: ParamId,
    pub stride: usize,
    pub bn: BatchNorm,
}

impl Shortcut {
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.stride, 0, 0.0)
    }

    fn forward(&mut self, tape: &mut Tape, params: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let w = params.on_tape(tape, self.weight);
        let y = tape.conv2d(x, w, self.geometry())?;
        self.bn.forward(tape, params, y, mode)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildingBlock {
    pub cfg: BlockConfig,
    pub conv1: BinaryConv,
    pub conv2: BinaryConv,
    pub shortcut: Option<Shortcut>,
}

impl BuildingBlock {
    /// A block from `in_channels` to `cfg.channels` with `cfg.stride` on
    /// the first convolution.
    pub fn new<R: Rng + ?Sized>(
        cfg: &BlockConfig,
        params: &mut ParamStore,
        name: &str,
        in_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.channels;
        let conv1 = BinaryConv::new(
            cfg,
            params,
            &format!("{name}.conv1"),
            in_channels,
            out,
            cfg.stride,
            rng,
        )?;
        let conv2 = BinaryConv::new(cfg, params, &format!("{name}.conv2"), out, out, 1, rng)?;
        let shortcut = (cfg.stride != 1 || in_channels != out).then(|| Shortcut {
            weight: params.add(
                format!("{name}.shortcut.weight"),
                ParamRole::RealConvWeight,
                kaiming_normal(&[out, in_channels, 1, 1], rng),
            ),
            stride: cfg.stride,
            bn: BatchNorm::new(params, &format!("{name}.shortcut.bn"), out),
        });
        Ok(Self {
            cfg: cfg.clone(),
            conv1,
            conv2,
            shortcut,
        })
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        params: &ParamStore,
        x: Var,
        pass: Pass,
    ) -> Result<Var> {
        let skip = match &mut self.shortcut {
            Some(s) => s.forward(tape, params, x, pass.mode)?,
            None => x,
        };
        match self.cfg.residual {
            ResidualMode::Single => {
                let h = self.conv1.forward(&self.cfg, tape, params, x, None, pass)?;
                self.conv2
                    .forward(&self.cfg, tape, params, h, Some(skip), pass)
            }
            ResidualMode::Double => {
                let h = self
                    .conv1
                    .forward(&self.cfg, tape, params, x, Some(skip), pass)?;
                self.conv2
                    .forward(&self.cfg, tape, params, h, Some(h), pass)
            }
        }
    }

    pub fn units(&self) -> [&BinaryConv; 2] {
        [&self.conv1, &self.conv2]
    }

    pub fn units_mut(&mut self) -> [&mut BinaryConv; 2] {
        [&mut self.conv1, &mut self.conv2]
    }
}

/// Runs one binary convolution unit on tensors in train mode with fresh
/// batch-norm parameters and returns its output.
pub fn binary_conv_train(
    cfg: &BlockConfig,
    x: &Tensor,
    w: &Tensor,
    progress: TrainingProgress,
    stage: Stage,
) -> Result<Tensor> {
    let (_, i, _, _) = x.dims4()?;
    let (o, wi, _, _) = w.dims4()?;
    if wi != i {
        return Err(Error::Shape(format!(
            "weights take {wi} channels, input has {i}"
        )));
    }
    let mut params = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut unit = BinaryConv::new(cfg, &mut params, "unit", i, o, cfg.stride, &mut rng)?;
    *params.value_mut(unit.weight) = w.clone();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = unit.forward(
        cfg,
        &mut tape,
        &params,
        xv,
        None,
        Pass::train(progress, stage),
    )?;
    Ok(tape.value(y).clone())
}

/// Runs a freshly initialized building block on `x` with weights drawn
/// from `rng`.
pub fn building_block_forward<R: Rng + ?Sized>(
    cfg: &BlockConfig,
    x: &Tensor,
    rng: &mut R,
    pass: Pass,
) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    let mut params = ParamStore::new();
    let mut block = BuildingBlock::new(cfg, &mut params, "block", c, rng)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = block.forward(&mut tape, &params, xv, pass)?;
    Ok(tape.value(y).clone())
}
