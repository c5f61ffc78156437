//! The sign binarizer and its straight-through estimators.
//!
//! Every kind binarizes identically in the forward pass (`+1` for `x >= 0`,
//! `-1` otherwise); the kinds differ only in the surrogate derivative used
//! on the backward pass. `Identity` is the exception: it passes values
//! through untouched and is what stage-one training uses for weights.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinarizerKind {
    /// Linear, clipped at `|x| <= X`.
    Lc,
    /// Linear with a learnable clip.
    LcA,
    /// Piecewise polynomial with a triangular derivative.
    Pn,
    /// Gradually sharpened polynomial.
    Gpn,
    /// Gradual `tanh(lambda x)`.
    T,
    /// `tanh` with magnitude scaling.
    Ede,
    /// SwishSign.
    Ss,
    /// Element-wise gradient scaling.
    Ewgs,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinarizerSpec {
    pub kind: BinarizerKind,
    /// Clip width `X` for [`BinarizerKind::Lc`].
    pub clip_width: f64,
    /// Initial clip for [`BinarizerKind::LcA`].
    pub learnable_clip_init: f64,
    /// SwishSign sharpness.
    pub beta: f64,
    /// EWGS scaling factor.
    pub delta: f64,
    /// Read the GPN scale as `max(1/lambda, 1)` instead of the literal
    /// `max(1/lambda, 0)`.
    pub gpn_k_clamp_at_one: bool,
}

impl BinarizerSpec {
    pub fn new(kind: BinarizerKind) -> Self {
        Self {
            kind,
            clip_width: 1.0,
            learnable_clip_init: 1.0,
            beta: 5.0,
            delta: 1e-3,
            gpn_k_clamp_at_one: false,
        }
    }

    pub fn lc(clip_width: f64) -> Self {
        Self {
            clip_width,
            ..Self::new(BinarizerKind::Lc)
        }
    }

    pub fn identity() -> Self {
        Self::new(BinarizerKind::Identity)
    }

    pub fn is_scheduled(&self) -> bool {
        matches!(
            self.kind,
            BinarizerKind::T | BinarizerKind::Ede | BinarizerKind::Gpn
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = match self.kind {
            BinarizerKind::Lc => !(self.clip_width > 0.0),
            BinarizerKind::LcA => !(self.learnable_clip_init > 0.0),
            BinarizerKind::Ss => !(self.beta > 0.0),
            BinarizerKind::Ewgs => !(self.delta >= 0.0),
            _ => false,
        };
        if bad {
            return Err(Error::Config(format!(
                "invalid parameters for binarizer {self}"
            )));
        }
        Ok(())
    }
}

impl Default for BinarizerSpec {
    fn default() -> Self {
        Self::lc(1.0)
    }
}

impl fmt::Display for BinarizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            BinarizerKind::Lc => write!(f, "LC_{}", self.clip_width),
            BinarizerKind::LcA => f.write_str("LC_A"),
            BinarizerKind::Pn => f.write_str("PN"),
            BinarizerKind::Gpn => f.write_str("GPN"),
            BinarizerKind::T => f.write_str("T"),
            BinarizerKind::Ede => f.write_str("EDE"),
            BinarizerKind::Ss => f.write_str("SS"),
            BinarizerKind::Ewgs => f.write_str("EWGS"),
            BinarizerKind::Identity => f.write_str("IDENTITY"),
        }
    }
}

impl FromStr for BinarizerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s.trim().to_ascii_uppercase().as_str() {
            "LC_A" => BinarizerKind::LcA,
            "PN" => BinarizerKind::Pn,
            "GPN" => BinarizerKind::Gpn,
            "T" => BinarizerKind::T,
            "EDE" => BinarizerKind::Ede,
            "SS" => BinarizerKind::Ss,
            "EWGS" => BinarizerKind::Ewgs,
            "IDENTITY" => BinarizerKind::Identity,
            other => {
                let width = other
                    .strip_prefix("LC_")
                    .and_then(|w| w.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown binarizer `{s}`")))?;
                let spec = Self::lc(width);
                spec.validate()?;
                return Ok(spec);
            }
        };
        Ok(Self::new(kind))
    }
}

/// Fraction of total training completed, `T` in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingProgress(f64);

impl TrainingProgress {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Range(format!(
                "training progress {t} is outside [0, 1]"
            )));
        }
        Ok(Self(t))
    }

    pub fn start() -> Self {
        Self(0.0)
    }

    pub fn end() -> Self {
        Self(1.0)
    }

    pub fn fraction(&self) -> f64 {
        self.0
    }

    /// `10^(-3 + 4T)`: 1e-3 at the start, 10 at the end.
    pub fn lambda_ede(&self) -> f64 {
        10f64.powf(-3.0 + 4.0 * self.0)
    }

    /// `10^(-2 + 3T)`: 1e-2 at the start, 10 at the end.
    pub fn lambda_gpn(&self) -> f64 {
        10f64.powf(-2.0 + 3.0 * self.0)
    }
}

/// Sharpness schedule for the gradual binarizers. `T` shares the EDE schedule.
pub fn schedule_lambda(kind: BinarizerKind, progress: TrainingProgress) -> Result<f64> {
    match kind {
        BinarizerKind::Ede | BinarizerKind::T => Ok(progress.lambda_ede()),
        BinarizerKind::Gpn => Ok(progress.lambda_gpn()),
        other => Err(Error::Config(format!("{other:?} has no lambda schedule"))),
    }
}

/// `+1` where `x >= 0`, `-1` elsewhere.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn sign_forward(x: &Tensor) -> Tensor {
    x.map(sign)
}

/// A binarizer with its schedule and clip resolved to concrete numbers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ste {
    Clip { width: f64 },
    LearnedClip { width: f64 },
    Poly,
    GradualPoly { lambda: f64, k: f64 },
    Tanh { lambda: f64, scale: f64 },
    SwishSign { beta: f64 },
    Ewgs { delta: f64 },
    Identity,
}

impl Ste {
    /// Resolves `spec` against the current progress. `learned_clip` is the
    /// current value of the LC_A clip parameter.
    pub fn resolve(
        spec: &BinarizerSpec,
        progress: Option<TrainingProgress>,
        learned_clip: Option<f64>,
    ) -> Result<Self> {
        spec.validate()?;
        let scheduled = |kind| {
            progress
                .ok_or_else(|| {
                    Error::Config(format!(
                        "binarizer {spec} needs a training progress to resolve its schedule"
                    ))
                })
                .and_then(|p| schedule_lambda(kind, p))
        };
        Ok(match spec.kind {
            BinarizerKind::Lc => Ste::Clip {
                width: spec.clip_width,
            },
            BinarizerKind::LcA => Ste::LearnedClip {
                width: learned_clip.unwrap_or(spec.learnable_clip_init),
            },
            BinarizerKind::Pn => Ste::Poly,
            BinarizerKind::Gpn => {
                let lambda = scheduled(BinarizerKind::Gpn)?;
                let floor = if spec.gpn_k_clamp_at_one { 1.0 } else { 0.0 };
                Ste::GradualPoly {
                    lambda,
                    k: (1.0 / lambda).max(floor),
                }
            }
            BinarizerKind::T => Ste::Tanh {
                lambda: scheduled(BinarizerKind::T)?,
                scale: 1.0,
            },
            BinarizerKind::Ede => {
                let lambda = scheduled(BinarizerKind::Ede)?;
                Ste::Tanh {
                    lambda,
                    scale: (1.0 / lambda).max(1.0),
                }
            }
            BinarizerKind::Ss => Ste::SwishSign { beta: spec.beta },
            BinarizerKind::Ewgs => Ste::Ewgs { delta: spec.delta },
            BinarizerKind::Identity => Ste::Identity,
        })
    }

    /// The smooth function whose derivative the estimator uses, where one
    /// exists.
    pub fn surrogate(&self, x: f64) -> Option<f64> {
        Some(match *self {
            Ste::Clip { width } | Ste::LearnedClip { width } => x.clamp(-width, width),
            Ste::Poly => {
                if x < -1.0 {
                    -1.0
                } else if x < 0.0 {
                    2.0 * x + x * x
                } else if x < 1.0 {
                    2.0 * x - x * x
                } else {
                    1.0
                }
            }
            Ste::GradualPoly { lambda, k } => {
                if x.abs() < std::f64::consts::SQRT_2 / lambda {
                    k * (-sign(x) * lambda * lambda * x * x / 2.0
                        + std::f64::consts::SQRT_2 * lambda * x)
                } else {
                    k * sign(x)
                }
            }
            Ste::Tanh { lambda, scale } => scale * (lambda * x).tanh(),
            Ste::SwishSign { beta } => {
                let s = sigmoid(beta * x);
                2.0 * s * (1.0 + beta * x * (1.0 - s)) - 1.0
            }
            Ste::Identity => x,
            Ste::Ewgs { .. } => return None,
        })
    }

    /// Surrogate derivative at `x`; EWGS has none (it scales by the incoming
    /// gradient instead).
    pub fn derivative(&self, x: f64) -> Option<f64> {
        Some(match *self {
            Ste::Clip { width } | Ste::LearnedClip { width } => {
                if x.abs() <= width {
                    1.0
                } else {
                    0.0
                }
            }
            Ste::Poly => {
                if (-1.0..0.0).contains(&x) {
                    2.0 + 2.0 * x
                } else if (0.0..1.0).contains(&x) {
                    2.0 - 2.0 * x
                } else {
                    0.0
                }
            }
            Ste::GradualPoly { lambda, k } => {
                let r = std::f64::consts::SQRT_2 - lambda * x.abs();
                if r > 0.0 {
                    k * lambda * r
                } else {
                    0.0
                }
            }
            Ste::Tanh { lambda, scale } => {
                // sech^2 keeps full relative precision in the tails, where
                // 1 - tanh^2 cancels to zero
                let c = (lambda * x).cosh();
                scale * lambda / (c * c)
            }
            Ste::SwishSign { beta } => {
                let u = beta * x;
                let s = sigmoid(u);
                2.0 * beta * s * (1.0 - s) * (2.0 + u * (1.0 - 2.0 * s))
            }
            Ste::Identity => 1.0,
            Ste::Ewgs { .. } => return None,
        })
    }

    /// d(loss)/d(x_r) for one element given d(loss)/d(x_b).
    #[inline]
    pub fn backward_one(&self, x: f64, g: f64) -> f64 {
        match *self {
            Ste::Ewgs { delta } => {
                let sg = if g > 0.0 {
                    1.0
                } else if g < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                g * (1.0 + delta * sg * (x - sign(x)))
            }
            _ => {
                g * self
                    .derivative(x)
                    .expect("non-EWGS estimators have a derivative")
            }
        }
    }

    fn forward_one(&self, x: f64) -> f64 {
        match self {
            Ste::Identity => x,
            _ => sign(x),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Elementwise surrogate backward of `g_out` at the pre-binarization values.
pub fn ste_backward(
    spec: &BinarizerSpec,
    x_r: &Tensor,
    g_out: &Tensor,
    progress: Option<TrainingProgress>,
) -> Result<Tensor> {
    let ste = Ste::resolve(spec, progress, None)?;
    x_r.zip_map(g_out, |x, g| ste.backward_one(x, g))
}

impl Tape {
    /// Binarizes `x` (or passes it through for `Ste::Identity`) and records
    /// the estimator as a custom-gradient hook. `clip` must be the LC_A clip
    /// parameter when `ste` is `LearnedClip`; it receives
    /// `sum(g * sign(x) * 1{|x| > X})`.
    pub fn binarize(&mut self, x: Var, ste: Ste, clip: Option<Var>) -> Result<Var> {
        let y = self.value(x).map(|v| ste.forward_one(v));
        match (ste, clip) {
            (Ste::LearnedClip { .. }, Some(clip)) => {
                let width = self.value(clip).item();
                let ste = Ste::LearnedClip { width };
                let y = self.value(x).map(sign);
                Ok(self.custom(
                    y,
                    &[x, clip],
                    Box::new(move |a| {
                        let x = a.inputs[0];
                        let gx = x.zip_map(a.grad, |x, g| ste.backward_one(x, g)).unwrap();
                        let gc: f64 = x
                            .data()
                            .iter()
                            .zip(a.grad.data())
                            .filter(|(x, _)| x.abs() > width)
                            .map(|(x, g)| g * sign(*x))
                            .sum();
                        vec![
                            Some(gx),
                            Some(Tensor::new(a.inputs[1].shape().to_vec(), vec![gc]).unwrap()),
                        ]
                    }),
                ))
            }
            (Ste::LearnedClip { .. }, None) => Err(Error::Config(
                "LC_A binarizer needs its clip parameter".into(),
            )),
            (_, Some(_)) => Err(Error::Config("only LC_A takes a clip parameter".into())),
            (ste, None) => Ok(self.custom(
                y,
                &[x],
                Box::new(move |a| {
                    vec![Some(
                        a.inputs[0]
                            .zip_map(a.grad, |x, g| ste.backward_one(x, g))
                            .unwrap(),
                    )]
                }),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn sign_boundaries() {
        assert_eq!(sign_forward(&t(&[0.3, -0.2])).data(), &[1.0, -1.0]);
        assert_eq!(sign_forward(&t(&[0.0])).data(), &[1.0]);
        assert_eq!(sign_forward(&t(&[-0.0])).data(), &[1.0]);
        assert_eq!(sign_forward(&t(&[-3.0, -1e-300])).data(), &[-1.0, -1.0]);
    }

    #[test]
    fn lc_clip_support() {
        let spec = BinarizerSpec::lc(1.0);
        let g = ste_backward(&spec, &t(&[0.5, 1.5, 1.0, -1.0]), &t(&[1.0; 4]), None).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn ewgs_zero_error_is_passthrough() {
        let spec = BinarizerSpec::new(BinarizerKind::Ewgs);
        let g = ste_backward(&spec, &t(&[1.0, -1.0]), &t(&[0.7, -2.5]), None).unwrap();
        assert_eq!(g.data(), &[0.7, -2.5]);
    }

    #[test]
    fn ewgs_scales_with_error() {
        let spec = BinarizerSpec {
            delta: 0.5,
            ..BinarizerSpec::new(BinarizerKind::Ewgs)
        };
        // x_r = 0.5, x_b = 1, g = 2 -> 2 * (1 + 0.5 * 1 * -0.5) = 1.5
        let g = ste_backward(&spec, &t(&[0.5]), &t(&[2.0]), None).unwrap();
        assert!((g.data()[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn pn_peak() {
        let g = ste_backward(
            &BinarizerSpec::new(BinarizerKind::Pn),
            &t(&[0.0, 1.0, -1.0]),
            &t(&[1.0; 3]),
            None,
        )
        .unwrap();
        assert_eq!(g.data(), &[2.0, 0.0, 0.0]);
    }

    #[test]
    fn schedule_values() {
        let p0 = TrainingProgress::new(0.0).unwrap();
        let p1 = TrainingProgress::new(1.0).unwrap();
        assert_eq!(schedule_lambda(BinarizerKind::Ede, p0).unwrap(), 1e-3);
        assert_eq!(schedule_lambda(BinarizerKind::Ede, p1).unwrap(), 10.0);
        assert_eq!(schedule_lambda(BinarizerKind::Gpn, p0).unwrap(), 1e-2);
        assert_eq!(schedule_lambda(BinarizerKind::Gpn, p1).unwrap(), 10.0);
        let half = TrainingProgress::new(0.5).unwrap();
        assert!(
            (schedule_lambda(BinarizerKind::Gpn, half).unwrap() - 0.31622776601683794).abs()
                < 1e-12
        );
        assert_eq!(
            schedule_lambda(BinarizerKind::T, half).unwrap(),
            schedule_lambda(BinarizerKind::Ede, half).unwrap()
        );
        assert!(TrainingProgress::new(1.01).is_err());
        assert!(TrainingProgress::new(-0.1).is_err());
        assert!(schedule_lambda(BinarizerKind::Pn, p0).is_err());
    }

    #[test]
    fn scheduled_kinds_need_progress() {
        for kind in [BinarizerKind::T, BinarizerKind::Ede, BinarizerKind::Gpn] {
            let err =
                ste_backward(&BinarizerSpec::new(kind), &t(&[0.1]), &t(&[1.0]), None).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
        }
    }

    #[test]
    fn gpn_k_reading() {
        let p = TrainingProgress::new(1.0).unwrap();
        let literal = Ste::resolve(&BinarizerSpec::new(BinarizerKind::Gpn), Some(p), None).unwrap();
        assert_eq!(
            literal,
            Ste::GradualPoly {
                lambda: 10.0,
                k: 0.1
            }
        );
        let clamped = BinarizerSpec {
            gpn_k_clamp_at_one: true,
            ..BinarizerSpec::new(BinarizerKind::Gpn)
        };
        assert_eq!(
            Ste::resolve(&clamped, Some(p), None).unwrap(),
            Ste::GradualPoly {
                lambda: 10.0,
                k: 1.0
            }
        );
    }

    #[test]
    fn config_names_round_trip() {
        for name in [
            "LC_1", "LC_1.3", "LC_2", "LC_3", "LC_A", "PN", "GPN", "T", "EDE", "SS", "EWGS",
        ] {
            let spec: BinarizerSpec = name.parse().unwrap();
            assert_eq!(spec.to_string(), name);
        }
        assert!("LC_0".parse::<BinarizerSpec>().is_err());
        assert!("XNOR".parse::<BinarizerSpec>().is_err());
    }

    #[test]
    fn learned_clip_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[0.5, 2.0, -3.0]));
        let clip = tape.leaf(t(&[1.0]));
        let y = tape
            .binarize(x, Ste::LearnedClip { width: 1.0 }, Some(clip))
            .unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, -1.0]);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
        // sign(2) + sign(-3) over the out-of-clip elements
        assert_eq!(tape.grad(clip).unwrap().data(), &[0.0]);
        assert!(tape
            .binarize(x, Ste::LearnedClip { width: 1.0 }, None)
            .is_err());
    }
}
