//! A trained model lowered to packed binary layers between real-valued
//! stem, shortcuts and classifier.

use serde::{Deserialize, Serialize};

use super::layer::{ChannelSign, FusedLayer};
use crate::autograd::{conv2d_real, max_pool2d, ConvGeometry};
use crate::binarize::BinarizerKind;
use crate::block::{BinaryConv, BlockConfig, ResidualMode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::normalize::FeatureNorm;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::argmax_rows;

/// Real convolution followed by a per-channel affine map (folded batch norm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealConv {
    pub weight: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl RealConv {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = conv2d_real(
            x,
            &self.weight,
            &ConvGeometry::new(self.stride, self.padding, 0.0),
        )?;
        apply_affine(&mut y, &self.scale, &self.shift);
        Ok(y)
    }
}

fn apply_affine(y: &mut Tensor, scale: &[f64], shift: &[f64]) {
    let c = scale.len();
    let plane = y.shape()[2..].iter().product::<usize>();
    for (i, p) in y.data_mut().chunks_mut(plane).enumerate() {
        let (a, b) = (scale[i % c], shift[i % c]);
        p.iter_mut().for_each(|v| *v = a * *v + b);
    }
}

/// Single residual: `conv1` emits bits straight into `conv2`. Double
/// residual: both layers emit reals and each adds its own shortcut.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackedBlock {
    pub residual: ResidualMode,
    pub conv1: FusedLayer,
    pub conv2: FusedLayer,
    pub shortcut: Option<RealConv>,
}

impl PackedBlock {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        let xb = self.conv1.pack_input(x)?;
        match self.residual {
            ResidualMode::Single => {
                let h = self.conv1.forward_bits(&xb)?;
                let mut y = self.conv2.forward_real(&h)?;
                y.add_assign(&skip)?;
                Ok(y)
            }
            ResidualMode::Double => {
                let mut h = self.conv1.forward_real(&xb)?;
                h.add_assign(&skip)?;
                let mut y = self.conv2.forward_real(&self.conv2.pack_input(&h)?)?;
                y.add_assign(&h)?;
                Ok(y)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackedModel {
    /// `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub stem: RealConv,
    pub max_pool: bool,
    pub blocks: Vec<PackedBlock>,
    /// `[classes, features]`.
    pub classifier_weight: Tensor,
    pub classifier_bias: Vec<f64>,
}

impl PackedModel {
    /// Logits `[N, classes]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if [c, h, w] != self.input_shape {
            return Err(Error::Shape(format!(
                "model expects inputs of shape {:?}, got {:?}",
                self.input_shape,
                &x.shape()[1..]
            )));
        }
        let mut h = self.stem.forward(x)?;
        if self.max_pool {
            h = max_pool2d(&h, 3, 2, 1)?;
        }
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        let (_, c, hh, ww) = h.dims4()?;
        let hw = hh * ww;
        let pooled: Vec<f64> = h
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let k = self.classifier_bias.len();
        let wt = self.classifier_weight.data();
        let mut logits = Vec::with_capacity(n * k);
        for row in pooled.chunks(c) {
            for j in 0..k {
                logits.push(
                    row.iter()
                        .zip(&wt[j * c..(j + 1) * c])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        + self.classifier_bias[j],
                );
            }
        }
        Tensor::new(vec![n, k], logits)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(x)?))
    }
}

fn layer_name(params: &ParamStore, unit: &BinaryConv) -> String {
    let name = &params.get(unit.weight).name;
    name.strip_suffix(".weight").unwrap_or(name).to_string()
}

/// Per-channel `(a, c)` with the eval-mode feature normalizer equal to
/// `a x + c` up to a positive per-channel factor, which the sign ignores.
fn feature_affine(
    norm: &FeatureNorm,
    params: &ParamStore,
    channels: usize,
) -> (Vec<f64>, Vec<f64>) {
    match norm {
        FeatureNorm::None | FeatureNorm::Std => (vec![1.0; channels], vec![0.0; channels]),
        FeatureNorm::Lb { bias } => (vec![1.0; channels], params.value(*bias).data().to_vec()),
        FeatureNorm::Bn(bn) => bn.params(params).affine(),
    }
}

fn input_signs(unit: &BinaryConv, params: &ParamStore) -> Vec<ChannelSign> {
    let (a, c) = feature_affine(&unit.feature_norm, params, unit.in_channels);
    a.iter()
        .zip(&c)
        .map(|(&a, &c)| ChannelSign::from_affine(a, c))
        .collect()
}

/// `(scale, shift)` with the unit's eval output before the residual equal
/// to `scale * dot + shift`.
fn unit_affine(
    cfg: &BlockConfig,
    unit: &BinaryConv,
    params: &ParamStore,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mut scale, shift) = unit.bn.params(params).affine();
    if let Some(alpha) = unit.alpha(cfg, params)? {
        scale.iter_mut().zip(&alpha).for_each(|(s, a)| *s *= a);
    }
    Ok((scale, shift))
}

fn check_exportable(cfg: &BlockConfig, layer: &str) -> Result<()> {
    let reject = |reason: String| {
        Err(Error::Export {
            layer: layer.to_string(),
            reason,
        })
    };
    if cfg.feature_binarizer.kind == BinarizerKind::Identity {
        return reject("features are not binarized".into());
    }
    if cfg.weight_binarizer.kind == BinarizerKind::Identity {
        return reject("weights are not binarized".into());
    }
    if !cfg.activation.is_identity() {
        return reject(format!(
            "activation {} cannot be folded into a threshold",
            cfg.activation
        ));
    }
    Ok(())
}

/// Lowers an eval-mode model to its packed form.
pub fn export_model(model: &Model) -> Result<PackedModel> {
    let params = &model.params;
    let real_conv = |weight, bn: &crate::normalize::BatchNorm, g: ConvGeometry| {
        let (scale, shift) = bn.params(params).affine();
        RealConv {
            weight: params.value(weight).clone(),
            stride: g.stride,
            padding: g.padding,
            scale,
            shift,
        }
    };
    let stem = real_conv(model.stem.weight, &model.stem.bn, model.stem.geometry);
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        let cfg = &block.cfg;
        let (u1, u2) = (&block.conv1, &block.conv2);
        check_exportable(cfg, &layer_name(params, u1))?;
        let w1 = u1.binary_weights(cfg, params)?;
        let w2 = u2.binary_weights(cfg, params)?;
        let (s1, t1) = unit_affine(cfg, u1, params)?;
        let (s2, t2) = unit_affine(cfg, u2, params)?;
        let g1 = u1.geometry();
        let g2 = u2.geometry();
        let (conv1, conv2) = match cfg.residual {
            ResidualMode::Single => {
                // conv1 feeds only conv2, so conv2's feature normalizer and
                // sign fold into conv1's thresholds
                let (a, c) = feature_affine(&u2.feature_norm, params, u2.in_channels);
                let scale: Vec<f64> = s1.iter().zip(&a).map(|(s, a)| s * a).collect();
                let shift: Vec<f64> = t1
                    .iter()
                    .zip(&a)
                    .zip(&c)
                    .map(|((t, a), c)| t * a + c)
                    .collect();
                let conv1 = FusedLayer::threshold(&w1, &scale, &shift, g1.stride, g1.padding)?;
                let conv2 = FusedLayer::affine(&w2, s2, t2, g2.stride, g2.padding)?;
                (conv1, conv2)
            }
            ResidualMode::Double => {
                let conv1 = FusedLayer::affine(&w1, s1, t1, g1.stride, g1.padding)?;
                let conv2 = FusedLayer::affine(&w2, s2, t2, g2.stride, g2.padding)?
                    .with_input(input_signs(u2, params))?;
                (conv1, conv2)
            }
        };
        let shortcut = block
            .shortcut
            .as_ref()
            .map(|s| real_conv(s.weight, &s.bn, s.geometry()));
        blocks.push(PackedBlock {
            residual: cfg.residual,
            conv1: conv1.with_input(input_signs(u1, params))?,
            conv2,
            shortcut,
        });
    }
    Ok(PackedModel {
        input_shape: model.cfg.input_shape,
        stem,
        max_pool: model.stem.max_pool,
        blocks,
        classifier_weight: params.value(model.classifier.weight).clone(),
        classifier_bias: params.value(model.classifier.bias).data().to_vec(),
    })
}

/// Agreement between a model's eval-mode logits and its packed form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub samples: usize,
    pub top1_agree: usize,
    pub max_logit_diff: f64,
}

impl VerifyReport {
    pub fn agreement(&self) -> f64 {
        self.top1_agree as f64 / self.samples as f64
    }
}

/// Runs `x` through both `model` (eval mode) and `packed`.
pub fn verify(model: &mut Model, packed: &PackedModel, x: &Tensor) -> Result<VerifyReport> {
    let float = model.predict(x)?;
    let fast = packed.forward(x)?;
    let agree = argmax_rows(&float)
        .iter()
        .zip(argmax_rows(&fast))
        .filter(|(a, b)| **a == *b)
        .count();
    Ok(VerifyReport {
        samples: float.shape()[0],
        top1_agree: agree,
        max_logit_diff: float.max_abs_diff(&fast),
    })
}
