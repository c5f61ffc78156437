//! Binary convolutions with batch norm folded into integer thresholds, and
//! the packed feature maps they consume.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bits::{pack_into, words_for, xor_popcount_columns_kernel, WORD_BITS};
use crate::error::{Error, Result};
use crate::normalize::BatchNormParams;
use crate::tensor::Tensor;

/// Per-channel sign of a real input: `+1` iff `x >= tau`, or iff
/// `x <= tau` when `negate` is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSign {
    pub tau: f64,
    pub negate: bool,
}

impl ChannelSign {
    pub const PLAIN: Self = Self {
        tau: 0.0,
        negate: false,
    };

    /// Sign of `a x + c`, with ties going to `+1`.
    pub fn from_affine(a: f64, c: f64) -> Self {
        if a > 0.0 {
            Self {
                tau: -c / a,
                negate: false,
            }
        } else if a < 0.0 {
            Self {
                tau: -c / a,
                negate: true,
            }
        } else {
            // constant channel
            let tau = if c >= 0.0 {
                f64::NEG_INFINITY
            } else {
                f64::INFINITY
            };
            Self { tau, negate: false }
        }
    }

    pub fn bit(&self, x: f64) -> bool {
        if self.negate {
            x <= self.tau
        } else {
            x >= self.tau
        }
    }
}

/// What a fused layer emits per output channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerOutput {
    /// `+1` iff the (flipped) dot product is at least `tau`.
    Threshold { tau: Vec<f64> },
    /// `scale * dot + shift`, real valued.
    Affine { scale: Vec<f64>, shift: Vec<f64> },
}

/// A packed binary convolution with its batch norm folded in.
///
/// Weight row `o` holds the kernel positions in row-major order, each as
/// `words_for(in_channels)` words with input channel `c` at bit `c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Binarizer for real inputs; `None` when the input arrives packed.
    pub input: Option<Vec<ChannelSign>>,
    pub output: LayerOutput,
    /// Output channels whose weights were negated during folding.
    pub flip: Vec<bool>,
    pub weights: Vec<u64>,
    /// Valid bits per weight row.
    pub valid: Vec<u32>,
}

/// Packs `w[O, C, K, K]` (`{-1, +1}`) into rows, negating the rows in `flip`.
fn pack_weight_rows(w: &Tensor, flip: &[bool]) -> Result<(Vec<u64>, usize)> {
    let (o, c, kh, kw) = w.dims4()?;
    if kh != kw {
        return Err(Error::Shape(format!("square kernels only, got {kh}x{kw}")));
    }
    let seg = words_for(c);
    let row_words = kh * kw * seg;
    let mut words = vec![0u64; o * row_words];
    let mut column = vec![0.0; c];
    for oc in 0..o {
        let sgn = if flip[oc] { -1.0 } else { 1.0 };
        for pos in 0..kh * kw {
            for (ci, v) in column.iter_mut().enumerate() {
                *v = sgn * w.data()[(oc * c + ci) * kh * kw + pos];
            }
            let start = oc * row_words + pos * seg;
            pack_into(&column, &mut words[start..start + seg]).map_err(|e| match e {
                Error::NotBinary { index, value } => Error::NotBinary {
                    index: (oc * c + index) * kh * kw + pos,
                    value,
                },
                other => other,
            })?;
        }
    }
    Ok((words, row_words))
}

fn check_affine(scale: &[f64], shift: &[f64], out: usize) -> Result<()> {
    if scale.len() != out || shift.len() != out {
        return Err(Error::Shape(format!(
            "{out} output channels, {} scales, {} shifts",
            scale.len(),
            shift.len()
        )));
    }
    if let Some(i) = scale.iter().chain(shift).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "fold coefficient {i} is not finite"
        )));
    }
    Ok(())
}

impl FusedLayer {
    fn build(
        w: &Tensor,
        stride: usize,
        padding: usize,
        output: LayerOutput,
        flip: Vec<bool>,
    ) -> Result<Self> {
        let (o, c, k, _) = w.dims4()?;
        let (weights, _) = pack_weight_rows(w, &flip)?;
        Ok(Self {
            in_channels: c,
            out_channels: o,
            kernel: k,
            stride,
            padding,
            input: None,
            output,
            flip,
            weights,
            valid: vec![(c * k * k) as u32; o],
        })
    }

    /// Folds `sign(scale * conv(x, w) + shift)` into thresholds on the
    /// integer dot product. Channels with a negative scale get their
    /// weights flipped; a zero scale makes the channel constant.
    pub fn threshold(
        w: &Tensor,
        scale: &[f64],
        shift: &[f64],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (o, c, k, _) = w.dims4()?;
        check_affine(scale, shift, o)?;
        let n = (c * k * k) as f64;
        let mut tau = Vec::with_capacity(o);
        let mut flip = Vec::with_capacity(o);
        for (ch, (&a, &b)) in scale.iter().zip(shift).enumerate() {
            if a == 0.0 {
                log::warn!(
                    "output channel {ch} has zero scale; folded to a constant {}",
                    if b >= 0.0 { "+1" } else { "-1" }
                );
                // outside [-n, n], so the comparison never changes
                tau.push(if b >= 0.0 { -n - 1.0 } else { n + 1.0 });
                flip.push(false);
            } else {
                tau.push(-b / a.abs());
                flip.push(a < 0.0);
            }
        }
        Self::build(w, stride, padding, LayerOutput::Threshold { tau }, flip)
    }

    /// Keeps the layer output real as `scale * conv(x, w) + shift`.
    pub fn affine(
        w: &Tensor,
        scale: Vec<f64>,
        shift: Vec<f64>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (o, ..) = w.dims4()?;
        check_affine(&scale, &shift, o)?;
        Self::build(
            w,
            stride,
            padding,
            LayerOutput::Affine { scale, shift },
            vec![false; o],
        )
    }

    pub fn with_input(mut self, input: Vec<ChannelSign>) -> Result<Self> {
        if input.len() != self.in_channels {
            return Err(Error::Shape(format!(
                "{} input signs for {} channels",
                input.len(),
                self.in_channels
            )));
        }
        self.input = Some(input);
        Ok(self)
    }

    pub fn row_words(&self) -> usize {
        self.kernel * self.kernel * words_for(self.in_channels)
    }

    pub fn out_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = |n: usize| {
            let padded = n + 2 * self.padding;
            (self.stride > 0 && padded >= self.kernel)
                .then(|| (padded - self.kernel) / self.stride + 1)
        };
        match (f(h), f(w)) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::Shape(format!(
                "kernel {} does not fit input {h}x{w}",
                self.kernel
            ))),
        }
    }

    /// Calls `emit(diffs, pixel, dst)` for every output pixel of every
    /// image, where `diffs[o]` counts the bits on which the pixel's patch
    /// and weight row `o` differ and `dst` is the image's `per_image`
    /// slice of the result. Out-of-range cells read as `-1`.
    fn scan<T, F>(&self, x: &PackedFeatureMap, per_image: usize, emit: F) -> Result<Vec<T>>
    where
        T: Copy + Default + Send,
        F: Fn(&[u32], usize, &mut [T]) + Sync,
    {
        if x.c != self.in_channels {
            return Err(Error::Shape(format!(
                "layer takes {} channels, input has {}",
                self.in_channels, x.c
            )));
        }
        let (ho, wo) = self.out_extent(x.h, x.w)?;
        let seg = x.words_per_pixel;
        let row = self.row_words();
        let k = self.kernel;
        let kernel = xor_popcount_columns_kernel();
        let o = self.out_channels;
        let mut columns = vec![0u64; self.weights.len()];
        for (r, words) in self.weights.chunks_exact(row).enumerate() {
            for (j, &w) in words.iter().enumerate() {
                columns[j * o + r] = w;
            }
        }
        let mut out = vec![T::default(); x.n * per_image];
        out.par_chunks_mut(per_image.max(1))
            .enumerate()
            .for_each(|(b, dst)| {
                let mut patch = vec![0u64; row];
                let mut diffs = vec![0u32; self.out_channels];
                for oy in 0..ho {
                    for ox in 0..wo {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                let cell = &mut patch[(ky * k + kx) * seg..][..seg];
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    cell.fill(0);
                                } else {
                                    cell.copy_from_slice(x.pixel(b, iy as usize, ix as usize));
                                }
                            }
                        }
                        kernel(&patch, &columns, &mut diffs);
                        emit(&diffs, oy * wo + ox, dst);
                    }
                }
            });
        Ok(out)
    }

    /// Integer dot products `[N, O, Ho, Wo]` against the stored (flipped)
    /// weights, with out-of-range cells read as `-1`.
    pub fn dots(&self, x: &PackedFeatureMap) -> Result<(Vec<i64>, usize, usize)> {
        let (ho, wo) = self.out_extent(x.h, x.w)?;
        let plane = ho * wo;
        let out = self.scan(x, self.out_channels * plane, |diffs, p, dst: &mut [i64]| {
            for (o, &diff) in diffs.iter().enumerate() {
                dst[o * plane + p] = self.valid[o] as i64 - 2 * diff as i64;
            }
        })?;
        Ok((out, ho, wo))
    }

    /// Binarizes a real input with the layer's input signs, or by plain
    /// sign when it has none.
    pub fn pack_input(&self, x: &Tensor) -> Result<PackedFeatureMap> {
        match &self.input {
            Some(signs) => PackedFeatureMap::binarize(x, signs),
            None => PackedFeatureMap::binarize(x, &vec![ChannelSign::PLAIN; self.in_channels]),
        }
    }

    /// Runs a threshold layer and returns its packed output.
    pub fn forward_bits(&self, x: &PackedFeatureMap) -> Result<PackedFeatureMap> {
        let LayerOutput::Threshold { tau } = &self.output else {
            return Err(Error::Contract("layer emits real values, not bits".into()));
        };
        // dot = valid - 2 diff is an integer, so `dot >= tau` becomes
        // `diff <= (valid - ceil(tau)) / 2`
        let max_diff: Vec<i64> = tau
            .iter()
            .zip(&self.valid)
            .map(|(&t, &v)| {
                let v = v as i64;
                let t = t.ceil().clamp(-(v + 2) as f64, (v + 2) as f64) as i64;
                (v - t).div_euclid(2)
            })
            .collect();
        let (ho, wo) = self.out_extent(x.h, x.w)?;
        let mut y = PackedFeatureMap::new(x.n, self.out_channels, ho, wo);
        let wpp = y.words_per_pixel;
        y.bits = self.scan(x, ho * wo * wpp, |diffs, p, dst: &mut [u64]| {
            let words = &mut dst[p * wpp..(p + 1) * wpp];
            // branch-free: the comparison is a coin flip on typical data
            for (o, (&diff, &m)) in diffs.iter().zip(&max_diff).enumerate() {
                words[o / WORD_BITS] |= u64::from(diff as i64 <= m) << (o % WORD_BITS);
            }
        })?;
        Ok(y)
    }

    /// Runs an affine layer and returns `[N, O, Ho, Wo]` reals.
    pub fn forward_real(&self, x: &PackedFeatureMap) -> Result<Tensor> {
        let LayerOutput::Affine { scale, shift } = &self.output else {
            return Err(Error::Contract("layer emits bits, not real values".into()));
        };
        let (d, ho, wo) = self.dots(x)?;
        let plane = ho * wo;
        let data = d
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let o = (i / plane) % self.out_channels;
                scale[o] * v as f64 + shift[o]
            })
            .collect();
        Tensor::new(vec![x.n, self.out_channels, ho, wo], data)
    }
}

/// Folds eval-mode batch norm after a binary convolution with weights `w`
/// into a threshold layer whose output is `sign(BN(conv(x, w)))`.
pub fn fuse_bn_sign(
    bn: &BatchNormParams,
    w: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<FusedLayer> {
    let (scale, shift) = bn.affine();
    FusedLayer::threshold(w, &scale, &shift, stride, padding)
}

/// Runs a threshold layer on packed input.
pub fn packed_conv_forward(layer: &FusedLayer, x: &PackedFeatureMap) -> Result<PackedFeatureMap> {
    layer.forward_bits(x)
}

/// A `{-1, +1}` feature map `[N, C, H, W]` stored pixel by pixel, each
/// pixel's channels packed into `words_per_pixel` words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedFeatureMap {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub words_per_pixel: usize,
    bits: Vec<u64>,
}

impl PackedFeatureMap {
    /// All `-1`.
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        let words_per_pixel = words_for(c);
        Self {
            n,
            c,
            h,
            w,
            words_per_pixel,
            bits: vec![0; n * h * w * words_per_pixel],
        }
    }

    fn offset(&self, b: usize, y: usize, x: usize) -> usize {
        ((b * self.h + y) * self.w + x) * self.words_per_pixel
    }

    pub fn pixel(&self, b: usize, y: usize, x: usize) -> &[u64] {
        let o = self.offset(b, y, x);
        &self.bits[o..o + self.words_per_pixel]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize) {
        let o = self.offset(b, y, x);
        self.bits[o + c / WORD_BITS] |= 1 << (c % WORD_BITS);
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> bool {
        self.pixel(b, y, x)[c / WORD_BITS] >> (c % WORD_BITS) & 1 == 1
    }

    /// Packs `x` plane by plane with `bit(channel, value)`.
    fn pack_planes(x: &Tensor, mut bit: impl FnMut(usize, f64) -> bool) -> Result<Self> {
        let (n, c, h, w) = x.dims4()?;
        let mut out = Self::new(n, c, h, w);
        let (hw, wpp) = (h * w, out.words_per_pixel);
        for (i, plane) in x.data().chunks_exact(hw.max(1)).enumerate() {
            let (b, ch) = (i / c, i % c);
            let (word, shift) = (ch / WORD_BITS, ch % WORD_BITS);
            let base = b * hw * wpp + word;
            for (p, &v) in plane.iter().enumerate() {
                out.bits[base + p * wpp] |= u64::from(bit(ch, v)) << shift;
            }
        }
        Ok(out)
    }

    /// Packs a tensor that already holds only `-1` and `+1`.
    pub fn from_signs(x: &Tensor) -> Result<Self> {
        if let Some(index) = x.data().iter().position(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::NotBinary {
                index,
                value: x.data()[index],
            });
        }
        Self::pack_planes(x, |_, v| v == 1.0)
    }

    /// Binarizes a real tensor channel by channel.
    pub fn binarize(x: &Tensor, signs: &[ChannelSign]) -> Result<Self> {
        let (_, c, _, _) = x.dims4()?;
        if signs.len() != c {
            return Err(Error::Shape(format!(
                "{} channel signs for {c} channels",
                signs.len()
            )));
        }
        Self::pack_planes(x, |ch, v| signs[ch].bit(v))
    }

    pub fn to_tensor(&self) -> Tensor {
        let (n, c, h, w) = (self.n, self.c, self.h, self.w);
        let data = (0..n * c * h * w)
            .map(|i| {
                let (b, ch, y, x) = (i / (c * h * w), (i / (h * w)) % c, (i / w) % h, i % w);
                if self.get(b, ch, y, x) {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        Tensor::new(vec![n, c, h, w], data).expect("shape matches")
    }
}
