//! Training-time augmentation: random crop, horizontal flip, normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub flip: bool,
    /// Zero padding before a random crop back to the input size; 0 disables.
    pub crop_pad: usize,
    /// Per-channel `(mean, std)` subtracted and divided after cropping.
    pub normalize: Option<(Vec<f64>, Vec<f64>)>,
}

impl Augment {
    pub fn none() -> Self {
        Self::default()
    }

    /// Normalization only, as applied at evaluation time.
    pub fn eval(&self, batch: &Tensor) -> Result<Tensor> {
        let mut out = batch.clone();
        self.normalize_in_place(&mut out)?;
        Ok(out)
    }

    /// Crops, flips and normalizes every image independently.
    pub fn apply<R: Rng + ?Sized>(&self, batch: &Tensor, rng: &mut R) -> Result<Tensor> {
        let (n, c, h, w) = batch.dims4()?;
        let mut out = batch.clone();
        if self.crop_pad > 0 || self.flip {
            let per = c * h * w;
            for img in out.data_mut().chunks_mut(per) {
                if self.crop_pad > 0 {
                    let dy = rng.random_range(0..=2 * self.crop_pad);
                    let dx = rng.random_range(0..=2 * self.crop_pad);
                    crop_shift(img, c, h, w, self.crop_pad, dy, dx);
                }
                if self.flip && rng.random_bool(0.5) {
                    hflip(img, c, h, w);
                }
            }
            debug_assert_eq!(out.len(), n * per);
        }
        self.normalize_in_place(&mut out)?;
        Ok(out)
    }

    fn normalize_in_place(&self, t: &mut Tensor) -> Result<()> {
        let Some((mean, std)) = &self.normalize else {
            return Ok(());
        };
        let (_, c, h, w) = t.dims4()?;
        if mean.len() != c || std.len() != c {
            return Err(Error::Shape(format!(
                "normalization statistics for {} channels, images have {c}",
                mean.len()
            )));
        }
        for (i, plane) in t.data_mut().chunks_mut(h * w).enumerate() {
            let ch = i % c;
            let s = std[ch].max(1e-12);
            plane.iter_mut().for_each(|v| *v = (*v - mean[ch]) / s);
        }
        Ok(())
    }
}

/// Mirrors every row of one `[C, H, W]` image.
pub fn hflip(img: &mut [f64], c: usize, h: usize, w: usize) {
    for row in img[..c * h * w].chunks_mut(w) {
        row.reverse();
    }
}

/// Crops the `h x w` window at `(dy, dx)` out of the image zero-padded by
/// `pad` on every side, in place.
pub fn crop_shift(img: &mut [f64], c: usize, h: usize, w: usize, pad: usize, dy: usize, dx: usize) {
    let src = img[..c * h * w].to_vec();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = (y + dy) as isize - pad as isize;
                let sx = (x + dx) as isize - pad as isize;
                img[(ch * h + y) * w + x] =
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        src[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn off_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[3, 2, 5, 5], 1.0, &mut rng);
        assert_eq!(Augment::none().apply(&x, &mut rng).unwrap(), x);
    }

    #[test]
    fn flip_is_an_involution() {
        let mut img: Vec<f64> = (0..12).map(f64::from).collect();
        let orig = img.clone();
        hflip(&mut img, 1, 3, 4);
        assert_eq!(&img[..4], &[3.0, 2.0, 1.0, 0.0]);
        hflip(&mut img, 1, 3, 4);
        assert_eq!(img, orig);
    }

    #[test]
    fn crop_keeps_shape_and_centre_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[4, 3, 8, 8], 1.0, &mut rng);
        let aug = Augment {
            flip: true,
            crop_pad: 4,
            normalize: None,
        };
        assert_eq!(aug.apply(&x, &mut rng).unwrap().shape(), x.shape());
        let mut img = x.data()[..192].to_vec();
        crop_shift(&mut img, 3, 8, 8, 4, 4, 4);
        assert_eq!(img, &x.data()[..192]);
        crop_shift(&mut img, 3, 8, 8, 4, 5, 4);
        assert_eq!(img[8 * 7], 0.0);
        assert_eq!(img[0], x.data()[8]);
    }
}
