//! Elementwise, per-channel, pooling and loss operations.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{channel_stats, Tensor};

/// Iterates `(channel, plane)` over an `[N, C, ...]` buffer.
pub(crate) fn planes(
    data: &[f64],
    c: usize,
    spatial: usize,
) -> impl Iterator<Item = (usize, &[f64])> {
    data.chunks(spatial)
        .enumerate()
        .map(move |(i, p)| (i % c, p))
}

pub(crate) fn planes_mut(
    data: &mut [f64],
    c: usize,
    spatial: usize,
) -> impl Iterator<Item = (usize, &mut [f64])> {
    data.chunks_mut(spatial)
        .enumerate()
        .map(move |(i, p)| (i % c, p))
}

pub(crate) fn channel_layout(x: &Tensor, params: usize) -> Result<(usize, usize)> {
    if x.shape().len() < 2 {
        return Err(Error::Shape(format!(
            "per-channel op needs [N, C, ...], got {:?}",
            x.shape()
        )));
    }
    let c = x.shape()[1];
    if c != params {
        return Err(Error::Shape(format!(
            "{} per-channel parameters for {c} channels",
            params
        )));
    }
    Ok((c, x.shape()[2..].iter().product()))
}

/// Per-channel sums over an `[N, C, ...]` buffer.
pub(crate) fn channel_sums(data: &[f64], c: usize, spatial: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    for (ch, p) in planes(data, c, spatial) {
        s[ch] += p.iter().sum::<f64>();
    }
    s
}

/// Which statistics a batch-norm evaluation uses.
pub enum BnStats<'a> {
    /// Batch statistics, differentiated through.
    Batch,
    /// Stored running statistics, treated as constants.
    Running { mean: &'a [f64], var: &'a [f64] },
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.record(
            y,
            &[a, b],
            Box::new(|a| vec![Some(a.grad.clone()), Some(a.grad.clone())]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.record(
            y,
            &[a, b],
            Box::new(|a| {
                vec![
                    Some(a.grad.zip_map(a.inputs[1], |g, v| g * v).unwrap()),
                    Some(a.grad.zip_map(a.inputs[0], |g, v| g * v).unwrap()),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let y = self.value(x).scale(k);
        self.record(y, &[x], Box::new(move |a| vec![Some(a.grad.scale(k))]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.record(
            y,
            &[x],
            Box::new(|a| vec![Some(Tensor::full(a.inputs[0].shape(), a.grad.item()))]),
        )
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).data().iter().map(|v| v * v).sum());
        self.record(
            y,
            &[x],
            Box::new(|a| {
                let g = a.grad.item();
                vec![Some(a.inputs[0].map(|v| 2.0 * v * g))]
            }),
        )
    }

    /// `x[n, c, ...] * s[c]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let (c, spatial) = channel_layout(self.value(x), self.value(s).len())?;
        let mut y = self.value(x).clone();
        let sv = self.value(s).data().to_vec();
        for (ch, p) in planes_mut(y.data_mut(), c, spatial) {
            p.iter_mut().for_each(|v| *v *= sv[ch]);
        }
        Ok(self.record(
            y,
            &[x, s],
            Box::new(move |a| {
                let sv = a.inputs[1].data();
                let gx = a.needs[0].then(|| {
                    let mut gx = a.grad.clone();
                    for (ch, p) in planes_mut(gx.data_mut(), c, spatial) {
                        p.iter_mut().for_each(|v| *v *= sv[ch]);
                    }
                    gx
                });
                let gs = a.needs[1].then(|| {
                    let mut gs = vec![0.0; c];
                    for ((ch, gp), (_, xp)) in planes(a.grad.data(), c, spatial).zip(planes(
                        a.inputs[0].data(),
                        c,
                        spatial,
                    )) {
                        gs[ch] += gp.iter().zip(xp).map(|(g, x)| g * x).sum::<f64>();
                    }
                    Tensor::new(a.inputs[1].shape().to_vec(), gs).unwrap()
                });
                vec![gx, gs]
            }),
        ))
    }

    /// `x[n, c, ...] + b[c]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, spatial) = channel_layout(self.value(x), self.value(b).len())?;
        let mut y = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for (ch, p) in planes_mut(y.data_mut(), c, spatial) {
            p.iter_mut().for_each(|v| *v += bv[ch]);
        }
        Ok(self.record(
            y,
            &[x, b],
            Box::new(move |a| {
                let gb = a.needs[1].then(|| {
                    Tensor::new(
                        a.inputs[1].shape().to_vec(),
                        channel_sums(a.grad.data(), c, spatial),
                    )
                    .unwrap()
                });
                vec![Some(a.grad.clone()), gb]
            }),
        ))
    }

    /// `gamma * (x - mu) / sqrt(var + eps) + beta` per channel. With
    /// [`BnStats::Batch`] the batch mean and population variance are used and
    /// returned so the caller can update running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let xv = self.value(x);
        let (c, spatial) = channel_layout(xv, self.value(gamma).len())?;
        channel_layout(xv, self.value(beta).len())?;
        let (mean, var, batch) = match stats {
            BnStats::Batch => {
                let (m, v) = channel_stats(xv);
                (m, v, true)
            }
            BnStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape(
                        "running statistics do not match channel count".into(),
                    ));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut xhat = xv.clone();
        for (ch, p) in planes_mut(xhat.data_mut(), c, spatial) {
            p.iter_mut()
                .for_each(|v| *v = (*v - mean[ch]) * inv_std[ch]);
        }
        let mut y = xhat.clone();
        for (ch, p) in planes_mut(y.data_mut(), c, spatial) {
            p.iter_mut().for_each(|v| *v = gv[ch] * *v + bv[ch]);
        }
        let m = (xv.len() / c) as f64;
        let var_out = Tensor::new(vec![c], inv_std.clone())?;
        let node = self.record(
            y,
            &[x, gamma, beta],
            Box::new(move |a| {
                let g = a.grad;
                let gamma = a.inputs[1].data();
                let sum_g = channel_sums(g.data(), c, spatial);
                let mut sum_gx = vec![0.0; c];
                for ((ch, gp), (_, xp)) in
                    planes(g.data(), c, spatial).zip(planes(xhat.data(), c, spatial))
                {
                    sum_gx[ch] += gp.iter().zip(xp).map(|(g, x)| g * x).sum::<f64>();
                }
                let inv_std = var_out.data();
                let gx = a.needs[0].then(|| {
                    let mut gx = g.clone();
                    for ((ch, gp), (_, xp)) in
                        planes_mut(gx.data_mut(), c, spatial).zip(planes(xhat.data(), c, spatial))
                    {
                        let k = gamma[ch] * inv_std[ch];
                        if batch {
                            let (sg, sgx) = (sum_g[ch] / m, sum_gx[ch] / m);
                            for (v, xh) in gp.iter_mut().zip(xp) {
                                *v = k * (*v - sg - xh * sgx);
                            }
                        } else {
                            gp.iter_mut().for_each(|v| *v *= k);
                        }
                    }
                    gx
                });
                vec![
                    gx,
                    Some(Tensor::new(vec![c], sum_gx).unwrap()),
                    Some(Tensor::new(vec![c], sum_g).unwrap()),
                ]
            }),
        );
        Ok((node, batch.then_some((mean, var))))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let y: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.record(
            Tensor::new(vec![n, c], y)?,
            &[x],
            Box::new(move |a| {
                let mut gx = Vec::with_capacity(n * c * hw);
                for &g in a.grad.data() {
                    gx.extend(std::iter::repeat_n(g / hw as f64, hw));
                }
                vec![Some(Tensor::new(vec![n, c, h, w], gx).unwrap())]
            }),
        ))
    }

    /// `x[N, F] * w[K, F]^T + b[K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (&[n, f], &[k, f2]) = (xv.shape(), wv.shape()) else {
            return Err(Error::Shape(format!(
                "linear expects [N,F] and [K,F], got {:?} and {:?}",
                xv.shape(),
                wv.shape()
            )));
        };
        if f != f2 || bv.len() != k {
            return Err(Error::Shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut y = vec![0.0; n * k];
        for i in 0..n {
            let xr = &xv.data()[i * f..(i + 1) * f];
            for j in 0..k {
                let wr = &wv.data()[j * f..(j + 1) * f];
                y[i * k + j] = bv.data()[j] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Ok(self.record(
            Tensor::new(vec![n, k], y)?,
            &[x, w, b],
            Box::new(move |a| {
                let (xv, wv, g) = (a.inputs[0].data(), a.inputs[1].data(), a.grad.data());
                let mut gx = vec![0.0; n * f];
                let mut gw = vec![0.0; k * f];
                let mut gb = vec![0.0; k];
                for i in 0..n {
                    for j in 0..k {
                        let gij = g[i * k + j];
                        gb[j] += gij;
                        for t in 0..f {
                            gx[i * f + t] += gij * wv[j * f + t];
                            gw[j * f + t] += gij * xv[i * f + t];
                        }
                    }
                }
                vec![
                    Some(Tensor::new(vec![n, f], gx).unwrap()),
                    Some(Tensor::new(vec![k, f], gw).unwrap()),
                    Some(Tensor::new(vec![k], gb).unwrap()),
                ]
            }),
        ))
    }

    /// Mean softmax cross-entropy of `logits[N, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let &[n, k] = lv.shape() else {
            return Err(Error::Shape(format!(
                "logits must be [N, K], got {:?}",
                lv.shape()
            )));
        };
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "{n} logits rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Range(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &lv.data()[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - mx).exp() / z;
            }
            loss += z.ln() + mx - row[labels[i]];
        }
        let labels = labels.to_vec();
        Ok(self.record(
            Tensor::scalar(loss / n as f64),
            &[logits],
            Box::new(move |a| {
                let s = a.grad.item() / n as f64;
                let mut g = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    g[i * k + l] -= 1.0;
                }
                g.iter_mut().for_each(|v| *v *= s);
                vec![Some(Tensor::new(vec![n, k], g).unwrap())]
            }),
        ))
    }
}
