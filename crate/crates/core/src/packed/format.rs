//! The BNNF container for packed models.
//!
//! Little-endian throughout:
//!
//! ```text
//! "BNNF"  u32 version  u32 record count
//! record* (u8 kind, body)
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! Records appear in execution order: one `STEM`, then per block a
//! `BLOCK_HEADER` followed by its two `BINARY_CONV` records and an optional
//! `SHORTCUT`, and finally one `CLASSIFIER`. Real arrays are f64, counts
//! and dimensions u32.

use super::layer::{ChannelSign, FusedLayer, LayerOutput};
use super::model::{PackedBlock, PackedModel, RealConv};
use crate::block::ResidualMode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BNNF";
pub const VERSION: u32 = 1;

const STEM: u8 = 1;
const BLOCK_HEADER: u8 = 2;
const BINARY_CONV: u8 = 3;
const SHORTCUT: u8 = 4;
const CLASSIFIER: u8 = 5;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(
            &u32::try_from(v)
                .expect("dimension fits in u32")
                .to_le_bytes(),
        );
    }

    fn f64s(&mut self, v: &[f64]) {
        self.u32(v.len());
        v.iter()
            .for_each(|x| self.buf.extend_from_slice(&x.to_le_bytes()));
    }

    fn u64s(&mut self, v: &[u64]) {
        self.u32(v.len());
        v.iter()
            .for_each(|x| self.buf.extend_from_slice(&x.to_le_bytes()));
    }

    fn bits(&mut self, v: &[bool]) {
        let mut words = vec![0u64; v.len().div_ceil(64)];
        for (i, _) in v.iter().enumerate().filter(|(_, b)| **b) {
            words[i / 64] |= 1 << (i % 64);
        }
        self.u32(v.len());
        words
            .iter()
            .for_each(|x| self.buf.extend_from_slice(&x.to_le_bytes()));
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len());
        t.shape().iter().for_each(|&d| self.u32(d));
        self.f64s(t.data());
    }

    fn real_conv(&mut self, c: &RealConv) {
        self.u32(c.stride);
        self.u32(c.padding);
        self.tensor(&c.weight);
        self.f64s(&c.scale);
        self.f64s(&c.shift);
    }

    fn fused(&mut self, l: &FusedLayer) {
        self.u8(BINARY_CONV);
        for d in [l.in_channels, l.out_channels, l.kernel, l.stride, l.padding] {
            self.u32(d);
        }
        match &l.input {
            None => self.u8(0),
            Some(signs) => {
                self.u8(1);
                self.f64s(&signs.iter().map(|s| s.tau).collect::<Vec<_>>());
                self.bits(&signs.iter().map(|s| s.negate).collect::<Vec<_>>());
            }
        }
        match &l.output {
            LayerOutput::Threshold { tau } => {
                self.u8(0);
                self.f64s(tau);
            }
            LayerOutput::Affine { scale, shift } => {
                self.u8(1);
                self.f64s(scale);
                self.f64s(shift);
            }
        }
        self.bits(&l.flip);
        self.u64s(&l.weights);
        self.u32(l.valid.len());
        l.valid.iter().for_each(|&v| self.u32(v as usize));
    }
}

/// Serializes `model` into BNNF bytes.
pub fn encode(model: &PackedModel) -> Vec<u8> {
    let records = 2 + model
        .blocks
        .iter()
        .map(|b| 3 + usize::from(b.shortcut.is_some()))
        .sum::<usize>();
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.u32(records);

    w.u8(STEM);
    model.input_shape.iter().for_each(|&d| w.u32(d));
    w.u8(u8::from(model.max_pool));
    w.real_conv(&model.stem);

    for b in &model.blocks {
        w.u8(BLOCK_HEADER);
        w.u8(match b.residual {
            ResidualMode::Single => 0,
            ResidualMode::Double => 1,
        });
        w.u8(u8::from(b.shortcut.is_some()));
        w.fused(&b.conv1);
        w.fused(&b.conv2);
        if let Some(s) = &b.shortcut {
            w.u8(SHORTCUT);
            w.real_conv(s);
        }
    }

    w.u8(CLASSIFIER);
    w.tensor(&model.classifier_weight);
    w.f64s(&model.classifier_bias);

    let crc = crc32fast::hash(&w.buf);
    w.buf.extend_from_slice(&crc.to_le_bytes());
    w.buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self
            .bytes
            .get(self.pos..self.pos.saturating_add(n))
        {
            Some(s) => {
                self.pos += n;
                Ok(s)
            }
            None => self.err(format!(
                "need {n} more bytes, {} left",
                self.bytes.len() - self.pos
            )),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => {
                self.pos -= 1;
                self.err(format!("flag byte {v}"))
            }
        }
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()?;
        self.take(n.saturating_mul(8))?
            .chunks(8)
            .map(|c| Ok(f64::from_le_bytes(c.try_into().unwrap())))
            .collect()
    }

    fn f64s_of(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let at = self.pos;
        let v = self.f64s()?;
        if v.len() != n {
            return Err(Error::Format {
                offset: at,
                msg: format!("{what}: {} values, expected {n}", v.len()),
            });
        }
        Ok(v)
    }

    fn u64s(&mut self) -> Result<Vec<u64>> {
        let n = self.u32()?;
        self.take(n.saturating_mul(8))?
            .chunks(8)
            .map(|c| Ok(u64::from_le_bytes(c.try_into().unwrap())))
            .collect()
    }

    fn bits(&mut self, n: usize, what: &str) -> Result<Vec<bool>> {
        let at = self.pos;
        let len = self.u32()?;
        if len != n {
            return Err(Error::Format {
                offset: at,
                msg: format!("{what}: {len} bits, expected {n}"),
            });
        }
        let words = (0..len.div_ceil(64))
            .map(|_| self.u64())
            .collect::<Result<Vec<_>>>()?;
        Ok((0..len)
            .map(|i| words[i / 64] >> (i % 64) & 1 == 1)
            .collect())
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()?;
        if rank > 8 {
            return self.err(format!("tensor rank {rank}"));
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let at = self.pos;
        let data = self.f64s()?;
        Tensor::new(shape, data).map_err(|e| Error::Format {
            offset: at,
            msg: e.to_string(),
        })
    }

    fn real_conv(&mut self) -> Result<RealConv> {
        let stride = self.u32()?;
        let padding = self.u32()?;
        let weight = self.tensor()?;
        let o = match weight.shape() {
            [o, _, _, _] => *o,
            s => return self.err(format!("conv weight of shape {s:?}")),
        };
        let scale = self.f64s_of(o, "scale")?;
        let shift = self.f64s_of(o, "shift")?;
        Ok(RealConv {
            weight,
            stride,
            padding,
            scale,
            shift,
        })
    }

    fn expect_kind(&mut self, kind: u8) -> Result<()> {
        let k = self.u8()?;
        if k != kind {
            self.pos -= 1;
            return self.err(format!("record kind {k}, expected {kind}"));
        }
        Ok(())
    }

    fn fused(&mut self) -> Result<FusedLayer> {
        self.expect_kind(BINARY_CONV)?;
        let [in_channels, out_channels, kernel, stride, padding] = [
            self.u32()?,
            self.u32()?,
            self.u32()?,
            self.u32()?,
            self.u32()?,
        ];
        let input = if self.flag()? {
            let tau = self.f64s_of(in_channels, "input thresholds")?;
            let negate = self.bits(in_channels, "input directions")?;
            Some(
                tau.into_iter()
                    .zip(negate)
                    .map(|(tau, negate)| ChannelSign { tau, negate })
                    .collect(),
            )
        } else {
            None
        };
        let output = if self.flag()? {
            LayerOutput::Affine {
                scale: self.f64s_of(out_channels, "scale")?,
                shift: self.f64s_of(out_channels, "shift")?,
            }
        } else {
            LayerOutput::Threshold {
                tau: self.f64s_of(out_channels, "thresholds")?,
            }
        };
        let flip = self.bits(out_channels, "flip mask")?;
        let at = self.pos;
        let weights = self.u64s()?;
        let row = kernel * kernel * in_channels.div_ceil(64);
        if weights.len() != out_channels * row {
            return Err(Error::Format {
                offset: at,
                msg: format!(
                    "{} weight words, expected {}",
                    weights.len(),
                    out_channels * row
                ),
            });
        }
        let n = self.u32()?;
        if n != out_channels {
            return self.err(format!("{n} validity counts for {out_channels} rows"));
        }
        let valid = (0..n)
            .map(|_| self.u32().map(|v| v as u32))
            .collect::<Result<Vec<_>>>()?;
        Ok(FusedLayer {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            input,
            output,
            flip,
            weights,
            valid,
        })
    }
}

/// Parses BNNF bytes, checking magic, version and checksum first.
pub fn decode(bytes: &[u8]) -> Result<PackedModel> {
    if bytes.len() < 16 {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: "file shorter than header and checksum".into(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "missing BNNF magic".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader {
        bytes: body,
        pos: 8,
    };
    let records = r.u32()?;
    r.expect_kind(STEM)?;
    let input_shape = [r.u32()?, r.u32()?, r.u32()?];
    let max_pool = r.flag()?;
    let stem = r.real_conv()?;
    let mut seen = 1;
    let mut blocks = Vec::new();
    loop {
        let kind = *body.get(r.pos).ok_or(Error::Format {
            offset: r.pos,
            msg: "missing classifier".into(),
        })?;
        if kind != BLOCK_HEADER {
            break;
        }
        r.pos += 1;
        let residual = if r.flag()? {
            ResidualMode::Double
        } else {
            ResidualMode::Single
        };
        let has_shortcut = r.flag()?;
        let conv1 = r.fused()?;
        let conv2 = r.fused()?;
        let shortcut = if has_shortcut {
            r.expect_kind(SHORTCUT)?;
            Some(r.real_conv()?)
        } else {
            None
        };
        seen += 3 + usize::from(has_shortcut);
        blocks.push(PackedBlock {
            residual,
            conv1,
            conv2,
            shortcut,
        });
    }
    r.expect_kind(CLASSIFIER)?;
    let classifier_weight = r.tensor()?;
    let classes = classifier_weight.shape().first().copied().unwrap_or(0);
    let classifier_bias = r.f64s_of(classes, "classifier bias")?;
    seen += 1;
    if seen != records {
        return Err(Error::Format {
            offset: 8,
            msg: format!("header declares {records} records, found {seen}"),
        });
    }
    if r.pos != body.len() {
        return r.err(format!("{} trailing bytes", body.len() - r.pos));
    }
    Ok(PackedModel {
        input_shape,
        stem,
        max_pool,
        blocks,
        classifier_weight,
        classifier_bias,
    })
}

pub fn write(model: &PackedModel, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn read(path: &std::path::Path) -> Result<PackedModel> {
    decode(&std::fs::read(path)?)
}
