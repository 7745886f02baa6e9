//! Binary checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! | field | type |
//! |---|---|
//! | magic | 8 bytes `DAUCKPT\0` |
//! | version | u32 |
//! | spec text length, spec text | u64, UTF-8 `net.*` lines |
//! | seed, epoch, iteration | u64, u64, u64 |
//! | layer count | u32 |
//! | per layer: tag, payload | u8, see below |
//! | velocity array count | u32 |
//! | per array: length, values | u64, f32 * length |
//! | checksum | u64 CRC-64/XZ of every preceding byte |
//!
//! Layer payloads (counts as u32, arrays as raw f32 without a length):
//!
//! * `1` DAU: F, S, K, sigma (f64), max displacement (f64), `w[F*S*K]`,
//!   `mu[F*S*K*2]` as `(x, y)` pairs, `bias[F]`, `active[F*S*K]` as u8.
//! * `2` conv: F, S, kernel h, kernel w, padding, stride, weights, bias.
//! * `3` batch norm: C, scale, shift, running mean, running variance,
//!   epsilon (f64), momentum (f64), update count (u64).
//! * `4` ReLU and `5` max pool: empty.
//! * `6` fully connected: inputs, outputs, weights, bias.

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::classic::{BatchNormState, ConvParams, FcParams};
use crate::config::{spec_from_text, spec_to_text};
use crate::dau::DauLayerParams;
use crate::error::{Error, Result};
use crate::gaussian::build_bank;
use crate::network::{Layer, Network};
use crate::train::OptimizerState;

pub const MAGIC: [u8; 8] = *b"DAUCKPT\0";
pub const VERSION: u32 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

/// A network plus everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub optimizer: OptimizerState,
    /// Run seed; per-epoch shuffling is derived from it and the epoch.
    pub seed: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Corrupt("array length overflows".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

fn write_layer(w: &mut Writer, layer: &Layer) {
    match layer {
        Layer::Dau { params: p, .. } => {
            w.u8(1);
            w.u32(p.out_features);
            w.u32(p.in_channels);
            w.u32(p.units);
            w.f64(p.sigma);
            w.f64(p.max_displacement);
            w.f32s(&p.w);
            w.f32s(p.mu.as_flattened());
            w.f32s(&p.bias);
            for &a in &p.active {
                w.u8(a as u8);
            }
        }
        Layer::Conv(p) => {
            w.u8(2);
            for v in [p.out_features, p.in_channels, p.kernel_h, p.kernel_w, p.padding, p.stride] {
                w.u32(v);
            }
            w.f32s(&p.weights);
            w.f32s(&p.bias);
        }
        Layer::BatchNorm(s) => {
            w.u8(3);
            w.u32(s.channels());
            w.f32s(&s.scale);
            w.f32s(&s.shift);
            w.f32s(&s.running_mean);
            w.f32s(&s.running_var);
            w.f64(s.epsilon);
            w.f64(s.momentum);
            w.u64(s.updates);
        }
        Layer::Relu => w.u8(4),
        Layer::MaxPool => w.u8(5),
        Layer::Fc(p) => {
            w.u8(6);
            w.u32(p.in_features);
            w.u32(p.out_features);
            w.f32s(&p.weights);
            w.f32s(&p.bias);
        }
    }
}

fn read_layer(r: &mut Reader) -> Result<Layer> {
    let tag = r.u8()?;
    Ok(match tag {
        1 => {
            let (f, s, k) = (r.u32()?, r.u32()?, r.u32()?);
            let (sigma, max_displacement) = (r.f64()?, r.f64()?);
            let mut p = DauLayerParams::zeros(f, s, k, sigma, max_displacement)?;
            let n = p.num_units();
            p.w = r.f32s(n)?;
            p.mu = r.f32s(2 * n)?.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
            p.bias = r.f32s(f)?;
            p.active = (0..n)
                .map(|_| match r.u8()? {
                    0 => Ok(false),
                    1 => Ok(true),
                    b => Err(Error::Corrupt(format!("active flag byte {b}"))),
                })
                .collect::<Result<_>>()?;
            Layer::Dau {
                bank: build_bank(sigma)?,
                params: p,
            }
        }
        2 => {
            let (f, s, kh, kw, pad, stride) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
            let mut p = ConvParams::zeros(f, s, kh, kw, pad, stride)?;
            p.weights = r.f32s(p.weights.len())?;
            p.bias = r.f32s(f)?;
            Layer::Conv(p)
        }
        3 => {
            let c = r.u32()?;
            let mut s = BatchNormState::new(c);
            s.scale = r.f32s(c)?;
            s.shift = r.f32s(c)?;
            s.running_mean = r.f32s(c)?;
            s.running_var = r.f32s(c)?;
            s.epsilon = r.f64()?;
            s.momentum = r.f64()?;
            s.updates = r.u64()?;
            Layer::BatchNorm(s)
        }
        4 => Layer::Relu,
        5 => Layer::MaxPool,
        6 => {
            let (i, o) = (r.u32()?, r.u32()?);
            let mut p = FcParams::zeros(i, o)?;
            p.weights = r.f32s(i * o)?;
            p.bias = r.f32s(o)?;
            Layer::Fc(p)
        }
        t => return Err(Error::Corrupt(format!("unknown layer tag {t}"))),
    })
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&MAGIC);
    w.u32(VERSION as usize);
    let spec = spec_to_text(ck.network.spec());
    w.u64(spec.len() as u64);
    w.0.extend_from_slice(spec.as_bytes());
    w.u64(ck.seed);
    w.u64(ck.optimizer.epoch as u64);
    w.u64(ck.optimizer.iteration);
    w.u32(ck.network.layers().len());
    for layer in ck.network.layers() {
        write_layer(&mut w, layer);
    }
    w.u32(ck.optimizer.velocity.len());
    for v in &ck.optimizer.velocity {
        w.u64(v.len() as u64);
        w.f32s(v);
    }
    let sum = CRC64.checksum(&w.0);
    w.u64(sum);
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 8 || bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Corrupt("not a checkpoint (bad magic)".into()));
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if found != VERSION {
        return Err(Error::Version {
            found,
            supported: VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if CRC64.checksum(body) != stored {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let len = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Corrupt("spec text is not UTF-8".into()))?;
    let spec = spec_from_text(text)?;
    let seed = r.u64()?;
    let epoch = r.u64()? as usize;
    let iteration = r.u64()?;
    let count = r.u32()?;
    let layers = (0..count).map(|_| read_layer(&mut r)).collect::<Result<Vec<_>>>()?;
    let network = Network::from_parts(spec, layers)?;
    let count = r.u32()?;
    let mut velocity = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u64()? as usize;
        velocity.push(r.f32s(n)?);
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let optimizer = OptimizerState {
        velocity,
        epoch,
        iteration,
    };
    if !optimizer.matches(&network) {
        return Err(Error::Corrupt("optimizer state does not match the network".into()));
    }
    Ok(Checkpoint {
        network,
        optimizer,
        seed,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}
