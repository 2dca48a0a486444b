//! `NPWT` weight files.
//!
//! Layout (little-endian): magic, version u32, depth u32, width u32,
//! kernel u32, in-channels u32, out-channels u32, mode u32, step u64, then
//! for each layer its tensors in declaration order (weight, bias and, for
//! normalized layers, gamma, beta, running mean, running variance), each as
//! a u32 length followed by that many f32 values.

use std::path::Path;

use super::{ChannelNorm, ConvLayer, ExtractorParams, Mode, NetConfig, Real, KERNEL, TAPS};
use crate::error::{Error, Result};
use crate::raster::write_atomic;

pub const WEIGHT_MAGIC: [u8; 4] = *b"NPWT";
pub const WEIGHT_VERSION: u32 = 1;

pub fn encode_params<T: Real>(p: &ExtractorParams<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHT_MAGIC);
    let mode = match p.config.mode {
        Mode::Train => 0u32,
        Mode::Eval => 1,
    };
    for v in [
        WEIGHT_VERSION,
        p.config.depth as u32,
        p.config.width as u32,
        KERNEL as u32,
        1,
        1,
        mode,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&p.step.to_le_bytes());
    let mut put = |t: &[T]| {
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        for v in t {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    };
    for l in &p.layers {
        put(&l.weight);
        put(&l.bias);
        if let Some(n) = &l.norm {
            put(&n.gamma);
            put(&n.beta);
            put(&n.running_mean);
            put(&n.running_var);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Length {
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, expected: usize) -> Result<Vec<f32>> {
        let n = self.u32()? as usize;
        if n != expected {
            return Err(Error::Shape(format!(
                "tensor of {n} values where {expected} expected"
            )));
        }
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<ExtractorParams<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != WEIGHT_MAGIC {
        return Err(Error::BadMagic {
            expected: WEIGHT_MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != WEIGHT_VERSION {
        return Err(Error::Version(version));
    }
    let depth = r.u32()? as usize;
    let width = r.u32()? as usize;
    let (kernel, cin, cout) = (r.u32()?, r.u32()?, r.u32()?);
    if kernel as usize != KERNEL || cin != 1 || cout != 1 {
        return Err(Error::Shape(format!(
            "unsupported kernel {kernel} / channels {cin}->{cout}"
        )));
    }
    let mode = match r.u32()? {
        0 => Mode::Train,
        1 => Mode::Eval,
        m => return Err(Error::Shape(format!("unknown mode {m}"))),
    };
    let step = r.u64()?;
    let config = NetConfig { depth, width, mode };
    if depth == 0 || width == 0 {
        return Err(Error::Shape(format!("empty network {depth}x{width}")));
    }
    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth {
        let (lin, lout) = config.channels(l);
        let weight = r.tensor(lout * lin * TAPS)?;
        let bias = r.tensor(lout)?;
        let norm = if config.has_norm(l) {
            Some(ChannelNorm {
                gamma: r.tensor(lout)?,
                beta: r.tensor(lout)?,
                running_mean: r.tensor(lout)?,
                running_var: r.tensor(lout)?,
            })
        } else {
            None
        };
        layers.push(ConvLayer {
            cin: lin,
            cout: lout,
            weight,
            bias,
            norm,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Length {
            expected: r.pos,
            found: bytes.len(),
        });
    }
    Ok(ExtractorParams {
        config,
        layers,
        step,
    })
}

pub fn save_params<T: Real>(p: &ExtractorParams<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_params(p))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ExtractorParams<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}
