//! Checkpoint files: `"PVITCKPT"`, `u32` version, 32-byte run digest, then
//! the loop position, PRNG state, parameters, Adam moments, finished epochs
//! and the running sums of the current epoch. Little-endian throughout.

use std::path::Path;

use super::{EpochAccumulator, EpochMetrics, Moments};
use crate::codec::{DecodeResult, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PVITCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub step: usize,
    pub epoch: usize,
    /// Real samples already consumed in the current epoch.
    pub cursor: usize,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    /// Name and value of every parameter, in registration order.
    pub params: Vec<(String, Tensor)>,
    pub moments: Vec<Option<Moments>>,
    pub history: Vec<EpochMetrics>,
    pub accumulator: EpochAccumulator,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::default();
        e.bytes(MAGIC);
        e.u32(VERSION);
        e.bytes(&self.digest);
        e.u64(self.step as u64);
        e.u64(self.epoch as u64);
        e.u64(self.cursor as u64);
        e.bytes(&self.rng_seed);
        e.u64(self.rng_stream);
        e.u128(self.rng_word_pos);
        e.u64(self.params.len() as u64);
        for (name, value) in &self.params {
            e.str(name);
            e.tensor(value);
        }
        for m in &self.moments {
            e.optional(m.as_ref(), |e, m| {
                e.tensor(&m.m);
                e.tensor(&m.v);
                e.u64(m.steps);
            });
        }
        e.u64(self.history.len() as u64);
        self.history.iter().for_each(|h| h.encode(&mut e));
        self.accumulator.encode(&mut e);
        e.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::decode(&mut Decoder::new(bytes)).map_err(Error::Checkpoint)
    }

    fn decode(d: &mut Decoder) -> DecodeResult<Self> {
        if d.take(MAGIC.len())? != MAGIC {
            return Err("bad magic".into());
        }
        let version = d.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let digest = d.take(32)?.try_into().expect("32 bytes");
        let step = d.usize()?;
        let epoch = d.usize()?;
        let cursor = d.usize()?;
        let rng_seed = d.take(32)?.try_into().expect("32 bytes");
        let rng_stream = d.u64()?;
        let rng_word_pos = d.u128()?;
        let n = d.usize()?;
        if n > d.remaining() {
            return Err("parameter count exceeds file".into());
        }
        let params = (0..n)
            .map(|_| Ok((d.str()?, d.tensor()?)))
            .collect::<DecodeResult<Vec<_>>>()?;
        let moments = (0..n)
            .map(|_| {
                d.optional(|d| {
                    Ok(Moments {
                        m: d.tensor()?,
                        v: d.tensor()?,
                        steps: d.u64()?,
                    })
                })
            })
            .collect::<DecodeResult<Vec<_>>>()?;
        let epochs = d.usize()?;
        if epochs > d.remaining() {
            return Err("history length exceeds file".into());
        }
        let history = (0..epochs)
            .map(|_| EpochMetrics::decode(d))
            .collect::<DecodeResult<_>>()?;
        let accumulator = EpochAccumulator::decode(d)?;
        d.finish()?;
        Ok(Self {
            digest,
            step,
            epoch,
            cursor,
            rng_seed,
            rng_stream,
            rng_word_pos,
            params,
            moments,
            history,
            accumulator,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
