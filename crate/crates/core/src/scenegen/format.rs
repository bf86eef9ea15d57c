//! Binary dataset files.
//!
//! Layout, little-endian throughout:
//! `"PVITDATA"`, `u32` version, 32-byte SHA-256 of the scene config,
//! `u32`-prefixed PRNG identifier, `u64` sample count, then one `u64`
//! length-prefixed record per sample. Each annotation field is preceded by a
//! one-byte present/absent tag; floats are stored as `f64`.

use std::io::{Read, Write};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::{AnnotationSet, ClassMap, Dataset, Origin, SceneConfig, VideoSample};
use crate::codec::{DecodeResult, Decoder, Encoder};
use crate::error::SceneError;

const MAGIC: &[u8; 8] = b"PVITDATA";
const VERSION: u32 = 1;
pub const PRNG_ID: &str = "rand_chacha::ChaCha8Rng/seed_from_u64";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub config_digest: [u8; 32],
    pub prng_id: String,
    pub count: u64,
}

pub fn config_digest(config: &SceneConfig) -> [u8; 32] {
    let text = toml::to_string(config).expect("scene config serializes");
    Sha256::digest(text.as_bytes()).into()
}

pub fn write_dataset<W: Write>(out: &mut W, dataset: &Dataset) -> Result<(), SceneError> {
    let mut head = Encoder::default();
    head.bytes(MAGIC);
    head.u32(VERSION);
    head.bytes(&config_digest(&dataset.config));
    head.str(PRNG_ID);
    head.u64(dataset.samples.len() as u64);
    out.write_all(&head.buf)?;
    for sample in &dataset.samples {
        let record = encode_sample(sample);
        out.write_all(&(record.len() as u64).to_le_bytes())?;
        out.write_all(&record)?;
    }
    Ok(())
}

/// Reads a dataset written for `config`; a digest mismatch is an error.
pub fn read_dataset<R: Read>(input: &mut R, config: &SceneConfig) -> Result<(DatasetHeader, Dataset), SceneError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let format = SceneError::Format;
    let mut d = Decoder::new(&bytes);
    if d.take(MAGIC.len()).map_err(format)? != MAGIC {
        return Err(format("bad magic".into()));
    }
    let version = d.u32().map_err(format)?;
    if version != VERSION {
        return Err(format(format!("unsupported version {version}")));
    }
    let digest: [u8; 32] = d.take(32).map_err(format)?.try_into().expect("32 bytes");
    if digest != config_digest(config) {
        return Err(format("scene config digest mismatch".into()));
    }
    let prng_id = d.str().map_err(format)?;
    let count = d.u64().map_err(format)?;
    let mut samples = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = d.usize().map_err(format)?;
        let mut record = Decoder::new(d.take(len).map_err(format)?);
        samples.push(decode_sample(&mut record).map_err(format)?);
        record.finish().map_err(format)?;
    }
    d.finish().map_err(format)?;
    let header = DatasetHeader {
        version,
        config_digest: digest,
        prng_id,
        count,
    };
    Ok((
        header,
        Dataset {
            config: config.clone(),
            samples,
        },
    ))
}

fn encode_sample(s: &VideoSample) -> Vec<u8> {
    let mut e = Encoder::default();
    e.u8(match s.origin {
        Origin::Real => 0,
        Origin::Synthetic => 1,
    });
    e.u64(s.seed);
    e.tensor(&s.pixels);
    let a = &s.annotations;
    e.optional(a.depth.as_ref(), Encoder::tensor);
    e.optional(a.normal.as_ref(), Encoder::tensor);
    e.optional(a.segm.as_ref(), |e, m: &ClassMap| {
        m.dims.iter().for_each(|&d| e.u64(d as u64));
        m.classes.iter().for_each(|&c| e.u64(c as u64));
    });
    e.optional(a.boxes.as_ref(), Encoder::tensor);
    e.optional(a.pose.as_ref(), Encoder::tensor);
    e.optional(a.action.as_ref(), |e, &c: &usize| e.u64(c as u64));
    e.buf
}

fn decode_sample(d: &mut Decoder) -> DecodeResult<VideoSample> {
    let origin = match d.u8()? {
        0 => Origin::Real,
        1 => Origin::Synthetic,
        o => return Err(format!("bad origin tag {o}")),
    };
    let seed = d.u64()?;
    let pixels = d.tensor()?;
    let annotations = AnnotationSet {
        depth: d.optional(Decoder::tensor)?,
        normal: d.optional(Decoder::tensor)?,
        segm: d.optional(|d| {
            let dims = [d.usize()?, d.usize()?, d.usize()?];
            let n = dims
                .iter()
                .try_fold(1usize, |a, &x| a.checked_mul(x))
                .unwrap_or(usize::MAX);
            if n.saturating_mul(8) > d.remaining() {
                return Err("class map larger than record".into());
            }
            let classes = (0..n).map(|_| d.usize()).collect::<DecodeResult<_>>()?;
            Ok(ClassMap { dims, classes })
        })?,
        boxes: d.optional(Decoder::tensor)?,
        pose: d.optional(Decoder::tensor)?,
        action: d.optional(Decoder::usize)?,
    };
    Ok(VideoSample {
        pixels: Arc::new(pixels),
        annotations,
        origin,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::TaskSet;
    use crate::task::Task;

    #[test]
    fn round_trip_is_exact() {
        let cfg = SceneConfig::default();
        let all: TaskSet = Task::ALL.into_iter().collect();
        let mut set = Dataset::generate(&cfg, 5, 3, Origin::Synthetic, &all).unwrap();
        set.samples.extend(
            Dataset::generate(&cfg, 50, 2, Origin::Real, &TaskSet::new())
                .unwrap()
                .samples,
        );
        let mut bytes = Vec::new();
        write_dataset(&mut bytes, &set).unwrap();
        let (header, back) = read_dataset(&mut bytes.as_slice(), &cfg).unwrap();
        assert_eq!(header.count, 5);
        assert_eq!(header.prng_id, PRNG_ID);
        assert_eq!(back, set);

        let other = SceneConfig {
            noise: 0.0,
            ..cfg.clone()
        };
        assert!(read_dataset(&mut bytes.as_slice(), &other).is_err());
        let truncated = &bytes[..bytes.len() - 3];
        assert!(read_dataset(&mut &truncated[..], &cfg).is_err());
        bytes[0] = b'X';
        assert!(read_dataset(&mut bytes.as_slice(), &cfg).is_err());
    }
}
