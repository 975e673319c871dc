//! Checkpoint file layout (little-endian):
//!
//! ```text
//! "EMRL" | u32 version | u32 section count | sections...
//! section: u32 name length | name (utf-8) | u8 kind | u64 payload length | payload
//! ```
//!
//! Kind 0 is a matrix (`u32 rows | u32 cols | rows * cols f64`), kind 1 is
//! raw bytes. The training configuration is stored as TOML text.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::features::NormStats;
use crate::numerics::{AdamState, ParamSet, ParamTensor};
use crate::rl::AdvantageNormalizer;

use super::{Checkpoint, Model, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EMRL";
const VERSION: u32 = 1;
const KIND_MATRIX: u8 = 0;
const KIND_BYTES: u8 = 1;

struct Writer {
    buf: Vec<u8>,
    sections: u32,
}

impl Writer {
    fn section(&mut self, name: &str, kind: u8, payload: &[u8]) {
        self.buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.push(kind);
        self.buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(payload);
        self.sections += 1;
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize, values: &[f64]) {
        let mut p = Vec::with_capacity(8 + 8 * values.len());
        p.extend_from_slice(&(rows as u32).to_le_bytes());
        p.extend_from_slice(&(cols as u32).to_le_bytes());
        for v in values {
            p.extend_from_slice(&v.to_le_bytes());
        }
        self.section(name, KIND_MATRIX, &p);
    }

    fn vector(&mut self, name: &str, values: &[f64]) {
        self.matrix(name, 1, values.len(), values);
    }

    fn bytes(&mut self, name: &str, payload: &[u8]) {
        self.section(name, KIND_BYTES, payload);
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer {
        buf: Vec::new(),
        sections: 0,
    };
    w.bytes("config", ckpt.config.to_toml()?.as_bytes());
    w.vector("norm.mean", &ckpt.norm.mean);
    w.vector("norm.std", &ckpt.norm.std);
    w.bytes("norm.count", &ckpt.norm.count.to_le_bytes());
    for t in ckpt.model.tensors() {
        w.matrix(t.name(), t.rows(), t.cols(), t.values());
    }
    for (t, s) in ckpt.model.tensors().iter().zip(&ckpt.optimizer) {
        w.vector(&format!("adam.{}.m", t.name()), &s.m);
        w.vector(&format!("adam.{}.v", t.name()), &s.v);
        w.bytes(&format!("adam.{}.step", t.name()), &s.step.to_le_bytes());
    }
    w.bytes("episode", &ckpt.episode.to_le_bytes());
    let mut rng = Vec::with_capacity(32 + 8 + 16);
    rng.extend_from_slice(&ckpt.rng.get_seed());
    rng.extend_from_slice(&ckpt.rng.get_stream().to_le_bytes());
    rng.extend_from_slice(&ckpt.rng.get_word_pos().to_le_bytes());
    w.bytes("rng", &rng);
    let n = &ckpt.normalizer;
    w.vector("normalizer", &[n.mean, n.var, n.decay, n.epsilon]);

    let mut out = Vec::with_capacity(12 + w.buf.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&w.sections.to_le_bytes());
    out.extend_from_slice(&w.buf);
    Ok(out)
}

enum Payload<'a> {
    Matrix(usize, usize, Vec<f64>),
    Bytes(&'a [u8]),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated checkpoint while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct Sections<'a>(BTreeMap<String, Payload<'a>>);

impl<'a> Sections<'a> {
    fn matrix(&mut self, name: &str) -> Result<(usize, usize, Vec<f64>)> {
        match self.0.remove(name) {
            Some(Payload::Matrix(r, c, v)) => Ok((r, c, v)),
            Some(Payload::Bytes(_)) => Err(Error::Checkpoint(format!("section {name} should hold a matrix"))),
            None => Err(Error::Checkpoint(format!("missing section {name}"))),
        }
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        let (_, _, v) = self.matrix(name)?;
        if v.len() != len {
            return Err(Error::Checkpoint(format!("section {name} has {} values, expected {len}", v.len())));
        }
        Ok(v)
    }

    fn bytes(&mut self, name: &str) -> Result<&'a [u8]> {
        match self.0.remove(name) {
            Some(Payload::Bytes(b)) => Ok(b),
            Some(Payload::Matrix(..)) => Err(Error::Checkpoint(format!("section {name} should hold bytes"))),
            None => Err(Error::Checkpoint(format!("missing section {name}"))),
        }
    }

    fn u64(&mut self, name: &str) -> Result<u64> {
        let b = self.bytes(name)?;
        let arr: [u8; 8] = b
            .try_into()
            .map_err(|_| Error::Checkpoint(format!("section {name} should hold 8 bytes")))?;
        Ok(u64::from_le_bytes(arr))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected \"EMRL\"".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version} is not supported (expected {VERSION})"
        )));
    }
    let count = r.u32("section count")?;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let start = r.pos;
        let name_len = r.u32("section name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "section name")?)
            .map_err(|_| Error::Format {
                offset: start as u64,
                msg: "section name is not utf-8".into(),
            })?
            .to_string();
        let kind = r.take(1, "section kind")?[0];
        let len = r.u64("section length")? as usize;
        let body = r.take(len, &name)?;
        let payload = match kind {
            KIND_MATRIX => {
                if body.len() < 8 {
                    return Err(Error::Checkpoint(format!("matrix section {name} is too short")));
                }
                let rows = u32::from_le_bytes(body[0..4].try_into().unwrap()) as usize;
                let cols = u32::from_le_bytes(body[4..8].try_into().unwrap()) as usize;
                if body.len() != 8 + 8 * rows * cols {
                    return Err(Error::Checkpoint(format!("matrix section {name} has the wrong length")));
                }
                let values = body[8..]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Payload::Matrix(rows, cols, values)
            }
            KIND_BYTES => Payload::Bytes(body),
            other => {
                return Err(Error::Format {
                    offset: start as u64,
                    msg: format!("unknown section kind {other} for {name}"),
                })
            }
        };
        if map.insert(name.clone(), payload).is_some() {
            return Err(Error::Checkpoint(format!("duplicate section {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: "trailing bytes after last section".into(),
        });
    }
    let mut s = Sections(map);

    let config_text = std::str::from_utf8(s.bytes("config")?)
        .map_err(|_| Error::Checkpoint("config section is not utf-8".into()))?;
    let config = TrainConfig::from_toml(config_text)?;
    let (_, _, mean) = s.matrix("norm.mean")?;
    let std = s.vector("norm.std", mean.len())?;
    let norm = NormStats {
        mean,
        std,
        count: s.u64("norm.count")?,
    };

    let mut model = Model::zeros(norm.dim(), config.hidden);
    for t in model.tensors_mut() {
        let (rows, cols, values) = s.matrix(t.name())?;
        if (rows, cols) != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{} is {rows}x{cols}, expected {:?}",
                t.name(),
                t.shape()
            )));
        }
        *t = ParamTensor::from_values(t.name().to_string(), rows, cols, values)?;
    }
    let mut optimizer = Vec::new();
    for t in model.tensors() {
        let name = t.name();
        let mut st = AdamState::new(t.len(), config.adam);
        st.m = s.vector(&format!("adam.{name}.m"), t.len())?;
        st.v = s.vector(&format!("adam.{name}.v"), t.len())?;
        st.step = s.u64(&format!("adam.{name}.step"))?;
        optimizer.push(st);
    }
    let episode = s.u64("episode")?;
    let rng_bytes = s.bytes("rng")?;
    if rng_bytes.len() != 56 {
        return Err(Error::Checkpoint("rng section should hold 56 bytes".into()));
    }
    let mut rng = ChaCha8Rng::from_seed(rng_bytes[..32].try_into().unwrap());
    rng.set_stream(u64::from_le_bytes(rng_bytes[32..40].try_into().unwrap()));
    rng.set_word_pos(u128::from_le_bytes(rng_bytes[40..56].try_into().unwrap()));
    let nv = s.vector("normalizer", 4)?;
    let normalizer = AdvantageNormalizer {
        mean: nv[0],
        var: nv[1],
        decay: nv[2],
        epsilon: nv[3],
    };
    if let Some(extra) = s.0.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected section {extra}")));
    }
    Ok(Checkpoint {
        config,
        norm,
        model,
        optimizer,
        episode,
        rng,
        normalizer,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let cfg = TrainConfig {
            hidden: 5,
            seed: 11,
            ..Default::default()
        };
        let mut c = Checkpoint::new(cfg, NormStats::identity(33)).unwrap();
        c.rng.next_u64();
        c.episode = 7;
        c.optimizer[2].step = 3;
        c.optimizer[2].m[0] = 0.125;
        c.normalizer.update(0.7);
        c
    }

    #[test]
    fn round_trip_is_lossless() {
        let c = sample();
        let back = decode_checkpoint(&encode_checkpoint(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_checkpoint(&back).unwrap(), encode_checkpoint(&c).unwrap());
    }

    #[test]
    fn rng_resumes_at_the_same_position() {
        let mut c = sample();
        let mut back = decode_checkpoint(&encode_checkpoint(&c).unwrap()).unwrap();
        assert_eq!(c.rng.next_u64(), back.rng.next_u64());
    }

    #[test]
    fn truncation_and_version_errors() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        for cut in [0, 3, 11, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut v2 = bytes.clone();
        v2[4] = 2;
        let err = decode_checkpoint(&v2).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
    }
}
