//! Binary checkpoint container.
//!
//! Layout (little-endian):
//! ```text
//! b"LCTX"  u32 version
//! u32 len, stage tag (utf-8)
//! u32 len, header JSON (sorted keys): {"config": .., "meta": ..}
//! u64 vocab fingerprint
//! u32 tensor count, then per tensor:
//!     u32 len, name; u32 rank; u64 extent × rank; f64 × Π extents
//! u64 FNV-1a checksum of every preceding byte
//! ```

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::vocab::Fnv64;

pub const MAGIC: &[u8; 4] = b"LCTX";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Encoder,
    Decoder,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Encoder => "encoder",
            Stage::Decoder => "decoder",
        }
    }

    fn from_tag(tag: &str) -> Result<Stage> {
        match tag {
            "encoder" => Ok(Stage::Encoder),
            "decoder" => Ok(Stage::Decoder),
            other => Err(Error::Corrupt(format!("unknown stage tag `{other}`"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// 1-based epoch the parameters come from (0 = untrained).
    pub epoch: usize,
    pub val_loss: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: serde_json::Value,
    pub meta: CheckpointMeta,
    pub fingerprint: u64,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    meta: CheckpointMeta,
}

impl Checkpoint {
    /// Refuses a checkpoint of the wrong stage or vocabulary.
    pub fn expect(&self, stage: Stage, fingerprint: u64) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Stage {
                expected: stage.tag().into(),
                found: self.stage.tag().into(),
            });
        }
        if self.fingerprint != fingerprint {
            return Err(Error::Fingerprint {
                expected: fingerprint,
                found: self.fingerprint,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, self.stage.tag());
        let header = Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
        };
        // Value maps are ordered, so this is canonical
        let json = serde_json::to_value(&header).expect("header serializes").to_string();
        put_str(&mut out, &json);
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut h = Fnv64::new();
        h.write(&out);
        out.extend_from_slice(&h.finish().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < MAGIC.len() + 4 + 8 {
            return Err(Error::Corrupt(format!("file too short ({} bytes)", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let mut h = Fnv64::new();
        h.write(body);
        if h.finish() != stored {
            return Err(Error::Corrupt(format!(
                "checksum mismatch (stored {stored:016x}, computed {:016x})",
                h.finish()
            )));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let stage = Stage::from_tag(&r.string()?)?;
        let header: Header = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        let fingerprint = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::Corrupt(format!("tensor `{name}` too large")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("tensor `{name}`: {e}")))?;
            params.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint {
            stage,
            config: header.config,
            meta: header.meta,
            fingerprint,
            params,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("invalid utf-8".into()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{init_params, Init, Rng};

    fn sample() -> Checkpoint {
        let mut rng = Rng::new(3);
        let mut params = ParamStore::new();
        params.insert("enc.a", init_params(&[3, 4], &mut rng, Init::Uniform(1.0)).unwrap());
        params.insert("enc.b", Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e300]));
        params.insert("dec.c", init_params(&[5], &mut rng, Init::Uniform(1.0)).unwrap());
        Checkpoint {
            stage: Stage::Encoder,
            config: serde_json::json!({"encoder": {"d": 4, "layers": 1}, "seed": 9}),
            meta: CheckpointMeta {
                epoch: 3,
                val_loss: 0.1 + 0.2,
                seed: 9,
            },
            fingerprint: 0xdead_beef_0123_4567,
            params,
        }
    }

    fn bits(p: &ParamStore) -> Vec<(String, Vec<usize>, Vec<u64>)> {
        p.iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(bits(&back.params), bits(&c.params));
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.config, c.config);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"LCTX");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(&b[12..19], b"encoder");
    }

    #[test]
    fn truncation_and_bit_flips_rejected() {
        let b = sample().to_bytes();
        for cut in [0, 3, 11, 40, b.len() / 2, b.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&b[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        for pos in [0, 5, 30, b.len() / 2, b.len() - 9, b.len() - 1] {
            let mut f = b.clone();
            f[pos] ^= 0x10;
            assert!(matches!(Checkpoint::from_bytes(&f), Err(Error::Corrupt(_))), "flip {pos}");
        }
    }

    #[test]
    fn version_mismatch_reported() {
        let mut b = sample().to_bytes();
        b[4] = 7;
        let n = b.len() - 8;
        let mut h = Fnv64::new();
        h.write(&b[..n]);
        let sum = h.finish().to_le_bytes();
        b[n..].copy_from_slice(&sum);
        assert!(matches!(
            Checkpoint::from_bytes(&b),
            Err(Error::Version { expected: 1, found: 7 })
        ));
    }

    #[test]
    fn stage_and_fingerprint_checks() {
        let c = sample();
        assert!(c.expect(Stage::Encoder, 0xdead_beef_0123_4567).is_ok());
        assert!(matches!(c.expect(Stage::Decoder, 0xdead_beef_0123_4567), Err(Error::Stage { .. })));
        let err = c.expect(Stage::Encoder, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("deadbeef01234567") && msg.contains("0000000000000001"), "{msg}");
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_checkpoint(Path::new("/nonexistent/x.ckpt")),
            Err(Error::Io { .. })
        ));
    }
}
