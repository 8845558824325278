//! Single-file binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "FLXPCKPT"
//! version  u32
//! header   u64 length + UTF-8 JSON (config, counters, RNG, centering)
//! arrays   u64 count, then per array:
//!            group u8 (0 student, 1 teacher, 2 adam m, 3 adam v)
//!            name  u32 length + UTF-8
//!            dtype u8 (0 f32, 1 f64)
//!            rank  u8, dims u64 x rank
//!            raw values
//! digest   32 bytes SHA-256 of everything above
//! ```
//!
//! Values are stored bit-for-bit, so a save/load round trip is exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{EncoderConfig, ENCODER};
use crate::config::PretrainConfig;
use crate::error::{Error, Result};
use crate::objectives::ProjectionHeads;
use crate::params::Params;
use crate::rng::RngState;

pub const MAGIC: &[u8; 8] = b"FLXPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    Student = 0,
    Teacher = 1,
    AdamM = 2,
    AdamV = 3,
}

impl Group {
    const ALL: [Group; 4] = [Group::Student, Group::Teacher, Group::AdamM, Group::AdamV];

    fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|g| *g as u8 == v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngHeader {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngHeader {
    pub fn from_state(s: &RngState) -> Self {
        Self {
            seed: s.seed.iter().map(|b| format!("{b:02x}")).collect(),
            stream: s.stream,
            word_pos: s.word_pos.to_string(),
        }
    }

    pub fn to_state(&self) -> Result<RngState> {
        let corrupt = || Error::CorruptCheckpoint("bad RNG state".into());
        if self.seed.len() != 64 {
            return Err(corrupt());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| corrupt())?;
        }
        Ok(RngState {
            seed,
            stream: self.stream,
            word_pos: self.word_pos.parse().map_err(|_| corrupt())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: PretrainConfig,
    pub encoder: EncoderConfig,
    pub steps_per_epoch: u64,
    pub step: u64,
    pub adam_step: u64,
    pub rng: RngHeader,
    pub heads: ProjectionHeads,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub groups: BTreeMap<Group, Params>,
    /// Hex SHA-256 digest stored in the file.
    pub digest: String,
}

impl Checkpoint {
    pub fn group(&self, g: Group) -> Result<&Params> {
        self.groups
            .get(&g)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing {g:?} arrays")))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn push_array(buf: &mut Vec<u8>, group: Group, name: &str, t: &Tensor) -> Result<()> {
    buf.push(group as u8);
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    let flat = t.detach().flatten_all()?;
    match t.dtype() {
        DType::F32 => buf.push(0),
        DType::F64 => buf.push(1),
        other => return Err(Error::InvalidArgument(format!("cannot store {other:?} arrays"))),
    }
    buf.push(t.rank() as u8);
    for d in t.dims() {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    if t.dtype() == DType::F32 {
        for v in flat.to_vec1::<f32>()? {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    } else {
        for v in flat.to_vec1::<f64>()? {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

/// Serializes a checkpoint to bytes.
pub fn encode(header: &CheckpointHeader, groups: &BTreeMap<Group, Params>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(header).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let count: usize = groups.values().map(Params::len).sum();
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    for (g, params) in groups {
        for (name, t) in params.iter() {
            push_array(&mut buf, *g, name, t)?;
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

/// Writes atomically (temp file + rename). Returns the hex digest.
pub fn save(path: &Path, header: &CheckpointHeader, groups: &BTreeMap<Group, Params>) -> Result<String> {
    let bytes = encode(header, groups)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp: PathBuf = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(hex(&bytes[bytes.len() - 32..]))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptCheckpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 4 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    if bytes.len() < 12 + 32 {
        return Err(corrupt("truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("digest mismatch (truncated or modified file)"));
    }
    let mut c = Cursor { buf: body, pos: 12 };
    let hlen = c.u64()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(c.take(hlen)?).map_err(|e| corrupt(&e.to_string()))?;
    let count = c.u64()?;
    let mut groups: BTreeMap<Group, Params> = BTreeMap::new();
    for _ in 0..count {
        let g = Group::from_u8(c.u8()?).ok_or_else(|| corrupt("unknown array group"))?;
        let nlen = c.u32()? as usize;
        let name = String::from_utf8(c.take(nlen)?.to_vec()).map_err(|_| corrupt("array name is not UTF-8"))?;
        let dtype = c.u8()?;
        let rank = c.u8()? as usize;
        let dims = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let t = match dtype {
            0 => {
                let raw = c.take(n * 4)?;
                let v: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
                Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?
            }
            1 => {
                let raw = c.take(n * 8)?;
                let v: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
                Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?
            }
            _ => return Err(corrupt("unknown dtype tag")),
        };
        groups.entry(g).or_default().insert(name, t);
    }
    if c.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Checkpoint {
        header,
        groups,
        digest: hex(digest),
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}

/// Frozen backbone for downstream use: always the teacher's encoder.
#[derive(Debug, Clone)]
pub struct FrozenBackbone {
    pub cfg: EncoderConfig,
    pub params: Params,
    pub checkpoint_digest: String,
}

pub fn load_teacher_backbone(path: &Path) -> Result<FrozenBackbone> {
    let ck = load(path)?;
    let params = ck.group(Group::Teacher)?.subset(ENCODER);
    if params.is_empty() {
        return Err(Error::CorruptCheckpoint("checkpoint has no teacher encoder".into()));
    }
    Ok(FrozenBackbone {
        cfg: ck.header.encoder,
        params,
        checkpoint_digest: ck.digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::HeadConfig;
    use crate::rng::rng_from_seed;

    fn sample() -> (CheckpointHeader, BTreeMap<Group, Params>) {
        let cfg = PretrainConfig::desk();
        let header = CheckpointHeader {
            encoder: cfg.model.encoder,
            config: cfg,
            steps_per_epoch: 3,
            step: 7,
            adam_step: 7,
            rng: RngHeader::from_state(&RngState::capture(&rng_from_seed(5))),
            heads: ProjectionHeads::new(HeadConfig { hidden: 4, bottleneck: 4, prototypes: 3 }),
        };
        let mut groups = BTreeMap::new();
        let mut s = Params::new();
        s.insert("encoder.w", Tensor::new(&[[1.5f32, f32::MIN_POSITIVE], [-0.0, 3.25e-9]], &Device::Cpu).unwrap());
        s.insert("encoder.b", Tensor::new(&[0.1f64, -7.0], &Device::Cpu).unwrap());
        let mut t = Params::new();
        t.insert("encoder.w", Tensor::new(&[[0.5f32, 1.0], [2.0, 3.0]], &Device::Cpu).unwrap());
        groups.insert(Group::Student, s);
        groups.insert(Group::Teacher, t);
        (header, groups)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (h, g) = sample();
        let bytes = encode(&h, &g).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.header, h);
        for (grp, p) in &g {
            let q = back.group(*grp).unwrap();
            assert_eq!(p.content_hash().unwrap(), q.content_hash().unwrap());
        }
        assert_eq!(back.header.rng.to_state().unwrap(), RngState::capture(&rng_from_seed(5)));
    }

    #[test]
    fn truncation_version_and_missing_file() {
        let (h, g) = sample();
        let bytes = encode(&h, &g).unwrap();
        for cut in [bytes.len() - 1, bytes.len() / 2, 20] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))));
        }
        let mut other = bytes.clone();
        other[8..12].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(decode(&other), Err(Error::VersionMismatch { found: 99, expected: VERSION })));
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(load(Path::new("/nonexistent/x.ckpt")), Err(Error::MissingCheckpoint(_))));
    }

    #[test]
    fn teacher_backbone_loader_reads_teacher_arrays() {
        let dir = tempfile::tempdir().unwrap();
        let (h, g) = sample();
        let path = dir.path().join("c.ckpt");
        let digest = save(&path, &h, &g).unwrap();
        let fb = load_teacher_backbone(&path).unwrap();
        assert_eq!(fb.checkpoint_digest, digest);
        assert_eq!(fb.params.get("encoder.w").unwrap().to_vec2::<f32>().unwrap(), vec![vec![0.5, 1.0], vec![2.0, 3.0]]);
    }
}
