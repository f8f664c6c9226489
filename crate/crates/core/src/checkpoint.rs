//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MSCK" | version u32 | feature-space digest [32] | bank count u32
//! per bank: descriptor str | segment count u32
//!           per segment: name str | offset u64 | len u64 | ndim u32 | dims u64*
//!           value count u64 | values f64*
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::models::{ParamBank, ParamSegment};
use crate::numkit::DenseVec;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MSCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedBank {
    pub descriptor: String,
    pub bank: ParamBank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub banks: Vec<NamedBank>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.banks.len() as u32).to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        for nb in &self.banks {
            put_str(&mut out, &nb.descriptor);
            out.extend_from_slice(&(nb.bank.segments.len() as u32).to_le_bytes());
            for s in &nb.bank.segments {
                put_str(&mut out, &s.name);
                out.extend_from_slice(&(s.offset as u64).to_le_bytes());
                out.extend_from_slice(&(s.len as u64).to_le_bytes());
                out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
                for &d in &s.shape {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
            }
            out.extend_from_slice(&(nb.bank.len() as u64).to_le_bytes());
            for v in nb.bank.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(&format!("unsupported checkpoint version {version}")));
        }
        let mut digest = [0u8; 32];
        digest.copy_from_slice(r.take(32)?);
        let n_banks = r.u32()? as usize;
        let mut banks = Vec::with_capacity(n_banks.min(64));
        for _ in 0..n_banks {
            let descriptor = r.string()?;
            let n_seg = r.u32()? as usize;
            let mut segments = Vec::with_capacity(n_seg.min(1024));
            for _ in 0..n_seg {
                let name = r.string()?;
                let offset = r.u64()? as usize;
                let len = r.u64()? as usize;
                let ndim = r.u32()? as usize;
                let shape = (0..ndim)
                    .map(|_| r.u64().map(|d| d as usize))
                    .collect::<Result<Vec<_>>>()?;
                segments.push(ParamSegment {
                    name,
                    offset,
                    len,
                    shape,
                });
            }
            let n = r.u64()? as usize;
            if n > (bytes.len() - r.pos) / 8 {
                return Err(r.err("truncated values"));
            }
            let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let flat = DenseVec::new(values).map_err(|e| r.err(&e.to_string()))?;
            let bank = ParamBank::new(flat, segments).map_err(|e| r.err(&e.to_string()))?;
            banks.push(NamedBank { descriptor, bank });
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Checkpoint { digest, banks })
    }

    pub fn find(&self, kind: &str) -> Vec<&NamedBank> {
        self.banks
            .iter()
            .filter(|b| descriptor_map(&b.descriptor).is_ok_and(|m| m.get("kind").map(String::as_str) == Some(kind)))
            .collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("unexpected end of file"));
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("invalid UTF-8 string"))
    }
}

/// Write via a temporary sibling and rename, so readers never see a torn file.
pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&ckpt.encode()).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Read a checkpoint, rejecting it if it was written for a different
/// feature space.
pub fn read_checkpoint(path: impl AsRef<Path>, expected_digest: Option<&[u8; 32]>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::decode(&bytes, path)?;
    if let Some(d) = expected_digest {
        if &ckpt.digest != d {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: "feature-space digest mismatch".into(),
            });
        }
    }
    Ok(ckpt)
}

/// Parse a whitespace-separated `key=value` descriptor.
pub fn descriptor_map(s: &str) -> Result<BTreeMap<String, String>> {
    s.split_whitespace()
        .map(|tok| {
            tok.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Config(format!("bad descriptor token {tok:?}")))
        })
        .collect()
}
