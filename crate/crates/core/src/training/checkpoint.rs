//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "HMA1" | version u32 | config length u32 | config JSON
//! | tensor section                                 (parameters)
//! | has_optimizer u8 | [tensor section]            (m.<name>..., v.<name>...)
//! | iteration u64
//!
//! tensor section = count u32 | per tensor:
//!     name length u16 | name | rank u8 | dims u32 x rank | dtype u8 (0 = f32)
//!     | payload f32 x numel | CRC-32 of payload u32
//! ```

use std::path::Path;

use super::adam::AdamState;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::{HmaConfig, HmaModel};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HMA1";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: HmaConfig,
    pub params: ParamStore<f32>,
    /// Adam moments; the step count is the iteration counter.
    pub optimizer: Option<AdamState<f32>>,
    pub iteration: u64,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &HmaModel<T>, optimizer: Option<&AdamState<T>>, iteration: u64) -> Self {
        Self {
            config: model.config.clone(),
            params: model.params.cast(),
            optimizer: optimizer.map(AdamState::cast),
            iteration,
        }
    }

    /// Validates the parameter layout against the stored configuration.
    pub fn model<T: Scalar>(&self) -> Result<HmaModel<T>> {
        HmaModel::from_parts(self.config.clone(), self.params.cast())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_json();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        let params: Vec<_> = self.params.iter().map(|p| (p.name.clone(), p.value.as_ref())).collect();
        write_section(&mut out, &params);
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                let tensors: Vec<_> = opt
                    .m
                    .iter()
                    .map(|p| (format!("m.{}", p.name), p.value.as_ref()))
                    .chain(opt.v.iter().map(|p| (format!("v.{}", p.name), p.value.as_ref())))
                    .collect();
                write_section(&mut out, &tensors);
            }
        }
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?} at byte offset 0 (expected \"HMA1\")")));
        }
        let at = r.pos;
        let version = r.u32("format version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} at byte offset {at}"
            )));
        }
        let len = r.u32("config length")? as usize;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len, "config text")?)
            .map_err(|e| Error::Checkpoint(format!("config text at byte offset {at} is not UTF-8: {e}")))?;
        let config = HmaConfig::from_json(text)
            .map_err(|e| Error::Checkpoint(format!("config at byte offset {at}: {e}")))?;
        let params = read_section(&mut r, "parameter")?;
        let at = r.pos;
        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let all = read_section(&mut r, "optimizer")?;
                let mut m = ParamStore::new();
                let mut v = ParamStore::new();
                for p in all.iter() {
                    let (target, rest) = match p.name.split_once('.') {
                        Some(("m", rest)) => (&mut m, rest),
                        Some(("v", rest)) => (&mut v, rest),
                        _ => {
                            return Err(Error::Checkpoint(format!(
                                "optimizer tensor `{}` is neither m.* nor v.*",
                                p.name
                            )))
                        }
                    };
                    target.insert(rest, p.value.as_ref().clone())?;
                }
                Some(AdamState { m, v, t: 0 })
            }
            f => return Err(Error::Checkpoint(format!("optimizer flag {f} at byte offset {at} is not 0 or 1"))),
        };
        let iteration = r.u64("iteration")?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes at byte offset {}",
                bytes.len() - r.pos,
                r.pos
            )));
        }
        let optimizer = match optimizer {
            Some(mut opt) => {
                opt.check_matches(&params)
                    .map_err(|e| Error::Checkpoint(format!("optimizer state: {e}")))?;
                opt.t = iteration;
                Some(opt)
            }
            None => None,
        };
        Ok(Self { config, params, optimizer, iteration })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fsutil::read(path)?)
            .map_err(|e| Error::Checkpoint(format!("{}: {}", path.display(), strip_prefix(&e))))
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Checkpoint(msg) => msg.clone(),
        other => other.to_string(),
    }
}

fn write_section(out: &mut Vec<u8>, tensors: &[(String, &Tensor<f32>)]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(DTYPE_F32);
        let start = out.len();
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
}

fn read_section(r: &mut Reader, what: &str) -> Result<ParamStore<f32>> {
    let count = r.u32(&format!("{what} count"))?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let len = r.u16(&format!("{what} {i} name length"))? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(len, &format!("{what} {i} name"))?)
            .map_err(|_| Error::Checkpoint(format!("{what} {i} name at byte offset {name_at} is not UTF-8")))?
            .to_string();
        let rank = r.u8(&format!("rank of `{name}`"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&format!("dims of `{name}`"))? as usize);
        }
        let at = r.pos;
        let dtype = r.u8(&format!("dtype of `{name}`"))?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!(
                "`{name}`: unsupported dtype {dtype} at byte offset {at}"
            )));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: shape {shape:?} overflows")))?;
        let payload = r.take(numel, &format!("payload of `{name}`"))?;
        let stored = r.u32(&format!("checksum of `{name}`"))?;
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Checkpoint(format!(
                "`{name}`: payload checksum mismatch (stored {stored:08x}, computed {computed:08x})"
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(shape, data)?;
        store
            .insert(name.clone(), t)
            .map_err(|_| Error::Checkpoint(format!("duplicate {what} name `{name}` at byte offset {name_at}")))?;
    }
    Ok(store)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated at byte offset {} reading {what}: need {n} bytes, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
