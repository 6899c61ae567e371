//! `MJCK` checkpoint container.
//!
//! Layout: magic, u32 version, u32-length-prefixed UTF-8 JSON config echo,
//! u64 seed, u32 tensor count, then per tensor a u16-length-prefixed name,
//! u8 rank, u32 extents and little-endian f32 data.

use std::fs::File;
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MJCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub seed: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Snapshots every entry (buffers included) whose name starts with one of `prefixes`.
    pub fn from_store(store: &ParamStore<f32>, prefixes: &[&str], config: serde_json::Value, seed: u64) -> Self {
        let tensors = store
            .named("")
            .into_iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(n, t)| {
                let mut t = t.clone();
                t.grad = None;
                t.requires_grad = false;
                (n.to_string(), t)
            })
            .collect();
        Self { config, seed, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    /// Copies tensors under `prefix` into equally named store entries.
    ///
    /// Every store entry under `prefix` must be present with the same shape.
    pub fn load_into(&self, store: &mut ParamStore<f32>, prefix: &str) -> Result<usize> {
        let targets: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
        if targets.is_empty() {
            return Err(Error::Config(format!("model has no parameters under '{prefix}'")));
        }
        for id in &targets {
            let name = store.name(*id).to_string();
            let src = self
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor '{name}'")))?;
            let dst = store.get_mut(*id);
            if src.shape() != dst.shape() {
                return Err(Error::dim("checkpoint_load", dst.shape(), src.shape()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(targets.len())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let config = serde_json::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LE>(CHECKPOINT_VERSION)?;
        w.write_u32::<LE>(config.len() as u32)?;
        w.write_all(config.as_bytes())?;
        w.write_u64::<LE>(self.seed)?;
        w.write_u32::<LE>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("tensor name too long: {name}")))?;
            w.write_u16::<LE>(len)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(t.rank() as u8)?;
            for &d in t.shape() {
                w.write_u32::<LE>(d as u32)?;
            }
            for &v in t.data() {
                w.write_f32::<LE>(v)?;
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::read_from(&bytes)
    }

    pub fn read_from(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        fn field<T>(cur: &mut Cursor<&[u8]>, what: &str, f: impl FnOnce(&mut Cursor<&[u8]>) -> std::io::Result<T>) -> Result<T> {
            let offset = cur.position();
            f(cur).map_err(|_| Error::Format {
                offset,
                reason: format!("truncated while reading {what}"),
            })
        }
        let mut magic = [0u8; 4];
        field(&mut cur, "magic", |c| c.read_exact(&mut magic))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: format!("bad checkpoint magic {magic:?}"),
            });
        }
        let version = field(&mut cur, "version", |c| c.read_u32::<LE>())?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported checkpoint version {version}"),
            });
        }
        let len = field(&mut cur, "config length", |c| c.read_u32::<LE>())? as usize;
        let at = cur.position();
        let mut buf = vec![0u8; len.min(bytes.len())];
        field(&mut cur, "config", |c| c.read_exact(&mut buf))?;
        if buf.len() != len {
            return Err(Error::Format {
                offset: at,
                reason: "truncated config".into(),
            });
        }
        let config = serde_json::from_slice(&buf).map_err(|e| Error::Format {
            offset: at,
            reason: format!("config is not valid JSON: {e}"),
        })?;
        let seed = field(&mut cur, "seed", |c| c.read_u64::<LE>())?;
        let count = field(&mut cur, "tensor count", |c| c.read_u32::<LE>())? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nlen = field(&mut cur, "tensor name length", |c| c.read_u16::<LE>())? as usize;
            let at = cur.position();
            let mut nb = vec![0u8; nlen];
            field(&mut cur, "tensor name", |c| c.read_exact(&mut nb))?;
            let name = String::from_utf8(nb).map_err(|_| Error::Format {
                offset: at,
                reason: "tensor name is not UTF-8".into(),
            })?;
            let rank = field(&mut cur, "rank", |c| c.read_u8())? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(field(&mut cur, "extent", |c| c.read_u32::<LE>())? as usize);
            }
            let numel: usize = shape.iter().product();
            let at = cur.position();
            if (bytes.len() as u64 - at) < 4 * numel as u64 {
                return Err(Error::Format {
                    offset: at,
                    reason: format!("truncated data of tensor '{name}'"),
                });
            }
            let mut data = vec![0f32; numel];
            field(&mut cur, "tensor data", |c| c.read_f32_into::<LE>(&mut data))?;
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if cur.position() as usize != bytes.len() {
            return Err(Error::Format {
                offset: cur.position(),
                reason: "trailing bytes after last tensor".into(),
            });
        }
        Ok(Self { config, seed, tensors })
    }
}
