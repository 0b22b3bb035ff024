//! Little-endian checkpoint files.
//!
//! Layout: magic `MVANETCK`, `u32` version, `u64` step, `u32` config length
//! and config text, `u32` array count, then per array `u32` name length, name
//! bytes, `u32` rank, `u32` dims, and `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MVANETCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// Canonical configuration text of the run.
    pub config: String,
    pub params: ParamStore,
}

fn bad(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated or unreadable stream: {e}"))
}

impl Checkpoint {
    /// Parameter values are stored as `f32`; the in-memory copy is rounded
    /// to match so that a save→load→save cycle is byte-stable.
    pub fn new(step: u64, config: String, params: &ParamStore) -> Self {
        let mut params = params.clone();
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        Checkpoint { step, config, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(self.step)?;
        w.write_u32::<LittleEndian>(self.config.len() as u32)?;
        w.write_all(self.config.as_bytes())?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, t) in self.params.iter() {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.rank() as u32)?;
            for &d in t.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(bad)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let step = r.read_u64::<LittleEndian>().map_err(bad)?;
        let config = read_string(&mut r)?;
        let count = r.read_u32::<LittleEndian>().map_err(bad)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = read_string(&mut r)?;
            let rank = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(bad)?;
            let n: usize = shape.iter().product();
            if n > r.len() / 4 {
                return Err(Error::Checkpoint(format!("array {name} claims {n} values past end of file")));
            }
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(bad)?;
            let t = Tensor::try_new(&shape, data.into_iter().map(f64::from).collect())?;
            params.insert(name, t);
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint { step, config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_string(r: &mut &[u8]) -> Result<String> {
    let len = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
    if len > r.len() {
        return Err(Error::Checkpoint(format!("string of {len} bytes past end of file")));
    }
    let (s, rest) = r.split_at(len);
    *r = rest;
    String::from_utf8(s.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
}
