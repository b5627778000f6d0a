//! Binary tensor files and model checkpoints.
//!
//! A tensor blob is `"RTEN"`, `u32` version, `u8` dtype code, `u8` rank,
//! `u32` dims and the little-endian row-major payload. A checkpoint is
//! `"MTMB"`, `u32` version, `u32` count, then per parameter a `u16` name
//! length, the UTF-8 name and one tensor blob. All integers are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{DType, Element, Tensor};

pub const RTEN_MAGIC: &[u8; 4] = b"RTEN";
pub const RTEN_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTMB";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_rten<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank {} too large", t.rank())))?;
    out.extend_from_slice(RTEN_MAGIC);
    out.extend_from_slice(&RTEN_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    fn rten<T: Element>(&mut self) -> Result<(DType, Tensor<T>)> {
        self.magic(RTEN_MAGIC)?;
        let version = self.u32("version")?;
        if version != RTEN_VERSION {
            return Err(Error::Format(format!("unsupported tensor version {version}")));
        }
        let code = self.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
        let rank = self.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let size = dtype.size();
        let bytes = self.take(numel.checked_mul(size).unwrap_or(usize::MAX), "payload")?;
        let data: Vec<T> = match dtype {
            DType::F32 => bytes.chunks_exact(size).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => bytes.chunks_exact(size).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?;
        Ok((dtype, t))
    }
}

/// Decodes one tensor blob, converting to `T` if the stored dtype differs.
pub fn decode_rten<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let (_, t) = r.rten()?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after tensor", bytes.len() - r.pos)));
    }
    Ok(t)
}

pub fn write_rten<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut out = Vec::new();
    encode_rten(t, &mut out)?;
    fs::write(path, out)?;
    Ok(())
}

pub fn read_rten<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_rten(&fs::read(path)?)
}

pub fn encode_checkpoint<T: Element>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(store.len()).map_err(|_| Error::Format("too many parameters".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (_, p) in store.iter() {
        let len = u16::try_from(p.name.len()).map_err(|_| Error::Format(format!("name too long: {}", p.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        encode_rten(&p.value, &mut out)?;
    }
    Ok(out)
}

/// Replaces every parameter value in `store` with the checkpoint's. The
/// checkpoint must hold exactly the store's names, shapes and dtype; all
/// offending names are listed in the error.
pub fn decode_checkpoint_into<T: Element>(bytes: &[u8], store: &mut ParamStore<T>) -> Result<()> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("count")? as usize;
    let mut loaded = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let (dtype, t) = r.rten::<T>()?;
        loaded.push((name, dtype, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }

    let mut problems = Vec::new();
    let mut seen = vec![false; store.len()];
    for (name, dtype, t) in &loaded {
        match store.find(name) {
            None => problems.push(format!("unexpected '{name}'")),
            Some(id) => {
                if seen[id.index()] {
                    problems.push(format!("duplicate '{name}'"));
                }
                seen[id.index()] = true;
                let want = store.value(id).shape();
                if t.shape() != want {
                    problems.push(format!("'{name}' has shape {:?}, model expects {want:?}", t.shape()));
                }
                if *dtype != T::DTYPE {
                    problems.push(format!("'{name}' is {dtype}, model is {}", T::DTYPE));
                }
                if !t.is_finite() {
                    problems.push(format!("'{name}' holds non-finite values"));
                }
            }
        }
    }
    for (id, p) in store.iter() {
        if !seen[id.index()] {
            problems.push(format!("missing '{}'", p.name));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Load(problems.join("; ")));
    }
    for (name, _, t) in loaded {
        let id = store.find(&name).expect("validated");
        store.set_value(id, t)?;
    }
    Ok(())
}

pub fn save_checkpoint<T: Element>(path: impl AsRef<Path>, store: &ParamStore<T>) -> Result<()> {
    fs::write(path, encode_checkpoint(store)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Element>(path: impl AsRef<Path>, store: &mut ParamStore<T>) -> Result<()> {
    decode_checkpoint_into(&fs::read(path)?, store)
}
