//! Binary tensor files and named-tensor archives.
//!
//! A tensor is encoded as the magic `AITT`, a dtype code byte (0 = f32,
//! 1 = f64), an ndim byte, `ndim` little-endian `u32` dims and the
//! little-endian payload. An archive is the magic `AITK`, a `u32` format
//! version, a `u32`-length-prefixed JSON manifest, a `u32` record count and
//! then `(u32 name length, UTF-8 name, tensor)` records in order.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DType, Float, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"AITT";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"AITK";
pub const ARCHIVE_VERSION: u32 = 1;

pub fn encode_tensor<T: Float>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::Format(format!("{} dims do not fit the header", t.ndim())));
    }
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

/// Decodes one tensor, converting from the stored dtype to `T`. Returns the
/// tensor and the number of bytes consumed.
pub fn decode_tensor<T: Float>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != TENSOR_MAGIC {
        return Err(Error::Format("missing AITT magic".into()));
    }
    let dtype = DType::from_code(r.u8()?)?;
    let ndim = r.u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32()? as usize);
    }
    let n: usize = shape.iter().product();
    let payload = r.take(n * dtype.size())?;
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::of_f64(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::of_f64(f64::read_le(c)))
            .collect(),
    };
    Ok((Tensor::new(shape, data)?, r.pos))
}

pub fn write_tensor<T: Float>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf)?;
    write_atomic(path, &buf)
}

pub fn read_tensor<T: Float>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode_tensor(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

/// An ordered list of named tensors with a JSON manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive<T> {
    pub manifest: serde_json::Value,
    pub records: Vec<(String, Tensor<T>)>,
}

impl<T: Float> Archive<T> {
    pub fn new(manifest: serde_json::Value) -> Self {
        Archive {
            manifest,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.records.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("archive has no tensor named {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        let manifest = serde_json::to_vec(&self.manifest)?;
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor(t, &mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != ARCHIVE_MAGIC {
            return Err(Error::Format("missing AITK magic".into()));
        }
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let mlen = r.u32()? as usize;
        let manifest = serde_json::from_slice(r.take(mlen)?)?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|e| Error::Format(format!("record name: {e}")))?;
            let (t, used) = decode_tensor(&bytes[r.pos..])?;
            r.pos += used;
            records.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Archive { manifest, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl<T: Float> Archive<T> {
    /// Stores every parameter as `param.<name>`, plus Adam moments
    /// (`adam.m.<name>`, `adam.v.<name>`) and step counts (manifest key
    /// `adam_steps`) when `optimizer` is set.
    pub fn push_params(&mut self, store: &ParamStore<T>, optimizer: bool) {
        let mut steps = serde_json::Map::new();
        for p in store.iter() {
            self.push(format!("param.{}", p.name), p.value.clone());
            if optimizer {
                self.push(format!("adam.m.{}", p.name), p.first_moment.clone());
                self.push(format!("adam.v.{}", p.name), p.second_moment.clone());
                steps.insert(p.name.clone(), p.step.into());
            }
        }
        if optimizer {
            if let Some(obj) = self.manifest.as_object_mut() {
                obj.insert("adam_steps".into(), steps.into());
            }
        }
    }

    /// Loads parameter values (and optimizer state when present) into an
    /// already-built store. Every parameter of the store must be present.
    pub fn restore_params(&self, store: &mut ParamStore<T>) -> Result<()> {
        let steps = self.manifest.get("adam_steps").and_then(|v| v.as_object()).cloned();
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        for name in names {
            store.load(&name, self.require(&format!("param.{name}"))?.clone())?;
            let id = store.id(&name).expect("name taken from the store");
            let p = store.get_mut(id);
            if let (Some(m), Some(v)) = (self.get(&format!("adam.m.{name}")), self.get(&format!("adam.v.{name}"))) {
                if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                    return Err(Error::shape("restore_params", format!("optimizer state for {name}")));
                }
                p.first_moment = m.clone();
                p.second_moment = v.clone();
            }
            if let Some(s) = steps.as_ref().and_then(|s| s.get(&name)).and_then(|v| v.as_u64()) {
                p.step = s;
            }
        }
        Ok(())
    }
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
