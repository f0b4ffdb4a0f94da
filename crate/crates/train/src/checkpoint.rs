//! Self-describing binary container: magic, version, then named entries of
//! (name, dtype code, shape, little-endian payload).

use std::fs;
use std::io::Write;
use std::path::Path;

use sdflow_core::{DType, ParamStore, Real, Shape, Tensor};

use crate::error::CheckpointError;

pub const MAGIC: &[u8; 8] = b"SDFLOWCK";
pub const VERSION: u32 = 1;
/// Dtype code of raw byte entries, next to the tensor codes of [`DType`].
pub const BYTES_CODE: u8 = 0x10;
/// Name prefix of model parameter entries.
pub const PARAM_PREFIX: &str = "param.";

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    Bytes(Vec<u8>),
}

impl Payload {
    fn code(&self) -> u8 {
        match self {
            Payload::F32(_) => DType::F32.code(),
            Payload::F64(_) => DType::F64.code(),
            Payload::Bytes(_) => BYTES_CODE,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::Bytes(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Shape,
    pub payload: Payload,
}

/// Ordered entries; names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<Entry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated { offset: self.pos, needed: n - (self.buf.len() - self.pos) });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| CheckpointError::Malformed(format!("length {v} overflows")))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Adds or replaces an entry.
    pub fn insert(&mut self, name: impl Into<String>, shape: Shape, payload: Payload) {
        let name = name.into();
        assert_eq!(shape.numel(), payload.len(), "entry `{name}`: shape {shape} does not match payload length");
        let entry = Entry { name, shape, payload };
        match self.entries.iter_mut().find(|e| e.name == entry.name) {
            Some(slot) => *slot = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn insert_tensor<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let payload = match T::DTYPE {
            DType::F32 => Payload::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => Payload::F64(t.to_f64_vec()),
        };
        self.insert(name, t.shape(), payload);
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, values: &[f64]) {
        self.insert(name, Shape::new(1, 1, 1, values.len()), Payload::F64(values.to_vec()));
    }

    pub fn insert_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        self.insert(name, Shape::new(1, 1, 1, bytes.len()), Payload::Bytes(bytes.to_vec()));
    }

    fn require(&self, name: &str) -> Result<&Entry, CheckpointError> {
        self.get(name).ok_or_else(|| CheckpointError::Mismatch { entry: name.into(), detail: "missing from checkpoint".into() })
    }

    /// Tensor entry converted to `T`.
    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>, CheckpointError> {
        let e = self.require(name)?;
        let data: Vec<T> = match &e.payload {
            Payload::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
            Payload::Bytes(_) => return Err(CheckpointError::Mismatch { entry: name.into(), detail: "holds bytes, not a tensor".into() }),
        };
        Tensor::from_vec(e.shape, data).map_err(|err| CheckpointError::Malformed(format!("{name}: {err}")))
    }

    pub fn f64s(&self, name: &str) -> Result<Vec<f64>, CheckpointError> {
        Ok(self.tensor::<f64>(name)?.into_vec())
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8], CheckpointError> {
        match &self.require(name)?.payload {
            Payload::Bytes(b) => Ok(b),
            _ => Err(CheckpointError::Mismatch { entry: name.into(), detail: "holds a tensor, not bytes".into() }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.payload.code());
            for d in e.shape.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::Bytes(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version, expected: VERSION });
        }
        let count = r.usize()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| CheckpointError::Malformed("entry name is not UTF-8".into()))?;
            let code = r.u8()?;
            let d = [r.usize()?, r.usize()?, r.usize()?, r.usize()?];
            let shape = Shape::new(d[0], d[1], d[2], d[3]);
            let numel = d.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape overflows")))?;
            let width = match code {
                BYTES_CODE => 1,
                c => DType::from_code(c).ok_or_else(|| CheckpointError::Malformed(format!("{name}: unknown dtype code {c}")))?.size(),
            };
            let raw = r.take(numel.checked_mul(width).ok_or_else(|| CheckpointError::Malformed(format!("{name}: payload overflows")))?)?;
            let payload = match code {
                BYTES_CODE => Payload::Bytes(raw.to_vec()),
                c if c == DType::F32.code() => Payload::F32(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect()),
                _ => Payload::F64(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect()),
            };
            if ck.get(&name).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate entry `{name}`")));
            }
            ck.entries.push(Entry { name, shape, payload });
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(ck)
    }

    /// Writes to a temporary sibling, syncs, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        {
            let mut f = fs::File::create(&tmp).map_err(io)?;
            f.write_all(&self.to_bytes()).map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let buf = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&buf)
    }

    /// Stores every parameter under `param.<name>`.
    pub fn insert_params<T: Real>(&mut self, store: &ParamStore<T>) {
        for e in store.entries() {
            self.insert_tensor(format!("{PARAM_PREFIX}{}", e.name), &e.value);
        }
    }

    /// Copies parameters into `store`, which must hold exactly the same
    /// names and shapes. Values are converted to `T`.
    pub fn restore_params<T: Real>(&self, store: &mut ParamStore<T>) -> Result<(), CheckpointError> {
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            let name = format!("{PARAM_PREFIX}{}", store.name(id));
            let expected = store.get(id).shape();
            let e = self.require(&name)?;
            if e.shape != expected {
                return Err(CheckpointError::Mismatch { entry: name, detail: format!("shape {} in file, {} expected", e.shape, expected) });
            }
        }
        if let Some(extra) = self.entries.iter().find(|e| e.name.strip_prefix(PARAM_PREFIX).is_some_and(|n| store.find(n).is_none())) {
            return Err(CheckpointError::Mismatch { entry: extra.name.clone(), detail: "not part of the configured model".into() });
        }
        for id in ids {
            let t = self.tensor::<T>(&format!("{PARAM_PREFIX}{}", store.name(id)))?;
            store.set(id, t).map_err(|err| CheckpointError::Malformed(err.to_string()))?;
        }
        Ok(())
    }
}
