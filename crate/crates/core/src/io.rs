//! Binary array blobs, `key = value` manifests and atomic file writes.
//!
//! Blob layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "RVXBLOB\0"
//! version    u32      1
//! count      u32      number of arrays
//! per array:
//!   name_len u32, name (UTF-8)
//!   dtype    u32      1 = f32, 2 = f64, 3 = u32
//!   rank     u32
//!   extents  u64 * rank
//!   length   u64      payload length in bytes
//!   payload
//! checksum   32 bytes SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const BLOB_MAGIC: &[u8; 8] = b"RVXBLOB\0";
pub const BLOB_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    U32 = 3,
}

impl DType {
    fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::U32),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    Real(Tensor),
    Index { shape: Vec<usize>, data: Vec<u32> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn real(name: &str, t: Tensor) -> Self {
        NamedArray {
            name: name.to_string(),
            data: ArrayData::Real(t),
        }
    }

    pub fn index(name: &str, data: Vec<u32>) -> Self {
        NamedArray {
            name: name.to_string(),
            data: ArrayData::Index {
                shape: vec![data.len()],
                data,
            },
        }
    }
}

/// Real arrays are stored as f32 when every value survives the round trip,
/// otherwise as f64, so encoding is always lossless.
pub fn encode_blob(arrays: &[NamedArray]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        let (dtype, shape, payload): (DType, &[usize], Vec<u8>) = match &a.data {
            ArrayData::Real(t) => {
                if t.data().iter().all(|v| (*v as f32) as f64 == *v) {
                    let p = t.data().iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
                    (DType::F32, t.shape(), p)
                } else {
                    let p = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                    (DType::F64, t.shape(), p)
                }
            }
            ArrayData::Index { shape, data } => {
                let p = data.iter().flat_map(|v| v.to_le_bytes()).collect();
                (DType::U32, shape.as_slice(), p)
            }
        };
        out.extend_from_slice(&(dtype as u32).to_le_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    record: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.record,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
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

/// Decodes a blob; `record` names the source in error messages.
pub fn decode_blob(bytes: &[u8], record: &str) -> Result<Vec<NamedArray>> {
    if bytes.len() < BLOB_MAGIC.len() + 8 + 32 {
        return Err(Error::format(record, "blob too short"));
    }
    if &bytes[..8] != BLOB_MAGIC {
        return Err(Error::format(record, "bad magic"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader {
        buf: body,
        pos: 8,
        record,
    };
    let version = r.u32("version")?;
    if version != BLOB_VERSION {
        return Err(Error::format(
            record,
            format!("unsupported blob version {version}"),
        ));
    }
    let count = r.u32("array count")? as usize;
    let mut arrays = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(record, "array name is not UTF-8"))?
            .to_string();
        let code = r.u32("dtype")?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::format(record, format!("unknown dtype code {code}")))?;
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(record, format!("array {name}: bad rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::format(record, format!("array {name}: extents overflow")))?;
        let len = r.u64("payload length")? as usize;
        if Some(len) != n.checked_mul(dtype.width()) {
            return Err(Error::format(
                record,
                format!(
                    "array {name}: length header {len} does not match extents {shape:?}"
                ),
            ));
        }
        let payload = r.take(len, "payload")?;
        let data = match dtype {
            DType::F32 => ArrayData::Real(Tensor::new(
                shape,
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            )?),
            DType::F64 => ArrayData::Real(Tensor::new(
                shape,
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )?),
            DType::U32 => ArrayData::Index {
                shape,
                data: payload
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            },
        };
        arrays.push(NamedArray { name, data });
    }
    if r.pos != body.len() {
        return Err(Error::format(record, "trailing bytes after last array"));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::format(record, "checksum mismatch"));
    }
    Ok(arrays)
}

/// Looks up arrays of a decoded blob by name.
pub struct BlobView<'a> {
    arrays: &'a [NamedArray],
    record: &'a str,
}

impl<'a> BlobView<'a> {
    pub fn new(arrays: &'a [NamedArray], record: &'a str) -> Self {
        BlobView { arrays, record }
    }

    fn find(&self, name: &str) -> Result<&'a ArrayData> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .map(|a| &a.data)
            .ok_or_else(|| Error::format(self.record, format!("missing array {name}")))
    }

    pub fn real(&self, name: &str) -> Result<Tensor> {
        match self.find(name)? {
            ArrayData::Real(t) => Ok(t.clone()),
            _ => Err(Error::format(self.record, format!("array {name} is not real-valued"))),
        }
    }

    pub fn index(&self, name: &str) -> Result<Vec<usize>> {
        match self.find(name)? {
            ArrayData::Index { data, .. } => Ok(data.iter().map(|&v| v as usize).collect()),
            _ => Err(Error::format(self.record, format!("array {name} is not an index array"))),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.arrays.iter().any(|a| a.name == name)
    }
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path) -> Result<Vec<NamedArray>> {
    let bytes = read_file(path)?;
    decode_blob(&bytes, &path.display().to_string())
}

/// Populates `final_dir` through a temporary sibling directory that is
/// renamed into place once `fill` succeeds.
pub fn write_dir_atomic(final_dir: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = final_dir
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a directory path: {}", final_dir.display())))?;
    let tmp = final_dir.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    fill(&tmp)?;
    if final_dir.exists() {
        fs::remove_dir_all(final_dir).map_err(|e| Error::io(final_dir, e))?;
    }
    fs::rename(&tmp, final_dir).map_err(|e| Error::io(final_dir, e))
}

/// Parsed `key = value` text with optional `[section]` headers. Keys inside
/// a section are stored as `section.key`; order is preserved.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    pub entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str, record: &str) -> Result<Self> {
        let mut section = String::new();
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::format(record, format!("line {}: unterminated section", lineno + 1)))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(record, format!("line {}: expected key = value", lineno + 1)))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            entries.push((key, v.trim().to_string()));
        }
        Ok(KeyValues { entries })
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str, record: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format(record, format!("missing key {key}")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str, record: &str) -> Result<T> {
        let raw = self.require(key, record)?;
        raw.parse()
            .map_err(|_| Error::format(record, format!("bad value for {key}: {raw}")))
    }
}

/// Parses space-separated `name=value` fields of a record line.
pub fn record_fields(line: &str) -> Vec<(&str, &str)> {
    line.split_whitespace()
        .filter_map(|f| f.split_once('='))
        .collect()
}

pub fn join_f64(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_f64_list(raw: &str, record: &str) -> Result<Vec<f64>> {
    raw.split_whitespace()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::format(record, format!("bad number {s}")))
        })
        .collect()
}
