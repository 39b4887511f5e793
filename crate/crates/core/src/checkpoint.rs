//! Single-file little-endian checkpoint container.
//!
//! ```text
//! "UFLW" | u32 version | u64 len, config text
//!        | u64 count | count x (u64 len, name | u8 dtype | u8 rank | rank x u64 dim | payload)
//!        | u64 len, rng state
//! ```
//!
//! dtype tags: 0 = f32, 1 = f64, 2 = u64. The training step is stored as the
//! rank-0 u64 array `state.step`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::Real;

pub const MAGIC: &[u8; 4] = b"UFLW";
pub const VERSION: u32 = 1;
const STEP_KEY: &str = "state.step";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn tag(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::U64(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn from_array2<T: Real>(a: &Array2<T>) -> Self {
        let values: Vec<T> = a.iter().copied().collect();
        let data = match T::DTYPE_TAG {
            0 => ArrayData::F32(values.iter().map(|v| v.to_f32().unwrap()).collect()),
            _ => ArrayData::F64(values.iter().map(|v| v.as_f64()).collect()),
        };
        Self { shape: a.shape().to_vec(), data }
    }

    /// Converts to a matrix of the requested element type; rank must be 2.
    pub fn to_array2<T: Real>(&self) -> Result<Array2<T>> {
        if self.shape.len() != 2 {
            return Err(Error::Checkpoint(format!("expected rank-2 array, got shape {:?}", self.shape)));
        }
        let values: Vec<T> = match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| T::from_f32(x).unwrap()).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
            ArrayData::U64(_) => return Err(Error::Checkpoint("integer array where floats expected".into())),
        };
        Array2::from_shape_vec((self.shape[0], self.shape[1]), values).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub arrays: BTreeMap<String, NamedArray>,
    pub step: u64,
    pub rng_state: Vec<u8>,
}

impl Checkpoint {
    pub fn new(config: RunConfig, step: u64) -> Self {
        Self { version: VERSION, config, arrays: BTreeMap::new(), step, rng_state: Vec::new() }
    }

    pub fn insert<T: Real>(&mut self, name: impl Into<String>, a: &Array2<T>) {
        self.arrays.insert(name.into(), NamedArray::from_array2(a));
    }

    pub fn get<T: Real>(&self, name: &str) -> Result<Array2<T>> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?
            .to_array2()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_bytes(&mut out, self.config.to_text().as_bytes());
        let step = NamedArray { shape: vec![], data: ArrayData::U64(vec![self.step]) };
        let mut all: Vec<(&str, &NamedArray)> = self.arrays.iter().map(|(k, v)| (k.as_str(), v)).collect();
        all.push((STEP_KEY, &step));
        out.extend_from_slice(&(all.len() as u64).to_le_bytes());
        for (name, arr) in all {
            put_bytes(&mut out, name.as_bytes());
            out.push(arr.data.tag());
            out.push(arr.shape.len() as u8);
            for &d in &arr.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &arr.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        put_bytes(&mut out, &self.rng_state);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic (not a checkpoint file)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let text = String::from_utf8(r.blob()?.to_vec()).map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let config = RunConfig::parse(&text, "<checkpoint>")?;
        let count = r.u64()? as usize;
        let mut arrays = BTreeMap::new();
        let mut step = None;
        for _ in 0..count {
            let name = String::from_utf8(r.blob()?.to_vec()).map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match tag {
                0 => ArrayData::F32(r.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => ArrayData::F64(r.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => ArrayData::U64(r.take(8 * n)?.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
                other => return Err(Error::Checkpoint(format!("unknown dtype tag {other} for `{name}`"))),
            };
            debug_assert_eq!(data.len(), n);
            if name == STEP_KEY {
                match data {
                    ArrayData::U64(v) if v.len() == 1 => step = Some(v[0]),
                    _ => return Err(Error::Checkpoint("malformed step record".into())),
                }
            } else {
                arrays.insert(name, NamedArray { shape, data });
            }
        }
        let rng_state = r.blob()?.to_vec();
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let step = step.ok_or_else(|| Error::Checkpoint("missing step record".into()))?;
        Ok(Self { version, config, arrays, step, rng_state })
    }

    /// Atomic: the target is replaced only after the full file is on disk.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes();
        write_atomic(path.as_ref(), |f| f.write_all(&bytes))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

/// Writes through a sibling temp file and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, write: impl FnOnce(&mut File) -> std::io::Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        write(&mut f)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
}

/// Serializes a ChaCha stream position: seed, stream id and word position.
pub fn encode_rng(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = rng.get_seed().to_vec();
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

pub fn decode_rng(bytes: &[u8]) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    if bytes.len() != 32 + 8 + 16 {
        return Err(Error::Checkpoint(format!("rng state has {} bytes, expected 56", bytes.len())));
    }
    let seed: [u8; 32] = bytes[..32].try_into().unwrap();
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(u64::from_le_bytes(bytes[32..40].try_into().unwrap()));
    rng.set_word_pos(u128::from_le_bytes(bytes[40..56].try_into().unwrap()));
    Ok(rng)
}
