//! File formats and synthetic data.
//!
//! # Tensor dump (`.vltd`)
//!
//! ```text
//! offset  size        field
//! 0       4           magic "VLTD"
//! 4       1           version = 1
//! 5       1           dtype: 1 = f32, 2 = f64
//! 6       1           ndim
//! 7       1           reserved = 0
//! 8       8 * ndim    dims, u64 little-endian
//! ...     prod(dims) * size(dtype)   payload, row-major little-endian
//! ```
//!
//! Saving `f64` data as `f32` rounds every value; every other round trip is
//! bit-exact.
//!
//! # IDX
//!
//! Big-endian: two zero bytes, a type code (only `0x08`, unsigned byte, is
//! supported), the dimension count, then one `u32` per dimension and the
//! payload. Gzip-compressed files are detected by their magic and inflated
//! transparently.
//!
//! # Manifests
//!
//! Plain UTF-8 `key=value` lines, LF-terminated, in insertion order. Blank
//! lines and lines starting with `#` are ignored on read.

use std::fmt::Display;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DUMP_MAGIC: &[u8; 4] = b"VLTD";
pub const DUMP_VERSION: u8 = 1;
const DUMP_HEADER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpDtype {
    F32 = 1,
    F64 = 2,
}

impl FromStr for DumpDtype {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DumpDtype::F32),
            "f64" => Ok(DumpDtype::F64),
            other => Err(Error::invalid(format!("dtype must be f32 or f64, got `{other}`"))),
        }
    }
}

impl DumpDtype {
    fn size(self) -> usize {
        match self {
            DumpDtype::F32 => 4,
            DumpDtype::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DumpDtype::F32),
            2 => Some(DumpDtype::F64),
            _ => None,
        }
    }
}

/// Serializes a tensor into the dump layout.
pub fn encode_dump(t: &Tensor, dtype: DumpDtype) -> Result<Vec<u8>> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::invalid(format!("{} dimensions exceed the format", t.ndim())));
    }
    let mut out = Vec::with_capacity(DUMP_HEADER + 8 * t.ndim() + t.len() * dtype.size());
    out.extend_from_slice(DUMP_MAGIC);
    out.extend_from_slice(&[DUMP_VERSION, dtype as u8, t.ndim() as u8, 0]);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DumpDtype::F64 => t
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DumpDtype::F32 => t
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    Ok(out)
}

/// Parses the dump layout; `origin` only labels errors.
pub fn decode_dump(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    if bytes.len() < DUMP_HEADER {
        return Err(Error::Truncated {
            path: origin.into(),
            expected: DUMP_HEADER as u64,
            found: bytes.len() as u64,
        });
    }
    if &bytes[..4] != DUMP_MAGIC {
        return Err(Error::format(origin, format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != DUMP_VERSION {
        return Err(Error::format(origin, format!("unsupported version {}", bytes[4])));
    }
    let dtype = DumpDtype::from_code(bytes[5])
        .ok_or_else(|| Error::format(origin, format!("unknown dtype code {}", bytes[5])))?;
    let ndim = bytes[6] as usize;
    if bytes[7] != 0 {
        return Err(Error::format(origin, "reserved header byte is not zero"));
    }
    let dims_end = DUMP_HEADER + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(Error::Truncated {
            path: origin.into(),
            expected: dims_end as u64,
            found: bytes.len() as u64,
        });
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut count: u64 = 1;
    for chunk in bytes[DUMP_HEADER..dims_end].chunks_exact(8) {
        let d = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::format(origin, "element count overflows"))?;
        shape.push(d as usize);
    }
    let expected = (count as u128) * dtype.size() as u128 + dims_end as u128;
    if (bytes.len() as u128) < expected {
        return Err(Error::Truncated {
            path: origin.into(),
            expected: expected.min(u64::MAX as u128) as u64,
            found: bytes.len() as u64,
        });
    }
    if (bytes.len() as u128) > expected {
        return Err(Error::format(
            origin,
            format!("{} trailing bytes", bytes.len() as u128 - expected),
        ));
    }
    let payload = &bytes[dims_end..];
    let data: Vec<f64> = match dtype {
        DumpDtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
        DumpDtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect(),
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(origin, "payload contains NaN or infinity"));
    }
    Tensor::new(shape, data)
}

pub fn save_dump(path: &Path, t: &Tensor, dtype: DumpDtype) -> Result<()> {
    let bytes = encode_dump(t, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_dump(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dump(&bytes, path)
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an unsigned-byte IDX payload into `[0, 1]` floats.
pub fn decode_idx(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: origin.into(),
            expected: 4,
            found: bytes.len() as u64,
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::format(origin, "IDX magic must start with two zero bytes"));
    }
    if bytes[2] != 0x08 {
        return Err(Error::format(
            origin,
            format!("unsupported IDX type code {:#04x}", bytes[2]),
        ));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(Error::format(origin, "IDX file declares zero dimensions"));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: origin.into(),
            expected: header as u64,
            found: bytes.len() as u64,
        });
    }
    let shape: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4-byte chunk")) as usize)
        .collect();
    let expected = shape
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .and_then(|count| count.checked_add(header as u64))
        .ok_or_else(|| Error::format(origin, "IDX dimensions overflow"))?;
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated {
            path: origin.into(),
            expected,
            found: bytes.len() as u64,
        });
    }
    if bytes.len() as u64 > expected {
        return Err(Error::format(
            origin,
            format!("{} trailing bytes", bytes.len() as u64 - expected),
        ));
    }
    let data = bytes[header..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(shape, data)
}

/// Loads an IDX file (optionally gzip-compressed).
pub fn load_idx(path: &Path) -> Result<Tensor> {
    decode_idx(&read_maybe_gzip(path)?, path)
}

/// Writes `values` (already in `0..=255`) as an unsigned-byte IDX file.
pub fn encode_idx(shape: &[usize], values: &[u8]) -> Result<Vec<u8>> {
    if shape.iter().product::<usize>() != values.len() || shape.is_empty() {
        return Err(Error::invalid("IDX shape does not match payload"));
    }
    let mut out = vec![0, 0, 0x08, shape.len() as u8];
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::invalid("IDX dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(values);
    Ok(out)
}

/// Flattened image set with pixels in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub name: String,
    pub source: String,
    /// `n × pixels`.
    pub images: Tensor,
}

/// Reads a tensor dump or (optionally gzipped) IDX file as an `n × features`
/// matrix; trailing axes are flattened.
pub fn load_matrix(path: &Path) -> Result<Tensor> {
    let bytes = read_maybe_gzip(path)?;
    let t = if bytes.starts_with(DUMP_MAGIC) {
        decode_dump(&bytes, path)?
    } else {
        decode_idx(&bytes, path)?
    };
    flatten_rows(t, path)
}

fn flatten_rows(t: Tensor, path: &Path) -> Result<Tensor> {
    let shape = t.shape().to_vec();
    match shape.len() {
        0 => Err(Error::format(path, "expected at least one axis")),
        1 => t.reshape(&[shape[0], 1]),
        _ => {
            let rest = shape[1..].iter().product();
            t.reshape(&[shape[0], rest])
        }
    }
}

impl DatasetHandle {
    /// Opens a tensor dump or IDX image file; pixels must lie in `[0, 1]`.
    pub fn open(path: &Path, limit: Option<usize>) -> Result<Self> {
        let t = load_matrix(path)?;
        let (n, m) = t.dims2()?;
        let keep = limit.map_or(n, |l| l.min(n));
        let images = Tensor::new(vec![keep, m], t.into_data()[..keep * m].to_vec())?;
        let mut handle = Self::from_tensor(
            path.file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            images,
        )
        .map_err(|e| Error::format(path, e.to_string()))?;
        handle.source = path.display().to_string();
        Ok(handle)
    }

    /// Loads an IDX image file, keeping at most `limit` images.
    pub fn from_idx(path: &Path, limit: Option<usize>) -> Result<Self> {
        let t = load_idx(path)?;
        let n = t.rows();
        let keep = limit.map_or(n, |l| l.min(n));
        let width = t.cols();
        let data = t.into_data()[..keep * width].to_vec();
        Ok(Self {
            name: path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            source: path.display().to_string(),
            images: Tensor::new(vec![keep, width], data)?,
        })
    }

    pub fn from_tensor(name: impl Into<String>, images: Tensor) -> Result<Self> {
        let (_, _) = images.dims2()?;
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("dataset pixels must lie in [0, 1]"));
        }
        Ok(Self {
            name: name.into(),
            source: "memory".into(),
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }
}

/// Ordered `key=value` text file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_string().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    /// Inserts or replaces, keeping the original position on replace.
    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::invalid(format!("missing key `{key}`")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::invalid(format!("cannot parse `{key}={raw}`")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Overlays `other` on top of `self` (later wins).
    pub fn merge(&mut self, other: &Manifest) {
        for (k, v) in other.entries() {
            self.set(k, v);
        }
    }
}

impl std::fmt::Display for Manifest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Random band-limited signals, one per row, each normalized to zero mean.
///
/// Row `r` is `Σ_{f=1..cap} sin(2π f t / n_points + φ_f) / f` with uniform
/// random phases, so its population variance is `Σ 1/(2 f²)`. `smoothness`
/// lies in `[0, 1]`; `1` keeps only the fundamental, `0` goes up to
/// `n_points/2 - 1`.
pub fn gen_curve_dataset(
    rng: &mut Rng,
    n_points: usize,
    n_signals: usize,
    smoothness: f64,
) -> Result<Tensor> {
    if n_points < 8 || n_signals == 0 {
        return Err(Error::invalid(format!(
            "curve dataset needs n_points >= 8 and n_signals >= 1, got {n_points}, {n_signals}"
        )));
    }
    if !(0.0..=1.0).contains(&smoothness) {
        return Err(Error::invalid(format!("smoothness {smoothness} outside [0, 1]")));
    }
    let cap = curve_frequency_cap(n_points, smoothness);
    let mut data = Vec::with_capacity(n_points * n_signals);
    for _ in 0..n_signals {
        let phases: Vec<f64> = (0..cap)
            .map(|_| rng.uniform_range(0.0, std::f64::consts::TAU))
            .collect();
        let mut row: Vec<f64> = (0..n_points)
            .map(|t| {
                phases
                    .iter()
                    .enumerate()
                    .map(|(i, ph)| {
                        let f = (i + 1) as f64;
                        (std::f64::consts::TAU * f * t as f64 / n_points as f64 + ph).sin() / f
                    })
                    .sum()
            })
            .collect();
        let mean = row.iter().sum::<f64>() / n_points as f64;
        row.iter_mut().for_each(|v| *v -= mean);
        data.extend(row);
    }
    Tensor::new(vec![n_signals, n_points], data)
}

/// Highest frequency used by [`gen_curve_dataset`].
pub fn curve_frequency_cap(n_points: usize, smoothness: f64) -> usize {
    let span = (n_points / 2 - 2) as f64;
    1 + ((1.0 - smoothness) * span).floor() as usize
}

/// Gaussian cloud with principal standard deviations `stds` rotated
/// counter-clockwise by `rotation` radians.
pub fn gen_anisotropic_cloud(rng: &mut Rng, n: usize, stds: [f64; 2], rotation: f64) -> Result<Tensor> {
    if stds.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!("stds must be positive, got {stds:?}")));
    }
    let (s, c) = rotation.sin_cos();
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let a = stds[0] * rng.normal();
        let b = stds[1] * rng.normal();
        data.push(c * a - s * b);
        data.push(s * a + c * b);
    }
    Tensor::new(vec![n, 2], data)
}

/// Default locations of the bundled 10k-image MNIST subset, relative to the
/// repository root.
pub fn bundled_mnist_images() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist10k-images-idx3-ubyte.gz")
}
