//! Binary observation-dataset file.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   4 bytes  "HIFA"
//! version u32      currently 1
//! groups  u32      number of observation groups
//! m       u32      points per group
//! n       u32      frames per point
//! k       u32      patch side
//! d       u32      feature width
//! classes u32      label class count
//! then per group:
//!   coords        m * 3       f64
//!   labels        m           u16
//!   frame_ids     m * n       u32
//!   features      m*n*k*k*d   f32
//!   patch_labels  m*n*k*k     u16
//! ```

use std::fs;
use std::path::Path;

use hifanet_core::ObservationTensor;

use crate::CliError;

pub const DATASET_MAGIC: [u8; 4] = *b"HIFA";
pub const DATASET_VERSION: u32 = 1;

/// Decoded dataset: the observation groups plus the label class count they
/// were generated against.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub class_count: usize,
    pub groups: Vec<ObservationTensor>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatError {
    CorruptFile(String),
    VersionMismatch { found: u32, expected: u32 },
}

impl std::fmt::Display for FormatError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FormatError::CorruptFile(msg) => write!(f, "corrupt dataset file: {msg}"),
            FormatError::VersionMismatch { found, expected } => {
                write!(f, "dataset version {found}, this build reads {expected}")
            }
        }
    }
}

impl std::error::Error for FormatError {}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Data(e.to_string())
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.bytes.len() {
            return Err(FormatError::CorruptFile(format!(
                "unexpected end of file at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Serializes groups into the documented byte layout. All groups must share
/// the same dimensions.
pub fn encode_dataset(
    groups: &[ObservationTensor],
    class_count: usize,
) -> Result<Vec<u8>, FormatError> {
    let (m, n, k, d) = groups
        .first()
        .map(|g| (g.m, g.n, g.k, g.d))
        .unwrap_or((0, 0, 0, 0));
    for g in groups {
        if (g.m, g.n, g.k, g.d) != (m, n, k, d) {
            return Err(FormatError::CorruptFile("groups have mixed dimensions".into()));
        }
    }
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(&DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u32(groups.len() as u32);
    w.u32(m as u32);
    w.u32(n as u32);
    w.u32(k as u32);
    w.u32(d as u32);
    w.u32(class_count as u32);
    for g in groups {
        for c in &g.coords {
            w.f64(c[0]);
            w.f64(c[1]);
            w.f64(c[2]);
        }
        for &l in &g.labels {
            w.u16(l);
        }
        for &f in &g.frame_ids {
            w.u32(f);
        }
        for &f in &g.features {
            w.f32(f);
        }
        for &l in &g.patch_labels {
            w.u16(l);
        }
    }
    Ok(w.buf)
}

/// Parses the documented byte layout back into observation groups.
pub fn decode_dataset(bytes: &[u8]) -> Result<DatasetFile, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != DATASET_MAGIC {
        return Err(FormatError::CorruptFile(format!("bad magic {magic:02x?}")));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(FormatError::VersionMismatch { found: version, expected: DATASET_VERSION });
    }
    let groups = r.u32()? as usize;
    let m = r.u32()? as usize;
    let n = r.u32()? as usize;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let class_count = r.u32()? as usize;
    let mut out = Vec::with_capacity(groups);
    for _ in 0..groups {
        let mut g = ObservationTensor {
            m,
            n,
            k,
            d,
            features: Vec::with_capacity(m * n * k * k * d),
            patch_labels: Vec::with_capacity(m * n * k * k),
            coords: Vec::with_capacity(m),
            labels: Vec::with_capacity(m),
            frame_ids: Vec::with_capacity(m * n),
        };
        for _ in 0..m {
            g.coords.push([r.f64()?, r.f64()?, r.f64()?]);
        }
        for _ in 0..m {
            g.labels.push(r.u16()?);
        }
        for _ in 0..m * n {
            g.frame_ids.push(r.u32()?);
        }
        for _ in 0..m * n * k * k * d {
            g.features.push(r.f32()?);
        }
        for _ in 0..m * n * k * k {
            g.patch_labels.push(r.u16()?);
        }
        out.push(g);
    }
    if r.pos != bytes.len() {
        return Err(FormatError::CorruptFile(format!(
            "{} trailing bytes after the last group",
            bytes.len() - r.pos
        )));
    }
    Ok(DatasetFile { class_count, groups: out })
}

pub fn export_dataset(
    path: &Path,
    groups: &[ObservationTensor],
    class_count: usize,
) -> Result<(), CliError> {
    let bytes = encode_dataset(groups, class_count)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn import_dataset(path: &Path) -> Result<DatasetFile, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(decode_dataset(&bytes)?)
}
