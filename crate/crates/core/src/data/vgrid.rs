//! `.vgrid` file format: volumes, label maps, and displacement fields.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size        field
//! 0       8           magic "VOXGRID\0"
//! 8       2           version (u16, currently 1)
//! 10      1           dtype code (1 = f64, 2 = u16)
//! 11      1           rank (3 for volumes/labels, 4 for fields)
//! 12      4*rank      extents (u32 each; fields lead with the channel
//!                     count 3, then D,H,W)
//! ..      4           spacing (f32, mm per voxel)
//! ..      rest        payload, row-major (depth-major), channel-major
//!                     for fields, values little-endian
//! ```
//!
//! A JSON sidecar with the same stem and a `.json` suffix mirrors the
//! header for quick inspection with ordinary tools; the binary header is
//! authoritative and loaders never read the sidecar.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabelMap, Volume};
use crate::error::{Error, Result};
use crate::tensor::TensorData;

const MAGIC: &[u8; 8] = b"VOXGRID\0";
const VERSION: u16 = 1;

/// Element type stored in a grid file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    U16,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 1,
            DType::U16 => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F64),
            2 => Some(DType::U16),
            _ => None,
        }
    }

    fn elem_size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::U16 => 2,
        }
    }
}

/// Parsed header of a `.vgrid` file; obtainable without touching the
/// payload via [`inspect`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u16,
    pub dtype: DType,
    pub extents: Vec<u32>,
    pub spacing: f32,
}

impl Header {
    pub fn numel(&self) -> usize {
        self.extents.iter().map(|&e| e as usize).product()
    }
}

pub fn save_volume(path: &Path, volume: &Volume) -> Result<()> {
    let [d, h, w] = volume.dims();
    let header = Header {
        version: VERSION,
        dtype: DType::F64,
        extents: vec![d as u32, h as u32, w as u32],
        spacing: volume.spacing() as f32,
    };
    write_grid(path, &header, |out| {
        for v in volume.data() {
            out.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))?;
        }
        Ok(())
    })
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (header, payload) = read_grid(path)?;
    let dims = expect_rank3(path, &header, DType::F64)?;
    Volume::new(dims, header.spacing as f64, decode_f64(&payload))
}

pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let [d, h, w] = labels.dims();
    let header = Header {
        version: VERSION,
        dtype: DType::U16,
        extents: vec![d as u32, h as u32, w as u32],
        spacing: 1.0,
    };
    write_grid(path, &header, |out| {
        for v in labels.data() {
            out.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))?;
        }
        Ok(())
    })
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let (header, payload) = read_grid(path)?;
    let dims = expect_rank3(path, &header, DType::U16)?;
    let data = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    LabelMap::new(dims, data)
}

/// Save a `[3,D,H,W]` displacement field (voxel units).
pub fn save_field(path: &Path, field: &TensorData, spacing: f64) -> Result<()> {
    let shape = field.shape();
    if shape.len() != 4 || shape[0] != 3 {
        return Err(Error::shape(format!(
            "expected a [3,D,H,W] field, got {:?}",
            shape
        )));
    }
    let header = Header {
        version: VERSION,
        dtype: DType::F64,
        extents: shape.iter().map(|&e| e as u32).collect(),
        spacing: spacing as f32,
    };
    write_grid(path, &header, |out| {
        for v in field.data() {
            out.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))?;
        }
        Ok(())
    })
}

pub fn load_field(path: &Path) -> Result<TensorData> {
    let (header, payload) = read_grid(path)?;
    if header.dtype != DType::F64 || header.extents.len() != 4 || header.extents[0] != 3 {
        return Err(Error::FormatMismatch {
            path: path.to_path_buf(),
            reason: format!(
                "expected a rank-4 f64 field with 3 channels, found dtype {:?} extents {:?}",
                header.dtype, header.extents
            ),
        });
    }
    let shape: Vec<usize> = header.extents.iter().map(|&e| e as usize).collect();
    TensorData::new(shape, decode_f64(&payload))
}

/// Read only the header. Used by the CLI to describe files without paying
/// for the payload.
pub fn inspect(path: &Path) -> Result<Header> {
    let file = open(path)?;
    let mut reader = BufReader::new(file);
    read_header(path, &mut reader)
}

fn write_grid(
    path: &Path,
    header: &Header,
    payload: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| io_err(path, e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&header.version.to_le_bytes()).map_err(io)?;
    out.write_all(&[header.dtype.code(), header.extents.len() as u8])
        .map_err(io)?;
    for &e in &header.extents {
        out.write_all(&e.to_le_bytes()).map_err(io)?;
    }
    out.write_all(&header.spacing.to_le_bytes()).map_err(io)?;
    payload(&mut out)?;
    out.flush().map_err(io)?;
    write_sidecar(path, header)
}

fn write_sidecar(path: &Path, header: &Header) -> Result<()> {
    let sidecar = path.with_extension("json");
    let body = serde_json::to_string_pretty(header).expect("header serializes");
    std::fs::write(&sidecar, body + "\n").map_err(|e| io_err(&sidecar, e))
}

fn read_grid(path: &Path) -> Result<(Header, Vec<u8>)> {
    let file = open(path)?;
    let mut reader = BufReader::new(file);
    let header = read_header(path, &mut reader)?;
    let expected = header.numel() * header.dtype.elem_size();
    let mut payload = Vec::with_capacity(expected);
    reader
        .read_to_end(&mut payload)
        .map_err(|e| io_err(path, e))?;
    if payload.len() != expected {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            reason: format!(
                "payload holds {} bytes, header promises {}",
                payload.len(),
                expected
            ),
        });
    }
    Ok((header, payload))
}

fn read_header(path: &Path, reader: &mut impl Read) -> Result<Header> {
    let corrupt = |reason: &str| Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut fixed = [0u8; 12];
    reader
        .read_exact(&mut fixed)
        .map_err(|_| corrupt("file shorter than the fixed header"))?;
    if &fixed[..8] != MAGIC {
        return Err(Error::FormatMismatch {
            path: path.to_path_buf(),
            reason: "magic bytes do not spell VOXGRID".to_string(),
        });
    }
    let version = u16::from_le_bytes([fixed[8], fixed[9]]);
    if version != VERSION {
        return Err(Error::FormatMismatch {
            path: path.to_path_buf(),
            reason: format!("unsupported version {} (this build reads {})", version, VERSION),
        });
    }
    let dtype = DType::from_code(fixed[10]).ok_or_else(|| Error::FormatMismatch {
        path: path.to_path_buf(),
        reason: format!("unknown dtype code {}", fixed[10]),
    })?;
    let rank = fixed[11] as usize;
    if !(1..=4).contains(&rank) {
        return Err(corrupt(&format!("implausible rank {}", rank)));
    }
    let mut extents = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        reader
            .read_exact(&mut b)
            .map_err(|_| corrupt("header truncated inside the extents"))?;
        let e = u32::from_le_bytes(b);
        if e == 0 {
            return Err(corrupt("zero extent"));
        }
        extents.push(e);
    }
    let mut b = [0u8; 4];
    reader
        .read_exact(&mut b)
        .map_err(|_| corrupt("header truncated before spacing"))?;
    let spacing = f32::from_le_bytes(b);
    if !spacing.is_finite() || spacing <= 0.0 {
        return Err(corrupt("non-positive spacing"));
    }
    Ok(Header {
        version,
        dtype,
        extents,
        spacing,
    })
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::FileNotFound {
                path: path.to_path_buf(),
            }
        } else {
            io_err(path, e)
        }
    })
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: PathBuf::from(path),
        source,
    }
}

fn decode_f64(payload: &[u8]) -> Vec<f64> {
    payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

fn expect_rank3(path: &Path, header: &Header, dtype: DType) -> Result<[usize; 3]> {
    if header.dtype != dtype || header.extents.len() != 3 {
        return Err(Error::FormatMismatch {
            path: path.to_path_buf(),
            reason: format!(
                "expected a rank-3 {:?} grid, found dtype {:?} extents {:?}",
                dtype, header.dtype, header.extents
            ),
        });
    }
    Ok([
        header.extents[0] as usize,
        header.extents[1] as usize,
        header.extents[2] as usize,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_pair, SyntheticPairSpec};

    fn pair() -> crate::data::SyntheticPair {
        make_pair(&SyntheticPairSpec {
            extents: [8, 8, 12],
            num_labels: 2,
            smoothness: 1,
            max_displacement: 1.5,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn volume_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixed.vgrid");
        let pair = pair();
        save_volume(&path, &pair.fixed).unwrap();
        let loaded = load_volume(&path).unwrap();
        assert_eq!(loaded, pair.fixed);
        assert!(path.with_extension("json").exists());
    }

    #[test]
    fn labels_and_field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pair = pair();
        let lp = dir.path().join("labels.vgrid");
        save_labels(&lp, &pair.fixed_labels).unwrap();
        assert_eq!(load_labels(&lp).unwrap(), pair.fixed_labels);

        let fp = dir.path().join("field.vgrid");
        save_field(&fp, &pair.field_gt, 1.0).unwrap();
        let loaded = load_field(&fp).unwrap();
        assert_eq!(loaded.shape(), pair.field_gt.shape());
        assert_eq!(loaded.data(), pair.field_gt.data());
    }

    #[test]
    fn missing_file_is_not_found() {
        let err = load_volume(Path::new("/nonexistent/volume.vgrid")).unwrap_err();
        assert!(matches!(err, Error::FileNotFound { .. }), "{err}");
    }

    #[test]
    fn truncated_file_is_corrupt_not_a_crash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.vgrid");
        let pair = pair();
        save_volume(&path, &pair.fixed).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_volume(&path).unwrap_err();
        assert!(matches!(err, Error::CorruptFile { .. }), "{err}");
    }

    #[test]
    fn wrong_magic_is_format_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("other.vgrid");
        std::fs::write(&path, b"NOTAGRIDxxxxxxxxxxxxxxxx").unwrap();
        let err = load_volume(&path).unwrap_err();
        assert!(matches!(err, Error::FormatMismatch { .. }), "{err}");
    }

    #[test]
    fn dtype_mismatch_is_format_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.vgrid");
        save_labels(&path, &pair().fixed_labels).unwrap();
        let err = load_volume(&path).unwrap_err();
        assert!(matches!(err, Error::FormatMismatch { .. }), "{err}");
    }

    #[test]
    fn inspect_reads_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.vgrid");
        let pair = pair();
        save_volume(&path, &pair.fixed).unwrap();
        // Chop the payload off entirely; the header must still parse.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..28]).unwrap();
        let header = inspect(&path).unwrap();
        assert_eq!(header.extents, vec![8, 8, 12]);
        assert_eq!(header.dtype, DType::F64);
        assert_eq!(header.spacing, 1.0);
    }
}
