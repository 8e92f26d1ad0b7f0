//! GLAP-TENSOR: a minimal binary container for little-endian f32 arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes   "GLAPTNSR"
//! version u32       currently 1
//! dtype   u8        0 = float32
//! ndim    u8
//! dims    ndim * u64
//! payload 4 * prod(dims) bytes, row-major f32
//! crc     u32       CRC32 (IEEE) over the payload bytes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{GlapError, Result};

pub const MAGIC: [u8; 8] = *b"GLAPTNSR";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// Guard against absurd headers before allocating.
const MAX_ELEMENTS: u64 = 1 << 30;

/// An f32 array with its shape, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    dims: Vec<usize>,
    values: Vec<f32>,
}

impl TensorData {
    pub fn new(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if dims.is_empty() || expect != values.len() {
            return Err(GlapError::Shape(format!(
                "dims {dims:?} do not describe {} values",
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    /// Number of rows along the leading dimension.
    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Elements per leading-dimension row.
    pub fn row_len(&self) -> usize {
        self.dims[1..].iter().product()
    }

    /// Slice of row `i` along the leading dimension (the flattened
    /// trailing dimensions).
    pub fn row(&self, i: usize) -> Result<&[f32]> {
        if i >= self.rows() {
            return Err(GlapError::InvalidInput(format!(
                "row {i} out of range for leading dimension {}",
                self.rows()
            )));
        }
        let w = self.row_len();
        Ok(&self.values[i * w..(i + 1) * w])
    }
}

fn corrupt(path: &Path, message: impl Into<String>) -> GlapError {
    GlapError::Corrupt {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes `values` with shape `dims` to `path`.
pub fn write_tensor(path: &Path, dims: &[usize], values: &[f32]) -> Result<()> {
    let expect: usize = dims.iter().product();
    if dims.is_empty() || dims.len() > u8::MAX as usize || expect != values.len() {
        return Err(GlapError::Shape(format!(
            "dims {dims:?} do not describe {} values",
            values.len()
        )));
    }
    let file = File::create(path).map_err(|e| GlapError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| GlapError::io(path, e);

    w.write_all(&MAGIC).map_err(io_err)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&[DTYPE_F32, dims.len() as u8]).map_err(io_err)?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
    }
    let mut crc = crc32fast::Hasher::new();
    for &v in values {
        let bytes = v.to_le_bytes();
        crc.update(&bytes);
        w.write_all(&bytes).map_err(io_err)?;
    }
    w.write_all(&crc.finalize().to_le_bytes()).map_err(io_err)?;
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Reads a tensor back, verifying magic, version, dtype, and the payload
/// CRC.
pub fn read_tensor(path: &Path) -> Result<TensorData> {
    let file = File::open(path).map_err(|e| GlapError::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact(&mut r, path, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(corrupt(path, "bad magic; not a GLAP-TENSOR file"));
    }
    let mut version = [0u8; 4];
    read_exact(&mut r, path, &mut version, "version")?;
    let version = u32::from_le_bytes(version);
    if version != FORMAT_VERSION {
        return Err(GlapError::Version {
            path: path.to_path_buf(),
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let mut head = [0u8; 2];
    read_exact(&mut r, path, &mut head, "dtype/ndim")?;
    let (dtype, ndim) = (head[0], head[1] as usize);
    if dtype != DTYPE_F32 {
        return Err(corrupt(path, format!("unsupported dtype code {dtype}")));
    }
    if ndim == 0 {
        return Err(corrupt(path, "ndim must be at least 1"));
    }

    let mut dims = Vec::with_capacity(ndim);
    let mut total: u64 = 1;
    for k in 0..ndim {
        let mut d = [0u8; 8];
        read_exact(&mut r, path, &mut d, "dims")?;
        let d = u64::from_le_bytes(d);
        total = total.saturating_mul(d);
        if total > MAX_ELEMENTS {
            return Err(corrupt(path, format!("dims too large at axis {k}")));
        }
        dims.push(d as usize);
    }

    let n = total as usize;
    let mut payload = vec![0u8; n * 4];
    read_exact(&mut r, path, &mut payload, "payload")?;
    let mut stored = [0u8; 4];
    read_exact(&mut r, path, &mut stored, "checksum")?;
    let stored = u32::from_le_bytes(stored);
    let computed = crc32fast::hash(&payload);
    if stored != computed {
        return Err(GlapError::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }

    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    TensorData::new(dims, values)
}

fn read_exact(r: &mut impl Read, path: &Path, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            corrupt(path, format!("truncated while reading {what}"))
        } else {
            GlapError::io(path, e)
        }
    })
}

/// Resolves a tensor path against a root directory unless it is already
/// absolute.
pub fn resolve_path(root: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tmp();
        let path = dir.path().join("t.gt");
        let values = vec![1.5f32, -2.0, 0.0, f32::MIN_POSITIVE, 1e30, -0.0];
        write_tensor(&path, &[2, 3], &values).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.dims(), &[2, 3]);
        assert_eq!(
            back.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn row_slicing_2d_and_3d() {
        let dir = tmp();
        let path = dir.path().join("t.gt");
        write_tensor(&path, &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = read_tensor(&path).unwrap();
        assert_eq!(t.row(1).unwrap(), &[3.0, 4.0]);

        let path3 = dir.path().join("t3.gt");
        let vals: Vec<f32> = (0..12).map(|v| v as f32).collect();
        write_tensor(&path3, &[2, 3, 2], &vals).unwrap();
        let t3 = read_tensor(&path3).unwrap();
        assert_eq!(t3.row_len(), 6);
        assert_eq!(t3.row(1).unwrap(), &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn row_out_of_range() {
        let dir = tmp();
        let path = dir.path().join("t.gt");
        write_tensor(&path, &[2, 2], &[0.0; 4]).unwrap();
        let t = read_tensor(&path).unwrap();
        assert!(t.row(2).is_err());
    }

    #[test]
    fn flipped_payload_byte_fails_crc() {
        let dir = tmp();
        let path = dir.path().join("t.gt");
        write_tensor(&path, &[1, 4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let header = 8 + 4 + 2 + 2 * 8;
        bytes[header + 5] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        match read_tensor(&path).unwrap_err() {
            GlapError::Checksum { stored, computed, .. } => assert_ne!(stored, computed),
            other => panic!("expected Checksum, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tmp();
        let path = dir.path().join("t.gt");
        std::fs::write(&path, b"NOTGLAPXrest").unwrap();
        assert!(matches!(
            read_tensor(&path).unwrap_err(),
            GlapError::Corrupt { .. }
        ));
    }

    #[test]
    fn future_version_rejected() {
        let dir = tmp();
        let path = dir.path().join("t.gt");
        write_tensor(&path, &[1, 1], &[0.0]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match read_tensor(&path).unwrap_err() {
            GlapError::Version { found, supported, .. } => {
                assert_eq!(found, 2);
                assert_eq!(supported, FORMAT_VERSION);
            }
            other => panic!("expected Version, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tmp();
        let path = dir.path().join("t.gt");
        write_tensor(&path, &[2, 2], &[0.0; 4]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 6]).unwrap();
        assert!(matches!(
            read_tensor(&path).unwrap_err(),
            GlapError::Corrupt { .. }
        ));
    }

    #[test]
    fn unsupported_dtype_rejected() {
        let dir = tmp();
        let path = dir.path().join("t.gt");
        write_tensor(&path, &[1, 1], &[0.0]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[12] = 7;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_tensor(&path).unwrap_err(),
            GlapError::Corrupt { .. }
        ));
    }
}
