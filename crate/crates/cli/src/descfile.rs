//! Binary keypoint + descriptor files.
//!
//! Layout (little endian): magic `SDSF`, `u32` version, `u32` count `N`,
//! `u32` dim, `N x 2` f32 coordinates, `N x dim` f32 descriptors, then a
//! `u64` holding the first eight bytes of the SHA-256 of everything before
//! it.

use std::path::Path;

use sandesc::geometry::Keypoint;
use sandesc::{Error, Matrix, Result};
use sha2::{Digest, Sha256};

pub const MAGIC: [u8; 4] = *b"SDSF";
pub const VERSION: u32 = 1;
/// Largest accepted deviation of a descriptor norm from one.
pub const NORM_TOL: f64 = 1e-4;

const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorFile {
    /// Keypoint positions in the original image frame.
    pub points: Vec<(f32, f32)>,
    /// One unit-norm row per point.
    pub descriptors: Matrix<f32>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn floats(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

impl DescriptorFile {
    pub fn new(points: Vec<(f32, f32)>, descriptors: Matrix<f32>) -> Result<Self> {
        if points.len() != descriptors.rows() {
            return Err(Error::Contract(format!(
                "{} keypoints but {} descriptors",
                points.len(),
                descriptors.rows()
            )));
        }
        Ok(DescriptorFile { points, descriptors })
    }

    pub fn from_keypoints(keypoints: &[Keypoint], descriptors: Matrix<f32>) -> Result<Self> {
        Self::new(
            keypoints.iter().map(|k| (k.x as f32, k.y as f32)).collect(),
            descriptors,
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn keypoints(&self) -> Vec<Keypoint> {
        self.points
            .iter()
            .map(|&(x, y)| Keypoint::new(x as f64, y as f64))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d) = (self.len(), self.dim());
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * (2 + d) + 8);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for &(x, y) in &self.points {
            out.extend_from_slice(&x.to_le_bytes());
            out.extend_from_slice(&y.to_le_bytes());
        }
        for v in self.descriptors.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            let found = &bytes[..bytes.len().min(4)];
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(&MAGIC).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        if bytes.len() < HEADER_LEN + 8 {
            return Err(Error::Truncated(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        let version = read_u32(bytes, 4);
        if version != VERSION {
            return Err(Error::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        let (n, d) = (read_u32(bytes, 8) as usize, read_u32(bytes, 12) as usize);
        let expected = n
            .checked_mul(2 + d)
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(HEADER_LEN + 8))
            .ok_or_else(|| Error::Format(format!("implausible header: {n} x {d}")))?;
        if bytes.len() < expected {
            return Err(Error::Truncated(format!(
                "expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        if bytes.len() > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after the checksum",
                bytes.len() - expected
            )));
        }
        let body = &bytes[..expected - 8];
        let stored = u64::from_le_bytes(bytes[expected - 8..].try_into().expect("8 bytes"));
        let computed = checksum(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let coords = floats(&body[HEADER_LEN..HEADER_LEN + 8 * n]);
        let points = coords.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let descriptors = Matrix::new(n, d, floats(&body[HEADER_LEN + 8 * n..]))?;
        for i in 0..n {
            let norm = descriptors
                .row(i)
                .iter()
                .map(|&v| v as f64 * v as f64)
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > NORM_TOL {
                return Err(Error::Format(format!("descriptor {i} has norm {norm}")));
            }
        }
        Ok(DescriptorFile { points, descriptors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
