//! SRMB: a minimal little-endian binary matrix container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SRMB"
//! 4       4     version (u32) = 1
//! 8       1     dtype (0 = f64, 1 = f32)
//! 9       8     rows (u64)
//! 17      8     cols (u64)
//! 25      ...   rows * cols values, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{Result, SrmError};
use crate::linalg::Matrix;

pub const MAGIC: [u8; 4] = *b"SRMB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 25;

const CHUNK_VALUES: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F64),
            1 => Some(Dtype::F32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f64" => Ok(Dtype::F64),
            "f32" => Ok(Dtype::F32),
            other => Err(format!("unknown dtype {other:?} (expected f64 or f32)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SrmbHeader {
    pub dtype: Dtype,
    pub rows: usize,
    pub cols: usize,
}

impl SrmbHeader {
    fn payload_bytes(&self) -> Option<u64> {
        (self.rows as u64)
            .checked_mul(self.cols as u64)?
            .checked_mul(self.dtype.size() as u64)
    }
}

/// Writes `mat` to `path`. `F32` narrows each value; values that came from
/// an `F32` file therefore round-trip exactly.
pub fn save_matrix(path: impl AsRef<Path>, mat: &Matrix, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    if let Some(pos) = mat.as_slice().iter().position(|x| !x.is_finite()) {
        return Err(SrmError::NonFinite(format!(
            "matrix for {} at flat index {pos}",
            path.display()
        )));
    }
    let file = File::create(path).map_err(|e| SrmError::io(path, e))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    let io = |e| SrmError::io(path, e);
    w.write_all(&MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&[dtype.code()]).map_err(io)?;
    w.write_all(&(mat.rows() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(mat.cols() as u64).to_le_bytes()).map_err(io)?;
    match dtype {
        Dtype::F64 => {
            for x in mat.as_slice() {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
        Dtype::F32 => {
            for x in mat.as_slice() {
                w.write_all(&(*x as f32).to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Like [`save_matrix`] but writes to a sibling temp file first and renames
/// it into place, so readers never observe a partial file.
pub fn save_matrix_atomic(path: impl AsRef<Path>, mat: &Matrix, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    save_matrix(&tmp, mat, dtype)?;
    std::fs::rename(&tmp, path).map_err(|e| SrmError::io(path, e))
}

fn parse_header(path: &Path, bytes: &[u8; HEADER_LEN as usize]) -> Result<SrmbHeader> {
    if bytes[0..4] != MAGIC {
        return Err(SrmError::format(path, "bad magic (expected SRMB)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(SrmError::format(path, format!("unsupported version {version}")));
    }
    let dtype = Dtype::from_code(bytes[8])
        .ok_or_else(|| SrmError::format(path, format!("unknown dtype code {}", bytes[8])))?;
    let rows = u64::from_le_bytes(bytes[9..17].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[17..25].try_into().unwrap());
    let too_big = || SrmError::format(path, format!("{rows}x{cols} overflows"));
    let rows = usize::try_from(rows).map_err(|_| too_big())?;
    let cols = usize::try_from(cols).map_err(|_| too_big())?;
    let header = SrmbHeader { dtype, rows, cols };
    if header.payload_bytes().is_none() || rows.checked_mul(cols).is_none() {
        return Err(too_big());
    }
    Ok(header)
}

fn open_checked(path: &Path) -> Result<(BufReader<File>, SrmbHeader)> {
    let file = File::open(path).map_err(|e| SrmError::io(path, e))?;
    let len = file.metadata().map_err(|e| SrmError::io(path, e))?.len();
    let mut r = BufReader::with_capacity(1 << 20, file);
    let mut bytes = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut bytes)
        .map_err(|_| SrmError::format(path, "truncated header"))?;
    let header = parse_header(path, &bytes)?;
    let expected = HEADER_LEN + header.payload_bytes().unwrap();
    if len != expected {
        return Err(SrmError::format(
            path,
            format!("file is {len} bytes, header implies {expected}"),
        ));
    }
    Ok((r, header))
}

pub fn read_header(path: impl AsRef<Path>) -> Result<SrmbHeader> {
    open_checked(path.as_ref()).map(|(_, h)| h)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<(Matrix, Dtype)> {
    let path = path.as_ref();
    let (mut r, header) = open_checked(path)?;
    let data = read_values(path, &mut r, header.dtype, header.rows * header.cols)?;
    Ok((Matrix::from_vec(header.rows, header.cols, data)?, header.dtype))
}

/// Reads rows `range` only; the rest of the file is never touched.
pub fn load_rows(path: impl AsRef<Path>, range: Range<usize>) -> Result<Matrix> {
    let path = path.as_ref();
    let (mut r, header) = open_checked(path)?;
    if range.start > range.end || range.end > header.rows {
        return Err(SrmError::Dimension(format!(
            "row range {range:?} outside 0..{} of {}",
            header.rows,
            path.display()
        )));
    }
    let offset = HEADER_LEN + (range.start * header.cols * header.dtype.size()) as u64;
    r.seek(SeekFrom::Start(offset))
        .map_err(|e| SrmError::io(path, e))?;
    let n = (range.end - range.start) * header.cols;
    let data = read_values(path, &mut r, header.dtype, n)?;
    Matrix::from_vec(range.end - range.start, header.cols, data)
}

fn read_values(path: &Path, r: &mut impl Read, dtype: Dtype, n: usize) -> Result<Vec<f64>> {
    let size = dtype.size();
    let mut out = Vec::with_capacity(n);
    let mut buf = vec![0u8; CHUNK_VALUES * size];
    let mut remaining = n;
    while remaining > 0 {
        let take = remaining.min(CHUNK_VALUES);
        let bytes = &mut buf[..take * size];
        r.read_exact(bytes)
            .map_err(|_| SrmError::format(path, "truncated data section"))?;
        match dtype {
            Dtype::F64 => out.extend(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
            ),
            Dtype::F32 => out.extend(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64),
            ),
        }
        remaining -= take;
    }
    if let Some(pos) = out.iter().position(|x| !x.is_finite()) {
        return Err(SrmError::format(path, format!("non-finite value at flat index {pos}")));
    }
    Ok(out)
}
