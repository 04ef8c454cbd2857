//! Single-file, uncompressed NIfTI-1 volumes with float32 or float64 voxels.

use std::path::Path;

use fodfnet_core::Volume4D;
use thiserror::Error;

pub const HEADER_SIZE: usize = 348;
/// Header plus the four-byte extension flag.
pub const DATA_OFFSET: usize = 352;
pub const MAGIC: [u8; 4] = *b"n+1\0";

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_QFORM_CODE: usize = 252;
const OFF_SFORM_CODE: usize = 254;
const OFF_SROW_X: usize = 280;
const OFF_MAGIC: usize = 344;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    Float32,
    Float64,
}

impl DataType {
    pub fn code(self) -> i16 {
        match self {
            DataType::Float32 => 16,
            DataType::Float64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            16 => Some(DataType::Float32),
            64 => Some(DataType::Float64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DataType::Float32 => 4,
            DataType::Float64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NiftiError {
    #[error("file is {len} bytes, shorter than the {HEADER_SIZE}-byte header")]
    ShortHeader { len: usize },
    #[error("sizeof_hdr is {found} in either byte order, expected 348")]
    HeaderSize { found: i32 },
    #[error("magic is {found:?}, expected \"n+1\\0\" (single-file NIfTI-1)")]
    Magic { found: [u8; 4] },
    #[error("datatype code {code} is unsupported; only float32 (16) and float64 (64) are read")]
    Datatype { code: i16 },
    #[error("bitpix {bitpix} does not match datatype code {code}")]
    Bitpix { code: i16, bitpix: i16 },
    #[error("dim field invalid: {0}")]
    Dimensions(String),
    #[error("vox_offset {0} points inside the header")]
    VoxOffset(f32),
    #[error("payload truncated: expected {expected} bytes after vox_offset, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// A volume with the storage details it was read with.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub volume: Volume4D,
    pub datatype: DataType,
    pub endian: Endian,
}

struct Writer<'a> {
    buf: &'a mut [u8],
    endian: Endian,
}

impl Writer<'_> {
    fn put(&mut self, at: usize, le: &[u8], be: &[u8]) {
        let bytes = match self.endian {
            Endian::Little => le,
            Endian::Big => be,
        };
        self.buf[at..at + bytes.len()].copy_from_slice(bytes);
    }
    fn i16(&mut self, at: usize, v: i16) {
        self.put(at, &v.to_le_bytes(), &v.to_be_bytes());
    }
    fn i32(&mut self, at: usize, v: i32) {
        self.put(at, &v.to_le_bytes(), &v.to_be_bytes());
    }
    fn f32(&mut self, at: usize, v: f32) {
        self.put(at, &v.to_le_bytes(), &v.to_be_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, at: usize) -> [u8; N] {
        self.buf[at..at + N].try_into().expect("in-bounds header field")
    }
    fn i16(&self, at: usize) -> i16 {
        match self.endian {
            Endian::Little => i16::from_le_bytes(self.arr(at)),
            Endian::Big => i16::from_be_bytes(self.arr(at)),
        }
    }
    fn f32(&self, at: usize) -> f32 {
        match self.endian {
            Endian::Little => f32::from_le_bytes(self.arr(at)),
            Endian::Big => f32::from_be_bytes(self.arr(at)),
        }
    }
    fn f64(&self, at: usize) -> f64 {
        match self.endian {
            Endian::Little => f64::from_le_bytes(self.arr(at)),
            Endian::Big => f64::from_be_bytes(self.arr(at)),
        }
    }
}

/// Encode `volume` as a NIfTI-1 file. A single-volume image is written as 3D.
/// The sform is the diagonal voxel-size matrix.
pub fn write_nifti(volume: &Volume4D, datatype: DataType, endian: Endian) -> Vec<u8> {
    let [nx, ny, nz, nv] = volume.dims();
    let payload = volume.data().len() * datatype.size();
    let mut buf = vec![0u8; DATA_OFFSET + payload];
    let mut w = Writer { buf: &mut buf, endian };
    w.i32(0, HEADER_SIZE as i32);
    let ndim = if nv > 1 { 4 } else { 3 };
    let dims = [ndim, nx, ny, nz, nv, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        w.i16(OFF_DIM + 2 * i, *d as i16);
    }
    w.i16(OFF_DATATYPE, datatype.code());
    w.i16(OFF_BITPIX, 8 * datatype.size() as i16);
    let vs = volume.voxel_size();
    let pixdim = [1.0, vs[0] as f32, vs[1] as f32, vs[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        w.f32(OFF_PIXDIM + 4 * i, *p);
    }
    w.f32(OFF_VOX_OFFSET, DATA_OFFSET as f32);
    w.f32(OFF_SCL_SLOPE, 1.0);
    w.f32(OFF_SCL_INTER, 0.0);
    w.i16(OFF_QFORM_CODE, 0);
    w.i16(OFF_SFORM_CODE, 1);
    for r in 0..3 {
        for c in 0..4 {
            let v = if r == c { vs[r] as f32 } else { 0.0 };
            w.f32(OFF_SROW_X + 16 * r + 4 * c, v);
        }
    }
    // millimetres, seconds
    buf[OFF_XYZT_UNITS] = 2 | 8;
    buf[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(&MAGIC);
    let body = &mut buf[DATA_OFFSET..];
    match (datatype, endian) {
        (DataType::Float32, Endian::Little) => {
            for (chunk, v) in body.chunks_exact_mut(4).zip(volume.data()) {
                chunk.copy_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        (DataType::Float32, Endian::Big) => {
            for (chunk, v) in body.chunks_exact_mut(4).zip(volume.data()) {
                chunk.copy_from_slice(&(*v as f32).to_be_bytes());
            }
        }
        (DataType::Float64, Endian::Little) => {
            for (chunk, v) in body.chunks_exact_mut(8).zip(volume.data()) {
                chunk.copy_from_slice(&v.to_le_bytes());
            }
        }
        (DataType::Float64, Endian::Big) => {
            for (chunk, v) in body.chunks_exact_mut(8).zip(volume.data()) {
                chunk.copy_from_slice(&v.to_be_bytes());
            }
        }
    }
    buf
}

/// Decode a NIfTI-1 file. Scaling is applied when `scl_slope` is nonzero and
/// not the identity.
pub fn read_nifti(bytes: &[u8]) -> Result<NiftiImage, NiftiError> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::ShortHeader { len: bytes.len() });
    }
    let raw: [u8; 4] = bytes[0..4].try_into().expect("four bytes");
    let endian = if i32::from_le_bytes(raw) == HEADER_SIZE as i32 {
        Endian::Little
    } else if i32::from_be_bytes(raw) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(NiftiError::HeaderSize {
            found: i32::from_le_bytes(raw),
        });
    };
    let r = Reader { buf: bytes, endian };
    let magic: [u8; 4] = r.arr(OFF_MAGIC);
    if magic != MAGIC {
        return Err(NiftiError::Magic { found: magic });
    }
    let code = r.i16(OFF_DATATYPE);
    let datatype = DataType::from_code(code).ok_or(NiftiError::Datatype { code })?;
    let bitpix = r.i16(OFF_BITPIX);
    if bitpix as usize != 8 * datatype.size() {
        return Err(NiftiError::Bitpix { code, bitpix });
    }
    let dim: Vec<i16> = (0..8).map(|i| r.i16(OFF_DIM + 2 * i)).collect();
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(NiftiError::Dimensions(format!("dim[0] = {ndim}, expected 1..=7")));
    }
    let mut shape = [1usize; 4];
    for i in 1..=ndim as usize {
        let d = dim[i];
        if d < 1 {
            return Err(NiftiError::Dimensions(format!("dim[{i}] = {d}, expected >= 1")));
        }
        if i <= 4 {
            shape[i - 1] = d as usize;
        } else if d != 1 {
            return Err(NiftiError::Dimensions(format!(
                "dim[{i}] = {d}; only up to four dimensions are supported"
            )));
        }
    }
    let vox_offset = r.f32(OFF_VOX_OFFSET);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(NiftiError::VoxOffset(vox_offset));
    }
    let start = vox_offset as usize;
    let n: usize = shape.iter().product();
    let expected = n * datatype.size();
    let actual = bytes.len().saturating_sub(start);
    if actual < expected {
        return Err(NiftiError::Truncated { expected, actual });
    }
    let mut data: Vec<f64> = match datatype {
        DataType::Float32 => (0..n)
            .map(|i| {
                let b: [u8; 4] = bytes[start + 4 * i..start + 4 * i + 4].try_into().expect("four bytes");
                match endian {
                    Endian::Little => f32::from_le_bytes(b) as f64,
                    Endian::Big => f32::from_be_bytes(b) as f64,
                }
            })
            .collect(),
        DataType::Float64 => (0..n).map(|i| r.f64(start + 8 * i)).collect(),
    };
    let slope = r.f32(OFF_SCL_SLOPE) as f64;
    let inter = r.f32(OFF_SCL_INTER) as f64;
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    let pix = |i: usize| {
        let p = r.f32(OFF_PIXDIM + 4 * i).abs() as f64;
        if p > 0.0 && p.is_finite() {
            p
        } else {
            1.0
        }
    };
    let volume = Volume4D::new(shape, [pix(1), pix(2), pix(3)], data)
        .map_err(|e| NiftiError::Dimensions(e.to_string()))?;
    Ok(NiftiImage {
        volume,
        datatype,
        endian,
    })
}

pub fn load(path: &Path) -> Result<NiftiImage, NiftiError> {
    let bytes = std::fs::read(path).map_err(|e| NiftiError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    read_nifti(&bytes)
}

pub fn save(path: &Path, volume: &Volume4D, datatype: DataType) -> std::io::Result<()> {
    std::fs::write(path, write_nifti(volume, datatype, Endian::Little))
}
