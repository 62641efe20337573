//! Minimal single-file NIfTI-1 reader and writer.
//!
//! Only uncompressed, little-endian `.nii` files with three spatial
//! dimensions and datatypes uint8 (2), int16 (4) or float32 (16) are
//! accepted. Anything else is an error rather than a best-effort guess.
//!
//! NIfTI stores the first axis fastest; [`Volume`] stores the last axis
//! fastest, so both directions transpose.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::volume::{Datatype, Orientation, Volume, VolumeError, VolumeHeader};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte empty extension block.
pub const DEFAULT_VOX_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("file is {0} bytes, shorter than the 348-byte header")]
    TruncatedHeader(usize),
    #[error("header size field is {0}, expected 348")]
    BadHeaderSize(i32),
    #[error("big-endian NIfTI files are not supported")]
    UnsupportedEndianness,
    #[error("magic bytes {0:?} are not \"n+1\\0\"")]
    WrongMagic([u8; 4]),
    #[error("only 3-dimensional volumes are supported, header has dim[0] = {0}")]
    UnsupportedDimensionality(i16),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("bitpix {bitpix} does not match datatype code {datatype}")]
    BitpixMismatch { datatype: i16, bitpix: i16 },
    #[error("invalid vox_offset {0}")]
    BadVoxOffset(f32),
    #[error("data section has {actual} bytes, header implies {expected}")]
    TruncatedData { expected: usize, actual: usize },
    #[error("non-finite intensity or scaling value")]
    NonFinite,
    #[error("invalid geometry: {0}")]
    Geometry(#[from] VolumeError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume, NiftiError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| NiftiError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_nifti(&bytes)
}

pub fn write_nifti(volume: &Volume, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    let path = path.as_ref();
    fs::write(path, encode_nifti(volume)).map_err(|source| NiftiError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

pub fn parse_nifti(bytes: &[u8]) -> Result<Volume, NiftiError> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::TruncatedHeader(bytes.len()));
    }
    let sizeof_hdr = i32_at(bytes, offsets::SIZEOF_HDR);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(NiftiError::UnsupportedEndianness);
        }
        return Err(NiftiError::BadHeaderSize(sizeof_hdr));
    }
    let magic: [u8; 4] = bytes[offsets::MAGIC..offsets::MAGIC + 4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(NiftiError::WrongMagic(magic));
    }

    let ndim = i16_at(bytes, offsets::DIM);
    if ndim != 3 {
        return Err(NiftiError::UnsupportedDimensionality(ndim));
    }
    let mut dims = [0usize; 3];
    for (axis, d) in dims.iter_mut().enumerate() {
        let raw = i16_at(bytes, offsets::DIM + 2 * (axis + 1));
        *d = usize::try_from(raw).unwrap_or(0);
    }

    let code = i16_at(bytes, offsets::DATATYPE);
    let datatype = Datatype::from_code(code).ok_or(NiftiError::UnsupportedDatatype(code))?;
    let bitpix = i16_at(bytes, offsets::BITPIX);
    if bitpix as usize != 8 * datatype.bytes_per_voxel() {
        return Err(NiftiError::BitpixMismatch {
            datatype: code,
            bitpix,
        });
    }

    let mut voxel_size = [0.0f64; 3];
    for (axis, v) in voxel_size.iter_mut().enumerate() {
        *v = f64::from(f32_at(bytes, offsets::PIXDIM + 4 * (axis + 1)));
    }

    let vox_offset = f32_at(bytes, offsets::VOX_OFFSET);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(NiftiError::BadVoxOffset(vox_offset));
    }
    let data_start = vox_offset as usize;

    let raw_slope = f64::from(f32_at(bytes, offsets::SCL_SLOPE));
    let scl_inter = f64::from(f32_at(bytes, offsets::SCL_INTER));
    if !raw_slope.is_finite() || !scl_inter.is_finite() {
        return Err(NiftiError::NonFinite);
    }
    let scl_slope = if raw_slope == 0.0 { 1.0 } else { raw_slope };

    let orientation = if i16_at(bytes, offsets::QFORM_CODE) > 0 || i16_at(bytes, offsets::SFORM_CODE) > 0 {
        Orientation::RasLike
    } else {
        Orientation::Unknown
    };

    let header = VolumeHeader {
        dims,
        voxel_size,
        datatype,
        scl_slope,
        scl_inter,
        orientation,
    };
    header.validate()?;

    let n = header.voxel_count();
    let width = datatype.bytes_per_voxel();
    let expected = n * width;
    let available = bytes.len().saturating_sub(data_start);
    if available < expected {
        return Err(NiftiError::TruncatedData {
            expected,
            actual: available,
        });
    }
    let raw = &bytes[data_start..data_start + expected];

    let [nx, ny, nz] = dims;
    let mut data = vec![0.0f64; n];
    for (file_idx, chunk) in raw.chunks_exact(width).enumerate() {
        let value = match datatype {
            Datatype::Uint8 => f64::from(chunk[0]),
            Datatype::Int16 => f64::from(i16::from_le_bytes([chunk[0], chunk[1]])),
            Datatype::Float32 => f64::from(f32::from_le_bytes(chunk.try_into().unwrap())),
        };
        let scaled = value * scl_slope + scl_inter;
        if !scaled.is_finite() {
            return Err(NiftiError::NonFinite);
        }
        let x = file_idx % nx;
        let y = (file_idx / nx) % ny;
        let z = file_idx / (nx * ny);
        data[(x * ny + y) * nz + z] = scaled;
    }
    Ok(Volume::new(header, data)?)
}

/// Serializes as float32 with identity scaling; intensities are already scaled.
pub fn encode_nifti(volume: &Volume) -> Vec<u8> {
    let h = &volume.header;
    let [nx, ny, nz] = h.dims;
    let mut out = vec![0u8; DEFAULT_VOX_OFFSET + 4 * h.voxel_count()];

    let mut put_i16 = |off: usize, v: i16| out[off..off + 2].copy_from_slice(&v.to_le_bytes());
    put_i16(offsets::DIM, 3);
    for (axis, &d) in h.dims.iter().enumerate() {
        put_i16(offsets::DIM + 2 * (axis + 1), d as i16);
    }
    for axis in 4..8 {
        put_i16(offsets::DIM + 2 * axis, 1);
    }
    put_i16(offsets::DATATYPE, Datatype::Float32.code());
    put_i16(offsets::BITPIX, 32);
    let ras = h.orientation == Orientation::RasLike;
    put_i16(offsets::SFORM_CODE, if ras { 1 } else { 0 });

    let mut put_f32 = |off: usize, v: f32| out[off..off + 4].copy_from_slice(&v.to_le_bytes());
    put_f32(offsets::PIXDIM, 1.0);
    for (axis, &v) in h.voxel_size.iter().enumerate() {
        put_f32(offsets::PIXDIM + 4 * (axis + 1), v as f32);
    }
    put_f32(offsets::VOX_OFFSET, DEFAULT_VOX_OFFSET as f32);
    put_f32(offsets::SCL_SLOPE, 1.0);
    put_f32(offsets::SCL_INTER, 0.0);
    if ras {
        for row in 0..3 {
            put_f32(offsets::SROW_X + 16 * row + 4 * row, h.voxel_size[row] as f32);
        }
    }

    out[offsets::SIZEOF_HDR..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    out[offsets::XYZT_UNITS] = 2;
    out[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(MAGIC);

    let data = volume.data();
    let payload = &mut out[DEFAULT_VOX_OFFSET..];
    let mut file_idx = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = data[(x * ny + y) * nz + z] as f32;
                payload[4 * file_idx..4 * file_idx + 4].copy_from_slice(&v.to_le_bytes());
                file_idx += 1;
            }
        }
    }
    out
}
