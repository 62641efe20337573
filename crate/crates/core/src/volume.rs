//! In-memory scalar volumes and their geometry.
//!
//! Voxels are stored as `f64` in row-major order over `(x, y, z)`, so the
//! last axis varies fastest. Axis 0 is treated as the sagittal axis
//! throughout the pipeline (150 sagittal positions in the 150×256×256 T1
//! geometry).

use thiserror::Error;

/// On-disk voxel encodings accepted by the NIfTI reader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Float32,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Datatype::Uint8),
            4 => Some(Datatype::Int16),
            16 => Some(Datatype::Float32),
            _ => None,
        }
    }

    pub fn bytes_per_voxel(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 => 2,
            Datatype::Float32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// A qform or sform transform was present on disk.
    RasLike,
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    /// Voxel spacing in millimetres.
    pub voxel_size: [f64; 3],
    pub datatype: Datatype,
    pub scl_slope: f64,
    pub scl_inter: f64,
    pub orientation: Orientation,
}

impl VolumeHeader {
    /// Float32 header with identity intensity scaling.
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3]) -> Self {
        Self {
            dims,
            voxel_size,
            datatype: Datatype::Float32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            orientation: Orientation::Unknown,
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        if self.dims.contains(&0) {
            return Err(VolumeError::BadDims(self.dims));
        }
        if self.voxel_size.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(VolumeError::BadVoxelSize(self.voxel_size));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum VolumeError {
    #[error("dimensions must all be >= 1, got {0:?}")]
    BadDims([usize; 3]),
    #[error("voxel sizes must be positive and finite, got {0:?}")]
    BadVoxelSize([f64; 3]),
    #[error("data length {actual} does not match dims (expected {expected})")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite intensity at voxel {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub header: VolumeHeader,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(header: VolumeHeader, data: Vec<f64>) -> Result<Self, VolumeError> {
        header.validate()?;
        let expected = header.voxel_count();
        if data.len() != expected {
            return Err(VolumeError::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self { header, data })
    }

    pub fn zeros(header: VolumeHeader) -> Result<Self, VolumeError> {
        let n = header.voxel_count();
        Self::new(header, vec![0.0; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.header.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for in-place edits. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let [_, ny, nz] = self.header.dims;
        (x * ny + y) * nz + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    /// New volume with the same header and transformed voxels.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self, VolumeError> {
        Self::new(self.header.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_geometry() {
        let h = VolumeHeader::new([0, 2, 2], [1.0; 3]);
        assert_eq!(Volume::zeros(h), Err(VolumeError::BadDims([0, 2, 2])));
        let h = VolumeHeader::new([2, 2, 2], [1.0, 0.0, 1.0]);
        assert!(matches!(Volume::zeros(h), Err(VolumeError::BadVoxelSize(_))));
    }

    #[test]
    fn rejects_wrong_length_and_nan() {
        let h = VolumeHeader::new([2, 2, 2], [1.0; 3]);
        assert!(matches!(
            Volume::new(h.clone(), vec![0.0; 7]),
            Err(VolumeError::LengthMismatch { expected: 8, actual: 7 })
        ));
        let mut data = vec![0.0; 8];
        data[5] = f64::NAN;
        assert_eq!(Volume::new(h, data), Err(VolumeError::NonFinite(5)));
    }

    #[test]
    fn last_axis_is_fastest() {
        let h = VolumeHeader::new([2, 3, 4], [1.0; 3]);
        let v = Volume::new(h, (0..24).map(f64::from).collect()).unwrap();
        assert_eq!(v.get(0, 0, 1), 1.0);
        assert_eq!(v.get(0, 1, 0), 4.0);
        assert_eq!(v.get(1, 0, 0), 12.0);
    }
}
