//! 4D image volumes and voxel masks. Data is stored x-fastest, then y, z and
//! finally the volume index, matching NIfTI on-disk order.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    dims: [usize; 4],
    voxel_size: [f64; 3],
    data: Vec<f64>,
}

impl Volume4D {
    pub fn new(dims: [usize; 4], voxel_size: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidParameter(alloc::format!(
                "volume dims must all be >= 1, got {dims:?}"
            )));
        }
        let expected = dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                context: "volume data vs dims",
                expected,
                found: data.len(),
            });
        }
        Ok(Self { dims, voxel_size, data })
    }

    pub fn zeros(dims: [usize; 4], voxel_size: [f64; 3]) -> Result<Self> {
        Self::new(dims, voxel_size, vec![0.0; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn n_volumes(&self) -> usize {
        self.dims[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Linear spatial index of `(i, j, k)`.
    pub fn voxel_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn get(&self, i: usize, j: usize, k: usize, v: usize) -> f64 {
        self.data[self.voxel_index(i, j, k) + self.n_voxels() * v]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: usize, value: f64) {
        let idx = self.voxel_index(i, j, k) + self.n_voxels() * v;
        self.data[idx] = value;
    }

    /// All volume values at one voxel, by linear spatial index.
    pub fn series(&self, voxel: usize) -> Vec<f64> {
        let nv = self.n_voxels();
        (0..self.dims[3]).map(|v| self.data[voxel + nv * v]).collect()
    }

    pub fn set_series(&mut self, voxel: usize, values: &[f64]) {
        let nv = self.n_voxels();
        assert_eq!(values.len(), self.dims[3], "series length");
        for (v, value) in values.iter().enumerate() {
            self.data[voxel + nv * v] = *value;
        }
    }

    /// Keep only the listed volumes, in order.
    pub fn select_volumes(&self, volumes: &[usize]) -> Result<Volume4D> {
        let nv = self.n_voxels();
        let mut data = Vec::with_capacity(nv * volumes.len());
        for &v in volumes {
            if v >= self.dims[3] {
                return Err(Error::InvalidParameter(alloc::format!(
                    "volume index {v} out of range (have {})",
                    self.dims[3]
                )));
            }
            data.extend_from_slice(&self.data[v * nv..(v + 1) * nv]);
        }
        Volume4D::new(
            [self.dims[0], self.dims[1], self.dims[2], volumes.len()],
            self.voxel_size,
            data,
        )
    }

    /// Volumes stacked into one volume with `n_volumes` = sum of inputs.
    pub fn concat(parts: &[&Volume4D]) -> Result<Volume4D> {
        let first = parts.first().ok_or(Error::Empty("volume list"))?;
        let mut data = Vec::new();
        let mut nv = 0;
        for p in parts {
            if p.spatial_dims() != first.spatial_dims() {
                return Err(Error::ShapeMismatch {
                    context: "concat",
                    left: first.spatial_dims().to_vec(),
                    right: p.spatial_dims().to_vec(),
                });
            }
            data.extend_from_slice(&p.data);
            nv += p.dims[3];
        }
        Volume4D::new(
            [first.dims[0], first.dims[1], first.dims[2], nv],
            first.voxel_size,
            data,
        )
    }
}

/// Boolean voxel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        let expected = dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                context: "mask data vs dims",
                expected,
                found: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![true; dims.iter().product()],
        }
    }

    /// Nonzero voxels of the first volume.
    pub fn from_volume(vol: &Volume4D) -> Self {
        let n = vol.n_voxels();
        Self {
            dims: vol.spatial_dims(),
            data: vol.data()[..n].iter().map(|v| *v != 0.0).collect(),
        }
    }

    pub fn to_volume(&self, voxel_size: [f64; 3]) -> Volume4D {
        let data = self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Volume4D::new([self.dims[0], self.dims[1], self.dims[2], 1], voxel_size, data)
            .expect("mask dims are valid")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn get(&self, voxel: usize) -> bool {
        self.data[voxel]
    }

    pub fn set(&mut self, voxel: usize, value: bool) {
        self.data[voxel] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    /// Selected linear indices, x fastest (i.e. ordered by `(k, j, i)`).
    pub fn indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.then_some(i))
            .collect()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                context: "mask intersection",
                left: self.dims.to_vec(),
                right: other.dims.to_vec(),
            });
        }
        Ok(Mask {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        })
    }

    pub fn coords(&self, voxel: usize) -> [usize; 3] {
        let i = voxel % self.dims[0];
        let j = (voxel / self.dims[0]) % self.dims[1];
        let k = voxel / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }
}
