//! In-memory volumes and voxel geometry.
//!
//! Data is stored channel-major with x varying fastest, the same order a
//! NIfTI file uses on disk: `data[x + nx * (y + ny * (z + nz * c))]`.

use nalgebra::{Matrix3, Matrix4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel grid: dimensions, voxel size (mm) and voxel-to-world affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeGrid {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub affine: [[f64; 4]; 4],
}

impl VolumeGrid {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], affine: [[f64; 4]; 4]) -> Result<Self> {
        let grid = Self {
            dims,
            voxel_size,
            affine,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Grid with a diagonal affine built from the voxel size, origin at voxel 0.
    pub fn isotropic(dims: [usize; 3], voxel_mm: f64) -> Self {
        Self::with_voxel_size(dims, [voxel_mm; 3])
    }

    pub fn with_voxel_size(dims: [usize; 3], voxel_size: [f64; 3]) -> Self {
        let mut affine = [[0.0; 4]; 4];
        for (i, row) in affine.iter_mut().take(3).enumerate() {
            row[i] = voxel_size[i];
        }
        affine[3][3] = 1.0;
        Self {
            dims,
            voxel_size,
            affine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Argument(format!("grid dims must be >= 1, got {:?}", self.dims)));
        }
        if self.voxel_size.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Argument(format!(
                "voxel size must be positive, got {:?}",
                self.voxel_size
            )));
        }
        let m = self.affine_matrix();
        let lin: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        if !lin.iter().all(|v| v.is_finite()) || lin.determinant().abs() < 1e-12 {
            return Err(Error::Argument("affine linear part is singular".into()));
        }
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    pub fn affine_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|r, c| self.affine[r][c])
    }

    /// Physical extent along each axis in mm.
    pub fn extent_mm(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.voxel_size[0],
            self.dims[1] as f64 * self.voxel_size[1],
            self.dims[2] as f64 * self.voxel_size[2],
        ]
    }

    /// Grid covering the same field of view with a different voxel size.
    ///
    /// Voxel centers are aligned so that the outer voxel edges coincide as
    /// closely as the integer dimension allows; the affine is updated so the
    /// world position of the field-of-view corner is preserved.
    pub fn resampled(&self, voxel_size: [f64; 3]) -> VolumeGrid {
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let n = (self.dims[a] as f64 * self.voxel_size[a] / voxel_size[a]).round() as usize;
            dims[a] = n.max(1);
        }
        let mut affine = self.affine;
        for a in 0..3 {
            let scale = voxel_size[a] / self.voxel_size[a];
            // source-index position of new voxel 0's center
            let start = axis_start(self.dims[a], dims[a], scale);
            for r in 0..3 {
                let col = self.affine[r][a];
                affine[r][a] = col * scale;
                affine[r][3] += col * start;
            }
        }
        VolumeGrid {
            dims,
            voxel_size,
            affine,
        }
    }
}

/// Source-index coordinate of the first target voxel center when an axis of
/// `n_src` voxels is resampled to `n_dst` voxels with spacing ratio `scale`
/// (target spacing / source spacing). The two grids share their center.
pub fn axis_start(n_src: usize, n_dst: usize, scale: f64) -> f64 {
    let src_center = (n_src as f64 - 1.0) / 2.0;
    let dst_center = (n_dst as f64 - 1.0) / 2.0;
    src_center - dst_center * scale
}

/// Multi-channel real-valued volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: VolumeGrid,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: VolumeGrid, channels: usize, data: Vec<f64>) -> Result<Self> {
        let v = Self {
            grid,
            channels,
            data,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn zeros(grid: VolumeGrid, channels: usize) -> Self {
        let n = grid.n_voxels() * channels;
        Self {
            grid,
            channels,
            data: vec![0.0; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.channels == 0 {
            return Err(Error::Argument("volume needs at least one channel".into()));
        }
        let expected = self.grid.n_voxels() * self.channels;
        if self.data.len() != expected {
            return Err(Error::Argument(format!(
                "data length {} does not match dims x channels = {}",
                self.data.len(),
                expected
            )));
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite value at element {pos}")));
        }
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.grid.n_voxels()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.n_voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.n_voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, voxel: usize, c: usize) -> f64 {
        self.data[voxel + c * self.n_voxels()]
    }

    #[inline]
    pub fn set(&mut self, voxel: usize, c: usize, value: f64) {
        let n = self.n_voxels();
        self.data[voxel + c * n] = value;
    }

    /// All channel values of one voxel.
    pub fn voxel_values(&self, voxel: usize) -> Vec<f64> {
        let n = self.n_voxels();
        (0..self.channels).map(|c| self.data[voxel + c * n]).collect()
    }

    /// New volume holding the listed channels in the given order.
    pub fn select_channels(&self, indices: &[usize]) -> Volume {
        let mut data = Vec::with_capacity(indices.len() * self.n_voxels());
        for &c in indices {
            data.extend_from_slice(self.channel(c));
        }
        Volume {
            grid: self.grid.clone(),
            channels: indices.len(),
            data,
        }
    }

    /// Voxelwise mean over the listed channels.
    pub fn mean_of_channels(&self, indices: &[usize]) -> Vec<f64> {
        let n = self.n_voxels();
        let mut out = vec![0.0; n];
        for &c in indices {
            for (o, v) in out.iter_mut().zip(self.channel(c)) {
                *o += v;
            }
        }
        let k = indices.len().max(1) as f64;
        out.iter_mut().for_each(|v| *v /= k);
        out
    }
}
