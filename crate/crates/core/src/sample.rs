//! Seven-channel SH sample: mean low-b, then the six SH coefficients.

use std::path::Path;

use crate::error::{Error, Result};
use crate::gradients::{DwiDataset, GradientTable};
use crate::nifti::{read_nifti, write_nifti_with, NiftiDataType, WriteOptions};
use crate::sh::{sh_basis, ShCoeffs, ShFitter};
use crate::volume::{Volume, VolumeGrid};

pub const SAMPLE_CHANNELS: usize = 7;
pub const LOWB_CHANNEL: usize = 0;
/// Channel order written to the NIfTI description field.
pub const SAMPLE_CHANNEL_ORDER: &str = "lowb,Y00,Y2-2,Y2-1,Y20,Y21,Y22";

#[derive(Debug, Clone, PartialEq)]
pub struct ShSample {
    pub volume: Volume,
}

impl ShSample {
    pub fn new(volume: Volume) -> Result<Self> {
        volume.validate()?;
        if volume.channels != SAMPLE_CHANNELS {
            return Err(Error::Argument(format!(
                "SH sample needs {SAMPLE_CHANNELS} channels, got {}",
                volume.channels
            )));
        }
        if let Some(v) = volume.channel(LOWB_CHANNEL).iter().position(|&s| s < 0.0) {
            let [x, y, z] = volume.grid.coords(v);
            return Err(Error::Argument(format!("negative low-b at voxel ({x}, {y}, {z})")));
        }
        Ok(Self { volume })
    }

    pub fn zeros(grid: VolumeGrid) -> Self {
        Self {
            volume: Volume::zeros(grid, SAMPLE_CHANNELS),
        }
    }

    pub fn grid(&self) -> &VolumeGrid {
        &self.volume.grid
    }

    pub fn n_voxels(&self) -> usize {
        self.volume.n_voxels()
    }

    pub fn lowb(&self) -> &[f64] {
        self.volume.channel(LOWB_CHANNEL)
    }

    pub fn coeffs(&self, voxel: usize) -> ShCoeffs {
        ShCoeffs(std::array::from_fn(|k| self.volume.get(voxel, k + 1)))
    }

    pub fn set_coeffs(&mut self, voxel: usize, c: &ShCoeffs) {
        for k in 0..6 {
            self.volume.set(voxel, k + 1, c.0[k]);
        }
    }

    /// Mean low-b plus a least-squares SH fit of the diffusion-weighted
    /// signals (single shell assumed).
    pub fn from_dwi(ds: &DwiDataset) -> Result<Self> {
        ds.validate()?;
        let dwi = ds.dwi_indices();
        let dirs: Vec<[f64; 3]> = dwi.iter().map(|&i| ds.gradients.bvecs[i]).collect();
        let fitter = ShFitter::new(&dirs)?;
        let lowb = ds.mean_lowb();
        let grid = ds.volume.grid.clone();
        let mut out = Self::zeros(grid);
        for v in 0..ds.volume.n_voxels() {
            out.volume.set(v, LOWB_CHANNEL, lowb[v].max(0.0));
            let s: Vec<f64> = dwi.iter().map(|&i| ds.volume.get(v, i)).collect();
            out.set_coeffs(v, &fitter.fit(&s));
        }
        Ok(out)
    }

    /// Signals predicted for a gradient table: the low-b channel for low-b
    /// entries and the SH expansion for the rest.
    pub fn to_dwi(&self, gradients: &GradientTable, lowb_threshold: f64) -> Result<DwiDataset> {
        let mut vol = Volume::zeros(self.grid().clone(), gradients.len());
        let basis: Vec<Option<[f64; 6]>> = (0..gradients.len())
            .map(|i| (gradients.bvals[i] > lowb_threshold).then(|| sh_basis(gradients.bvecs[i])))
            .collect();
        for v in 0..self.n_voxels() {
            let c = self.coeffs(v);
            for (i, b) in basis.iter().enumerate() {
                let s = match b {
                    Some(y) => (0..6).map(|k| y[k] * c.0[k]).sum(),
                    None => self.volume.get(v, LOWB_CHANNEL),
                };
                vol.set(v, i, s);
            }
        }
        DwiDataset::new(vol, gradients.clone())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_nifti_with(
            &self.volume,
            path,
            &WriteOptions {
                datatype: NiftiDataType::Float32,
                description: SAMPLE_CHANNEL_ORDER.into(),
            },
        )
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_nifti(path)?)
    }
}
