//! Phantom-derived SH samples, intensity normalization and the fixed
//! evaluation degradation.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ulfdti::augment::{angular_subsample_with, AugmentConfig};
use ulfdti::phantom::{electrostatic_directions, make_tensor_field, synthesize_dwi, Phantom, PhantomSpec, Scene};
use ulfdti::resample::{downsample, resample_to};
use ulfdti::sample::{LOWB_CHANNEL, SAMPLE_CHANNELS};
use ulfdti::sh::ICOSPHERE_VERTICES;
use ulfdti::tensor::{fit_dataset, FitConfig};
use ulfdti::{GradientTable, ShSample, Volume, VolumeGrid};

use crate::error::{NetError, Result};
use crate::tape::Tensor;

/// Fraction of the maximum low-b above which a voxel counts as foreground
/// for normalization.
pub const FOREGROUND_FRACTION: f64 = 0.1;

/// One b=0 plus 30 directions at b=1000 s/mm².
pub fn dense_gradient_table() -> GradientTable {
    let mut bvals = vec![0.0];
    let mut bvecs = vec![[0.0; 3]];
    for d in electrostatic_directions(30) {
        bvals.push(1000.0);
        bvecs.push(d);
    }
    GradientTable::new(bvals, bvecs).expect("valid table")
}

/// Noise-free SH sample of a phantom via a dense single-shell acquisition.
pub fn phantom_sample(phantom: &Phantom) -> Result<ShSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ds = synthesize_dwi(&phantom.tensors, &dense_gradient_table(), &phantom.s0, None, 0.0, &mut rng)?;
    Ok(ShSample::from_dwi(&ds)?)
}

/// Phantoms with random orientation and radius, cycling through the
/// bundle scenes.
pub fn random_phantoms(count: usize, grid: &VolumeGrid, seed: u64) -> Result<Vec<Phantom>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes = [Scene::SingleBundle, Scene::CrossingBundles, Scene::CurvedBundle];
    (0..count)
        .map(|i| Ok(make_tensor_field(&PhantomSpec::randomized(grid.clone(), scenes[i % scenes.len()], &mut rng))?))
        .collect()
}

/// Divisors applied to the low-b channel and to all SH channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    pub lowb: f64,
    pub sh: f64,
}

/// Foreground means of low-b and of the ℓ=0 coefficient.
pub fn foreground_scales(sample: &ShSample) -> Result<Scales> {
    let lowb = sample.lowb();
    let max = lowb.iter().fold(0.0f64, |m, &v| m.max(v));
    if !(max > 0.0) {
        return Err(NetError::Shape("sample has no positive low-b signal".into()));
    }
    let c0 = sample.volume.channel(1);
    let (mut sl, mut sc, mut n) = (0.0, 0.0, 0.0);
    for (l, c) in lowb.iter().zip(c0) {
        if *l > FOREGROUND_FRACTION * max {
            sl += l;
            sc += c;
            n += 1.0;
        }
    }
    if !(sc > 0.0) {
        return Err(NetError::Shape("sample has no positive ℓ=0 signal".into()));
    }
    Ok(Scales { lowb: sl / n, sh: sc / n })
}

pub fn scale_sample(sample: &ShSample, lowb: f64, sh: f64) -> ShSample {
    let mut out = sample.clone();
    let n = out.n_voxels();
    for (i, v) in out.volume.data.iter_mut().enumerate() {
        *v *= if i / n == LOWB_CHANNEL { lowb } else { sh };
    }
    out
}

pub fn normalize(sample: &ShSample) -> Result<(ShSample, Scales)> {
    let s = foreground_scales(sample)?;
    Ok((scale_sample(sample, 1.0 / s.lowb, 1.0 / s.sh), s))
}

/// Training set: normalized noise-free SH samples of random phantoms.
pub fn training_set(count: usize, grid: &VolumeGrid, seed: u64) -> Result<Vec<ShSample>> {
    random_phantoms(count, grid, seed)?
        .iter()
        .map(|p| Ok(normalize(&phantom_sample(p)?)?.0))
        .collect()
}

/// `[7, Z, Y, X]` view of a sample (same memory order).
pub fn sample_to_tensor(sample: &ShSample) -> Tensor {
    let [nx, ny, nz] = sample.grid().dims;
    Tensor::new(vec![SAMPLE_CHANNELS, nz, ny, nx], sample.volume.data.clone())
}

pub fn tensor_to_sample(t: &Tensor, grid: &VolumeGrid) -> Result<ShSample> {
    let [nx, ny, nz] = grid.dims;
    if t.shape != [SAMPLE_CHANNELS, nz, ny, nx] {
        return Err(NetError::Shape(format!("tensor {:?} does not match grid {:?}", t.shape, grid.dims)));
    }
    let mut data = t.data.clone();
    let n = grid.n_voxels();
    data[..n].iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(ShSample::new(Volume::new(grid.clone(), SAMPLE_CHANNELS, data)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalDegradation {
    /// Coarsening factor of the voxel size.
    pub factor: f64,
    /// Icosphere vertices kept, of 42.
    pub kept_vertices: usize,
    pub icosphere_noise_sigma: f64,
    pub ridge_lambda: f64,
}

impl Default for EvalDegradation {
    fn default() -> Self {
        let a = AugmentConfig::default();
        Self {
            factor: 2.0,
            kept_vertices: ICOSPHERE_VERTICES / 2,
            icosphere_noise_sigma: a.icosphere_noise_sigma,
            ridge_lambda: a.ridge_lambda,
        }
    }
}

/// Held-out degradation: coarsen by `factor`, subsample the icosphere
/// amplitudes, and linearly resample back to the HR grid. The result is
/// the trilinear baseline and the network input.
pub fn evaluation_degrade<R: Rng + ?Sized>(hr: &ShSample, d: &EvalDegradation, rng: &mut R) -> Result<ShSample> {
    let grid = hr.grid();
    let coarse = downsample(&hr.volume, grid.voxel_size.map(|v| v * d.factor));
    let coarse = ShSample::new(clamp_lowb(coarse))?;
    let mut selection = sample_indices(rng, ICOSPHERE_VERTICES, d.kept_vertices).into_vec();
    selection.sort_unstable();
    let coarse = angular_subsample_with(&coarse, &selection, d.icosphere_noise_sigma, d.ridge_lambda, rng)?;
    Ok(ShSample::new(clamp_lowb(resample_to(&coarse.volume, grid)))?)
}

fn clamp_lowb(mut v: Volume) -> Volume {
    v.channel_mut(LOWB_CHANNEL).iter_mut().for_each(|x| *x = x.max(0.0));
    v
}

/// Principal eigenvectors of tensors fitted to the signal a sample
/// predicts on the dense table.
pub fn v1_field(sample: &ShSample) -> Result<Vec<[f64; 3]>> {
    let ds = sample.to_dwi(&dense_gradient_table(), 50.0)?;
    let (fit, _) = fit_dataset(&ds, FitConfig::default())?;
    Ok(fit.metrics().iter().map(|m| m.v1).collect())
}
