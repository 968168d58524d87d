//! Train-time augmentation and degradation of SH samples, and the
//! low-field degradation protocol for raw DWI datasets.

use log::debug;
use nalgebra::{Matrix3, Matrix5, SMatrix};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::{DwiDataset, GradientTable};
use crate::linalg::{polar_rotation, random_rotation};
use crate::phantom::add_rician_noise;
use crate::resample::{downsample_op, linear_between, trilinear_at, AxisOp, SeparableOp};
use crate::sample::{ShSample, LOWB_CHANNEL, SAMPLE_CHANNELS};
use crate::sh::{build_icosphere, low_rank_mix, project_to_icosphere, RidgeDeprojector, WignerRotation};
use crate::volume::{Volume, VolumeGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub crop_size: [usize; 3],
    /// Std of the smooth log-gamma exponent field.
    pub gamma_std: f64,
    /// Std of the log bias on the coarse control grid.
    pub bias_sigma: f64,
    /// Control-grid spacing for the gamma and bias fields, mm.
    pub bias_grid_mm: f64,
    /// Noise σ is drawn from U[0, noise_sigma_max] (normalized intensities).
    pub noise_sigma_max: f64,
    pub resample_range_mm: [f64; 2],
    pub drift_gain_range: [f64; 2],
    pub mix_range: [f64; 2],
    pub icosphere_noise_sigma: f64,
    pub subsample_rows: [usize; 2],
    pub ridge_lambda: f64,
    pub taper_length_voxels: usize,
    /// Deformation patch edge as a fraction of the sample edge.
    pub deform_patch_fraction: f64,
    pub deform_control_spacing: usize,
    /// Displacement std is drawn from U[0, this], voxels.
    pub deform_max_displacement: f64,
    /// Fraction of patch voxels allowed to fold (det F ≤ 0).
    pub fold_tolerance: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_size: [64, 64, 64],
            gamma_std: 0.1,
            bias_sigma: 0.2,
            bias_grid_mm: 4.0,
            noise_sigma_max: 0.06,
            resample_range_mm: [1.5, 4.0],
            drift_gain_range: [0.95, 1.05],
            mix_range: [-0.025, 0.025],
            icosphere_noise_sigma: 0.02,
            subsample_rows: [4, 9],
            ridge_lambda: 1e-6,
            taper_length_voxels: 8,
            deform_patch_fraction: 0.5,
            deform_control_spacing: 4,
            deform_max_displacement: 2.0,
            fold_tolerance: 0.005,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No intensity, noise, or resolution changes; crop to `crop_size`.
    pub fn null(crop_size: [usize; 3], voxel_mm: f64) -> Self {
        Self {
            crop_size,
            gamma_std: 0.0,
            bias_sigma: 0.0,
            noise_sigma_max: 0.0,
            resample_range_mm: [voxel_mm, voxel_mm],
            drift_gain_range: [1.0, 1.0],
            mix_range: [0.0, 0.0],
            icosphere_noise_sigma: 0.0,
            deform_max_displacement: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2], name: &str| {
            if r[0] <= r[1] {
                Ok(())
            } else {
                Err(Error::Argument(format!("{name} range is not ordered")))
            }
        };
        ordered(self.resample_range_mm, "resample")?;
        ordered(self.drift_gain_range, "drift gain")?;
        ordered(self.mix_range, "mix")?;
        if self.subsample_rows[0] == 0 || self.subsample_rows[0] > self.subsample_rows[1] || self.subsample_rows[1] > 42 {
            return Err(Error::Argument("subsample rows must satisfy 1 <= lo <= hi <= 42".into()));
        }
        if self.resample_range_mm[0] <= 0.0 || self.bias_grid_mm <= 0.0 {
            return Err(Error::Argument("resolutions must be positive".into()));
        }
        let nonneg = [
            self.gamma_std,
            self.bias_sigma,
            self.noise_sigma_max,
            self.icosphere_noise_sigma,
            self.ridge_lambda,
            self.deform_max_displacement,
            self.fold_tolerance,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Argument("augmentation magnitudes must be non-negative".into()));
        }
        if self.taper_length_voxels == 0 || self.deform_control_spacing == 0 {
            return Err(Error::Argument("taper length and control spacing must be positive".into()));
        }
        if self.crop_size.contains(&0) {
            return Err(Error::Argument("crop size must be positive".into()));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Sub-volume starting at `lo` with `size` voxels; the affine follows.
pub fn crop(sample: &ShSample, lo: [usize; 3], size: [usize; 3]) -> Result<ShSample> {
    let g = sample.grid();
    for a in 0..3 {
        if lo[a] + size[a] > g.dims[a] {
            return Err(Error::Argument(format!(
                "crop {size:?} at {lo:?} exceeds volume {:?}",
                g.dims
            )));
        }
    }
    let mut affine = g.affine;
    for r in 0..3 {
        for a in 0..3 {
            affine[r][3] += g.affine[r][a] * lo[a] as f64;
        }
    }
    let grid = VolumeGrid {
        dims: size,
        voxel_size: g.voxel_size,
        affine,
    };
    let mut out = Volume::zeros(grid.clone(), SAMPLE_CHANNELS);
    for c in 0..SAMPLE_CHANNELS {
        let src = sample.volume.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..size[2] {
            for y in 0..size[1] {
                for x in 0..size[0] {
                    dst[grid.index(x, y, z)] = src[g.index(x + lo[0], y + lo[1], z + lo[2])];
                }
            }
        }
    }
    Ok(ShSample { volume: out })
}

pub fn random_crop<R: Rng + ?Sized>(sample: &ShSample, size: [usize; 3], rng: &mut R) -> Result<ShSample> {
    let dims = sample.grid().dims;
    if (0..3).any(|a| size[a] > dims[a]) {
        return Err(Error::Argument(format!("crop {size:?} larger than volume {dims:?}")));
    }
    let lo = std::array::from_fn(|a| rng.random_range(0..=dims[a] - size[a]));
    crop(sample, lo, size)
}

/// Smooth random field: N(0, σ²) values on a control grid of the given
/// spacing, Catmull–Rom upsampled.
pub fn smooth_random_field<R: Rng + ?Sized>(grid: &VolumeGrid, spacing_mm: f64, sigma: f64, rng: &mut R) -> Vec<f64> {
    let n = grid.n_voxels();
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    let coarse: [usize; 3] = std::array::from_fn(|a| {
        let extent = (grid.dims[a] - 1) as f64 * grid.voxel_size[a];
        ((extent / spacing_mm).ceil() as usize + 1).max(2)
    });
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let values: Vec<f64> = (0..coarse.iter().product::<usize>()).map(|_| normal.sample(rng)).collect();
    let op = SeparableOp {
        ops: std::array::from_fn(|a| {
            let step = if grid.dims[a] > 1 {
                (coarse[a] - 1) as f64 / (grid.dims[a] - 1) as f64
            } else {
                0.0
            };
            AxisOp::cubic(coarse[a], grid.dims[a], 0.0, step)
        }),
    };
    op.apply_raw(&values, 1)
}

/// x ← m·(x/m)^exp(g) on a channel, m its maximum.
fn apply_gamma(channel: &mut [f64], log_gamma: &[f64]) {
    let m = channel.iter().cloned().fold(0.0f64, f64::max);
    if m <= 0.0 {
        return;
    }
    for (x, g) in channel.iter_mut().zip(log_gamma) {
        if *g != 0.0 {
            *x = m * (x.max(0.0) / m).powf(g.exp());
        }
    }
}

/// Gamma, bias, noise, then blur-resample to a random resolution and back
/// to the sample grid. Intensities are assumed normalized.
pub fn degrade_intensity_resolution<R: Rng + ?Sized>(sample: &ShSample, config: &AugmentConfig, rng: &mut R) -> Result<ShSample> {
    degrade_with_op(sample, config, rng).map(|(s, _)| s)
}

/// As [`degrade_intensity_resolution`], also returning the resampling
/// operator (down to the drawn resolution and linearly back up).
pub fn degrade_with_op<R: Rng + ?Sized>(
    sample: &ShSample,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<(ShSample, SeparableOp)> {
    config.validate()?;
    let grid = sample.grid().clone();
    let mut vol = sample.volume.clone();
    let scalar_channels = [LOWB_CHANNEL, 1];

    let log_gamma = smooth_random_field(&grid, config.bias_grid_mm, config.gamma_std, rng);
    if config.gamma_std > 0.0 {
        for &c in &scalar_channels {
            apply_gamma(vol.channel_mut(c), &log_gamma);
        }
    }
    let log_bias = smooth_random_field(&grid, config.bias_grid_mm, config.bias_sigma, rng);
    if config.bias_sigma > 0.0 {
        for &c in &scalar_channels {
            for (x, b) in vol.channel_mut(c).iter_mut().zip(&log_bias) {
                *x *= b.exp();
            }
        }
    }
    let sigma = uniform(rng, [0.0, config.noise_sigma_max]);
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        vol.data.iter_mut().for_each(|x| *x += normal.sample(rng));
    }
    let res = uniform(rng, config.resample_range_mm);
    let (down, coarse) = downsample_op(&grid, [res; 3]);
    let up = linear_between(&coarse, &grid);
    let op = down.then(&up);
    debug!("degrade: noise σ {sigma:.4}, resolution {res:.3} mm");
    if !op.ops.iter().all(AxisOp::is_identity) {
        vol.data = op.apply_raw(&vol.data, SAMPLE_CHANNELS);
    }
    vol.channel_mut(LOWB_CHANNEL).iter_mut().for_each(|x| *x = x.max(0.0));
    Ok((ShSample::new(vol)?, op))
}

/// Crop, then intensity and resolution degradation.
pub fn geometric_degrade<R: Rng + ?Sized>(sample: &ShSample, config: &AugmentConfig, rng: &mut R) -> Result<ShSample> {
    let cropped = random_crop(sample, config.crop_size, rng)?;
    degrade_intensity_resolution(&cropped, config, rng)
}

/// Cosine taper weight for Chebyshev distance η and taper length b.
pub fn taper_weight(eta: usize, b: usize) -> f64 {
    if eta >= b {
        1.0
    } else {
        0.5 * (1.0 - (std::f64::consts::PI * eta as f64 / b as f64).cos())
    }
}

/// Smooth displacement confined to a box patch, tapered to zero at its
/// boundary. Displacements are in voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDeformation {
    pub lo: [usize; 3],
    pub size: [usize; 3],
    pub taper: usize,
    /// Tapered displacement per patch voxel, x fastest.
    pub displacement: Vec<[f64; 3]>,
}

impl PatchDeformation {
    /// Applies the taper to a raw displacement field.
    pub fn new(lo: [usize; 3], size: [usize; 3], taper: usize, raw: Vec<[f64; 3]>) -> Result<Self> {
        let n: usize = size.iter().product();
        if raw.len() != n {
            return Err(Error::Argument("displacement does not cover the patch".into()));
        }
        let mut d = Self {
            lo,
            size,
            taper,
            displacement: raw,
        };
        for i in 0..n {
            let w = taper_weight(d.eta(d.local_coords(i)), taper);
            d.displacement[i].iter_mut().for_each(|u| *u *= w);
        }
        Ok(d)
    }

    pub fn local_coords(&self, i: usize) -> [usize; 3] {
        let s = self.size;
        [i % s[0], (i / s[0]) % s[1], i / (s[0] * s[1])]
    }

    /// Chebyshev distance to the patch boundary (0 on boundary voxels).
    pub fn eta(&self, c: [usize; 3]) -> usize {
        (0..3).map(|a| c[a].min(self.size[a] - 1 - c[a])).min().unwrap_or(0)
    }

    fn u_at(&self, c: [i64; 3]) -> [f64; 3] {
        if (0..3).any(|a| c[a] < 0 || c[a] >= self.size[a] as i64) {
            return [0.0; 3];
        }
        let s = self.size;
        self.displacement[c[0] as usize + s[0] * (c[1] as usize + s[1] * c[2] as usize)]
    }

    /// F = I + ∇u by central differences (u is zero outside the patch).
    pub fn jacobian(&self, i: usize) -> Matrix3<f64> {
        let c = self.local_coords(i).map(|v| v as i64);
        let mut f = Matrix3::identity();
        for a in 0..3 {
            let mut p = c;
            let mut m = c;
            p[a] += 1;
            m[a] -= 1;
            let (up, um) = (self.u_at(p), self.u_at(m));
            for r in 0..3 {
                f[(r, a)] += (up[r] - um[r]) / 2.0;
            }
        }
        f
    }

    pub fn folded_fraction(&self) -> f64 {
        let n = self.displacement.len();
        let folded = (0..n).filter(|&i| self.jacobian(i).determinant() <= 0.0).count();
        folded as f64 / n as f64
    }

    /// Random patch and control-grid displacement; fields folding on more
    /// than the tolerated fraction are redrawn, up to 10 times.
    pub fn random<R: Rng + ?Sized>(dims: [usize; 3], config: &AugmentConfig, rng: &mut R) -> Result<Self> {
        let size: [usize; 3] = std::array::from_fn(|a| {
            ((dims[a] as f64 * config.deform_patch_fraction).round() as usize).clamp(1, dims[a])
        });
        let lo: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=dims[a] - size[a]));
        let coarse: [usize; 3] =
            std::array::from_fn(|a| (size[a].saturating_sub(1)).div_ceil(config.deform_control_spacing) + 1);
        let op = SeparableOp {
            ops: std::array::from_fn(|a| {
                let step = if size[a] > 1 {
                    (coarse[a] - 1) as f64 / (size[a] - 1) as f64
                } else {
                    0.0
                };
                AxisOp::cubic(coarse[a], size[a], 0.0, step)
            }),
        };
        let nc: usize = coarse.iter().product();
        for attempt in 0..10 {
            let mag = uniform(rng, [0.0, config.deform_max_displacement]);
            let raw: Vec<f64> = if mag > 0.0 {
                let normal = Normal::new(0.0, mag).expect("finite magnitude");
                (0..3 * nc).map(|_| normal.sample(rng)).collect()
            } else {
                vec![0.0; 3 * nc]
            };
            let fine = op.apply_raw(&raw, 3);
            let n: usize = size.iter().product();
            let field = (0..n).map(|i| [fine[i], fine[n + i], fine[2 * n + i]]).collect();
            let d = Self::new(lo, size, config.taper_length_voxels, field)?;
            let folded = d.folded_fraction();
            if folded <= config.fold_tolerance {
                return Ok(d);
            }
            debug!("deformation attempt {attempt} rejected: {:.3}% folded", folded * 100.0);
        }
        Err(Error::DegenerateField(
            "10 consecutive displacement fields folded beyond tolerance".into(),
        ))
    }

    /// Warp every channel by pull-back out(x) = in(x − u(x)) and rotate the
    /// ℓ=2 coefficients by the local rotation from polar decomposition of F.
    /// Folded voxels take the rotation of the nearest unfolded voxel.
    pub fn apply(&self, sample: &ShSample) -> Result<ShSample> {
        let g = sample.grid();
        for a in 0..3 {
            if self.lo[a] + self.size[a] > g.dims[a] {
                return Err(Error::Argument("deformation patch outside the sample".into()));
            }
        }
        let n: usize = self.size.iter().product();
        let jac: Vec<Matrix3<f64>> = (0..n).map(|i| self.jacobian(i)).collect();
        let valid: Vec<bool> = jac.iter().map(|f| f.determinant() > 0.0).collect();
        let mut out = sample.clone();
        for i in 0..n {
            let lc = self.local_coords(i);
            let gc: [usize; 3] = std::array::from_fn(|a| lc[a] + self.lo[a]);
            let u = self.displacement[i];
            let v = g.index(gc[0], gc[1], gc[2]);
            let p: [f64; 3] = std::array::from_fn(|a| gc[a] as f64 - u[a]);
            let mut vals = [0.0; SAMPLE_CHANNELS];
            for (c, val) in vals.iter_mut().enumerate() {
                *val = if u == [0.0; 3] {
                    sample.volume.get(v, c)
                } else {
                    trilinear_at(sample.volume.channel(c), g.dims, p)
                };
            }
            let f = if valid[i] {
                Some(jac[i])
            } else {
                self.nearest_valid(i, &valid).map(|j| jac[j])
            };
            if let Some(f) = f.filter(|f| *f != Matrix3::identity()) {
                let w = WignerRotation::from_matrix(&polar_rotation(&f));
                let l2 = w.rotate_l2(&[vals[2], vals[3], vals[4], vals[5], vals[6]]);
                vals[2..7].copy_from_slice(&l2);
            }
            for (c, val) in vals.iter().enumerate() {
                out.volume.set(v, c, *val);
            }
        }
        Ok(out)
    }

    fn nearest_valid(&self, i: usize, valid: &[bool]) -> Option<usize> {
        let c = self.local_coords(i).map(|v| v as i64);
        let s = self.size.map(|v| v as i64);
        for r in 1..=3i64 {
            let mut best: Option<(i64, usize)> = None;
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let q = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if (0..3).any(|a| q[a] < 0 || q[a] >= s[a]) {
                            continue;
                        }
                        let j = (q[0] + s[0] * (q[1] + s[1] * q[2])) as usize;
                        let d2 = dx * dx + dy * dy + dz * dz;
                        if valid[j] && best.is_none_or(|b| d2 < b.0) {
                            best = Some((d2, j));
                        }
                    }
                }
            }
            if let Some((_, j)) = best {
                return Some(j);
            }
        }
        None
    }
}

pub fn deform_patch<R: Rng + ?Sized>(sample: &ShSample, config: &AugmentConfig, rng: &mut R) -> Result<(ShSample, PatchDeformation)> {
    config.validate()?;
    let d = PatchDeformation::random(sample.grid().dims, config, rng)?;
    Ok((d.apply(sample)?, d))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DriftPair {
    /// m = ±1
    First,
    /// m = ±2
    Second,
}

/// Box region [lo, lo + size).
pub type Region = ([usize; 3], [usize; 3]);

/// Rotate, apply `gain` to one antipodal m-pair of the ℓ=2 block, rotate
/// back. The low-b and ℓ=0 channels are untouched.
pub fn sh_drift_with(sample: &ShSample, rotation: &WignerRotation, gain: f64, pair: DriftPair, region: Option<Region>) -> ShSample {
    let mut g = Matrix5::identity();
    let idx = match pair {
        DriftPair::First => [1, 3],
        DriftPair::Second => [0, 4],
    };
    for i in idx {
        g[(i, i)] = gain;
    }
    let op = rotation.block.transpose() * g * rotation.block;
    let mut out = sample.clone();
    let grid = sample.grid();
    let (lo, size) = region.unwrap_or(([0; 3], grid.dims));
    for z in lo[2]..(lo[2] + size[2]).min(grid.dims[2]) {
        for y in lo[1]..(lo[1] + size[1]).min(grid.dims[1]) {
            for x in lo[0]..(lo[0] + size[0]).min(grid.dims[0]) {
                let v = grid.index(x, y, z);
                let c: [f64; 5] = std::array::from_fn(|k| sample.volume.get(v, k + 2));
                for r in 0..5 {
                    out.volume.set(v, r + 2, (0..5).map(|k| op[(r, k)] * c[k]).sum());
                }
            }
        }
    }
    out
}

pub fn sh_drift<R: Rng + ?Sized>(sample: &ShSample, config: &AugmentConfig, region: Option<Region>, rng: &mut R) -> ShSample {
    let rotation = WignerRotation::from_matrix(&random_rotation(rng));
    let gain = uniform(rng, config.drift_gain_range);
    let pair = if rng.random::<bool>() { DriftPair::First } else { DriftPair::Second };
    sh_drift_with(sample, &rotation, gain, pair, region)
}

/// Project every voxel to the selected icosphere vertices, add noise, and
/// ridge-recover the coefficients.
pub fn angular_subsample_with<R: Rng + ?Sized>(
    sample: &ShSample,
    selection: &[usize],
    noise_sigma: f64,
    lambda: f64,
    rng: &mut R,
) -> Result<ShSample> {
    let sphere = build_icosphere();
    let ridge = RidgeDeprojector::new(selection, &sphere, lambda)?;
    let normal = (noise_sigma > 0.0).then(|| Normal::new(0.0, noise_sigma).expect("finite sigma"));
    let mut out = sample.clone();
    for v in 0..sample.n_voxels() {
        let h = project_to_icosphere(&sample.coeffs(v), &sphere);
        let sub: Vec<f64> = selection
            .iter()
            .map(|&j| h[j] + normal.as_ref().map_or(0.0, |n| n.sample(rng)))
            .collect();
        out.set_coeffs(v, &ridge.apply(&sub));
    }
    Ok(out)
}

pub fn angular_subsample<R: Rng + ?Sized>(sample: &ShSample, config: &AugmentConfig, rng: &mut R) -> Result<ShSample> {
    config.validate()?;
    let [lo, hi] = config.subsample_rows;
    let k = rng.random_range(lo..=hi);
    let mut selection = sample_indices(rng, 42, k).into_vec();
    selection.sort_unstable();
    angular_subsample_with(sample, &selection, config.icosphere_noise_sigma, config.ridge_lambda, rng)
}

/// One (I + V·Q) draw with entries of V and Q uniform in the mix range,
/// applied to every voxel.
pub fn random_low_rank_mix<R: Rng + ?Sized>(sample: &ShSample, config: &AugmentConfig, rng: &mut R) -> ShSample {
    let v = SMatrix::<f64, 6, 2>::from_fn(|_, _| uniform(rng, config.mix_range));
    let q = SMatrix::<f64, 2, 6>::from_fn(|_, _| uniform(rng, config.mix_range));
    let mut out = sample.clone();
    for i in 0..sample.n_voxels() {
        out.set_coeffs(i, &low_rank_mix(&sample.coeffs(i), &v, &q));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub target: ShSample,
    pub lr: ShSample,
    /// Resampling applied on the LR side, on the target grid.
    pub degrade: SeparableOp,
}

/// HR target and LR input for one training step. The crop and the patch
/// deformation are shared; the LR side additionally gets SH drift in the
/// deformed patch, intensity/resolution degradation, angular subsampling
/// and low-rank mixing.
pub fn make_training_pair<R: Rng + ?Sized>(hr: &ShSample, config: &AugmentConfig, rng: &mut R) -> Result<TrainingPair> {
    config.validate()?;
    let cropped = random_crop(hr, config.crop_size, rng)?;
    let (target, deformation) = deform_patch(&cropped, config, rng)?;
    let lr = sh_drift(&target, config, Some((deformation.lo, deformation.size)), rng);
    let (lr, degrade) = degrade_with_op(&lr, config, rng)?;
    let lr = angular_subsample(&lr, config, rng)?;
    let lr = random_low_rank_mix(&lr, config, rng);
    Ok(TrainingPair { target, lr, degrade })
}

fn axial_angle(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    let d = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).abs() / (na * nb);
    d.min(1.0).acos()
}

/// Greedy furthest-point subset under the axial angle, starting from
/// `start`. Returns indices in ascending order.
pub fn electrostatic_subset(directions: &[[f64; 3]], target: usize, start: usize) -> Result<Vec<usize>> {
    if target == 0 {
        return Err(Error::Argument("target count must be positive".into()));
    }
    if target > directions.len() {
        return Err(Error::Argument(format!(
            "cannot select {target} of {} directions",
            directions.len()
        )));
    }
    if start >= directions.len() {
        return Err(Error::Argument("start index out of range".into()));
    }
    let mut chosen = vec![start];
    let mut min_dist: Vec<f64> = directions.iter().map(|d| axial_angle(d, &directions[start])).collect();
    while chosen.len() < target {
        let mut best = None;
        for (i, &d) in min_dist.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("unchosen direction exists");
        chosen.push(i);
        for (j, m) in min_dist.iter_mut().enumerate() {
            *m = m.min(axial_angle(&directions[j], &directions[i]));
        }
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Minimum pairwise axial angle (radians) of a subset.
pub fn min_axial_angle(directions: &[[f64; 3]], subset: &[usize]) -> f64 {
    let mut m = f64::INFINITY;
    for (a, &i) in subset.iter().enumerate() {
        for &j in &subset[a + 1..] {
            m = m.min(axial_angle(&directions[i], &directions[j]));
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UlfProtocol {
    pub voxel_mm: f64,
    pub n_directions: usize,
    pub rician_sigma: f64,
    /// Draw the greedy starting direction at random instead of index 0.
    pub random_start: bool,
}

impl Default for UlfProtocol {
    fn default() -> Self {
        Self {
            voxel_mm: 3.5,
            n_directions: 9,
            rician_sigma: 100.0,
            random_start: true,
        }
    }
}

/// Downsample to isotropic `voxel_mm` (anti-aliased, trilinear), keep all
/// low-b volumes plus an electrostatic subset of directions, and add
/// Rician noise in the raw signal.
pub fn ulf_degrade_protocol<R: Rng + ?Sized>(ds: &DwiDataset, protocol: &UlfProtocol, rng: &mut R) -> Result<DwiDataset> {
    let dwi = ds.dwi_indices();
    if dwi.len() < protocol.n_directions {
        return Err(Error::Argument(format!(
            "protocol needs {} diffusion directions, dataset has {}",
            protocol.n_directions,
            dwi.len()
        )));
    }
    let dirs: Vec<[f64; 3]> = dwi.iter().map(|&i| ds.gradients.bvecs[i]).collect();
    let start = if protocol.random_start { rng.random_range(0..dirs.len()) } else { 0 };
    let picked: Vec<usize> = electrostatic_subset(&dirs, protocol.n_directions, start)?
        .into_iter()
        .map(|k| dwi[k])
        .collect();
    let keep: Vec<usize> = (0..ds.gradients.len())
        .filter(|i| ds.lowb_indices().contains(i) || picked.contains(i))
        .collect();
    let selected = ds.volume.select_channels(&keep);
    let (op, grid) = downsample_op(&selected.grid, [protocol.voxel_mm; 3]);
    let mut vol = if op.ops.iter().all(AxisOp::is_identity) {
        selected
    } else {
        op.apply(&selected, &grid)
    };
    if protocol.rician_sigma > 0.0 {
        add_rician_noise(&mut vol.data, protocol.rician_sigma, rng);
    }
    let gradients: GradientTable = ds.gradients.subset(&keep);
    DwiDataset::new(vol, gradients)
}
