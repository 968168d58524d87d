use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{tensor_metrics, TensorField};
use crate::volume::{Volume, VolumeGrid};

use super::prior::kappa_from_eigenvalues;

/// Upper bound on either Beta parameter.
pub const ALPHA_BETA_CAP: f64 = 100.0;
/// Method-of-moments means are clamped to [MEAN_CLAMP, 1 − MEAN_CLAMP].
const MEAN_CLAMP: f64 = 0.01;
/// Lower bound on the Beta concentration α + β.
const MIN_CONCENTRATION: f64 = 2.0;
/// Half-width of the cubic moment window (5×5×5).
const WINDOW_RADIUS: usize = 2;

/// Label values: 0 background, 1 WM, 2 GM, 3 CSF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TissueClass {
    Wm,
    Gm,
    Csf,
}

impl TissueClass {
    pub const ALL: [TissueClass; 3] = [TissueClass::Wm, TissueClass::Gm, TissueClass::Csf];

    pub fn label(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn index(self) -> usize {
        match self {
            TissueClass::Wm => 0,
            TissueClass::Gm => 1,
            TissueClass::Csf => 2,
        }
    }

    pub fn from_label(label: u8) -> Option<Self> {
        match label {
            1 => Some(TissueClass::Wm),
            2 => Some(TissueClass::Gm),
            3 => Some(TissueClass::Csf),
            _ => None,
        }
    }
}

/// Voxelwise Beta (per tissue class) and Watson priors on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasPriors {
    pub grid: VolumeGrid,
    pub labels: Vec<u8>,
    /// `alpha[class][voxel]`, class order WM, GM, CSF.
    pub alpha: [Vec<f64>; 3],
    pub beta: [Vec<f64>; 3],
    pub v1_mu: Vec<[f64; 3]>,
    pub kappa: Vec<f64>,
}

pub const ATLAS_CHANNELS: [&str; 11] = [
    "alpha_wm", "alpha_gm", "alpha_csf", "beta_wm", "beta_gm", "beta_csf", "label", "v1_mu_x",
    "v1_mu_y", "v1_mu_z", "kappa",
];

impl AtlasPriors {
    /// Beta parameters for the voxel's own tissue class.
    pub fn beta_params(&self, voxel: usize) -> Option<(f64, f64)> {
        TissueClass::from_label(self.labels[voxel])
            .map(|c| (self.alpha[c.index()][voxel], self.beta[c.index()][voxel]))
    }

    /// Rigid reorientation of the directional prior.
    pub fn reorient(&mut self, rotation: &Matrix3<f64>) {
        for v in &mut self.v1_mu {
            let r = rotation * Vector3::from(*v);
            *v = [r[0], r[1], r[2]];
        }
    }

    /// Eleven-channel bundle in [`ATLAS_CHANNELS`] order.
    pub fn to_volume(&self) -> Volume {
        let n = self.grid.n_voxels();
        let mut data = Vec::with_capacity(11 * n);
        for c in 0..3 {
            data.extend_from_slice(&self.alpha[c]);
        }
        for c in 0..3 {
            data.extend_from_slice(&self.beta[c]);
        }
        data.extend(self.labels.iter().map(|&l| l as f64));
        for a in 0..3 {
            data.extend(self.v1_mu.iter().map(|v| v[a]));
        }
        data.extend_from_slice(&self.kappa);
        Volume {
            grid: self.grid.clone(),
            channels: 11,
            data,
        }
    }

    pub fn from_volume(v: &Volume) -> Result<Self> {
        if v.channels != 11 {
            return Err(Error::Format(format!("atlas bundle needs 11 channels, got {}", v.channels)));
        }
        let ch = |c: usize| v.channel(c).to_vec();
        let labels = v
            .channel(6)
            .iter()
            .map(|&l| {
                if (0.0..=3.0).contains(&l) && l.fract() == 0.0 {
                    Ok(l as u8)
                } else {
                    Err(Error::Format(format!("invalid tissue label {l}")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        let n = v.n_voxels();
        let v1_mu = (0..n).map(|i| [v.get(i, 7), v.get(i, 8), v.get(i, 9)]).collect();
        Ok(Self {
            grid: v.grid.clone(),
            labels,
            alpha: [ch(0), ch(1), ch(2)],
            beta: [ch(3), ch(4), ch(5)],
            v1_mu,
            kappa: ch(10),
        })
    }
}

/// Sum over a clamped cubic window of half-width `r`, separably.
fn box_sum(data: &[f64], dims: [usize; 3], r: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        let s = strides[axis];
        let mut out = vec![0.0; cur.len()];
        for (idx, o) in out.iter_mut().enumerate() {
            let pos = (idx / s) % n;
            let lo = pos.saturating_sub(r);
            let hi = (pos + r).min(n - 1);
            let base = idx - pos * s;
            let mut acc = 0.0;
            for p in lo..=hi {
                acc += cur[base + p * s];
            }
            *o = acc;
        }
        cur = out;
    }
    cur
}

/// Beta parameters with the given mean and concentration, scaled down so
/// neither exceeds the cap.
fn beta_from_moments(mean: f64, var: f64) -> (f64, f64) {
    let m = mean.clamp(MEAN_CLAMP, 1.0 - MEAN_CLAMP);
    let nu = if var > 1e-14 {
        (m * (1.0 - m) / var - 1.0).max(MIN_CONCENTRATION)
    } else {
        f64::INFINITY
    };
    // cap the larger parameter, keeping the mean
    let nu = nu.min(ALPHA_BETA_CAP / m.max(1.0 - m));
    (m * nu, (1.0 - m) * nu)
}

/// Priors from a tensor field: Beta parameters by method of moments over
/// same-label voxels in a 5×5×5 window (for every class at every voxel),
/// v1_μ from the field's principal eigenvector, κ from its normalized
/// principal eigenvalue.
pub fn build_atlas_from_tensors(field: &TensorField, labels: &[u8]) -> Result<AtlasPriors> {
    let n = field.grid.n_voxels();
    if labels.len() != n || field.tensors.len() != n {
        return Err(Error::Argument(format!(
            "labels ({}) and tensors ({}) must cover the {n}-voxel grid",
            labels.len(),
            field.tensors.len()
        )));
    }
    let metrics = field.metrics();
    let dims = field.grid.dims;
    let mut alpha: [Vec<f64>; 3] = Default::default();
    let mut beta: [Vec<f64>; 3] = Default::default();
    for class in TissueClass::ALL {
        let ind: Vec<f64> = labels.iter().map(|&l| (l == class.label()) as u8 as f64).collect();
        let s1: Vec<f64> = ind.iter().zip(&metrics).map(|(w, m)| w * m.fa).collect();
        let s2: Vec<f64> = ind.iter().zip(&metrics).map(|(w, m)| w * m.fa * m.fa).collect();
        let cnt = box_sum(&ind, dims, WINDOW_RADIUS);
        let s1 = box_sum(&s1, dims, WINDOW_RADIUS);
        let s2 = box_sum(&s2, dims, WINDOW_RADIUS);
        let (mut a, mut b) = (vec![1.0; n], vec![1.0; n]);
        for i in 0..n {
            let k = cnt[i].round();
            if k < 1.0 {
                continue;
            }
            let mean = s1[i] / k;
            let var = (s2[i] / k - mean * mean).max(0.0);
            let (ai, bi) = beta_from_moments(mean, var);
            a[i] = ai;
            b[i] = bi;
        }
        alpha[class.index()] = a;
        beta[class.index()] = b;
    }
    let v1_mu = metrics.iter().map(|m| m.v1).collect();
    let kappa = metrics
        .iter()
        .zip(labels)
        .map(|(m, &l)| if l == 0 { 0.0 } else { kappa_from_eigenvalues(m.eigenvalues) })
        .collect();
    Ok(AtlasPriors {
        grid: field.grid.clone(),
        labels: labels.to_vec(),
        alpha,
        beta,
        v1_mu,
        kappa,
    })
}

/// Principal-eigenvector field of a tensor field (unit vectors).
pub fn principal_directions(field: &TensorField) -> Vec<[f64; 3]> {
    field.tensors.iter().map(|t| tensor_metrics(t).v1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DiffusionTensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prolate_with_fa(target: f64) -> DiffusionTensor {
        // bisect the axial diffusivity for a given radial 3e-4
        let (mut lo, mut hi) = (3e-4, 1e-1);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let fa = tensor_metrics(&DiffusionTensor([mid, 3e-4, 3e-4, 0.0, 0.0, 0.0])).fa;
            if fa < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        DiffusionTensor([lo, 3e-4, 3e-4, 0.0, 0.0, 0.0])
    }

    #[test]
    fn box_sum_matches_naive() {
        let dims = [5, 4, 6];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..120).map(|_| rng.random()).collect();
        let fast = box_sum(&data, dims, 2);
        let g = VolumeGrid::isotropic(dims, 1.0);
        for i in 0..120 {
            let [x, y, z] = g.coords(i);
            let mut s = 0.0;
            for zz in z.saturating_sub(2)..=(z + 2).min(5) {
                for yy in y.saturating_sub(2)..=(y + 2).min(3) {
                    for xx in x.saturating_sub(2)..=(x + 2).min(4) {
                        s += data[g.index(xx, yy, zz)];
                    }
                }
            }
            assert!((s - fast[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_fa_moments() {
        let grid = VolumeGrid::isotropic([8, 8, 8], 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tensors = (0..512)
            .map(|_| prolate_with_fa(0.5 + 0.01 * (rng.random::<f64>() - 0.5)))
            .collect();
        let field = TensorField { grid, tensors };
        let atlas = build_atlas_from_tensors(&field, &vec![1; 512]).unwrap();
        for i in 0..512 {
            let (a, b) = atlas.beta_params(i).unwrap();
            assert!(a > 0.0 && b > 0.0 && a.max(b) <= ALPHA_BETA_CAP + 1e-9);
            assert!((a / (a + b) - 0.5).abs() < 0.01);
            assert_eq!(atlas.v1_mu[i], [1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn isotropic_region_has_zero_kappa_and_capped_beta() {
        let grid = VolumeGrid::isotropic([4, 4, 4], 2.0);
        let field = TensorField {
            grid,
            tensors: vec![DiffusionTensor::isotropic(8e-4); 64],
        };
        let atlas = build_atlas_from_tensors(&field, &vec![2; 64]).unwrap();
        assert!(atlas.kappa.iter().all(|&k| k == 0.0));
        let (a, b) = atlas.beta_params(0).unwrap();
        assert!((b - ALPHA_BETA_CAP).abs() < 1e-9);
        assert!((a / (a + b) - MEAN_CLAMP).abs() < 1e-12);
        // classes absent from the window fall back to the flat prior
        assert_eq!(atlas.alpha[0][0], 1.0);
    }

    #[test]
    fn bundle_kappa_from_eigenvalues() {
        let grid = VolumeGrid::isotropic([3, 3, 3], 2.0);
        let t = DiffusionTensor([1.7e-3, 3e-4, 3e-4, 0.0, 0.0, 0.0]);
        let field = TensorField {
            grid,
            tensors: vec![t; 27],
        };
        let atlas = build_atlas_from_tensors(&field, &vec![1; 27]).unwrap();
        let l1 = 1.7 / 2.3;
        assert!((atlas.kappa[0] - (3.0 * l1 - 1.0) / (1.0 - l1)).abs() < 1e-9);
    }

    #[test]
    fn volume_bundle_roundtrip_and_reorient() {
        let grid = VolumeGrid::isotropic([3, 2, 2], 2.0);
        let field = TensorField {
            grid,
            tensors: vec![DiffusionTensor([1.7e-3, 3e-4, 3e-4, 0.0, 0.0, 0.0]); 12],
        };
        let mut atlas = build_atlas_from_tensors(&field, &[1, 2, 3, 0, 1, 1, 2, 2, 3, 3, 1, 0]).unwrap();
        let back = AtlasPriors::from_volume(&atlas.to_volume()).unwrap();
        assert_eq!(back, atlas);
        atlas.reorient(&crate::linalg::rot_z(std::f64::consts::FRAC_PI_2));
        assert!((atlas.v1_mu[0][1] - 1.0).abs() < 1e-12);
    }
}
