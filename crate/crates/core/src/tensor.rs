//! Diffusion tensor forward model, log-linear fitting and derived metrics.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::{DwiDataset, GradientTable, DEFAULT_SHELL_TOLERANCE};
use crate::linalg::SortedEigen;
use crate::volume::{Volume, VolumeGrid};

/// Symmetric tensor stored as (Dxx, Dyy, Dzz, Dxy, Dxz, Dyz), mm²/s.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DiffusionTensor(pub [f64; 6]);

impl DiffusionTensor {
    pub fn isotropic(d: f64) -> Self {
        Self([d, d, d, 0.0, 0.0, 0.0])
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Self([
            m[(0, 0)],
            m[(1, 1)],
            m[(2, 2)],
            0.5 * (m[(0, 1)] + m[(1, 0)]),
            0.5 * (m[(0, 2)] + m[(2, 0)]),
            0.5 * (m[(1, 2)] + m[(2, 1)]),
        ])
    }

    /// Tensor with the given eigenvalues along the given orthonormal axes.
    pub fn from_eigen(values: [f64; 3], axes: &Matrix3<f64>) -> Self {
        let m = axes * Matrix3::from_diagonal(&Vector3::from(values)) * axes.transpose();
        Self::from_matrix(&m)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let [xx, yy, zz, xy, xz, yz] = self.0;
        Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz)
    }

    /// uᵀ D u.
    pub fn quad(&self, u: [f64; 3]) -> f64 {
        let [xx, yy, zz, xy, xz, yz] = self.0;
        let [x, y, z] = u;
        xx * x * x + yy * y * y + zz * z * z + 2.0 * (xy * x * y + xz * x * z + yz * y * z)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.map(|v| v * c))
    }
}

/// Stejskal–Tanner signal S0·exp(−b·uᵀDu).
pub fn st_forward(s0: f64, tensor: &DiffusionTensor, bval: f64, bvec: [f64; 3]) -> f64 {
    if bval == 0.0 {
        return s0;
    }
    s0 * (-bval * tensor.quad(bvec)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Weighted least squares with weights from a first OLS pass.
    pub weighted: bool,
    /// Signals are floored at this fraction of the voxel's mean b=0 signal.
    pub floor_fraction: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            weighted: false,
            floor_fraction: 1e-6,
        }
    }
}

/// Precomputed log-linear tensor fit for one gradient table.
///
/// Parameters θ = (log S0, Dxx, Dyy, Dzz, Dxy, Dxz, Dyz).
#[derive(Debug, Clone)]
pub struct TensorFitter {
    design: DMatrix<f64>,
    pinv: DMatrix<f64>,
    lowb: Vec<usize>,
    config: FitConfig,
}

impl TensorFitter {
    pub fn new(gradients: &GradientTable) -> Result<Self> {
        Self::with_config(gradients, FitConfig::default())
    }

    pub fn with_config(gradients: &GradientTable, config: FitConfig) -> Result<Self> {
        let n = gradients.len();
        let design = DMatrix::from_fn(n, 7, |r, c| {
            let b = gradients.bvals[r];
            let [x, y, z] = gradients.bvecs[r];
            match c {
                0 => 1.0,
                1 => -b * x * x,
                2 => -b * y * y,
                3 => -b * z * z,
                4 => -2.0 * b * x * y,
                5 => -2.0 * b * x * z,
                _ => -2.0 * b * y * z,
            }
        });
        let pinv = pseudo_inverse(&design)?;
        let mut lowb = gradients.lowb_indices(DEFAULT_SHELL_TOLERANCE);
        if lowb.is_empty() {
            // fall back to the least-weighted entry as the S0 reference
            let i = (0..n)
                .min_by(|&a, &b| gradients.bvals[a].total_cmp(&gradients.bvals[b]))
                .unwrap_or(0);
            lowb.push(i);
        }
        Ok(Self {
            design,
            pinv,
            lowb,
            config,
        })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    /// 7×N pseudo-inverse mapping log-signals to θ.
    pub fn pinv(&self) -> &DMatrix<f64> {
        &self.pinv
    }

    pub fn n_measurements(&self) -> usize {
        self.design.nrows()
    }

    /// Floored log-signals for one voxel.
    pub fn log_signals(&self, signals: &[f64]) -> Vec<f64> {
        let mean_b0 = self.lowb.iter().map(|&i| signals[i]).sum::<f64>() / self.lowb.len() as f64;
        let floor = (self.config.floor_fraction * mean_b0).max(f64::MIN_POSITIVE);
        signals.iter().map(|&s| s.max(floor).ln()).collect()
    }

    /// Fit one voxel; returns the tensor and fitted log S0.
    pub fn fit(&self, signals: &[f64]) -> (DiffusionTensor, f64) {
        let y = self.log_signals(signals);
        let theta = if self.config.weighted {
            self.fit_weighted(&y)
        } else {
            self.apply_pinv(&y)
        };
        (
            DiffusionTensor([theta[1], theta[2], theta[3], theta[4], theta[5], theta[6]]),
            theta[0],
        )
    }

    /// θ = pinv · y.
    pub fn apply_pinv(&self, log_signals: &[f64]) -> [f64; 7] {
        let mut theta = [0.0; 7];
        for (r, t) in theta.iter_mut().enumerate() {
            *t = log_signals.iter().enumerate().map(|(c, y)| self.pinv[(r, c)] * y).sum();
        }
        theta
    }

    /// Adjoint of [`apply_pinv`](Self::apply_pinv): gradient with respect to
    /// the log-signals given a gradient with respect to θ.
    pub fn pinv_adjoint(&self, grad_theta: &[f64; 7]) -> Vec<f64> {
        (0..self.pinv.ncols())
            .map(|c| (0..7).map(|r| self.pinv[(r, c)] * grad_theta[r]).sum())
            .collect()
    }

    fn fit_weighted(&self, y: &[f64]) -> [f64; 7] {
        let theta0 = self.apply_pinv(y);
        let t0 = DVector::from_row_slice(&theta0);
        let pred = &self.design * t0;
        let w: Vec<f64> = pred.iter().map(|p| (2.0 * p).exp()).collect();
        let n = y.len();
        let wa = DMatrix::from_fn(n, 7, |r, c| w[r].sqrt() * self.design[(r, c)]);
        let wy = DVector::from_fn(n, |r, _| w[r].sqrt() * y[r]);
        match wa.clone().svd(true, true).solve(&wy, 1e-14) {
            Ok(t) => std::array::from_fn(|i| t[i]),
            Err(_) => theta0,
        }
    }
}

/// Moore–Penrose pseudo-inverse of a full-column-rank matrix.
pub fn pseudo_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * a.nrows().max(a.ncols()) as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < a.ncols() {
        return Err(Error::DegenerateGeometry(format!(
            "design matrix has rank {rank} < {}",
            a.ncols()
        )));
    }
    svd.pseudo_inverse(tol)
        .map_err(|e| Error::DegenerateGeometry(e.to_string()))
}

/// Scalar and direction summaries of one tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorMetrics {
    pub fa: f64,
    pub adc: f64,
    pub v1: [f64; 3],
    pub eigenvalues: [f64; 3],
}

/// FA from (already clamped) eigenvalues.
pub fn fa_from_eigenvalues(l: &[f64; 3]) -> f64 {
    let den = l[0] * l[0] + l[1] * l[1] + l[2] * l[2];
    if den <= 0.0 {
        return 0.0;
    }
    let num = (l[0] - l[1]).powi(2) + (l[1] - l[2]).powi(2) + (l[2] - l[0]).powi(2);
    (0.5 * num / den).sqrt().min(1.0)
}

/// FA and its gradient with respect to the eigenvalues.
pub fn fa_with_grad(l: &[f64; 3]) -> (f64, [f64; 3]) {
    let den = l[0] * l[0] + l[1] * l[1] + l[2] * l[2];
    if den <= 0.0 {
        return (0.0, [0.0; 3]);
    }
    let m = (l[0] + l[1] + l[2]) / 3.0;
    let dev = [l[0] - m, l[1] - m, l[2] - m];
    let num = dev[0] * dev[0] + dev[1] * dev[1] + dev[2] * dev[2];
    // FA² = 1.5·num/den
    let fa = (1.5 * num / den).sqrt();
    if fa <= 1e-15 {
        return (0.0, [0.0; 3]);
    }
    let mut g = [0.0; 3];
    for k in 0..3 {
        let dfa2 = 1.5 * (2.0 * dev[k] * den - num * 2.0 * l[k]) / (den * den);
        g[k] = dfa2 / (2.0 * fa);
    }
    (fa, g)
}

pub fn tensor_metrics(tensor: &DiffusionTensor) -> TensorMetrics {
    let eig = SortedEigen::new(&tensor.matrix());
    let l = [
        eig.values[0].max(0.0),
        eig.values[1].max(0.0),
        eig.values[2].max(0.0),
    ];
    let v1 = eig.v(0);
    TensorMetrics {
        fa: fa_from_eigenvalues(&l),
        adc: (l[0] + l[1] + l[2]) / 3.0,
        v1: [v1[0], v1[1], v1[2]],
        eigenvalues: l,
    }
}

/// V1 coherence: squared norm of the sign-aligned mean direction.
///
/// The reference axis starts at the first vector; vectors are aligned to
/// it, the mean is taken as the new reference, and the alignment is
/// repeated once.
pub fn v1_coherence(directions: &[[f64; 3]]) -> Result<f64> {
    if directions.is_empty() {
        return Err(Error::Argument("v1_coherence needs at least one direction".into()));
    }
    let vs: Vec<Vector3<f64>> = directions.iter().map(|d| Vector3::from(*d)).collect();
    let aligned_mean = |r: &Vector3<f64>| {
        let mut s = Vector3::zeros();
        for v in &vs {
            if v.dot(r) >= 0.0 {
                s += v;
            } else {
                s -= v;
            }
        }
        s / vs.len() as f64
    };
    let mut r = vs[0];
    for _ in 0..2 {
        let m = aligned_mean(&r);
        if m.norm() > 0.0 {
            r = m;
        }
    }
    let m = aligned_mean(&r);
    Ok(m.norm_squared().min(1.0))
}

/// Per-voxel tensors over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub grid: VolumeGrid,
    pub tensors: Vec<DiffusionTensor>,
}

impl TensorField {
    pub fn metrics(&self) -> Vec<TensorMetrics> {
        self.tensors.par_iter().map(tensor_metrics).collect()
    }

    /// Six-channel volume in (xx, yy, zz, xy, xz, yz) order.
    pub fn to_volume(&self) -> Volume {
        let n = self.grid.n_voxels();
        let mut v = Volume::zeros(self.grid.clone(), 6);
        for c in 0..6 {
            for i in 0..n {
                v.data[c * n + i] = self.tensors[i].0[c];
            }
        }
        v
    }

    pub fn from_volume(v: &Volume) -> Result<Self> {
        if v.channels != 6 {
            return Err(Error::Argument(format!("tensor volume needs 6 channels, got {}", v.channels)));
        }
        let tensors = (0..v.n_voxels())
            .map(|i| DiffusionTensor(std::array::from_fn(|c| v.get(i, c))))
            .collect();
        Ok(Self {
            grid: v.grid.clone(),
            tensors,
        })
    }
}

/// Voxelwise fit over a dataset. Returns the tensor field and log S0 map.
pub fn fit_dataset(ds: &DwiDataset, config: FitConfig) -> Result<(TensorField, Vec<f64>)> {
    let fitter = TensorFitter::with_config(&ds.gradients, config)?;
    let n = ds.volume.n_voxels();
    let results: Vec<(DiffusionTensor, f64)> = (0..n)
        .into_par_iter()
        .map(|i| fitter.fit(&ds.volume.voxel_values(i)))
        .collect();
    let (tensors, log_s0) = results.into_iter().unzip();
    Ok((
        TensorField {
            grid: ds.volume.grid.clone(),
            tensors,
        },
        log_s0,
    ))
}

/// FA, ADC and V1 maps as volumes (1, 1 and 3 channels).
pub fn metric_maps(field: &TensorField) -> (Volume, Volume, Volume) {
    let m = field.metrics();
    let n = field.grid.n_voxels();
    let g = field.grid.clone();
    let fa = Volume {
        grid: g.clone(),
        channels: 1,
        data: m.iter().map(|t| t.fa).collect(),
    };
    let adc = Volume {
        grid: g.clone(),
        channels: 1,
        data: m.iter().map(|t| t.adc).collect(),
    };
    let mut v1 = Volume::zeros(g, 3);
    for (i, t) in m.iter().enumerate() {
        for c in 0..3 {
            v1.data[c * n + i] = t.v1[c];
        }
    }
    (fa, adc, v1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::ulf_gradient_table;

    #[test]
    fn forward_b0_and_isotropic() {
        let d = DiffusionTensor([1e-3, 2e-3, 3e-4, 1e-4, 0.0, 2e-4]);
        assert_eq!(st_forward(1.0, &d, 0.0, [1.0, 0.0, 0.0]), 1.0);
        let iso = DiffusionTensor::isotropic(1e-3);
        let u = [0.6, 0.0, 0.8];
        assert!((st_forward(1.0, &iso, 700.0, u) - (-0.7f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn forward_hand_value() {
        let d = DiffusionTensor([2e-3, 2e-4, 2e-4, 0.0, 0.0, 0.0]);
        let s = st_forward(100.0, &d, 700.0, [1.0, 0.0, 0.0]);
        assert!((s - 100.0 * (-1.4f64).exp()).abs() < 1e-12);
        assert!((s - 24.66).abs() < 0.005);
    }

    #[test]
    fn no_attenuation_gives_zero_tensor() {
        let g = ulf_gradient_table();
        let f = TensorFitter::new(&g).unwrap();
        let (d, ls0) = f.fit(&vec![250.0; g.len()]);
        assert!(d.0.iter().all(|v| v.abs() < 1e-15));
        assert!((ls0 - 250f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_rejected() {
        let g = GradientTable::new(
            vec![0.0, 700.0, 700.0, 700.0],
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        )
        .unwrap();
        assert!(matches!(TensorFitter::new(&g), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn metrics_isotropic_and_stick() {
        let m = tensor_metrics(&DiffusionTensor::isotropic(1e-3));
        assert_eq!(m.fa, 0.0);
        assert!((m.adc - 1e-3).abs() < 1e-18);
        let m = tensor_metrics(&DiffusionTensor([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        assert!((m.fa - 1.0).abs() < 1e-15);
        assert_eq!(m.v1, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn fa_of_prolate_tensor() {
        // sqrt(0.5·(2·1.4²)/(1.7²+2·0.3²)), units of 1e-3 cancel
        let oracle = (0.5f64 * 2.0 * 1.4 * 1.4 / (1.7 * 1.7 + 2.0 * 0.3 * 0.3)).sqrt();
        let m = tensor_metrics(&DiffusionTensor([1.7e-3, 3e-4, 3e-4, 0.0, 0.0, 0.0]));
        assert!((m.fa - oracle).abs() < 1e-12);
        assert!((m.fa - 0.799_03).abs() < 1e-5);
    }

    #[test]
    fn fa_gradient_matches_fd() {
        let l = [1.7e-3, 5e-4, 2e-4];
        let (_, g) = fa_with_grad(&l);
        for k in 0..3 {
            let h = 1e-9;
            let mut p = l;
            let mut q = l;
            p[k] += h;
            q[k] -= h;
            let fd = (fa_from_eigenvalues(&p) - fa_from_eigenvalues(&q)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-5 * g[k].abs().max(1.0), "{fd} {}", g[k]);
        }
    }

    #[test]
    fn coherence_examples() {
        assert_eq!(v1_coherence(&[[0.0, 0.0, 1.0]; 5]).unwrap(), 1.0);
        assert_eq!(v1_coherence(&[[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]).unwrap(), 1.0);
        assert!(v1_coherence(&[]).is_err());
    }

    #[test]
    fn weighted_fit_exact_on_clean_data() {
        let g = ulf_gradient_table();
        let d = DiffusionTensor([1.2e-3, 4e-4, 6e-4, 1e-4, -5e-5, 2e-4]);
        let s: Vec<f64> = (0..g.len()).map(|i| st_forward(900.0, &d, g.bvals[i], g.bvecs[i])).collect();
        let cfg = FitConfig {
            weighted: true,
            ..Default::default()
        };
        let (fit, _) = TensorFitter::with_config(&g, cfg).unwrap().fit(&s);
        for k in 0..6 {
            assert!((fit.0[k] - d.0[k]).abs() < 1e-12);
        }
    }
}
