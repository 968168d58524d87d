//! Composite training loss and the differentiable soft-argmax direction.
//!
//! All terms are averaged over voxels and summed over their channels:
//! squared error on low-b and ℓ=0, absolute error on the five ℓ=2
//! channels, an anisotropy-weighted angular term on soft-argmax
//! directions, and squared error between the resampled prediction and the
//! LR input.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use ulfdti::linalg::{canonical_sign, SortedEigen};
use ulfdti::resample::SeparableOp;
use ulfdti::sample::SAMPLE_CHANNELS;
use ulfdti::sh::{fibonacci_sphere, sh_basis, ShCoeffs};

use crate::error::{NetError, Result};
use crate::kernels::softmax_in_place;
use crate::tape::Tensor;

/// Keeps the ℓ=2 normalization finite on isotropic voxels.
pub const L2_NORM_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_lowb_l2: f64,
    pub w_l2order_l1: f64,
    pub w_angular: f64,
    pub w_consistency: f64,
    pub fibonacci_count: usize,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_lowb_l2: 5.0,
            w_l2order_l1: 10.0,
            w_angular: 1.0,
            w_consistency: 2.5,
            fibonacci_count: 256,
            temperature: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_lowb_l2, self.w_l2order_l1, self.w_angular, self.w_consistency];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(NetError::Config("loss weights must be finite and non-negative".into()));
        }
        if self.fibonacci_count < 64 {
            return Err(NetError::Config("soft-argmax needs at least 64 directions".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(NetError::Config("soft-argmax temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Soft-argmax over a Fibonacci direction set. The ℓ=2 part of the signal
/// is negated (diffusion signal is lowest along the fibre), scaled to unit
/// coefficient norm, softmax-weighted, and the principal axis of the
/// weighted sum of d·dᵀ is returned.
#[derive(Debug, Clone)]
pub struct SoftArgmax {
    pub directions: Vec<[f64; 3]>,
    /// ℓ=2 basis values per direction.
    basis: Vec<[f64; 5]>,
    pub temperature: f64,
}

/// Saved forward state for one voxel.
#[derive(Debug, Clone)]
pub struct SoftArgmaxState {
    pub direction: Vector3<f64>,
    weights: Vec<f64>,
    scores: Vec<f64>,
    norm: f64,
    eig: SortedEigen,
}

impl SoftArgmax {
    pub fn new(count: usize, temperature: f64) -> Self {
        let directions = fibonacci_sphere(count);
        let basis = directions
            .iter()
            .map(|&d| {
                let y = sh_basis(d);
                [y[1], y[2], y[3], y[4], y[5]]
            })
            .collect();
        Self {
            directions,
            basis,
            temperature,
        }
    }

    pub fn forward(&self, c2: &[f64; 5]) -> SoftArgmaxState {
        let norm = (c2.iter().map(|v| v * v).sum::<f64>() + L2_NORM_EPS * L2_NORM_EPS).sqrt();
        let scores: Vec<f64> = self.basis.iter().map(|b| (0..5).map(|k| b[k] * c2[k]).sum::<f64>()).collect();
        let mut weights: Vec<f64> = scores.iter().map(|s| -s / (norm * self.temperature)).collect();
        softmax_in_place(&mut weights);
        let mut m = Matrix3::zeros();
        for (d, &a) in self.directions.iter().zip(&weights) {
            let d = Vector3::from(*d);
            m += a * d * d.transpose();
        }
        let eig = SortedEigen::new(&m);
        SoftArgmaxState {
            direction: canonical_sign(eig.v(0)),
            weights,
            scores,
            norm,
            eig,
        }
    }

    pub fn direction(&self, coeffs: &ShCoeffs) -> Vector3<f64> {
        let c = coeffs.0;
        self.forward(&[c[1], c[2], c[3], c[4], c[5]]).direction
    }

    /// Gradient with respect to the ℓ=2 coefficients given the gradient
    /// with respect to the returned direction.
    pub fn backward(&self, state: &SoftArgmaxState, c2: &[f64; 5], grad_dir: &Vector3<f64>) -> [f64; 5] {
        // the eigenvector adjoint works on the un-flipped column
        let flip = if state.eig.v(0).dot(&state.direction) < 0.0 { -1.0 } else { 1.0 };
        let g = state.eig.adjoint(&Vector3::zeros(), &(flip * grad_dir));
        let ga: Vec<f64> = self
            .directions
            .iter()
            .map(|d| {
                let d = Vector3::from(*d);
                d.dot(&(g * d))
            })
            .collect();
        let dot: f64 = state.weights.iter().zip(&ga).map(|(a, b)| a * b).sum();
        // weights = softmax(−s/(n·τ))
        let n = state.norm;
        let tau = self.temperature;
        let mut out = [0.0; 5];
        let mut gs_dot_s = 0.0;
        for (k, b) in self.basis.iter().enumerate() {
            let gz = state.weights[k] * (ga[k] - dot);
            let gs = -gz / (n * tau);
            gs_dot_s += -gz * state.scores[k];
            for j in 0..5 {
                out[j] += gs * b[j];
            }
        }
        // d(1/n)/dc = −c/n³
        for j in 0..5 {
            out[j] += gs_dot_s / tau * (-c2[j] / (n * n * n));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub lowb_l2: f64,
    pub l2order_l1: f64,
    pub angular: f64,
    pub consistency: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct CompositeLoss {
    pub weights: LossWeights,
    pub soft_argmax: SoftArgmax,
}

fn ell2(data: &[f64], v: usize, n: usize) -> [f64; 5] {
    std::array::from_fn(|k| data[(k + 2) * n + v])
}

impl CompositeLoss {
    pub fn new(weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        let soft_argmax = SoftArgmax::new(weights.fibonacci_count, weights.temperature);
        Ok(Self { weights, soft_argmax })
    }

    /// Loss and its gradient with respect to `pred`. Tensors are
    /// `[7, Z, Y, X]`; `degrade` maps the prediction grid onto the grid of
    /// `lr` (dims in x, y, z order). Without `degrade` the consistency term
    /// is zero.
    pub fn evaluate(&self, pred: &Tensor, target: &Tensor, lr: &Tensor, degrade: Option<&SeparableOp>) -> Result<(LossTerms, Vec<f64>)> {
        if pred.shape != target.shape || pred.shape.len() != 4 || pred.shape[0] != SAMPLE_CHANNELS {
            return Err(NetError::Shape(format!(
                "prediction {:?} and target {:?} must both be [7, Z, Y, X]",
                pred.shape, target.shape
            )));
        }
        let n = pred.len() / SAMPLE_CHANNELS;
        let nf = n as f64;
        let w = &self.weights;
        let mut grad = vec![0.0; pred.len()];
        let mut terms = LossTerms::default();
        let (p, t) = (&pred.data, &target.data);

        for i in 0..2 * n {
            let r = p[i] - t[i];
            terms.lowb_l2 += r * r / nf;
            grad[i] += w.w_lowb_l2 * 2.0 * r / nf;
        }
        for i in 2 * n..SAMPLE_CHANNELS * n {
            let r = p[i] - t[i];
            terms.l2order_l1 += r.abs() / nf;
            grad[i] += w.w_l2order_l1 * if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            } / nf;
        }

        if w.w_angular > 0.0 {
            let weights: Vec<f64> = (0..n).map(|v| ell2(t, v, n).iter().map(|c| c * c).sum()).collect();
            let total_w: f64 = weights.iter().sum();
            if total_w > 0.0 {
                for v in (0..n).filter(|&v| weights[v] > 0.0) {
                    let tc = ell2(t, v, n);
                    let pc = ell2(p, v, n);
                    let td = self.soft_argmax.forward(&tc).direction;
                    let ps = self.soft_argmax.forward(&pc);
                    let c = ps.direction.dot(&td);
                    let wv = weights[v] / total_w;
                    // ‖p × t‖² = 1 − (p·t)² for unit vectors, without the
                    // rounding that can push the difference below zero
                    terms.angular += wv * ps.direction.cross(&td).norm_squared();
                    let gdir = (td - ps.direction * c) * (-2.0 * c * wv * w.w_angular);
                    let gc = self.soft_argmax.backward(&ps, &pc, &gdir);
                    for k in 0..5 {
                        grad[(k + 2) * n + v] += gc[k];
                    }
                }
            }
        }

        if let Some(op) = degrade {
            let spatial = pred.spatial();
            let dims = [spatial[2], spatial[1], spatial[0]];
            if op.in_dims() != dims {
                return Err(NetError::Shape(format!("degrade input dims {:?} vs prediction {dims:?}", op.in_dims())));
            }
            let out = op.out_dims();
            if lr.len() != SAMPLE_CHANNELS * out.iter().product::<usize>() {
                return Err(NetError::Shape(format!("LR input has {} values, degrade produces {out:?}", lr.len())));
            }
            let mut r = op.apply_raw(p, SAMPLE_CHANNELS);
            let m = r.len() / SAMPLE_CHANNELS;
            for (ri, li) in r.iter_mut().zip(&lr.data) {
                *ri -= li;
                terms.consistency += *ri * *ri / m as f64;
            }
            let scale = w.w_consistency * 2.0 / m as f64;
            r.iter_mut().for_each(|v| *v *= scale);
            let back = op.adjoint_raw(&r, SAMPLE_CHANNELS);
            grad.iter_mut().zip(&back).for_each(|(g, b)| *g += b);
        }

        terms.total = w.w_lowb_l2 * terms.lowb_l2
            + w.w_l2order_l1 * terms.l2order_l1
            + w.w_angular * terms.angular
            + w.w_consistency * terms.consistency;
        Ok((terms, grad))
    }
}
