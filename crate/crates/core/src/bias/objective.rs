use log::warn;
use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::DwiDataset;
use crate::linalg::SortedEigen;
use crate::optim::{lbfgs, Adam, LbfgsConfig, LbfgsStatus};
use crate::tensor::{fa_with_grad, TensorFitter};

use super::atlas::{AtlasPriors, TissueClass};
use super::dct::{BiasCoefficients, DctBasis, N_BASIS};
use super::prior::{beta_nll_grad, dsw_nll};

/// Voxels per reduction chunk; partial sums are combined in chunk order
/// so results do not depend on the thread count.
const CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectionConfig {
    /// Weight on Σ c².
    pub lambda_c: f64,
    /// Weight on the gray-matter FA² penalty.
    pub lambda_gm: f64,
    pub adam_steps: usize,
    pub adam_lr: f64,
    pub lbfgs: LbfgsConfig,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            lambda_c: 1e-2,
            lambda_gm: 1.0,
            adam_steps: 200,
            adam_lr: 1e-2,
            lbfgs: LbfgsConfig::default(),
        }
    }
}

/// Objective broken down by term. Data terms are voxel means.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub beta: f64,
    pub dsw: f64,
    pub gm: f64,
    pub regularizer: f64,
    pub total: f64,
}

impl std::ops::AddAssign for ObjectiveTerms {
    fn add_assign(&mut self, o: Self) {
        self.beta += o.beta;
        self.dsw += o.dsw;
        self.gm += o.gm;
        self.regularizer += o.regularizer;
        self.total += o.total;
    }
}

#[derive(Debug, Clone, Copy)]
struct VoxelPrior {
    alpha: f64,
    beta: f64,
    v1_mu: [f64; 3],
    kappa: f64,
    gm: bool,
}

/// Precomputed data for repeated objective evaluations.
///
/// Only diffusion-weighted entries carry bias coefficients; the parameter
/// vector holds six coefficients per such entry, in table order.
#[derive(Debug, Clone)]
pub struct BiasProblem {
    fitter: TensorFitter,
    basis: DctBasis,
    n_meas: usize,
    dwi: Vec<usize>,
    voxels: Vec<usize>,
    /// Log of S_i / Ŝ0, `n_meas` per masked voxel.
    log_signals: Vec<f64>,
    priors: Vec<VoxelPrior>,
    lambda_c: f64,
    lambda_gm: f64,
}

impl BiasProblem {
    pub fn new(dataset: &DwiDataset, atlas: &AtlasPriors, config: &CorrectionConfig) -> Result<Self> {
        dataset.validate()?;
        let grid = &dataset.volume.grid;
        if atlas.grid.dims != grid.dims {
            return Err(Error::Argument(format!(
                "atlas grid {:?} does not match dataset grid {:?}",
                atlas.grid.dims, grid.dims
            )));
        }
        if !(config.lambda_c >= 0.0 && config.lambda_gm >= 0.0) {
            return Err(Error::Argument("regularization weights must be >= 0".into()));
        }
        let fitter = TensorFitter::new(&dataset.gradients)?;
        let lowb = dataset.lowb_indices();
        let dwi = dataset.dwi_indices();
        let n_meas = dataset.gradients.len();
        let mut voxels = Vec::new();
        let mut log_signals = Vec::new();
        let mut priors = Vec::new();
        for v in 0..grid.n_voxels() {
            let Some((alpha, beta)) = atlas.beta_params(v) else {
                continue;
            };
            let s = dataset.volume.voxel_values(v);
            let s0 = lowb.iter().map(|&i| s[i]).sum::<f64>() / lowb.len() as f64;
            if !(s0 > 0.0) || s.iter().any(|x| !x.is_finite()) {
                let [x, y, z] = grid.coords(v);
                return Err(Error::Numerical(format!(
                    "non-finite objective: voxel ({x}, {y}, {z}) has mean low-b signal {s0}"
                )));
            }
            let ls0 = s0.ln();
            log_signals.extend(fitter.log_signals(&s).into_iter().map(|l| l - ls0));
            priors.push(VoxelPrior {
                alpha,
                beta,
                v1_mu: atlas.v1_mu[v],
                kappa: atlas.kappa[v],
                gm: atlas.labels[v] == TissueClass::Gm.label(),
            });
            voxels.push(v);
        }
        if voxels.is_empty() {
            return Err(Error::Argument("atlas labels select no voxels".into()));
        }
        Ok(Self {
            fitter,
            basis: DctBasis::new(grid),
            n_meas,
            dwi,
            voxels,
            log_signals,
            priors,
            lambda_c: config.lambda_c,
            lambda_gm: config.lambda_gm,
        })
    }

    pub fn n_params(&self) -> usize {
        self.dwi.len() * N_BASIS
    }

    pub fn n_voxels(&self) -> usize {
        self.voxels.len()
    }

    pub fn basis(&self) -> &DctBasis {
        &self.basis
    }

    /// Gradient-table indices of the diffusion-weighted entries.
    pub fn dwi_indices(&self) -> &[usize] {
        &self.dwi
    }

    /// Full-table coefficients from a parameter vector (zero rows for b=0).
    pub fn to_coefficients(&self, params: &[f64]) -> BiasCoefficients {
        let mut c = BiasCoefficients::zeros(self.n_meas);
        for (k, &i) in self.dwi.iter().enumerate() {
            c.rows[i].copy_from_slice(&params[k * N_BASIS..(k + 1) * N_BASIS]);
        }
        c
    }

    pub fn to_params(&self, coeffs: &BiasCoefficients) -> Vec<f64> {
        self.dwi.iter().flat_map(|&i| coeffs.rows[i]).collect()
    }

    /// Objective value and gradient.
    pub fn evaluate(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let (t, g) = self.evaluate_terms(params);
        (t.total, g)
    }

    pub fn evaluate_terms(&self, params: &[f64]) -> (ObjectiveTerms, Vec<f64>) {
        let np = self.n_params();
        let inv_n = 1.0 / self.voxels.len() as f64;
        let chunks: Vec<(ObjectiveTerms, Vec<f64>)> = (0..self.voxels.len())
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|idx| {
                let mut terms = ObjectiveTerms::default();
                let mut grad = vec![0.0; np];
                for &k in idx {
                    self.voxel_term(k, params, &mut terms, &mut grad);
                }
                (terms, grad)
            })
            .collect();
        let mut terms = ObjectiveTerms::default();
        let mut grad = vec![0.0; np];
        for (t, g) in chunks {
            terms += t;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        terms.beta *= inv_n;
        terms.dsw *= inv_n;
        terms.gm *= inv_n;
        for g in grad.iter_mut() {
            *g *= inv_n;
        }
        terms.regularizer = self.lambda_c * params.iter().map(|c| c * c).sum::<f64>();
        for (g, c) in grad.iter_mut().zip(params) {
            *g += 2.0 * self.lambda_c * c;
        }
        terms.total = terms.beta + terms.dsw + terms.gm + terms.regularizer;
        (terms, grad)
    }

    fn voxel_term(&self, k: usize, params: &[f64], terms: &mut ObjectiveTerms, grad: &mut [f64]) {
        let v = self.voxels[k];
        let phi: [f64; N_BASIS] = std::array::from_fn(|n| self.basis.values[n][v]);
        let mut y = self.log_signals[k * self.n_meas..(k + 1) * self.n_meas].to_vec();
        for (d, &i) in self.dwi.iter().enumerate() {
            let c = &params[d * N_BASIS..(d + 1) * N_BASIS];
            y[i] -= (0..N_BASIS).map(|n| c[n] * phi[n]).sum::<f64>();
        }
        let theta = self.fitter.apply_pinv(&y);
        let dm = Matrix3::new(
            theta[1], theta[4], theta[5], theta[4], theta[2], theta[6], theta[5], theta[6], theta[3],
        );
        let eig = SortedEigen::new(&dm);
        let lc = [eig.values[0].max(0.0), eig.values[1].max(0.0), eig.values[2].max(0.0)];
        let (fa, mut dfa_dl) = fa_with_grad(&lc);
        for kk in 0..3 {
            if eig.values[kk] < 0.0 {
                dfa_dl[kk] = 0.0;
            }
        }
        let v1 = eig.v(0);
        let p = &self.priors[k];

        let (nb, mut dfa) = beta_nll_grad(fa, p.alpha, p.beta);
        let v1a = [v1[0], v1[1], v1[2]];
        let dsw = dsw_nll(v1a, fa, p.v1_mu, p.kappa);
        let d = v1a[0] * p.v1_mu[0] + v1a[1] * p.v1_mu[1] + v1a[2] * p.v1_mu[2];
        dfa += -p.kappa * d * d;
        let gv1 = nalgebra::Vector3::from(p.v1_mu) * (-2.0 * p.kappa * fa * d);
        let mut gm = 0.0;
        if p.gm {
            gm = self.lambda_gm * fa * fa;
            dfa += 2.0 * self.lambda_gm * fa;
        }
        terms.beta += nb;
        terms.dsw += dsw;
        terms.gm += gm;

        let gl = nalgebra::Vector3::new(dfa * dfa_dl[0], dfa * dfa_dl[1], dfa * dfa_dl[2]);
        let g = eig.adjoint(&gl, &gv1);
        let gtheta = [
            0.0,
            g[(0, 0)],
            g[(1, 1)],
            g[(2, 2)],
            g[(0, 1)] + g[(1, 0)],
            g[(0, 2)] + g[(2, 0)],
            g[(1, 2)] + g[(2, 1)],
        ];
        let gy = self.fitter.pinv_adjoint(&gtheta);
        for (d, &i) in self.dwi.iter().enumerate() {
            let gz = -gy[i];
            for n in 0..N_BASIS {
                grad[d * N_BASIS + n] += gz * phi[n];
            }
        }
    }
}

/// Objective value and coefficient gradient for a full coefficient table.
pub fn map_objective(
    dataset: &DwiDataset,
    coeffs: &BiasCoefficients,
    atlas: &AtlasPriors,
    config: &CorrectionConfig,
) -> Result<(f64, BiasCoefficients)> {
    let problem = BiasProblem::new(dataset, atlas, config)?;
    if coeffs.len() != dataset.gradients.len() {
        return Err(Error::Argument(format!(
            "{} coefficient rows for {} gradient entries",
            coeffs.len(),
            dataset.gradients.len()
        )));
    }
    let (v, g) = problem.evaluate(&problem.to_params(coeffs));
    if !v.is_finite() {
        return Err(Error::Numerical("objective is not finite".into()));
    }
    Ok((v, problem.to_coefficients(&g)))
}

#[derive(Debug, Clone)]
pub struct BiasResult {
    pub coefficients: BiasCoefficients,
    pub corrected: DwiDataset,
    pub status: LbfgsStatus,
    pub initial_objective: f64,
    /// Objective at the point handed from ADAM to L-BFGS.
    pub handoff_objective: f64,
    pub final_objective: f64,
    /// Objective per ADAM step followed by each accepted L-BFGS iterate.
    pub history: Vec<f64>,
}

/// ADAM burn-in followed by L-BFGS; returns the coefficients and the
/// dataset with each S_i divided by exp(ζ_i).
pub fn optimize_bias(
    dataset: &DwiDataset,
    atlas: &AtlasPriors,
    config: &CorrectionConfig,
) -> Result<BiasResult> {
    let problem = BiasProblem::new(dataset, atlas, config)?;
    let mut x = vec![0.0; problem.n_params()];
    let (f0, mut g) = problem.evaluate(&x);
    if !f0.is_finite() {
        return Err(Error::Numerical("initial objective is not finite".into()));
    }
    let mut history = vec![f0];
    let mut best = (f0, x.clone());
    let mut adam = Adam::new(x.len(), 0.9, 0.999);
    for step in 0..config.adam_steps {
        adam.step(&mut x, &g, config.adam_lr);
        let (f, gn) = problem.evaluate(&x);
        if !f.is_finite() {
            return Err(Error::Numerical(format!("ADAM diverged at step {}", step + 1)));
        }
        history.push(f);
        if f < best.0 {
            best = (f, x.clone());
        }
        g = gn;
    }
    let (handoff, x) = best;
    let r = lbfgs(|p| problem.evaluate(p), x, &config.lbfgs);
    if r.status == LbfgsStatus::LineSearchFailed {
        warn!("L-BFGS line search failed after {} iterations; keeping best iterate", r.iterations);
    }
    history.extend_from_slice(&r.history[1..]);
    let coefficients = problem.to_coefficients(&r.x);
    let corrected = apply_correction(dataset, &coefficients, problem.basis())?;
    Ok(BiasResult {
        coefficients,
        corrected,
        status: r.status,
        initial_objective: f0,
        handoff_objective: handoff,
        final_objective: r.value,
        history,
    })
}

/// Divide each volume by its multiplicative bias exp(ζ_i).
pub fn apply_correction(
    dataset: &DwiDataset,
    coeffs: &BiasCoefficients,
    basis: &DctBasis,
) -> Result<DwiDataset> {
    let mut volume = dataset.volume.clone();
    for i in 0..coeffs.len() {
        if coeffs.rows[i].iter().all(|&c| c == 0.0) {
            continue;
        }
        let field = coeffs.eval_bias_field(basis, i)?;
        for (s, z) in volume.channel_mut(i).iter_mut().zip(&field) {
            *s *= (-z).exp();
        }
    }
    DwiDataset::new(volume, dataset.gradients.clone())
}
