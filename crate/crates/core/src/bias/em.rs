use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

use super::dct::{DctBasis, N_BASIS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Stop when the per-voxel mean log-likelihood changes by less than this.
    pub tolerance: f64,
    /// Floor on each class's log-intensity variance.
    pub variance_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-6,
            variance_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmResult {
    pub corrected: Volume,
    /// Multiplicative low-b bias field; its log has zero mean over the
    /// foreground.
    pub field: Vec<f64>,
    /// Bias coefficients for Φ₁..Φ₅ after centering, with Φ₀ absorbing the shift.
    pub coefficients: [f64; N_BASIS],
    /// Per-voxel mean log-likelihood after each iteration.
    pub log_likelihood: Vec<f64>,
    pub class_means: Vec<f64>,
    pub class_variances: Vec<f64>,
    /// Classes removed for lack of responsibility.
    pub dropped_classes: Vec<usize>,
}

/// Low-b bias correction by EM over a Gaussian log-intensity mixture with
/// voxelwise tissue priors and a DCT log-bias.
pub fn correct_lowb_em(
    lowb: &Volume,
    tissue_probs: &Volume,
    basis: &DctBasis,
    config: &EmConfig,
) -> Result<EmResult> {
    let n = lowb.n_voxels();
    if lowb.channels != 1 {
        return Err(Error::Argument("low-b volume must have one channel".into()));
    }
    if tissue_probs.grid.dims != lowb.grid.dims || basis.dims != lowb.grid.dims {
        return Err(Error::Argument("grids of low-b, tissue map and basis differ".into()));
    }
    let k_classes = tissue_probs.channels;
    let mut fg = Vec::new();
    for v in 0..n {
        let p: f64 = (0..k_classes).map(|k| tissue_probs.get(v, k)).sum();
        if p > 0.0 && (p - 1.0).abs() > 1e-3 {
            let [x, y, z] = lowb.grid.coords(v);
            return Err(Error::Argument(format!(
                "tissue probabilities sum to {p} at voxel ({x}, {y}, {z})"
            )));
        }
        if p > 0.0 && lowb.data[v] > 0.0 {
            fg.push(v);
        }
    }
    if fg.is_empty() {
        return Err(Error::Argument("no foreground voxels with positive signal".into()));
    }
    let m = fg.len();
    let y: Vec<f64> = fg.iter().map(|&v| lowb.data[v].ln()).collect();
    let prior: Vec<Vec<f64>> = (0..k_classes)
        .map(|k| fg.iter().map(|&v| tissue_probs.get(v, k)).collect())
        .collect();
    // bias uses Φ₁..Φ₅; Φ₀ is confounded with the class means
    let phi: Vec<Vec<f64>> = (1..N_BASIS)
        .map(|n| fg.iter().map(|&v| basis.values[n][v]).collect())
        .collect();
    let nb = phi.len();

    let mut active: Vec<usize> = (0..k_classes).collect();
    let mut dropped = Vec::new();
    let mut mu = vec![0.0; k_classes];
    let mut var = vec![1.0; k_classes];
    let mut beta = vec![0.0; nb];
    let mut bias = vec![0.0; m];

    // initialize class statistics from the priors
    for &k in &active {
        let w: f64 = prior[k].iter().sum();
        if w > 0.0 {
            mu[k] = prior[k].iter().zip(&y).map(|(p, y)| p * y).sum::<f64>() / w;
            var[k] = (prior[k].iter().zip(&y).map(|(p, y)| p * (y - mu[k]).powi(2)).sum::<f64>() / w)
                .max(config.variance_floor);
        }
    }

    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut resp = vec![vec![0.0; m]; k_classes];
    let mut history: Vec<f64> = Vec::new();
    for _ in 0..config.max_iterations {
        // E-step
        let mut ll = 0.0;
        for x in 0..m {
            let r = y[x] - bias[x];
            let mut logs = Vec::with_capacity(active.len());
            for &k in &active {
                let p = prior[k][x];
                let l = if p > 0.0 {
                    p.ln() - 0.5 * (ln2pi + var[k].ln() + (r - mu[k]).powi(2) / var[k])
                } else {
                    f64::NEG_INFINITY
                };
                logs.push(l);
            }
            let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                for &k in &active {
                    resp[k][x] = 0.0;
                }
                continue;
            }
            let s: f64 = logs.iter().map(|l| (l - mx).exp()).sum();
            ll += mx + s.ln();
            for (j, &k) in active.iter().enumerate() {
                resp[k][x] = (logs[j] - mx).exp() / s;
            }
        }
        let ll = ll / m as f64;
        let converged = history.last().is_some_and(|&prev| (ll - prev).abs() < config.tolerance);
        history.push(ll);
        if converged {
            break;
        }

        // drop empty classes
        active.retain(|&k| {
            let w: f64 = resp[k].iter().sum();
            if w <= 0.0 {
                warn!("tissue class {k} has zero responsibility; dropped");
                dropped.push(k);
                false
            } else {
                true
            }
        });
        if active.is_empty() {
            return Err(Error::Numerical("every tissue class lost its responsibility".into()));
        }

        // M-step: means
        for &k in &active {
            let w: f64 = resp[k].iter().sum();
            mu[k] = (0..m).map(|x| resp[k][x] * (y[x] - bias[x])).sum::<f64>() / w;
        }
        // bias by weighted least squares
        let mut ata = DMatrix::<f64>::zeros(nb, nb);
        let mut atb = DVector::<f64>::zeros(nb);
        for x in 0..m {
            let (mut w, mut t) = (0.0, 0.0);
            for &k in &active {
                let a = resp[k][x] / var[k];
                w += a;
                t += a * mu[k];
            }
            if w <= 0.0 {
                continue;
            }
            let target = y[x] - t / w;
            for i in 0..nb {
                atb[i] += w * phi[i][x] * target;
                for j in 0..nb {
                    ata[(i, j)] += w * phi[i][x] * phi[j][x];
                }
            }
        }
        if let Some(sol) = ata.clone().cholesky().map(|c| c.solve(&atb)) {
            beta = sol.iter().copied().collect();
        }
        for (x, b) in bias.iter_mut().enumerate() {
            *b = (0..nb).map(|i| beta[i] * phi[i][x]).sum();
        }
        // variances
        for &k in &active {
            let w: f64 = resp[k].iter().sum();
            var[k] = ((0..m).map(|x| resp[k][x] * (y[x] - bias[x] - mu[k]).powi(2)).sum::<f64>() / w)
                .max(config.variance_floor);
        }
    }

    // center the log field over the foreground
    let mean_log = bias.iter().sum::<f64>() / m as f64;
    let mut coefficients = [0.0; N_BASIS];
    coefficients[0] = -mean_log;
    coefficients[1..].copy_from_slice(&beta);
    let log_field = basis.eval(&coefficients);
    // enforce zero mean to rounding on the foreground
    let resid = fg.iter().map(|&v| log_field[v]).sum::<f64>() / m as f64;
    coefficients[0] -= resid;
    let log_field: Vec<f64> = log_field.iter().map(|l| l - resid).collect();
    let field: Vec<f64> = log_field.iter().map(|l| l.exp()).collect();
    let mut corrected = lowb.clone();
    for (s, f) in corrected.data.iter_mut().zip(&field) {
        *s /= f;
    }
    Ok(EmResult {
        corrected,
        field,
        coefficients,
        log_likelihood: history,
        class_means: mu,
        class_variances: var,
        dropped_classes: dropped,
    })
}
