use crate::error::{Error, Result};

/// FA is clipped to [FA_EPS, 1 − FA_EPS] inside the Beta likelihood.
pub const FA_EPS: f64 = 1e-6;

/// Watson concentration from sorted eigenvalues via the normalized
/// principal eigenvalue λ̃1 = λ1/(λ1+λ2+λ3), clamped to [1/3, 1 − 1e-6].
pub fn kappa_from_eigenvalues(eigenvalues: [f64; 3]) -> f64 {
    let l: Vec<f64> = eigenvalues.iter().map(|v| v.max(0.0)).collect();
    let sum = l[0] + l[1] + l[2];
    if !(sum > 0.0) {
        return 0.0;
    }
    let l1 = l.iter().cloned().fold(0.0, f64::max) / sum;
    let l1 = l1.clamp(1.0 / 3.0, 1.0 - 1e-6);
    ((3.0 * l1 - 1.0) / (1.0 - l1)).max(0.0)
}

/// Unnormalized Beta negative log-likelihood
/// −[(α−1)·log FA + (β−1)·log(1−FA)].
pub fn beta_nll(fa: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(alpha > 0.0) || !(beta > 0.0) {
        return Err(Error::Argument(format!(
            "Beta parameters must be positive, got α={alpha}, β={beta}"
        )));
    }
    Ok(beta_nll_grad(fa, alpha, beta).0)
}

/// Value and derivative with respect to FA (zero where FA is clipped).
#[inline]
pub fn beta_nll_grad(fa: f64, alpha: f64, beta: f64) -> (f64, f64) {
    let clipped = fa.clamp(FA_EPS, 1.0 - FA_EPS);
    let v = -((alpha - 1.0) * clipped.ln() + (beta - 1.0) * (1.0 - clipped).ln());
    let g = if fa > FA_EPS && fa < 1.0 - FA_EPS {
        -((alpha - 1.0) / clipped - (beta - 1.0) / (1.0 - clipped))
    } else {
        0.0
    };
    (v, g)
}

/// −κ·FA·(v1_μᵀv1)².
#[inline]
pub fn dsw_nll(v1: [f64; 3], fa: f64, v1_mu: [f64; 3], kappa: f64) -> f64 {
    let d = v1[0] * v1_mu[0] + v1[1] * v1_mu[1] + v1[2] * v1_mu[2];
    -kappa * fa * d * d
}
