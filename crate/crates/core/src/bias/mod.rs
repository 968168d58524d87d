//! Direction-dependent bias-field estimation.
//!
//! Each diffusion-weighted volume i carries a smooth log-bias
//! ζ_i(x) = Σ_n c_{i,n}·Φ_n(x) over a six-function DCT basis. The
//! coefficients are found by minimizing a MAP objective built from Beta
//! priors on FA and Watson-type priors on the principal eigenvector.

mod atlas;
mod dct;
mod em;
mod objective;
mod prior;

pub use atlas::{
    build_atlas_from_tensors, principal_directions, AtlasPriors, TissueClass, ALPHA_BETA_CAP, ATLAS_CHANNELS,
};
pub use dct::{BiasCoefficients, DctBasis, DCT_FREQUENCIES, N_BASIS};
pub use em::{correct_lowb_em, EmConfig, EmResult};
pub use objective::{
    apply_correction, map_objective, optimize_bias, BiasProblem, BiasResult, CorrectionConfig, ObjectiveTerms,
};
pub use prior::{beta_nll, beta_nll_grad, dsw_nll, kappa_from_eigenvalues, FA_EPS};
