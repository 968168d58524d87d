use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::VolumeGrid;

pub const N_BASIS: usize = 6;

/// Frequency triples (kx, ky, kz): constant, the three axis-aligned first
/// harmonics, then the two lowest mixed terms in lexicographic order.
pub const DCT_FREQUENCIES: [[usize; 3]; N_BASIS] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [0, 0, 1],
    [0, 1, 1],
    [1, 0, 1],
];

/// Six DCT-II product functions evaluated on a grid. Φ₀ ≡ 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DctBasis {
    pub dims: [usize; 3],
    /// `values[n][voxel]`
    pub values: Vec<Vec<f64>>,
}

impl DctBasis {
    pub fn new(grid: &VolumeGrid) -> Self {
        Self::for_dims(grid.dims)
    }

    pub fn for_dims(dims: [usize; 3]) -> Self {
        let axis = |n: usize, k: usize| -> Vec<f64> {
            (0..n)
                .map(|i| (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n as f64).cos())
                .collect()
        };
        let n_vox = dims[0] * dims[1] * dims[2];
        let values = DCT_FREQUENCIES
            .iter()
            .map(|f| {
                let ax = axis(dims[0], f[0]);
                let ay = axis(dims[1], f[1]);
                let az = axis(dims[2], f[2]);
                let mut v = Vec::with_capacity(n_vox);
                for z in 0..dims[2] {
                    for y in 0..dims[1] {
                        for x in 0..dims[0] {
                            v.push(ax[x] * ay[y] * az[z]);
                        }
                    }
                }
                v
            })
            .collect();
        Self { dims, values }
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Σ_n c_n·Φ_n at one voxel.
    #[inline]
    pub fn eval_at(&self, coeffs: &[f64; N_BASIS], voxel: usize) -> f64 {
        (0..N_BASIS).map(|n| coeffs[n] * self.values[n][voxel]).sum()
    }

    pub fn eval(&self, coeffs: &[f64; N_BASIS]) -> Vec<f64> {
        (0..self.n_voxels()).map(|v| self.eval_at(coeffs, v)).collect()
    }

    /// Least-squares projection of a field onto the basis (the basis is
    /// orthogonal, so this is a per-function inner product).
    pub fn project(&self, field: &[f64]) -> [f64; N_BASIS] {
        std::array::from_fn(|n| {
            let phi = &self.values[n];
            let num: f64 = phi.iter().zip(field).map(|(p, f)| p * f).sum();
            let den: f64 = phi.iter().map(|p| p * p).sum();
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        })
    }
}

/// Log-bias coefficients, one row of six per gradient entry. Rows for
/// b=0 entries are kept at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCoefficients {
    pub rows: Vec<[f64; N_BASIS]>,
}

impl BiasCoefficients {
    pub fn zeros(n: usize) -> Self {
        Self {
            rows: vec![[0.0; N_BASIS]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// ζ_i over the grid.
    pub fn eval_bias_field(&self, basis: &DctBasis, direction_index: usize) -> Result<Vec<f64>> {
        let row = self.rows.get(direction_index).ok_or_else(|| {
            Error::Argument(format!(
                "direction index {direction_index} out of range ({} rows)",
                self.rows.len()
            ))
        })?;
        Ok(basis.eval(row))
    }

    /// Multiplicative field exp(ζ_i).
    pub fn multiplicative_field(&self, basis: &DctBasis, direction_index: usize) -> Result<Vec<f64>> {
        Ok(self
            .eval_bias_field(basis, direction_index)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        Self {
            rows: flat
                .chunks_exact(N_BASIS)
                .map(|c| std::array::from_fn(|n| c[n]))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_and_orthogonality() {
        let b = DctBasis::for_dims([7, 5, 6]);
        assert!(b.values[0].iter().all(|&v| v == 1.0));
        for i in 0..N_BASIS {
            for j in (i + 1)..N_BASIS {
                let dot: f64 = b.values[i].iter().zip(&b.values[j]).map(|(a, b)| a * b).sum();
                assert!(dot.abs() < 1e-9, "{i},{j}: {dot}");
            }
        }
    }

    #[test]
    fn zero_coefficients_unit_field() {
        let b = DctBasis::for_dims([4, 4, 4]);
        let c = BiasCoefficients::zeros(3);
        assert!(c.multiplicative_field(&b, 1).unwrap().iter().all(|&v| v == 1.0));
        assert!(c.eval_bias_field(&b, 3).is_err());
    }

    #[test]
    fn constant_term_ln2_doubles() {
        let b = DctBasis::for_dims([4, 3, 5]);
        let mut c = BiasCoefficients::zeros(1);
        c.rows[0][0] = 2f64.ln();
        for v in c.multiplicative_field(&b, 0).unwrap() {
            assert!((v - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_term_has_single_dct_coefficient() {
        // full DCT-II analysis over every frequency triple up to n−1
        let dims = [6, 5, 4];
        let b = DctBasis::for_dims(dims);
        let mut c = [0.0; N_BASIS];
        c[4] = 0.7;
        let field = b.eval(&c);
        let mut nonzero = Vec::new();
        for kz in 0..dims[2] {
            for ky in 0..dims[1] {
                for kx in 0..dims[0] {
                    let mut s = 0.0;
                    for z in 0..dims[2] {
                        for y in 0..dims[1] {
                            for x in 0..dims[0] {
                                let cx = (std::f64::consts::PI * kx as f64 * (x as f64 + 0.5) / dims[0] as f64).cos();
                                let cy = (std::f64::consts::PI * ky as f64 * (y as f64 + 0.5) / dims[1] as f64).cos();
                                let cz = (std::f64::consts::PI * kz as f64 * (z as f64 + 0.5) / dims[2] as f64).cos();
                                s += field[x + dims[0] * (y + dims[1] * z)] * cx * cy * cz;
                            }
                        }
                    }
                    if s.abs() > 1e-9 {
                        nonzero.push([kx, ky, kz]);
                    }
                }
            }
        }
        assert_eq!(nonzero, vec![[0, 1, 1]]);
    }

    #[test]
    fn projection_inverts_eval() {
        let b = DctBasis::for_dims([5, 6, 7]);
        let c = [0.1, -0.2, 0.3, 0.05, -0.4, 0.25];
        let back = b.project(&b.eval(&c));
        for n in 0..N_BASIS {
            assert!((back[n] - c[n]).abs() < 1e-12);
        }
    }
}
