//! Real second-order spherical harmonics: basis, fitting, Wigner rotation,
//! icosphere projection and ridge deprojection.
//!
//! Coefficient order is `[Y00, Y2-2, Y2-1, Y20, Y21, Y22]` with
//!
//! | index | function | formula |
//! |-------|----------|---------|
//! | 0 | Y00  | 1/(2√π) |
//! | 1 | Y2-2 | ½√(15/π)·xy |
//! | 2 | Y2-1 | ½√(15/π)·yz |
//! | 3 | Y20  | ¼√(5/π)·(3z²−1) |
//! | 4 | Y21  | ½√(15/π)·xz |
//! | 5 | Y22  | ¼√(15/π)·(x²−y²) |

use std::f64::consts::PI;

use nalgebra::{Complex, DMatrix, Matrix3, Matrix5, Matrix6, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{euler_zyz, rotation_zyz};
use crate::tensor::pseudo_inverse;

pub const N_COEFFS: usize = 6;

/// Six real SH coefficients (ℓ = 0 then the five ℓ = 2 terms).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ShCoeffs(pub [f64; 6]);

impl ShCoeffs {
    pub fn isotropic(c0: f64) -> Self {
        Self([c0, 0.0, 0.0, 0.0, 0.0, 0.0])
    }

    pub fn vector(&self) -> Vector6<f64> {
        Vector6::from_row_slice(&self.0)
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self(std::array::from_fn(|i| v[i]))
    }

    /// Per-degree power (p₀, p₂).
    pub fn power(&self) -> (f64, f64) {
        let c = &self.0;
        (c[0] * c[0], c[1..].iter().map(|v| v * v).sum())
    }

    /// Value of the represented function in a direction.
    pub fn eval(&self, dir: [f64; 3]) -> f64 {
        let y = sh_basis(dir);
        (0..6).map(|i| y[i] * self.0[i]).sum()
    }
}

/// Basis values without the unit-norm check.
#[inline]
pub fn sh_basis(d: [f64; 3]) -> [f64; 6] {
    let [x, y, z] = d;
    let k0 = 0.5 / PI.sqrt();
    let k1 = 0.5 * (15.0 / PI).sqrt();
    let k2 = 0.25 * (5.0 / PI).sqrt();
    let k3 = 0.25 * (15.0 / PI).sqrt();
    [
        k0,
        k1 * x * y,
        k1 * y * z,
        k2 * (3.0 * z * z - 1.0),
        k1 * x * z,
        k3 * (x * x - y * y),
    ]
}

pub fn eval_real_sh_basis(direction: [f64; 3]) -> Result<[f64; 6]> {
    let n = (direction[0].powi(2) + direction[1].powi(2) + direction[2].powi(2)).sqrt();
    if (n - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("direction norm {n} is not 1")));
    }
    Ok(sh_basis(direction))
}

/// Least-squares SH fit for a fixed direction set.
#[derive(Debug, Clone)]
pub struct ShFitter {
    pinv: DMatrix<f64>,
}

impl ShFitter {
    pub fn new(directions: &[[f64; 3]]) -> Result<Self> {
        let b = basis_matrix(directions);
        let pinv = pseudo_inverse(&b).map_err(|_| {
            Error::DegenerateGeometry("directions do not span the ℓ ≤ 2 even subspace".into())
        })?;
        Ok(Self { pinv })
    }

    pub fn fit(&self, signals: &[f64]) -> ShCoeffs {
        ShCoeffs(std::array::from_fn(|r| {
            signals.iter().enumerate().map(|(c, s)| self.pinv[(r, c)] * s).sum()
        }))
    }
}

/// N×6 matrix of basis values.
pub fn basis_matrix(directions: &[[f64; 3]]) -> DMatrix<f64> {
    let rows: Vec<[f64; 6]> = directions.iter().map(|d| sh_basis(*d)).collect();
    DMatrix::from_fn(directions.len(), 6, |r, c| rows[r][c])
}

pub fn fit_sh(signals: &[f64], directions: &[[f64; 3]]) -> Result<ShCoeffs> {
    if signals.len() != directions.len() {
        return Err(Error::Argument("signal and direction counts differ".into()));
    }
    Ok(ShFitter::new(directions)?.fit(signals))
}

/// Reduced Wigner matrix d²(β), rows/cols indexed m' , m = −2..2, from the
/// finite-sum formula (a polynomial in cos(β/2), sin(β/2)).
pub fn wigner_small_d2(beta: f64) -> Matrix5<f64> {
    let fact = |n: i32| -> f64 { (1..=n).map(|k| k as f64).product() };
    let (c, s) = ((beta / 2.0).cos(), (beta / 2.0).sin());
    let j = 2i32;
    Matrix5::from_fn(|r, col| {
        let mp = r as i32 - 2;
        let m = col as i32 - 2;
        let pre = (fact(j + mp) * fact(j - mp) * fact(j + m) * fact(j - m)).sqrt();
        let mut sum = 0.0;
        for k in 0..=(2 * j) {
            let a = j + m - k;
            let b = mp - m + k;
            let d = j - mp - k;
            if a < 0 || b < 0 || d < 0 {
                continue;
            }
            let sign = if (mp - m + k) % 2 == 0 { 1.0 } else { -1.0 };
            sum += sign * c.powi(2 * j + m - mp - 2 * k) * s.powi(mp - m + 2 * k)
                / (fact(a) * fact(k) * fact(b) * fact(d));
        }
        pre * sum
    })
}

/// Unitary map from complex to real ℓ=2 harmonics: Y_real = U·Y_complex.
fn real_from_complex() -> Matrix5<Complex<f64>> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut u = Matrix5::<Complex<f64>>::zeros();
    let idx = |m: i32| (m + 2) as usize;
    u[(idx(0), idx(0))] = Complex::new(1.0, 0.0);
    for m in 1..=2i32 {
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        // m > 0: (Y^{-m} + (−1)^m Y^m)/√2
        u[(idx(m), idx(-m))] = Complex::new(h, 0.0);
        u[(idx(m), idx(m))] = Complex::new(sign * h, 0.0);
        // m < 0: i(Y^{-|m|} − (−1)^m Y^{|m|})/√2
        u[(idx(-m), idx(-m))] = Complex::new(0.0, h);
        u[(idx(-m), idx(m))] = Complex::new(0.0, -sign * h);
    }
    u
}

/// Rotation acting on ℓ ≤ 2 real SH coefficients; the ℓ=0 block is 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WignerRotation {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Real 5×5 ℓ=2 block.
    pub block: Matrix5<f64>,
}

impl WignerRotation {
    /// Rotation R = Rz(α)·Ry(β)·Rz(γ).
    pub fn from_euler(alpha: f64, beta: f64, gamma: f64) -> Self {
        let d = wigner_small_d2(beta);
        let dm = Matrix5::<Complex<f64>>::from_fn(|r, c| {
            let mp = r as f64 - 2.0;
            let m = c as f64 - 2.0;
            Complex::from_polar(1.0, -mp * alpha - m * gamma) * d[(r, c)]
        });
        let u = real_from_complex();
        let real = u.map(|z| z.conj()) * dm * u.transpose();
        Self {
            alpha,
            beta,
            gamma,
            block: real.map(|z| z.re),
        }
    }

    pub fn from_matrix(r: &Matrix3<f64>) -> Self {
        let (a, b, g) = euler_zyz(r);
        Self::from_euler(a, b, g)
    }

    pub fn identity() -> Self {
        Self::from_euler(0.0, 0.0, 0.0)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        rotation_zyz(self.alpha, self.beta, self.gamma)
    }

    pub fn inverse(&self) -> Self {
        Self::from_euler(-self.gamma, -self.beta, -self.alpha)
    }

    /// Full 6×6 block-diagonal operator.
    pub fn operator(&self) -> Matrix6<f64> {
        let mut m = Matrix6::zeros();
        m[(0, 0)] = 1.0;
        m.fixed_view_mut::<5, 5>(1, 1).copy_from(&self.block);
        m
    }

    pub fn rotate_l2(&self, c: &[f64; 5]) -> [f64; 5] {
        std::array::from_fn(|r| (0..5).map(|k| self.block[(r, k)] * c[k]).sum())
    }
}

/// Coefficients of the rotated function: S'(R·r̂) = S(r̂).
pub fn wigner_rotate(coeffs: &ShCoeffs, rotation: &WignerRotation) -> ShCoeffs {
    let c = &coeffs.0;
    let l2 = rotation.rotate_l2(&[c[1], c[2], c[3], c[4], c[5]]);
    ShCoeffs([c[0], l2[0], l2[1], l2[2], l2[3], l2[4]])
}

/// Level-1 icosphere with KNN adjacency and SH projection.
#[derive(Debug, Clone)]
pub struct Icosphere {
    pub vertices: Vec<[f64; 3]>,
    /// K nearest neighbours per vertex, nearest first.
    pub knn: Vec<Vec<usize>>,
    /// 6×42 matrix with P[(i, j)] = Y_i(û_j).
    pub projection: DMatrix<f64>,
    /// 6×42 left inverse (P·Pᵀ)⁻¹·P mapping vertex amplitudes to coefficients.
    pub deprojection: DMatrix<f64>,
}

pub const ICOSPHERE_VERTICES: usize = 42;
pub const KNN_K: usize = 6;

pub fn build_icosphere() -> Icosphere {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut base: Vec<Vector3<f64>> = Vec::with_capacity(12);
    for &a in &[-1.0, 1.0] {
        for &b in &[-phi, phi] {
            base.push(Vector3::new(0.0, a, b));
            base.push(Vector3::new(a, b, 0.0));
            base.push(Vector3::new(b, 0.0, a));
        }
    }
    let base: Vec<Vector3<f64>> = base.into_iter().map(|v| v.normalize()).collect();

    // icosahedron edges join vertices at the minimal mutual distance
    let mut dmin = f64::INFINITY;
    for i in 0..12 {
        for j in (i + 1)..12 {
            dmin = dmin.min((base[i] - base[j]).norm());
        }
    }
    let mut verts = base.clone();
    for i in 0..12 {
        for j in (i + 1)..12 {
            if (base[i] - base[j]).norm() < dmin * (1.0 + 1e-9) {
                verts.push(((base[i] + base[j]) / 2.0).normalize());
            }
        }
    }
    debug_assert_eq!(verts.len(), ICOSPHERE_VERTICES);
    let vertices: Vec<[f64; 3]> = verts.iter().map(|v| [v[0], v[1], v[2]]).collect();

    let knn = (0..vertices.len())
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..vertices.len())
                .filter(|&j| j != i)
                .map(|j| ((verts[i] - verts[j]).norm(), j))
                .collect();
            others.sort_by(|a, b| {
                if (a.0 - b.0).abs() < 1e-12 {
                    a.1.cmp(&b.1)
                } else {
                    a.0.total_cmp(&b.0)
                }
            });
            others.iter().take(KNN_K).map(|&(_, j)| j).collect()
        })
        .collect();

    let projection = basis_matrix(&vertices).transpose();
    let ppt = &projection * projection.transpose();
    let deprojection = ppt
        .try_inverse()
        .expect("icosphere projection has full row rank")
        * &projection;
    Icosphere {
        vertices,
        knn,
        projection,
        deprojection,
    }
}

impl Icosphere {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

/// Vertex amplitudes h = Pᵀc.
pub fn project_to_icosphere(coeffs: &ShCoeffs, sphere: &Icosphere) -> Vec<f64> {
    let p = &sphere.projection;
    (0..p.ncols())
        .map(|j| (0..6).map(|i| p[(i, j)] * coeffs.0[i]).sum())
        .collect()
}

/// Precomputed ridge solve for one vertex selection:
/// c = (MᵀM + λI)⁻¹·Mᵀ·h̃ with M the selected rows of Pᵀ.
#[derive(Debug, Clone)]
pub struct RidgeDeprojector {
    pub selection: Vec<usize>,
    /// 6×k solve matrix.
    pub solve: DMatrix<f64>,
}

impl RidgeDeprojector {
    pub fn new(selection: &[usize], sphere: &Icosphere, lambda: f64) -> Result<Self> {
        if selection.is_empty() {
            return Err(Error::Argument("ridge deprojection needs at least one vertex".into()));
        }
        if !(lambda >= 0.0) {
            return Err(Error::Argument(format!("ridge lambda {lambda} must be >= 0")));
        }
        if let Some(&bad) = selection.iter().find(|&&j| j >= sphere.len()) {
            return Err(Error::Argument(format!("vertex index {bad} out of range")));
        }
        let k = selection.len();
        let m = DMatrix::from_fn(k, 6, |r, c| sphere.projection[(c, selection[r])]);
        let normal = m.transpose() * &m + DMatrix::identity(6, 6) * lambda;
        let smax = normal.clone().symmetric_eigenvalues().max();
        let smin = normal.clone().symmetric_eigenvalues().min();
        if !(smin > smax * 1e-14) {
            return Err(Error::Underdetermined(format!(
                "normal matrix singular for {k} vertices at lambda {lambda}"
            )));
        }
        let inv = normal
            .try_inverse()
            .ok_or_else(|| Error::Underdetermined("normal matrix not invertible".into()))?;
        Ok(Self {
            selection: selection.to_vec(),
            solve: inv * m.transpose(),
        })
    }

    pub fn apply(&self, amplitudes: &[f64]) -> ShCoeffs {
        ShCoeffs(std::array::from_fn(|r| {
            amplitudes.iter().enumerate().map(|(c, h)| self.solve[(r, c)] * h).sum()
        }))
    }
}

pub fn deproject_ridge(
    amplitudes: &[f64],
    selection: &[usize],
    sphere: &Icosphere,
    lambda: f64,
) -> Result<ShCoeffs> {
    if amplitudes.len() != selection.len() {
        return Err(Error::Argument("amplitude and selection lengths differ".into()));
    }
    Ok(RidgeDeprojector::new(selection, sphere, lambda)?.apply(amplitudes))
}

/// c_ζ = (I + V·Q)·c.
pub fn low_rank_mix(coeffs: &ShCoeffs, v: &SMatrix<f64, 6, 2>, q: &SMatrix<f64, 2, 6>) -> ShCoeffs {
    let m = Matrix6::identity() + v * q;
    ShCoeffs::from_vector(&(m * coeffs.vector()))
}

/// Quasi-uniform directions on the sphere (Fibonacci lattice).
pub fn fibonacci_sphere(n: usize) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let t = golden * i as f64;
            [r * t.cos(), r * t.sin(), z]
        })
        .collect()
}
