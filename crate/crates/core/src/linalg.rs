//! Small dense linear-algebra helpers: sorted 3×3 symmetric eigenproblems
//! and their adjoint, polar decomposition, rotations.

use nalgebra::{Matrix3, Rotation3, SymmetricEigen, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Gap regularizer used when differentiating through eigenvectors.
pub const EIGEN_GAP_EPS: f64 = 1e-9;

/// Eigenpairs sorted by descending eigenvalue. `vectors.column(k)` belongs
/// to `values[k]`.
#[derive(Debug, Clone, Copy)]
pub struct SortedEigen {
    pub values: Vector3<f64>,
    pub vectors: Matrix3<f64>,
}

impl SortedEigen {
    pub fn new(m: &Matrix3<f64>) -> Self {
        let sym = 0.5 * (m + m.transpose());
        let eig = SymmetricEigen::new(sym);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values = Vector3::from_fn(|k, _| eig.eigenvalues[order[k]]);
        let mut vectors = Matrix3::zeros();
        for (k, &o) in order.iter().enumerate() {
            let v = canonical_sign(eig.eigenvectors.column(o).normalize());
            vectors.set_column(k, &v);
        }
        Self { values, vectors }
    }

    pub fn v(&self, k: usize) -> Vector3<f64> {
        self.vectors.column(k).into_owned()
    }

    /// Gradient with respect to the (symmetric) input matrix, given
    /// gradients with respect to the eigenvalues and to the principal
    /// eigenvector. The result is not symmetrized; for a six-parameter
    /// symmetric input, off-diagonal derivatives are `G[(i,j)] + G[(j,i)]`.
    pub fn adjoint(&self, grad_values: &Vector3<f64>, grad_v1: &Vector3<f64>) -> Matrix3<f64> {
        let mut g = Matrix3::zeros();
        for k in 0..3 {
            let vk = self.v(k);
            g += grad_values[k] * vk * vk.transpose();
        }
        let v1 = self.v(0);
        for k in 1..3 {
            let vk = self.v(k);
            let gap = self.values[0] - self.values[k] + EIGEN_GAP_EPS;
            g += (grad_v1.dot(&vk) / gap) * vk * v1.transpose();
        }
        g
    }
}

/// Flip so the first component with magnitude above 1e-12 is positive.
pub fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    for i in 0..3 {
        if v[i].abs() > 1e-12 {
            return if v[i] < 0.0 { -v } else { v };
        }
    }
    v
}

/// Rotation factor of the polar decomposition F = R·U, taken as the
/// rotation closest to F (R = U·Vᵀ from the SVD, with the last singular
/// direction flipped if needed so det R = +1).
pub fn polar_rotation(f: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = f.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Matrix3::identity(),
    };
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        // singular values are not guaranteed sorted; flip the column of U
        // paired with the smallest one
        let mut idx = 0;
        for i in 1..3 {
            if svd.singular_values[i] < svd.singular_values[idx] {
                idx = i;
            }
        }
        let mut u2 = u;
        let col = -u2.column(idx);
        u2.set_column(idx, &col);
        r = u2 * vt;
    }
    r
}

/// R = Rz(α)·Ry(β)·Rz(γ).
pub fn rotation_zyz(alpha: f64, beta: f64, gamma: f64) -> Matrix3<f64> {
    rot_z(alpha) * rot_y(beta) * rot_z(gamma)
}

pub fn rot_z(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn rot_y(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// ZYZ Euler angles (α, β, γ) of a rotation matrix, β in [0, π].
pub fn euler_zyz(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let cb = r[(2, 2)].clamp(-1.0, 1.0);
    let beta = cb.acos();
    let sb = beta.sin();
    if sb > 1e-10 {
        let alpha = r[(1, 2)].atan2(r[(0, 2)]);
        let gamma = r[(2, 1)].atan2(-r[(2, 0)]);
        (alpha, beta, gamma)
    } else if cb > 0.0 {
        // R = Rz(α+γ)
        (r[(1, 0)].atan2(r[(0, 0)]), 0.0, 0.0)
    } else {
        // R = Rz(α)·Ry(π)·Rz(γ) = Rz(α−γ)·Ry(π)
        ((-r[(1, 0)]).atan2(-r[(0, 0)]), std::f64::consts::PI, 0.0)
    }
}

/// Uniformly distributed (Haar) random rotation.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    q.to_rotation_matrix().into_inner()
}

/// Uniformly distributed unit vector.
pub fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Rotation by `angle` about `axis`.
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).into_inner()
}

/// Unsigned angle in degrees between two axes (sign-invariant).
pub fn axial_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = (a.dot(b).abs() / (a.norm() * b.norm())).min(1.0);
    c.acos().to_degrees()
}
