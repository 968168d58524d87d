//! Synthetic ground truth: tensor phantoms, DWI synthesis with injected
//! direction-dependent bias, and matching atlas priors.

use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bias::{build_atlas_from_tensors, AtlasPriors, DctBasis, N_BASIS};
use crate::error::{Error, Result};
use crate::gradients::{DwiDataset, GradientTable};
use crate::linalg::random_rotation;
use crate::sh::fibonacci_sphere;
use crate::tensor::{DiffusionTensor, TensorField};
use crate::volume::{Volume, VolumeGrid};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_WM: u8 = 1;
pub const LABEL_GM: u8 = 2;
pub const LABEL_CSF: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scene {
    IsotropicSphere,
    SingleBundle,
    CrossingBundles,
    CurvedBundle,
}

impl std::str::FromStr for Scene {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isotropic_sphere" => Ok(Scene::IsotropicSphere),
            "single_bundle" => Ok(Scene::SingleBundle),
            "crossing_bundles" => Ok(Scene::CrossingBundles),
            "curved_bundle" => Ok(Scene::CurvedBundle),
            _ => Err(Error::Argument(format!("unknown scene {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: VolumeGrid,
    pub scene: Scene,
    /// Bundle axial / radial diffusivity, mm²/s.
    pub wm_axial: f64,
    pub wm_radial: f64,
    pub gm_diffusivity: f64,
    pub csf_diffusivity: f64,
    pub s0_wm: f64,
    pub s0_gm: f64,
    pub s0_csf: f64,
    /// Bundle tube radius as a fraction of the smallest half-extent.
    pub bundle_radius: f64,
    /// Rotation applied to the bundle geometry about the grid center.
    pub orientation: [[f64; 3]; 3],
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(grid: VolumeGrid, scene: Scene) -> Self {
        Self {
            grid,
            scene,
            wm_axial: 1.7e-3,
            wm_radial: 0.3e-3,
            gm_diffusivity: 0.8e-3,
            csf_diffusivity: 3.0e-3,
            s0_wm: 800.0,
            s0_gm: 1000.0,
            s0_csf: 1600.0,
            bundle_radius: 0.22,
            orientation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            seed: 0,
        }
    }

    /// 56×64×52 voxels at 3.5 mm.
    pub fn ulf(scene: Scene) -> Self {
        Self::new(VolumeGrid::isotropic([56, 64, 52], 3.5), scene)
    }

    /// Randomly rotated bundle geometry with jittered radius.
    pub fn randomized<R: Rng + ?Sized>(grid: VolumeGrid, scene: Scene, rng: &mut R) -> Self {
        let mut s = Self::new(grid, scene);
        let r = random_rotation(rng);
        s.orientation = std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)]));
        s.bundle_radius *= rng.random_range(0.8..1.25);
        s.seed = rng.random();
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let d = [self.wm_axial, self.wm_radial, self.gm_diffusivity, self.csf_diffusivity];
        if d.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Argument("diffusivities must be positive".into()));
        }
        if self.wm_axial < self.wm_radial {
            return Err(Error::Argument("bundle axial diffusivity below radial".into()));
        }
        Ok(())
    }
}

/// Tensor field with labels, S0 map and the analytic bundle tangent per
/// voxel (None outside bundles and where bundles overlap).
#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub tensors: TensorField,
    pub labels: Vec<u8>,
    pub s0: Vec<f64>,
    pub tangents: Vec<Option<[f64; 3]>>,
}

impl Phantom {
    pub fn mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != LABEL_BACKGROUND).collect()
    }

    pub fn wm_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l == LABEL_WM).collect()
    }

    pub fn label_volume(&self) -> Volume {
        Volume {
            grid: self.tensors.grid.clone(),
            channels: 1,
            data: self.labels.iter().map(|&l| l as f64).collect(),
        }
    }

    /// One-hot WM/GM/CSF probabilities (all zero on background).
    pub fn tissue_probabilities(&self) -> Volume {
        tissue_probabilities(&self.tensors.grid, &self.labels)
    }
}

pub fn tissue_probabilities(grid: &VolumeGrid, labels: &[u8]) -> Volume {
    let mut v = Volume::zeros(grid.clone(), 3);
    for (i, &l) in labels.iter().enumerate() {
        if (1..=3).contains(&l) {
            v.set(i, (l - 1) as usize, 1.0);
        }
    }
    v
}

fn stick(axial: f64, radial: f64, t: &Vector3<f64>) -> DiffusionTensor {
    let m = Matrix3::identity() * radial + (axial - radial) * t * t.transpose();
    DiffusionTensor::from_matrix(&m)
}

pub fn make_tensor_field(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let grid = &spec.grid;
    let n = grid.n_voxels();
    let half: Vec<f64> = (0..3).map(|a| grid.dims[a] as f64 * grid.voxel_size[a] / 2.0).collect();
    let scale = half.iter().cloned().fold(f64::INFINITY, f64::min);
    let rot = Matrix3::from_fn(|i, j| spec.orientation[i][j]);
    let rot_t = rot.transpose();

    let mut tensors = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut s0 = Vec::with_capacity(n);
    let mut tangents = Vec::with_capacity(n);
    let rb = spec.bundle_radius;

    for v in 0..n {
        let c = grid.coords(v);
        let p: Vec<f64> = (0..3)
            .map(|a| (c[a] as f64 + 0.5) * grid.voxel_size[a] - half[a])
            .collect();
        let ell = (0..3).map(|a| (p[a] / half[a]).powi(2)).sum::<f64>().sqrt();
        // bundle geometry lives in a rotated, isotropically scaled frame
        let u = rot_t * Vector3::new(p[0], p[1], p[2]) / scale;

        if spec.scene == Scene::IsotropicSphere {
            if u.norm() <= 0.8 {
                tensors.push(DiffusionTensor::isotropic(spec.gm_diffusivity));
                labels.push(LABEL_GM);
                s0.push(spec.s0_gm);
            } else {
                tensors.push(DiffusionTensor::default());
                labels.push(LABEL_BACKGROUND);
                s0.push(0.0);
            }
            tangents.push(None);
            continue;
        }

        if ell > 0.8 {
            tensors.push(DiffusionTensor::isotropic(spec.csf_diffusivity));
            labels.push(LABEL_CSF);
            s0.push(spec.s0_csf);
            tangents.push(None);
            continue;
        }

        let mut dirs: Vec<Vector3<f64>> = Vec::new();
        match spec.scene {
            Scene::SingleBundle => {
                if (u.y * u.y + u.z * u.z).sqrt() <= rb {
                    dirs.push(Vector3::x());
                }
            }
            Scene::CrossingBundles => {
                if (u.y * u.y + u.z * u.z).sqrt() <= rb {
                    dirs.push(Vector3::x());
                }
                if (u.x * u.x + u.z * u.z).sqrt() <= rb {
                    dirs.push(Vector3::y());
                }
            }
            Scene::CurvedBundle => {
                let (cy, major) = (-0.3, 0.55);
                let q = (u.x, u.y - cy);
                let rho = (q.0 * q.0 + q.1 * q.1).sqrt();
                if q.1 >= 0.0 && rho > 0.0 && ((rho - major).powi(2) + u.z * u.z).sqrt() <= rb {
                    dirs.push(Vector3::new(-q.1 / rho, q.0 / rho, 0.0));
                }
            }
            Scene::IsotropicSphere => unreachable!(),
        }
        if dirs.is_empty() {
            tensors.push(DiffusionTensor::isotropic(spec.gm_diffusivity));
            labels.push(LABEL_GM);
            s0.push(spec.s0_gm);
            tangents.push(None);
        } else {
            let world: Vec<Vector3<f64>> = dirs.iter().map(|d| rot * d).collect();
            let mut acc = [0.0; 6];
            for d in &world {
                let t = stick(spec.wm_axial, spec.wm_radial, d);
                for k in 0..6 {
                    acc[k] += t.0[k] / world.len() as f64;
                }
            }
            tensors.push(DiffusionTensor(acc));
            labels.push(LABEL_WM);
            s0.push(spec.s0_wm);
            tangents.push(if world.len() == 1 {
                Some([world[0].x, world[0].y, world[0].z])
            } else {
                None
            });
        }
    }
    Ok(Phantom {
        spec: spec.clone(),
        tensors: TensorField {
            grid: grid.clone(),
            tensors,
        },
        labels,
        s0,
        tangents,
    })
}

/// Antipodally symmetric repulsion directions on the upper hemisphere,
/// relaxed from a Fibonacci start (deterministic).
pub fn electrostatic_directions(n: usize) -> Vec<[f64; 3]> {
    let mut pts: Vec<Vector3<f64>> = fibonacci_sphere(2 * n)
        .into_iter()
        .take(n)
        .map(Vector3::from)
        .collect();
    for _ in 0..3000 {
        let mut forces = vec![Vector3::zeros(); n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                for s in [1.0, -1.0] {
                    let d = pts[i] - s * pts[j];
                    let r = d.norm().max(1e-9);
                    forces[i] += d / (r * r * r);
                }
            }
            // the antipode of the point itself also repels it
            forces[i] += pts[i] / 4.0;
        }
        for i in 0..n {
            let f = forces[i] - pts[i] * pts[i].dot(&forces[i]);
            pts[i] = (pts[i] + 0.01 * f / n as f64).normalize();
        }
    }
    pts.iter()
        .map(|p| {
            let p = if p.z < 0.0 { -p } else { *p };
            [p.x, p.y, p.z]
        })
        .collect()
}

/// Nine-direction b=700 table with low-b volumes after directions 2, 5
/// and 8 (12 entries).
pub fn ulf_gradient_table() -> GradientTable {
    static TABLE: OnceLock<GradientTable> = OnceLock::new();
    TABLE
        .get_or_init(|| {
            let dirs = electrostatic_directions(9);
            let mut bvals = Vec::new();
            let mut bvecs = Vec::new();
            for (k, d) in dirs.iter().enumerate() {
                bvals.push(700.0);
                bvecs.push(*d);
                if k % 3 == 1 {
                    bvals.push(0.0);
                    bvecs.push([0.0; 3]);
                }
            }
            GradientTable::new(bvals, bvecs).expect("valid ULF table")
        })
        .clone()
}

/// Per-entry bias fields. log Γ_i = Σ_n g_{i,n}·Φ_n, Υ_i = 1 + Σ_n h_{i,n}·Φ_n.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedBias {
    pub log_gamma: Vec<[f64; N_BASIS]>,
    pub upsilon: Vec<[f64; N_BASIS]>,
}

impl InjectedBias {
    pub fn none(n: usize) -> Self {
        Self {
            log_gamma: vec![[0.0; N_BASIS]; n],
            upsilon: vec![[0.0; N_BASIS]; n],
        }
    }

    /// Random smooth bias. Each log Γ coefficient is a quadratic form
    /// u_iᵀ·M_n·u_i in the gradient direction, so neighbouring directions
    /// see similar fields; the fields are scaled so Γ spans `gamma_range`
    /// and Υ stays within `upsilon_range` over the grid.
    pub fn random<R: Rng + ?Sized>(
        gradients: &GradientTable,
        basis: &DctBasis,
        gamma_range: (f64, f64),
        upsilon_range: (f64, f64),
        lowb_threshold: f64,
        rng: &mut R,
    ) -> Self {
        let n = gradients.len();
        let mats: Vec<Matrix3<f64>> = (0..N_BASIS)
            .map(|_| {
                let a = Matrix3::from_fn(|_, _| StandardNormal.sample(rng));
                (a + a.transpose()) / 2.0
            })
            .collect();
        let mut log_gamma = vec![[0.0; N_BASIS]; n];
        let mut upsilon = vec![[0.0; N_BASIS]; n];
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for i in 0..n {
            if gradients.bvals[i] <= lowb_threshold {
                continue;
            }
            let u = Vector3::from(gradients.bvecs[i]);
            for k in 0..N_BASIS {
                log_gamma[i][k] = u.dot(&(mats[k] * u));
                upsilon[i][k] = normal.sample(rng);
            }
        }
        let scale_to = |rows: &mut Vec<[f64; N_BASIS]>, lo: f64, hi: f64| {
            let (mut mn, mut mx) = (0.0f64, 0.0f64);
            for r in rows.iter() {
                if r.iter().all(|&c| c == 0.0) {
                    continue;
                }
                for f in basis.eval(r) {
                    mn = mn.min(f);
                    mx = mx.max(f);
                }
            }
            let mut s = f64::INFINITY;
            if mx > 0.0 {
                s = s.min(hi / mx);
            }
            if mn < 0.0 {
                s = s.min(lo / mn);
            }
            if s.is_finite() {
                for r in rows.iter_mut() {
                    r.iter_mut().for_each(|c| *c *= s);
                }
            }
        };
        scale_to(&mut log_gamma, gamma_range.0.ln(), gamma_range.1.ln());
        scale_to(&mut upsilon, upsilon_range.0 - 1.0, upsilon_range.1 - 1.0);
        Self { log_gamma, upsilon }
    }

    pub fn gamma_field(&self, basis: &DctBasis, i: usize) -> Vec<f64> {
        basis.eval(&self.log_gamma[i]).into_iter().map(f64::exp).collect()
    }

    pub fn upsilon_field(&self, basis: &DctBasis, i: usize) -> Vec<f64> {
        basis.eval(&self.upsilon[i]).into_iter().map(|v| 1.0 + v).collect()
    }

    /// Collapsed log-bias ζ_i = log Γ_i − (Υ_i − 1)·b_i·u_iᵀDu_i.
    pub fn zeta(&self, basis: &DctBasis, gradients: &GradientTable, tensors: &TensorField, i: usize) -> Vec<f64> {
        let lg = basis.eval(&self.log_gamma[i]);
        let up = basis.eval(&self.upsilon[i]);
        let (b, u) = (gradients.bvals[i], gradients.bvecs[i]);
        (0..lg.len())
            .map(|x| lg[x] - up[x] * b * tensors.tensors[x].quad(u))
            .collect()
    }
}

/// S_i = Γ_i·S0·exp(−Υ_i·b_i·u_iᵀDu_i), optionally with Rician noise.
pub fn synthesize_dwi<R: Rng + ?Sized>(
    tensors: &TensorField,
    gradients: &GradientTable,
    s0: &[f64],
    bias: Option<&InjectedBias>,
    rician_sigma: f64,
    rng: &mut R,
) -> Result<DwiDataset> {
    let grid = &tensors.grid;
    let n = grid.n_voxels();
    if s0.len() != n {
        return Err(Error::Argument("S0 map does not match the tensor grid".into()));
    }
    if let Some(b) = bias {
        if b.log_gamma.len() != gradients.len() {
            return Err(Error::Argument("bias rows do not match the gradient table".into()));
        }
    }
    let basis = bias.map(|_| DctBasis::new(grid));
    let mut vol = Volume::zeros(grid.clone(), gradients.len());
    for i in 0..gradients.len() {
        let (b, u) = (gradients.bvals[i], gradients.bvecs[i]);
        let (gamma, ups) = match (bias, &basis) {
            (Some(bias), Some(basis)) => (
                Some(bias.gamma_field(basis, i)),
                Some(bias.upsilon_field(basis, i)),
            ),
            _ => (None, None),
        };
        let ch = vol.channel_mut(i);
        for x in 0..n {
            let g = gamma.as_ref().map_or(1.0, |f| f[x]);
            let y = ups.as_ref().map_or(1.0, |f| f[x]);
            ch[x] = if b == 0.0 {
                g * s0[x]
            } else {
                g * s0[x] * (-y * b * tensors.tensors[x].quad(u)).exp()
            };
        }
    }
    if rician_sigma > 0.0 {
        add_rician_noise(&mut vol.data, rician_sigma, rng);
    }
    DwiDataset::new(vol, gradients.clone())
}

/// In place S ← √((S + n₁)² + n₂²), n ~ N(0, σ²).
pub fn add_rician_noise<R: Rng + ?Sized>(data: &mut [f64], sigma: f64, rng: &mut R) {
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and >= 0");
    for s in data.iter_mut() {
        let a = *s + normal.sample(rng);
        let b: f64 = normal.sample(rng);
        *s = (a * a + b * b).sqrt();
    }
}

pub fn make_synthetic_atlas(phantom: &Phantom) -> Result<AtlasPriors> {
    build_atlas_from_tensors(&phantom.tensors, &phantom.labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{st_forward, tensor_metrics};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(scene: Scene) -> PhantomSpec {
        PhantomSpec::new(VolumeGrid::isotropic([20, 22, 18], 3.5), scene)
    }

    #[test]
    fn ulf_table_layout() {
        let g = ulf_gradient_table();
        assert_eq!(g.len(), 12);
        assert_eq!(g.lowb_indices(50.0), vec![2, 6, 10]);
        assert_eq!(g.dwi_indices(50.0).len(), 9);
        assert_eq!(g.tensor_rank(50.0), 6);
    }

    #[test]
    fn electrostatic_directions_are_spread() {
        let d = electrostatic_directions(9);
        let mut min_angle = 180.0f64;
        for i in 0..9 {
            for j in (i + 1)..9 {
                let a = crate::linalg::axial_angle_deg(&Vector3::from(d[i]), &Vector3::from(d[j]));
                min_angle = min_angle.min(a);
            }
        }
        assert!(min_angle > 40.0, "min axial angle {min_angle}");
    }

    #[test]
    fn sphere_is_isotropic() {
        let p = make_tensor_field(&small(Scene::IsotropicSphere)).unwrap();
        for (t, &l) in p.tensors.tensors.iter().zip(&p.labels) {
            if l != 0 {
                assert!(tensor_metrics(t).fa < 1e-12);
            }
        }
        assert!(p.labels.iter().any(|&l| l == LABEL_GM));
    }

    #[test]
    fn single_bundle_along_x() {
        let p = make_tensor_field(&small(Scene::SingleBundle)).unwrap();
        let mut count = 0;
        for (t, &l) in p.tensors.tensors.iter().zip(&p.labels) {
            if l == LABEL_WM {
                count += 1;
                let m = tensor_metrics(t);
                assert!((m.v1[0] - 1.0).abs() < 1e-12);
            }
        }
        assert!(count > 20);
    }

    #[test]
    fn curved_bundle_follows_tangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = PhantomSpec::randomized(small(Scene::CurvedBundle).grid, Scene::CurvedBundle, &mut rng);
        let p = make_tensor_field(&spec).unwrap();
        let mut count = 0;
        for (t, tan) in p.tensors.tensors.iter().zip(&p.tangents) {
            if let Some(tan) = tan {
                count += 1;
                let v1 = Vector3::from(tensor_metrics(t).v1);
                assert!(crate::linalg::axial_angle_deg(&v1, &Vector3::from(*tan)) < 1.0);
            }
        }
        assert!(count > 20);
    }

    #[test]
    fn clean_synthesis_matches_forward_model() {
        let p = make_tensor_field(&small(Scene::CrossingBundles)).unwrap();
        let g = ulf_gradient_table();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = synthesize_dwi(&p.tensors, &g, &p.s0, None, 0.0, &mut rng).unwrap();
        for v in (0..p.labels.len()).step_by(37) {
            for i in 0..g.len() {
                let e = st_forward(p.s0[v], &p.tensors.tensors[v], g.bvals[i], g.bvecs[i]);
                assert_eq!(ds.volume.get(v, i), e);
            }
        }
    }

    #[test]
    fn uniform_gamma_doubles_signals() {
        let p = make_tensor_field(&small(Scene::SingleBundle)).unwrap();
        let g = ulf_gradient_table();
        let mut bias = InjectedBias::none(g.len());
        for i in g.dwi_indices(50.0) {
            bias.log_gamma[i][0] = 2f64.ln();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clean = synthesize_dwi(&p.tensors, &g, &p.s0, None, 0.0, &mut rng).unwrap();
        let biased = synthesize_dwi(&p.tensors, &g, &p.s0, Some(&bias), 0.0, &mut rng).unwrap();
        for i in g.dwi_indices(50.0) {
            for v in 0..p.labels.len() {
                let (a, b) = (clean.volume.get(v, i), biased.volume.get(v, i));
                assert!((b - 2.0 * a).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn random_bias_in_range_and_direction_dependent() {
        let p = make_tensor_field(&small(Scene::IsotropicSphere)).unwrap();
        let g = ulf_gradient_table();
        let basis = DctBasis::new(&p.tensors.grid);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bias = InjectedBias::random(&g, &basis, (0.7, 1.3), (0.98, 1.02), 50.0, &mut rng);
        let dwi = g.dwi_indices(50.0);
        for &i in &dwi {
            for f in bias.gamma_field(&basis, i) {
                assert!((0.7 - 1e-12..=1.3 + 1e-12).contains(&f));
            }
            for f in bias.upsilon_field(&basis, i) {
                assert!((0.98 - 1e-12..=1.02 + 1e-12).contains(&f));
            }
        }
        // distinct spectra per direction
        for a in 0..dwi.len() {
            for b in (a + 1)..dwi.len() {
                let d: f64 = (0..N_BASIS)
                    .map(|k| (bias.log_gamma[dwi[a]][k] - bias.log_gamma[dwi[b]][k]).abs())
                    .sum();
                assert!(d > 1e-3);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let p = make_tensor_field(&small(Scene::CurvedBundle)).unwrap();
        let g = ulf_gradient_table();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            synthesize_dwi(&p.tensors, &g, &p.s0, None, 20.0, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }
}
