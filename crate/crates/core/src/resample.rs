//! Separable linear resampling operators on channel-major volumes:
//! linear and cubic interpolation between center-aligned grids and
//! truncated Gaussian blur. Every operator has an exact adjoint.

use crate::volume::{axis_start, Volume, VolumeGrid};

/// FWHM → standard deviation for a Gaussian.
pub const FWHM_TO_SIGMA: f64 = 0.424_660_900_144_009_5;

/// A 1-D linear map from `n_in` samples to `rows.len()` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisOp {
    pub n_in: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl AxisOp {
    pub fn identity(n: usize) -> Self {
        Self {
            n_in: n,
            rows: (0..n).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn n_out(&self) -> usize {
        self.rows.len()
    }

    pub fn is_identity(&self) -> bool {
        self.n_in == self.n_out() && self.rows.iter().enumerate().all(|(i, r)| r.as_slice() == [(i, 1.0)])
    }

    /// Linear interpolation at source positions start + i·scale, clamped
    /// to the edge samples.
    pub fn linear(n_in: usize, n_out: usize, start: f64, scale: f64) -> Self {
        let rows = (0..n_out)
            .map(|i| {
                let p = (start + i as f64 * scale).clamp(0.0, (n_in - 1) as f64);
                let j = p.floor() as usize;
                let t = p - j as f64;
                if j + 1 >= n_in || t == 0.0 {
                    vec![(j, 1.0)]
                } else {
                    vec![(j, 1.0 - t), (j + 1, t)]
                }
            })
            .collect();
        Self { n_in, rows }
    }

    /// Catmull–Rom cubic interpolation at positions start + i·scale with
    /// replicated edges.
    pub fn cubic(n_in: usize, n_out: usize, start: f64, scale: f64) -> Self {
        let rows = (0..n_out)
            .map(|i| {
                let p = (start + i as f64 * scale).clamp(0.0, (n_in - 1) as f64);
                let j = p.floor() as i64;
                let t = p - j as f64;
                let w = [
                    0.5 * (-t * t * t + 2.0 * t * t - t),
                    0.5 * (3.0 * t * t * t - 5.0 * t * t + 2.0),
                    0.5 * (-3.0 * t * t * t + 4.0 * t * t + t),
                    0.5 * (t * t * t - t * t),
                ];
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
                for (k, wk) in w.iter().enumerate() {
                    if *wk == 0.0 {
                        continue;
                    }
                    let idx = (j - 1 + k as i64).clamp(0, n_in as i64 - 1) as usize;
                    match row.iter_mut().find(|e| e.0 == idx) {
                        Some(e) => e.1 += wk,
                        None => row.push((idx, *wk)),
                    }
                }
                row
            })
            .collect();
        Self { n_in, rows }
    }

    /// Gaussian smoothing with standard deviation `sigma` samples, kernel
    /// truncated at 3σ and renormalized at the edges.
    pub fn gaussian(n: usize, sigma: f64) -> Self {
        if !(sigma > 0.0) {
            return Self::identity(n);
        }
        let radius = (3.0 * sigma).ceil() as i64;
        let rows = (0..n as i64)
            .map(|i| {
                let mut row: Vec<(usize, f64)> = ((i - radius).max(0)..=(i + radius).min(n as i64 - 1))
                    .map(|j| (j as usize, (-0.5 * ((j - i) as f64 / sigma).powi(2)).exp()))
                    .collect();
                let s: f64 = row.iter().map(|e| e.1).sum();
                row.iter_mut().for_each(|e| e.1 /= s);
                row
            })
            .collect();
        Self { n_in: n, rows }
    }

    pub fn then(&self, next: &AxisOp) -> AxisOp {
        assert_eq!(next.n_in, self.n_out());
        let rows = next
            .rows
            .iter()
            .map(|r| {
                let mut acc: Vec<(usize, f64)> = Vec::new();
                for &(m, w) in r {
                    for &(j, v) in &self.rows[m] {
                        match acc.iter_mut().find(|e| e.0 == j) {
                            Some(e) => e.1 += w * v,
                            None => acc.push((j, w * v)),
                        }
                    }
                }
                acc.sort_by_key(|e| e.0);
                acc
            })
            .collect();
        AxisOp { n_in: self.n_in, rows }
    }

    pub fn apply_1d(&self, x: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|&(j, w)| w * x[j]).sum()).collect()
    }

    pub fn adjoint_1d(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n_in];
        for (r, yi) in self.rows.iter().zip(y) {
            for &(j, w) in r {
                x[j] += w * yi;
            }
        }
        x
    }
}

/// Apply `op` along `axis` of a channel-major field with `channels`.
pub fn apply_axis(data: &[f64], dims: [usize; 3], channels: usize, axis: usize, op: &AxisOp) -> (Vec<f64>, [usize; 3]) {
    assert_eq!(op.n_in, dims[axis]);
    let mut out_dims = dims;
    out_dims[axis] = op.n_out();
    let n_in: usize = dims.iter().product();
    let n_out: usize = out_dims.iter().product();
    let mut out = vec![0.0; n_out * channels];
    let stride = |d: [usize; 3]| [1, d[0], d[0] * d[1]];
    let (si, so) = (stride(dims), stride(out_dims));
    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let (a, b) = (others[0], others[1]);
    for c in 0..channels {
        let src = &data[c * n_in..(c + 1) * n_in];
        let dst = &mut out[c * n_out..(c + 1) * n_out];
        for j in 0..dims[b] {
            for i in 0..dims[a] {
                let base_in = i * si[a] + j * si[b];
                let base_out = i * so[a] + j * so[b];
                for (k, row) in op.rows.iter().enumerate() {
                    let mut s = 0.0;
                    for &(m, w) in row {
                        s += w * src[base_in + m * si[axis]];
                    }
                    dst[base_out + k * so[axis]] = s;
                }
            }
        }
    }
    (out, out_dims)
}

/// Adjoint of [`apply_axis`]: maps a field of output shape back.
pub fn adjoint_axis(data: &[f64], out_dims: [usize; 3], channels: usize, axis: usize, op: &AxisOp) -> (Vec<f64>, [usize; 3]) {
    assert_eq!(op.n_out(), out_dims[axis]);
    let mut dims = out_dims;
    dims[axis] = op.n_in;
    let n_in: usize = dims.iter().product();
    let n_out: usize = out_dims.iter().product();
    let mut out = vec![0.0; n_in * channels];
    let stride = |d: [usize; 3]| [1, d[0], d[0] * d[1]];
    let (si, so) = (stride(dims), stride(out_dims));
    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let (a, b) = (others[0], others[1]);
    for c in 0..channels {
        let src = &data[c * n_out..(c + 1) * n_out];
        let dst = &mut out[c * n_in..(c + 1) * n_in];
        for j in 0..dims[b] {
            for i in 0..dims[a] {
                let base_in = i * si[a] + j * si[b];
                let base_out = i * so[a] + j * so[b];
                for (k, row) in op.rows.iter().enumerate() {
                    let y = src[base_out + k * so[axis]];
                    for &(m, w) in row {
                        dst[base_in + m * si[axis]] += w * y;
                    }
                }
            }
        }
    }
    (out, dims)
}

/// Three per-axis operators applied x, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableOp {
    pub ops: [AxisOp; 3],
}

impl SeparableOp {
    pub fn in_dims(&self) -> [usize; 3] {
        [self.ops[0].n_in, self.ops[1].n_in, self.ops[2].n_in]
    }

    pub fn out_dims(&self) -> [usize; 3] {
        [self.ops[0].n_out(), self.ops[1].n_out(), self.ops[2].n_out()]
    }

    pub fn apply_raw(&self, data: &[f64], channels: usize) -> Vec<f64> {
        let mut cur = data.to_vec();
        let mut dims = self.in_dims();
        for (axis, op) in self.ops.iter().enumerate() {
            if op.is_identity() {
                continue;
            }
            (cur, dims) = apply_axis(&cur, dims, channels, axis, op);
        }
        cur
    }

    pub fn adjoint_raw(&self, data: &[f64], channels: usize) -> Vec<f64> {
        let mut cur = data.to_vec();
        let mut dims = self.out_dims();
        for (axis, op) in self.ops.iter().enumerate().rev() {
            if op.is_identity() {
                continue;
            }
            (cur, dims) = adjoint_axis(&cur, dims, channels, axis, op);
        }
        cur
    }

    pub fn then(&self, next: &SeparableOp) -> SeparableOp {
        SeparableOp {
            ops: std::array::from_fn(|a| self.ops[a].then(&next.ops[a])),
        }
    }

    pub fn apply(&self, v: &Volume, target: &VolumeGrid) -> Volume {
        assert_eq!(v.grid.dims, self.in_dims());
        assert_eq!(target.dims, self.out_dims());
        Volume {
            grid: target.clone(),
            channels: v.channels,
            data: self.apply_raw(&v.data, v.channels),
        }
    }
}

/// Linear interpolation from `src` onto `dst` where both grids share their
/// center and axes (as produced by [`VolumeGrid::resampled`]).
pub fn linear_between(src: &VolumeGrid, dst: &VolumeGrid) -> SeparableOp {
    SeparableOp {
        ops: std::array::from_fn(|a| {
            let scale = dst.voxel_size[a] / src.voxel_size[a];
            if src.dims[a] == dst.dims[a] && scale == 1.0 {
                AxisOp::identity(src.dims[a])
            } else {
                AxisOp::linear(src.dims[a], dst.dims[a], axis_start(src.dims[a], dst.dims[a], scale), scale)
            }
        }),
    }
}

/// Gaussian blur with per-axis FWHM in mm.
pub fn gaussian_blur_op(grid: &VolumeGrid, fwhm_mm: [f64; 3]) -> SeparableOp {
    SeparableOp {
        ops: std::array::from_fn(|a| AxisOp::gaussian(grid.dims[a], fwhm_mm[a] * FWHM_TO_SIGMA / grid.voxel_size[a])),
    }
}

/// Anti-aliasing FWHM for going from `src_mm` to `target_mm` spacing:
/// target·√(1 − (src/target)²), zero when not coarsening.
pub fn antialias_fwhm(src_mm: f64, target_mm: f64) -> f64 {
    if target_mm <= src_mm {
        0.0
    } else {
        target_mm * (1.0 - (src_mm / target_mm).powi(2)).sqrt()
    }
}

/// Blur matched to the resolution change, then linear resampling.
pub fn downsample_op(src: &VolumeGrid, voxel_mm: [f64; 3]) -> (SeparableOp, VolumeGrid) {
    let dst = src.resampled(voxel_mm);
    let fwhm = std::array::from_fn(|a| antialias_fwhm(src.voxel_size[a], voxel_mm[a]));
    let op = gaussian_blur_op(src, fwhm).then(&linear_between(src, &dst));
    (op, dst)
}

pub fn resample_to(v: &Volume, target: &VolumeGrid) -> Volume {
    linear_between(&v.grid, target).apply(v, target)
}

pub fn downsample(v: &Volume, voxel_mm: [f64; 3]) -> Volume {
    let (op, dst) = downsample_op(&v.grid, voxel_mm);
    op.apply(v, &dst)
}

/// Trilinear value of one channel at a continuous voxel position,
/// clamped to the grid.
pub fn trilinear_at(channel: &[f64], dims: [usize; 3], p: [f64; 3]) -> f64 {
    let mut i0 = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let q = p[a].clamp(0.0, (dims[a] - 1) as f64);
        i0[a] = (q.floor() as usize).min(dims[a] - 1);
        t[a] = q - i0[a] as f64;
    }
    let mut s = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = if dx == 1 { t[0] } else { 1.0 - t[0] }
                    * if dy == 1 { t[1] } else { 1.0 - t[1] }
                    * if dz == 1 { t[2] } else { 1.0 - t[2] };
                if w == 0.0 {
                    continue;
                }
                let x = (i0[0] + dx).min(dims[0] - 1);
                let y = (i0[1] + dy).min(dims[1] - 1);
                let z = (i0[2] + dz).min(dims[2] - 1);
                s += w * channel[x + dims[0] * (y + dims[1] * z)];
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random::<f64>() - 0.5).collect()
    }

    #[test]
    fn same_grid_is_identity() {
        let g = VolumeGrid::isotropic([5, 4, 3], 2.0);
        let v = Volume::new(g.clone(), 2, random(120, 1)).unwrap();
        assert_eq!(resample_to(&v, &g), v);
        assert_eq!(downsample(&v, [2.0; 3]), v);
    }

    #[test]
    fn linear_reproduces_affine_functions() {
        let src = VolumeGrid::isotropic([10, 9, 8], 1.0);
        let dst = src.resampled([1.7; 3]);
        let mut v = Volume::zeros(src.clone(), 1);
        for i in 0..src.n_voxels() {
            let c = src.coords(i);
            v.data[i] = 2.0 * c[0] as f64 - c[1] as f64 + 0.5 * c[2] as f64;
        }
        let r = resample_to(&v, &dst);
        let op = linear_between(&src, &dst);
        for i in 0..dst.n_voxels() {
            let c = dst.coords(i);
            let p: Vec<f64> = (0..3)
                .map(|a| axis_start(src.dims[a], dst.dims[a], 1.7) + c[a] as f64 * 1.7)
                .collect();
            if (0..3).all(|a| p[a] >= 0.0 && p[a] <= (src.dims[a] - 1) as f64) {
                let e = 2.0 * p[0] - p[1] + 0.5 * p[2];
                assert!((r.data[i] - e).abs() < 1e-12);
            }
        }
        assert_eq!(op.out_dims(), dst.dims);
    }

    #[test]
    fn adjoint_identity() {
        let src = VolumeGrid::isotropic([9, 7, 6], 1.25);
        let (op, dst) = downsample_op(&src, [3.5; 3]);
        let x = random(src.n_voxels() * 2, 2);
        let y = random(dst.n_voxels() * 2, 3);
        let ax = op.apply_raw(&x, 2);
        let aty = op.adjoint_raw(&y, 2);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn composed_axis_op_matches_sequential() {
        let a = AxisOp::gaussian(12, 1.3);
        let b = AxisOp::linear(12, 5, 0.4, 2.5);
        let x = random(12, 4);
        let seq = b.apply_1d(&a.apply_1d(&x));
        let comp = a.then(&b).apply_1d(&x);
        for (p, q) in seq.iter().zip(&comp) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn gaussian_preserves_constants() {
        let op = AxisOp::gaussian(20, 2.2);
        let y = op.apply_1d(&[3.0; 20]);
        assert!(y.iter().all(|v| (v - 3.0).abs() < 1e-14));
    }

    #[test]
    fn cubic_interpolates_nodes_and_quadratics() {
        let x: Vec<f64> = (0..8).map(|i| (i as f64).powi(2)).collect();
        let op = AxisOp::cubic(8, 15, 0.0, 0.5);
        let y = op.apply_1d(&x);
        for (i, v) in y.iter().enumerate() {
            let p = i as f64 * 0.5;
            if i % 2 == 0 {
                assert!((v - p * p).abs() < 1e-12);
            } else if p > 1.0 && p < 6.0 {
                // Catmull–Rom reproduces quadratics in the interior
                assert!((v - p * p).abs() < 1e-12, "{p}: {v}");
            }
        }
    }

    #[test]
    fn trilinear_at_nodes_and_midpoints() {
        let dims = [3, 3, 3];
        let f: Vec<f64> = (0..27).map(|i| i as f64).collect();
        assert_eq!(trilinear_at(&f, dims, [1.0, 2.0, 0.0]), 7.0);
        assert!((trilinear_at(&f, dims, [0.5, 0.5, 0.5]) - 6.5).abs() < 1e-12);
        assert_eq!(trilinear_at(&f, dims, [-4.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn antialias_width() {
        assert_eq!(antialias_fwhm(2.0, 1.0), 0.0);
        assert!((antialias_fwhm(1.25, 3.5) - 3.5 * (1.0 - (1.25f64 / 3.5).powi(2)).sqrt()).abs() < 1e-15);
    }
}
