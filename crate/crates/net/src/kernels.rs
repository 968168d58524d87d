//! Dense forward/backward kernels behind the tape ops.

use libm::erf;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
pub const LN_EPS: f64 = 1e-5;

/// Exact GELU, x·Φ(x).
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    gelu_grad_with_cdf(x, normal_cdf(x))
}

/// Φ(x).
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2))
}

/// GELU derivative given Φ(x) from the forward pass.
#[inline]
pub fn gelu_grad_with_cdf(x: f64, cdf: f64) -> f64 {
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Row-major c[m, n] = Σ a·b with explicit strides, accumulating when
/// `accumulate` is set.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (usize, usize), b: &[f64], (rsb, csb): (usize, usize), c: &mut [f64], (rsc, csc): (usize, usize), accumulate: bool) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[i * rsc + j * csc] = 0.0;
                }
            }
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa, "gemm: a too short");
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb, "gemm: b too short");
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc, "gemm: c too short");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strided access reaches.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa as isize, csa as isize, b.as_ptr(), rsb as isize, csb as isize, beta,
            c.as_mut_ptr(), rsc as isize, csc as isize,
        );
    }
}

/// [m, k] · [k, n].
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), &mut out, (n, 1), false);
    out
}

/// g[m, n] · bᵀ where b is [k, n]; result [m, k].
pub fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    gemm(m, n, k, g, (n, 1), b, (1, n), &mut out, (k, 1), false);
    out
}

/// aᵀ · g where a is [m, k] and g is [m, n]; result [k, n].
pub fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    gemm(k, m, n, a, (1, k), g, (n, 1), &mut out, (n, 1), false);
    out
}

pub fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// Returns (output, x̂, 1/σ per column).
pub fn layer_norm_cols(x: &[f64], gamma: &[f64], beta: &[f64], f: usize, m: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; m];
    for r in 0..f {
        mean.iter_mut().zip(&x[r * m..(r + 1) * m]).for_each(|(a, v)| *a += v);
    }
    mean.iter_mut().for_each(|a| *a /= f as f64);
    let mut var = vec![0.0; m];
    for r in 0..f {
        for (j, v) in x[r * m..(r + 1) * m].iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / f as f64 + LN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; f * m];
    let mut out = vec![0.0; f * m];
    for r in 0..f {
        for j in 0..m {
            let h = (x[r * m + j] - mean[j]) * inv_std[j];
            xhat[r * m + j] = h;
            out[r * m + j] = gamma[r] * h + beta[r];
        }
    }
    (out, xhat, inv_std)
}

pub fn layer_norm_cols_backward(
    g: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    f: usize,
    m: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gg = vec![0.0; f];
    let mut gb = vec![0.0; f];
    let mut s1 = vec![0.0; m];
    let mut s2 = vec![0.0; m];
    for r in 0..f {
        for j in 0..m {
            let i = r * m + j;
            gg[r] += g[i] * xhat[i];
            gb[r] += g[i];
            let dh = g[i] * gamma[r];
            s1[j] += dh;
            s2[j] += dh * xhat[i];
        }
    }
    let fl = f as f64;
    let mut gx = vec![0.0; f * m];
    for r in 0..f {
        for j in 0..m {
            let i = r * m + j;
            let dh = g[i] * gamma[r];
            gx[i] = inv_std[j] / fl * (fl * dh - s1[j] - xhat[i] * s2[j]);
        }
    }
    (gx, gg, gb)
}

pub fn neighbour_sum(z: &[f64], f: usize, nv: usize, n: usize, knn: &[Vec<usize>]) -> Vec<f64> {
    let cols = nv * n;
    let mut out = vec![0.0; f * cols];
    for r in 0..f {
        for (i, nb) in knn.iter().enumerate() {
            let dst = r * cols + i * n;
            for &j in nb {
                let src = r * cols + j * n;
                for t in 0..n {
                    out[dst + t] += z[src + t];
                }
            }
        }
    }
    out
}

pub fn neighbour_scatter(g: &[f64], f: usize, nv: usize, n: usize, knn: &[Vec<usize>]) -> Vec<f64> {
    let cols = nv * n;
    let mut out = vec![0.0; f * cols];
    for r in 0..f {
        for (i, nb) in knn.iter().enumerate() {
            let src = r * cols + i * n;
            for &j in nb {
                let dst = r * cols + j * n;
                for t in 0..n {
                    out[dst + t] += g[src + t];
                }
            }
        }
    }
    out
}

/// Valid output range along one axis for kernel offset `d` ∈ {−1, 0, 1}.
#[inline]
fn range(n: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n.saturating_sub(d as usize) } else { n };
    (lo, hi.max(lo))
}

fn tap(k: usize) -> (isize, isize, isize) {
    ((k / 9) as isize - 1, ((k / 3) % 3) as isize - 1, (k % 3) as isize - 1)
}

/// Column-matrix size cap (values) for one z-slab of im2col.
const COLS_BUDGET: usize = 1 << 21;

fn slab_depth(cin: usize, ny: usize, nx: usize, nz: usize) -> usize {
    (COLS_BUDGET / (cin * 27 * ny * nx).max(1)).clamp(1, nz.max(1))
}

/// im2col for output planes [z0, z1): rows (ci, tap), columns the slab's
/// voxels, zero outside the volume.
fn im2col(x: &[f64], cin: usize, d: [usize; 3], z0: usize, z1: usize, cols: &mut Vec<f64>) {
    let [nz, ny, nx] = d;
    let v = nz * ny * nx;
    let cv = (z1 - z0) * ny * nx;
    cols.clear();
    cols.resize(cin * 27 * cv, 0.0);
    for ci in 0..cin {
        let xi = &x[ci * v..(ci + 1) * v];
        for k in 0..27 {
            let row = &mut cols[(ci * 27 + k) * cv..(ci * 27 + k + 1) * cv];
            let (dz, dy, dx) = tap(k);
            let (zl, zh) = range(nz, dz);
            let (y0, y1) = range(ny, dy);
            let (x0, x1) = range(nx, dx);
            for z in z0.max(zl)..z1.min(zh) {
                for y in y0..y1 {
                    let ob = ((z - z0) * ny + y) * nx;
                    let ib = ((z as isize + dz) as usize * ny + (y as isize + dy) as usize) * nx;
                    let (i0, i1) = ((ib + x0) as isize + dx, (ib + x1) as isize + dx);
                    row[ob + x0..ob + x1].copy_from_slice(&xi[i0 as usize..i1 as usize]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `gx`.
fn col2im(cols: &[f64], cin: usize, d: [usize; 3], z0: usize, z1: usize, gx: &mut [f64]) {
    let [nz, ny, nx] = d;
    let v = nz * ny * nx;
    let cv = (z1 - z0) * ny * nx;
    for ci in 0..cin {
        let gxi = &mut gx[ci * v..(ci + 1) * v];
        for k in 0..27 {
            let row = &cols[(ci * 27 + k) * cv..(ci * 27 + k + 1) * cv];
            let (dz, dy, dx) = tap(k);
            let (zl, zh) = range(nz, dz);
            let (y0, y1) = range(ny, dy);
            let (x0, x1) = range(nx, dx);
            for z in z0.max(zl)..z1.min(zh) {
                for y in y0..y1 {
                    let ob = ((z - z0) * ny + y) * nx;
                    let ib = ((z as isize + dz) as usize * ny + (y as isize + dy) as usize) * nx;
                    let (i0, i1) = ((ib + x0) as isize + dx, (ib + x1) as isize + dx);
                    gxi[i0 as usize..i1 as usize].iter_mut().zip(&row[ob + x0..ob + x1]).for_each(|(a, s)| *a += s);
                }
            }
        }
    }
}

/// 3×3×3 zero-padded convolution via im2col and GEMM over z-slabs.
pub fn conv3_forward(x: &[f64], w: &[f64], b: &[f64], cin: usize, cout: usize, d: [usize; 3]) -> Vec<f64> {
    let [nz, ny, nx] = d;
    let v = nz * ny * nx;
    let kk = cin * 27;
    let mut out = vec![0.0; cout * v];
    for co in 0..cout {
        out[co * v..(co + 1) * v].iter_mut().for_each(|e| *e = b[co]);
    }
    let depth = slab_depth(cin, ny, nx, nz);
    let mut cols = Vec::new();
    let mut z0 = 0;
    while z0 < nz {
        let z1 = (z0 + depth).min(nz);
        let cv = (z1 - z0) * ny * nx;
        im2col(x, cin, d, z0, z1, &mut cols);
        let off = z0 * ny * nx;
        gemm(cout, kk, cv, w, (kk, 1), &cols, (cv, 1), &mut out[off..], (v, 1), true);
        z0 = z1;
    }
    out
}

pub fn conv3_backward(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    cin: usize,
    cout: usize,
    d: [usize; 3],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [nz, ny, nx] = d;
    let v = nz * ny * nx;
    let kk = cin * 27;
    let mut gx = vec![0.0; cin * v];
    let mut gw = vec![0.0; w.len()];
    let gb: Vec<f64> = (0..cout).map(|co| g[co * v..(co + 1) * v].iter().sum()).collect();
    let depth = slab_depth(cin, ny, nx, nz);
    let mut cols = Vec::new();
    let mut gcols = Vec::new();
    let mut z0 = 0;
    while z0 < nz {
        let z1 = (z0 + depth).min(nz);
        let cv = (z1 - z0) * ny * nx;
        let off = z0 * ny * nx;
        im2col(x, cin, d, z0, z1, &mut cols);
        // gW += G_slab · colsᵀ
        gemm(cout, cv, kk, &g[off..], (v, 1), &cols, (1, cv), &mut gw, (kk, 1), true);
        // gcols = Wᵀ · G_slab
        gcols.clear();
        gcols.resize(kk * cv, 0.0);
        gemm(kk, cout, cv, w, (1, kk), &g[off..], (v, 1), &mut gcols, (cv, 1), false);
        col2im(&gcols, cin, d, z0, z1, &mut gx);
        z0 = z1;
    }
    (gx, gw, gb)
}

pub fn avg_pool2(x: &[f64], c: usize, d: [usize; 3]) -> Vec<f64> {
    let [nz, ny, nx] = d;
    assert!(nz % 2 == 0 && ny % 2 == 0 && nx % 2 == 0, "pooling needs even dims, got {d:?}");
    let (mz, my, mx) = (nz / 2, ny / 2, nx / 2);
    let (v, u) = (nz * ny * nx, mz * my * mx);
    let mut out = vec![0.0; c * u];
    for ch in 0..c {
        for z in 0..nz {
            for y in 0..ny {
                for xx in 0..nx {
                    out[ch * u + ((z / 2) * my + y / 2) * mx + xx / 2] += x[ch * v + (z * ny + y) * nx + xx] * 0.125;
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward(g: &[f64], c: usize, d: [usize; 3]) -> Vec<f64> {
    let [nz, ny, nx] = d;
    let (my, mx) = (ny / 2, nx / 2);
    let (v, u) = (nz * ny * nx, (nz / 2) * my * mx);
    let mut out = vec![0.0; c * v];
    for ch in 0..c {
        for z in 0..nz {
            for y in 0..ny {
                for xx in 0..nx {
                    out[ch * v + (z * ny + y) * nx + xx] = g[ch * u + ((z / 2) * my + y / 2) * mx + xx / 2] * 0.125;
                }
            }
        }
    }
    out
}

pub fn convt2_forward(x: &[f64], w: &[f64], b: &[f64], cin: usize, cout: usize, d: [usize; 3]) -> Vec<f64> {
    let [nz, ny, nx] = d;
    let (oz, oy, ox) = (2 * nz, 2 * ny, 2 * nx);
    let (v, u) = (nz * ny * nx, oz * oy * ox);
    let mut out = vec![0.0; cout * u];
    for co in 0..cout {
        out[co * u..(co + 1) * u].iter_mut().for_each(|e| *e = b[co]);
    }
    for ci in 0..cin {
        let xi = &x[ci * v..(ci + 1) * v];
        for co in 0..cout {
            let o = &mut out[co * u..(co + 1) * u];
            for k in 0..8 {
                let wv = w[ci * cout * 8 + co * 8 + k];
                let (a, bb, cc) = (k / 4, (k / 2) % 2, k % 2);
                for z in 0..nz {
                    for y in 0..ny {
                        let row = ((2 * z + a) * oy + 2 * y + bb) * ox + cc;
                        let src = &xi[(z * ny + y) * nx..(z * ny + y + 1) * nx];
                        for (xx, s) in src.iter().enumerate() {
                            o[row + 2 * xx] += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn convt2_backward(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    cin: usize,
    cout: usize,
    d: [usize; 3],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [nz, ny, nx] = d;
    let (oz, oy, ox) = (2 * nz, 2 * ny, 2 * nx);
    let (v, u) = (nz * ny * nx, oz * oy * ox);
    let gb: Vec<f64> = (0..cout).map(|co| g[co * u..(co + 1) * u].iter().sum()).collect();
    let mut gx = vec![0.0; cin * v];
    let mut gw = vec![0.0; w.len()];
    for ci in 0..cin {
        let xi = &x[ci * v..(ci + 1) * v];
        for co in 0..cout {
            let go = &g[co * u..(co + 1) * u];
            for k in 0..8 {
                let wi = ci * cout * 8 + co * 8 + k;
                let wv = w[wi];
                let (a, bb, cc) = (k / 4, (k / 2) % 2, k % 2);
                let mut acc = 0.0;
                for z in 0..nz {
                    for y in 0..ny {
                        let row = ((2 * z + a) * oy + 2 * y + bb) * ox + cc;
                        let base = (z * ny + y) * nx;
                        for xx in 0..nx {
                            let gv = go[row + 2 * xx];
                            acc += gv * xi[base + xx];
                            gx[ci * v + base + xx] += wv * gv;
                        }
                    }
                }
                gw[wi] = acc;
            }
        }
    }
    (gx, gw, gb)
}

pub fn crop(x: &[f64], c: usize, d: [usize; 3], size: [usize; 3]) -> Vec<f64> {
    let (v, u) = (d[0] * d[1] * d[2], size[0] * size[1] * size[2]);
    let mut out = vec![0.0; c * u];
    for ch in 0..c {
        for z in 0..size[0] {
            for y in 0..size[1] {
                let src = ch * v + (z * d[1] + y) * d[2];
                let dst = ch * u + (z * size[1] + y) * size[2];
                out[dst..dst + size[2]].copy_from_slice(&x[src..src + size[2]]);
            }
        }
    }
    out
}

/// Zero-pad a [C, size] field up to `d` (inverse placement of `crop`).
pub fn pad(x: &[f64], c: usize, size: [usize; 3], d: [usize; 3]) -> Vec<f64> {
    let (v, u) = (d[0] * d[1] * d[2], size[0] * size[1] * size[2]);
    let mut out = vec![0.0; c * v];
    for ch in 0..c {
        for z in 0..size[0] {
            for y in 0..size[1] {
                let dst = ch * v + (z * d[1] + y) * d[2];
                let src = ch * u + (z * size[1] + y) * size[2];
                out[dst..dst + size[2]].copy_from_slice(&x[src..src + size[2]]);
            }
        }
    }
    out
}
