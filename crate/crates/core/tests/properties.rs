use nalgebra::{Matrix3, SMatrix, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ulfdti::bias::dsw_nll;
use ulfdti::gradients::{format_gradient_table, parse_gradient_text, split_shells};
use ulfdti::linalg::{random_rotation, rotation_zyz};
use ulfdti::nifti::{encode_nifti, parse_nifti, WriteOptions};
use ulfdti::sh::{
    build_icosphere, deproject_ridge, fit_sh, project_to_icosphere, wigner_rotate, ShCoeffs, WignerRotation,
};
use ulfdti::stats::{bh_fdr, fisher_lda_auc, icc_2way_absolute, lncc, lncc_window, mae};
use ulfdti::tensor::{st_forward, tensor_metrics, v1_coherence, DiffusionTensor, TensorFitter};
use ulfdti::{GradientTable, Volume, VolumeGrid};

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn direction() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-1.0f64..1.0)
        .prop_filter("not too short", |v| v.iter().map(|x| x * x).sum::<f64>() > 0.05)
        .prop_map(unit)
}

fn spd_tensor() -> impl Strategy<Value = DiffusionTensor> {
    (prop::array::uniform3(1e-4f64..3e-3), prop::array::uniform3(-3.2f64..3.2)).prop_map(|(l, a)| {
        let r = rotation_zyz(a[0], a[1] / 2.0, a[2]);
        DiffusionTensor::from_eigen(l, &r)
    })
}

fn coeffs() -> impl Strategy<Value = ShCoeffs> {
    prop::array::uniform6(-2.0f64..2.0).prop_map(ShCoeffs)
}

fn angles() -> impl Strategy<Value = (f64, f64, f64)> {
    (-3.2f64..3.2, 0.0f64..3.14159, -3.2f64..3.2)
}

/// One b=0 entry plus `n` random directions at b=1000; returns None when
/// the directions do not determine a tensor.
fn geometry(dirs: &[[f64; 3]]) -> Option<GradientTable> {
    let mut bvals = vec![0.0];
    let mut bvecs = vec![[0.0; 3]];
    for d in dirs {
        bvals.push(1000.0);
        bvecs.push(*d);
    }
    let g = GradientTable::new(bvals, bvecs).ok()?;
    let fitter = TensorFitter::new(&g).ok()?;
    let sv = fitter.design().clone().singular_values();
    (sv.min() > 0.05 * sv.max()).then_some(g)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nifti_roundtrip(
        dims in prop::array::uniform3(1usize..6),
        channels in 1usize..4,
        voxel in prop::array::uniform3(0.5f64..4.0),
        offset in prop::array::uniform3(-100.0f64..100.0),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut affine = [[0.0; 4]; 4];
        for a in 0..3 {
            affine[a][a] = voxel[a];
            affine[a][3] = offset[a];
        }
        affine[3][3] = 1.0;
        let grid = VolumeGrid::new(dims, voxel, affine).unwrap();
        let n = grid.n_voxels() * channels;
        let data: Vec<f64> = (0..n).map(|_| (rng.random::<f32>() * 2000.0 - 1000.0) as f64).collect();
        let v = Volume::new(grid, channels, data).unwrap();
        let bytes = encode_nifti(&v, &WriteOptions::default()).unwrap();
        let (back, _) = parse_nifti(&bytes).unwrap();
        prop_assert_eq!(back.grid.dims, v.grid.dims);
        prop_assert_eq!(back.channels, v.channels);
        prop_assert_eq!(&back.data, &v.data);
        for r in 0..4 {
            for c in 0..4 {
                prop_assert!((back.grid.affine[r][c] - v.grid.affine[r][c]).abs() < 1e-6 * (1.0 + v.grid.affine[r][c].abs()));
            }
        }
    }

    #[test]
    fn gradient_text_roundtrip_is_unit(raw in prop::collection::vec((prop::bool::ANY, prop::array::uniform3(-3.0f64..3.0)), 1..20)) {
        let mut bvals = Vec::new();
        let mut bvecs = Vec::new();
        for (b0, v) in &raw {
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if *b0 || norm < 1e-3 {
                bvals.push(0.0);
                bvecs.push([0.0; 3]);
            } else {
                bvals.push(700.0);
                bvecs.push(*v);
            }
        }
        let bval_text = bvals.iter().map(|b| format!("{b}")).collect::<Vec<_>>().join(" ");
        let bvec_text = (0..3)
            .map(|a| bvecs.iter().map(|v| format!("{:e}", v[a])).collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join("\n");
        let g = parse_gradient_text(&bval_text, &bvec_text).unwrap();
        for (b, v) in g.bvals.iter().zip(&g.bvecs) {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if *b > 0.0 {
                prop_assert!((n - 1.0).abs() < 1e-6);
            } else {
                prop_assert_eq!(n, 0.0);
            }
        }
        let (bt, vt) = format_gradient_table(&g);
        prop_assert_eq!(parse_gradient_text(&bt, &vt).unwrap(), g);
    }

    #[test]
    fn shells_partition_indices(
        bvals in prop::collection::vec(prop::sample::select(vec![0.0, 5.0, 700.0, 710.0, 1000.0, 2000.0, 3000.0]), 1..30),
        tol in 0.0f64..60.0,
    ) {
        let bvecs: Vec<[f64; 3]> = bvals.iter().map(|&b| if b > 0.0 { [0.0, 0.0, 1.0] } else { [0.0; 3] }).collect();
        let g = GradientTable::new(bvals.clone(), bvecs).unwrap();
        let shells = split_shells(&g, tol);
        let mut all: Vec<usize> = shells.values().flatten().cloned().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..bvals.len()).collect::<Vec<_>>());
    }

    #[test]
    fn tensor_forward_fit_roundtrip(
        d in spd_tensor(),
        dirs in prop::collection::vec(direction(), 6..15),
        s0 in 100.0f64..2000.0,
    ) {
        let Some(g) = geometry(&dirs) else { return Ok(()); };
        let fitter = TensorFitter::new(&g).unwrap();
        let signals: Vec<f64> = (0..g.len()).map(|i| st_forward(s0, &d, g.bvals[i], g.bvecs[i])).collect();
        let (fit, s0_hat) = fitter.fit(&signals);
        let scale = d.0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..6 {
            prop_assert!((fit.0[k] - d.0[k]).abs() < 1e-9 * scale);
        }
        prop_assert!((s0_hat - s0).abs() < 1e-9 * s0);
    }

    #[test]
    fn fa_scale_invariant_adc_linear(d in spd_tensor(), c in 0.01f64..100.0) {
        let (m, mc) = (tensor_metrics(&d), tensor_metrics(&d.scaled(c)));
        prop_assert!((m.fa - mc.fa).abs() < 1e-12);
        prop_assert!((mc.adc - c * m.adc).abs() < 1e-12 * mc.adc.max(1e-12));
        prop_assert!((0.0..=1.0).contains(&m.fa));
    }

    #[test]
    fn coherence_sign_and_rotation_invariant(
        dirs in prop::collection::vec(direction(), 1..30),
        flips in prop::collection::vec(prop::bool::ANY, 30),
        (a, b, c) in angles(),
    ) {
        let base = v1_coherence(&dirs).unwrap();
        let flipped: Vec<[f64; 3]> = dirs.iter().zip(&flips).map(|(d, f)| if *f { [-d[0], -d[1], -d[2]] } else { *d }).collect();
        prop_assert!((v1_coherence(&flipped).unwrap() - base).abs() < 1e-12);
        let r = rotation_zyz(a, b, c);
        let rotated: Vec<[f64; 3]> = dirs.iter().map(|d| {
            let v = r * Vector3::from(*d);
            [v.x, v.y, v.z]
        }).collect();
        prop_assert!((v1_coherence(&rotated).unwrap() - base).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn wigner_preserves_power(c in coeffs(), (a, b, g) in angles()) {
        let w = WignerRotation::from_euler(a, b, g);
        let r = wigner_rotate(&c, &w);
        let (p0, p2) = c.power();
        let (q0, q2) = r.power();
        prop_assert!((p0 - q0).abs() < 1e-12);
        prop_assert!((p2 - q2).abs() < 1e-12 * (1.0 + p2));
        let back = wigner_rotate(&r, &WignerRotation::from_euler(-g, -b, -a));
        for k in 0..6 {
            prop_assert!((back.0[k] - c.0[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn wigner_matches_function_rotation(c in coeffs(), (a, b, g) in angles(), d in direction()) {
        // (R·f)(u) = f(Rᵀu)
        let w = WignerRotation::from_euler(a, b, g);
        let r = w.matrix();
        let rt = r.transpose() * Vector3::from(d);
        let expected = c.eval([rt.x, rt.y, rt.z]);
        prop_assert!((wigner_rotate(&c, &w).eval(d) - expected).abs() < 1e-10);
    }

    #[test]
    fn projection_is_linear(c1 in coeffs(), c2 in coeffs(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let s = build_icosphere();
        let mix = ShCoeffs(std::array::from_fn(|k| a * c1.0[k] + b * c2.0[k]));
        let (p1, p2, pm) = (project_to_icosphere(&c1, &s), project_to_icosphere(&c2, &s), project_to_icosphere(&mix, &s));
        for j in 0..42 {
            prop_assert!((pm[j] - (a * p1[j] + b * p2[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn full_deprojection_is_left_inverse(c in coeffs()) {
        let s = build_icosphere();
        let all: Vec<usize> = (0..42).collect();
        let back = deproject_ridge(&project_to_icosphere(&c, &s), &all, &s, 0.0).unwrap();
        for k in 0..6 {
            prop_assert!((back.0[k] - c.0[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn fit_sh_identity_on_spanning_sets(c in coeffs(), dirs in prop::collection::vec(direction(), 6..20)) {
        let b = ulfdti::sh::basis_matrix(&dirs);
        let sv = b.singular_values();
        prop_assume!(sv.min() > 0.05 * sv.max());
        let signals: Vec<f64> = dirs.iter().map(|d| c.eval(*d)).collect();
        let fit = fit_sh(&signals, &dirs).unwrap();
        for k in 0..6 {
            prop_assert!((fit.0[k] - c.0[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn dsw_sign_invariant(v in direction(), mu in direction(), fa in 0.0f64..1.0, kappa in 0.0f64..50.0) {
        let neg = |d: [f64; 3]| [-d[0], -d[1], -d[2]];
        let base = dsw_nll(v, fa, mu, kappa);
        prop_assert!((dsw_nll(neg(v), fa, mu, kappa) - base).abs() < 1e-12);
        prop_assert!((dsw_nll(v, fa, neg(mu), kappa) - base).abs() < 1e-12);
    }

    #[test]
    fn bh_monotone_and_permutation_invariant(p in prop::collection::vec(0.0f64..1.0, 1..40), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let q = bh_fdr(&p).unwrap();
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
        for w in order.windows(2) {
            prop_assert!(q[w[0]] <= q[w[1]]);
        }
        for (pi, qi) in p.iter().zip(&q) {
            prop_assert!(*qi >= *pi - 1e-15 && *qi <= 1.0);
        }
        let mut perm: Vec<usize> = (0..p.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        let qp = bh_fdr(&pp).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(qp[k], q[i]);
        }
    }

    #[test]
    fn lda_auc_affine_invariant(seed in any::<u64>(), n in 8usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let points: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..3).map(|k| rng.random::<f64>() + if l && k == 0 { 0.7 } else { 0.0 }).collect())
            .collect();
        let a = loop {
            let m = SMatrix::<f64, 3, 3>::from_fn(|_, _| rng.random::<f64>() * 2.0 - 1.0);
            if m.determinant().abs() > 0.2 {
                break m;
            }
        };
        let t: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>() * 10.0 - 5.0);
        let moved: Vec<Vec<f64>> = points
            .iter()
            .map(|p| (0..3).map(|r| (0..3).map(|c| a[(r, c)] * p[c]).sum::<f64>() + t[r]).collect())
            .collect();
        let (x, y) = (fisher_lda_auc(&points, &labels).unwrap(), fisher_lda_auc(&moved, &labels).unwrap());
        prop_assert!((x.auc - y.auc).abs() < 1e-12);
    }

    #[test]
    fn icc_matches_anova(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 3..10)) {
        let (n, k) = (rows.len() as f64, 3.0);
        let grand = rows.iter().flatten().sum::<f64>() / (n * k);
        let row_means: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / k).collect();
        let col_means: Vec<f64> = (0..3).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect();
        let ssr = k * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
        let ssc = n * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
        let sst: f64 = rows.iter().flatten().map(|v| (v - grand).powi(2)).sum();
        let sse = sst - ssr - ssc;
        let (msr, msc, mse) = (ssr / (n - 1.0), ssc / (k - 1.0), sse / ((n - 1.0) * (k - 1.0)));
        let denom = msr + (k - 1.0) * mse + k * (msc - mse) / n;
        prop_assume!(denom.abs() > 1e-6);
        let expected = (msr - mse) / denom;
        let got = icc_2way_absolute(&rows).unwrap();
        prop_assert!((got - expected).abs() < 1e-9 * (1.0 + expected.abs()));
    }
}

fn naive_lncc(a: &Volume, b: &Volume, w: usize) -> f64 {
    let d = a.grid.dims;
    let mut total = 0.0;
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let (lx, hx) = lncc_window(x, d[0], w);
                let (ly, hy) = lncc_window(y, d[1], w);
                let (lz, hz) = lncc_window(z, d[2], w);
                let (mut va, mut vb) = (Vec::new(), Vec::new());
                for zz in lz..hz {
                    for yy in ly..hy {
                        for xx in lx..hx {
                            let i = a.grid.index(xx, yy, zz);
                            va.push(a.data[i]);
                            vb.push(b.data[i]);
                        }
                    }
                }
                let n = va.len() as f64;
                let (ma, mb) = (va.iter().sum::<f64>() / n, vb.iter().sum::<f64>() / n);
                let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
                for (p, q) in va.iter().zip(&vb) {
                    sab += (p - ma) * (q - mb);
                    saa += (p - ma) * (p - ma);
                    sbb += (q - mb) * (q - mb);
                }
                if saa > 0.0 && sbb > 0.0 {
                    total += sab / (saa * sbb).sqrt();
                }
            }
        }
    }
    total / a.grid.n_voxels() as f64
}

#[test]
fn lncc_and_mae_match_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let grid = VolumeGrid::isotropic([12, 12, 12], 1.0);
    for w in [3, 4, 10] {
        let a = Volume::new(grid.clone(), 1, (0..1728).map(|_| rng.random()).collect()).unwrap();
        let b = Volume::new(grid.clone(), 1, a.data.iter().map(|v| v + 0.5 * rng.random::<f64>()).collect()).unwrap();
        let fast = lncc(&a, &b, w).unwrap();
        let slow = naive_lncc(&a, &b, w);
        assert!((fast - slow).abs() < 1e-10, "window {w}: {fast} vs {slow}");
        let naive_mae = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / 1728.0;
        assert!((mae(&a.data, &b.data, None).unwrap() - naive_mae).abs() < 1e-12);
    }
}

#[test]
fn wigner_matrix_round_trips_random_rotations() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let r: Matrix3<f64> = random_rotation(&mut rng);
        let w = WignerRotation::from_matrix(&r);
        assert!((w.matrix() - r).norm() < 1e-10);
    }
}
