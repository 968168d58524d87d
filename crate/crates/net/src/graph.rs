//! Icosphere graph convolution and the projection/deprojection block.

use std::rc::Rc;

use rand::Rng;
use ulfdti::sh::{build_icosphere, Icosphere, ICOSPHERE_VERTICES, N_COEFFS};

use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Tape, Tensor, Var};

/// H_out = GELU(LN((w_v·I + (w_n/K)·A)·W·H + b)), with features on rows and
/// vertex-major columns (`[F, 42·N]` for N voxels).
#[derive(Debug, Clone)]
pub struct GraphConvLayer {
    pub fin: usize,
    pub fout: usize,
    /// Layer norm over features per vertex; off only for testing.
    pub norm: bool,
    pub w: ParamId,
    pub b: ParamId,
    pub wv: ParamId,
    pub wn: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl GraphConvLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        fin: usize,
        fout: usize,
        bias_init: Init,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / fin as f64).sqrt();
        Self {
            fin,
            fout,
            norm: true,
            w: store.add(format!("{prefix}.w"), vec![fout, fin], Init::Normal(std), rng),
            b: store.add(format!("{prefix}.b"), vec![fout], bias_init, rng),
            wv: store.add(format!("{prefix}.w_v"), vec![1], Init::Ones, rng),
            wn: store.add(format!("{prefix}.w_n"), vec![1], Init::Ones, rng),
            gamma: store.add(format!("{prefix}.ln_gamma"), vec![fout], Init::Ones, rng),
            beta: store.add(format!("{prefix}.ln_beta"), vec![fout], Init::Zeros, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], h: Var, knn: &Rc<Vec<Vec<usize>>>) -> Var {
        assert_eq!(tape.value(h).shape[0], self.fin, "graph conv input features");
        let z = tape.matmul(p[self.w], h);
        let z = tape.graph_mix(z, p[self.wv], p[self.wn], Rc::clone(knn));
        let z = tape.add_row_bias(z, p[self.b]);
        let z = if self.norm {
            tape.layer_norm_cols(z, p[self.gamma], p[self.beta])
        } else {
            z
        };
        tape.gelu(z)
    }
}

/// Project SH coefficients to the 42 icosphere vertices, run two graph
/// convolutions, read out one amplitude per vertex added to the projected
/// input, and deproject with the pseudo-inverse. The readout starts at zero
/// so a fresh block is the identity.
#[derive(Debug, Clone)]
pub struct IcoBlock {
    pub hidden: usize,
    pub gc1: GraphConvLayer,
    pub gc2: GraphConvLayer,
    pub readout: ParamId,
    /// Pᵀ, 42×6.
    pub projection_t: Tensor,
    /// P⁺, 6×42.
    pub deprojection: Tensor,
    pub knn: Vec<Vec<usize>>,
}

impl IcoBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, hidden: usize, rng: &mut R) -> Self {
        Self::with_sphere(store, prefix, hidden, &build_icosphere(), rng)
    }

    pub fn with_sphere<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        sphere: &Icosphere,
        rng: &mut R,
    ) -> Self {
        let nv = sphere.vertices.len();
        let p = &sphere.projection;
        let projection_t = Tensor::new(vec![nv, N_COEFFS], (0..nv * N_COEFFS).map(|i| p[(i % N_COEFFS, i / N_COEFFS)]).collect());
        let d = &sphere.deprojection;
        let deprojection = Tensor::new(vec![N_COEFFS, nv], (0..nv * N_COEFFS).map(|i| d[(i / nv, i % nv)]).collect());
        // a single input feature would be erased by the layer norm without
        // a bias to give it an offset
        let gc1 = GraphConvLayer::new(store, &format!("{prefix}.gc1"), 1, hidden, Init::Normal(1.0), rng);
        let gc2 = GraphConvLayer::new(store, &format!("{prefix}.gc2"), hidden, hidden, Init::Zeros, rng);
        let readout = store.add(format!("{prefix}.readout"), vec![1, hidden], Init::Zeros, rng);
        Self {
            hidden,
            gc1,
            gc2,
            readout,
            projection_t,
            deprojection,
            knn: sphere.knn.clone(),
        }
    }

    /// `sh` is `[6, N]`; returns `[6, N]`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], sh: Var) -> Var {
        let (rows, n) = tape.value(sh).rows_cols();
        assert_eq!(rows, N_COEFFS, "ico block expects six SH rows");
        let nv = self.knn.len();
        let knn = Rc::new(self.knn.clone());
        let pt = tape.leaf(self.projection_t.clone());
        let pinv = tape.leaf(self.deprojection.clone());
        let h = tape.matmul(pt, sh);
        let h = tape.reshape(h, vec![1, nv * n]);
        let z = self.gc1.forward(tape, p, h, &knn);
        let z = self.gc2.forward(tape, p, z, &knn);
        let r = tape.matmul(p[self.readout], z);
        let s = tape.add(h, r);
        let s = tape.reshape(s, vec![nv, n]);
        tape.matmul(pinv, s)
    }

    /// Forward pass without gradients over voxel chunks, for large volumes.
    pub fn apply(&self, store: &ParamStore, sh: &[f64], chunk: usize) -> Vec<f64> {
        assert_eq!(sh.len() % N_COEFFS, 0);
        let n = sh.len() / N_COEFFS;
        let chunk = chunk.max(1);
        let mut out = vec![0.0; sh.len()];
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let m = end - start;
            let mut data = Vec::with_capacity(N_COEFFS * m);
            for k in 0..N_COEFFS {
                data.extend_from_slice(&sh[k * n + start..k * n + end]);
            }
            let mut tape = Tape::inference();
            let p = store.bind(&mut tape);
            let x = tape.leaf(Tensor::new(vec![N_COEFFS, m], data));
            let y = self.forward(&mut tape, &p, x);
            let y = &tape.value(y).data;
            for k in 0..N_COEFFS {
                out[k * n + start..k * n + end].copy_from_slice(&y[k * m..(k + 1) * m]);
            }
            start = end;
        }
        out
    }
}

pub const VERTICES: usize = ICOSPHERE_VERTICES;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::gelu;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn pseudo_inverse_is_left_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let block = IcoBlock::new(&mut store, "ico", 4, &mut rng);
        let m = crate::kernels::matmul(&block.deprojection.data, &block.projection_t.data, 6, VERTICES, 6);
        for i in 0..6 {
            for j in 0..6 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((m[i * 6 + j] - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn test_mode_layer_is_plain_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mut layer = GraphConvLayer::new(&mut store, "g", 3, 3, Init::Zeros, &mut rng);
        layer.norm = false;
        store.get_mut(layer.w).data = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        store.get_mut(layer.wn).data = vec![0.0];
        let knn = Rc::new(build_icosphere().knn);
        let h = randn(3 * VERTICES, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.leaf(Tensor::new(vec![3, VERTICES], h.clone()));
        let y = layer.forward(&mut tape, &p, x, &knn);
        for (a, b) in tape.value(y).data.iter().zip(&h) {
            assert!((a - gelu(*b)).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_over_vertices_stays_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let layer = GraphConvLayer::new(&mut store, "g", 2, 5, Init::Normal(1.0), &mut rng);
        let knn = Rc::new(build_icosphere().knn);
        let mut h = Vec::new();
        for f in [0.3, -1.2] {
            h.extend(std::iter::repeat_n(f, VERTICES));
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.leaf(Tensor::new(vec![2, VERTICES], h));
        let y = layer.forward(&mut tape, &p, x, &knn);
        for row in tape.value(y).data.chunks(VERTICES) {
            assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn vertex_relabeling_permutes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let layer = GraphConvLayer::new(&mut store, "g", 2, 3, Init::Normal(1.0), &mut rng);
        let knn = build_icosphere().knn;
        let mut perm: Vec<usize> = (0..VERTICES).collect();
        for i in (1..VERTICES).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        // vertex i is relabeled perm[i]
        let mut knn_p = vec![Vec::new(); VERTICES];
        for i in 0..VERTICES {
            knn_p[perm[i]] = knn[i].iter().map(|&j| perm[j]).collect();
        }
        let h = randn(2 * VERTICES, &mut rng);
        let mut hp = vec![0.0; h.len()];
        for f in 0..2 {
            for i in 0..VERTICES {
                hp[f * VERTICES + perm[i]] = h[f * VERTICES + i];
            }
        }
        let run = |h: Vec<f64>, knn: Vec<Vec<usize>>| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let x = tape.leaf(Tensor::new(vec![2, VERTICES], h));
            let y = layer.forward(&mut tape, &p, x, &Rc::new(knn));
            tape.value(y).data.clone()
        };
        let y = run(h, knn);
        let yp = run(hp, knn_p);
        for f in 0..3 {
            for i in 0..VERTICES {
                assert!((yp[f * VERTICES + perm[i]] - y[f * VERTICES + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fresh_block_is_identity_and_zero_maps_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let block = IcoBlock::new(&mut store, "ico", 8, &mut rng);
        let x = randn(6 * 5, &mut rng);
        let y = block.apply(&store, &x, 2);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-8);
        }
        // zero biases and zero input: every layer stays at zero
        store.get_mut(block.gc1.b).data.fill(0.0);
        store.get_mut(block.readout).data = randn(8, &mut rng);
        let y = block.apply(&store, &[0.0; 12], 7);
        assert!(y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn chunked_apply_matches_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let block = IcoBlock::new(&mut store, "ico", 4, &mut rng);
        store.get_mut(block.readout).data = randn(4, &mut rng);
        let x = randn(6 * 11, &mut rng);
        let a = block.apply(&store, &x, 11);
        let b = block.apply(&store, &x, 3);
        assert_eq!(a, b);
    }
}
