//! Reverse-mode differentiation over a small fixed set of tensor ops.
//!
//! Tensors are dense `f64` arrays with a row-major shape. Voxel fields use
//! the shape `[C, Z, Y, X]` (channel-major, x fastest), which is also read
//! as a `[C, V]` matrix where convenient.

use std::rc::Rc;

use crate::kernels;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} does not match data");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension and the product of the rest.
    pub fn rows_cols(&self) -> (usize, usize) {
        let r = self.shape[0];
        (r, if r == 0 { 0 } else { self.data.len() / r })
    }

    pub fn spatial(&self) -> [usize; 3] {
        assert_eq!(self.shape.len(), 4, "expected a [C, Z, Y, X] tensor");
        [self.shape[1], self.shape[2], self.shape[3]]
    }
}

pub type Var = usize;

type Backward = Box<dyn Fn(&[f64], &mut Grads)>;

/// Gradient accumulator indexed by tape node.
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    fn add(&mut self, id: Var, g: &[f64]) {
        match &mut self.slots[id] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    fn add_owned(&mut self, id: Var, g: Vec<f64>) {
        match &mut self.slots[id] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, id: Var) -> Option<&[f64]> {
        self.slots[id].as_deref()
    }

    pub fn take(&mut self, id: Var) -> Option<Vec<f64>> {
        self.slots[id].take()
    }
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Rc<Tensor>>,
    backs: Vec<Option<Backward>>,
    no_grad: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records values only; `backward` is a no-op.
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, t: Tensor, back: Option<Backward>) -> Var {
        self.values.push(Rc::new(t));
        self.backs.push(if self.no_grad { None } else { back });
        self.values.len() - 1
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v]
    }

    fn rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.values[v])
    }

    /// Propagate `seed` (the gradient of some scalar with respect to `out`)
    /// back through the tape.
    pub fn backward(&self, out: Var, seed: Vec<f64>) -> Grads {
        assert_eq!(seed.len(), self.values[out].len(), "seed length");
        let mut grads = Grads {
            slots: vec![None; self.values.len()],
        };
        grads.slots[out] = Some(seed);
        for i in (0..=out).rev() {
            let Some(back) = &self.backs[i] else { continue };
            if let Some(g) = grads.slots[i].take() {
                back(&g, &mut grads);
                grads.slots[i] = Some(g);
            }
        }
        grads
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = Tensor::new(shape, self.values[x].data.clone());
        self.push(t, Some(Box::new(move |g, gr| gr.add(x, g))))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.rc(a), self.rc(b));
        assert_eq!(ta.shape, tb.shape, "add shapes");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        self.push(
            Tensor::new(ta.shape.clone(), data),
            Some(Box::new(move |g, gr| {
                gr.add(a, g);
                gr.add(b, g);
            })),
        )
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.rc(x);
        let data = t.data.iter().map(|v| v * s).collect();
        self.push(
            Tensor::new(t.shape.clone(), data),
            Some(Box::new(move |g, gr| gr.add_owned(x, g.iter().map(|v| v * s).collect()))),
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.rc(x);
        let cdf: Vec<f64> = t.data.iter().map(|&v| kernels::normal_cdf(v)).collect();
        let data = t.data.iter().zip(&cdf).map(|(v, c)| v * c).collect();
        self.push(
            Tensor::new(t.shape.clone(), data),
            Some(Box::new(move |g, gr| {
                gr.add_owned(
                    x,
                    t.data.iter().zip(&cdf).zip(g).map(|((&v, c), gi)| gi * kernels::gelu_grad_with_cdf(v, *c)).collect(),
                )
            })),
        )
    }

    /// [m, k] · [k, n] on the leading dimension / remainder split.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.rc(a), self.rc(b));
        let (m, k) = ta.rows_cols();
        let (k2, n) = tb.rows_cols();
        assert_eq!(k, k2, "matmul inner dimensions");
        let out = kernels::matmul(&ta.data, &tb.data, m, k, n);
        self.push(
            Tensor::new(vec![m, n], out),
            Some(Box::new(move |g, gr| {
                gr.add_owned(a, kernels::matmul_nt(g, &tb.data, m, n, k));
                gr.add_owned(b, kernels::matmul_tn(&ta.data, g, m, k, n));
            })),
        )
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.rc(x);
        let (r, c) = t.rows_cols();
        let out = kernels::transpose(&t.data, r, c);
        self.push(
            Tensor::new(vec![c, r], out),
            Some(Box::new(move |g, gr| gr.add_owned(x, kernels::transpose(g, c, r)))),
        )
    }

    /// Adds `bias[r]` to every element of row r.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (t, b) = (self.rc(x), self.rc(bias));
        let (r, c) = t.rows_cols();
        assert_eq!(b.len(), r, "bias length");
        let mut out = t.data.clone();
        for i in 0..r {
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v += b.data[i]);
        }
        self.push(
            Tensor::new(t.shape.clone(), out),
            Some(Box::new(move |g, gr| {
                gr.add(x, g);
                gr.add_owned(bias, (0..r).map(|i| g[i * c..(i + 1) * c].iter().sum()).collect());
            })),
        )
    }

    /// Rows [start, end) of the leading dimension.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let t = self.rc(x);
        let (r, c) = t.rows_cols();
        assert!(start < end && end <= r, "row slice out of range");
        let mut shape = t.shape.clone();
        shape[0] = end - start;
        let data = t.data[start * c..end * c].to_vec();
        self.push(
            Tensor::new(shape, data),
            Some(Box::new(move |g, gr| {
                let mut full = vec![0.0; r * c];
                full[start * c..end * c].copy_from_slice(g);
                gr.add_owned(x, full);
            })),
        )
    }

    /// Concatenation along the leading dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let ts: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.rc(p)).collect();
        let tail = ts[0].shape[1..].to_vec();
        assert!(ts.iter().all(|t| t.shape[1..] == tail[..]), "concat shapes");
        let rows: usize = ts.iter().map(|t| t.shape[0]).sum();
        let mut data = Vec::with_capacity(ts.iter().map(|t| t.len()).sum());
        ts.iter().for_each(|t| data.extend_from_slice(&t.data));
        let mut shape = vec![rows];
        shape.extend(tail);
        let sizes: Vec<usize> = ts.iter().map(|t| t.len()).collect();
        let parts = parts.to_vec();
        self.push(
            Tensor::new(shape, data),
            Some(Box::new(move |g, gr| {
                let mut off = 0;
                for (p, n) in parts.iter().zip(&sizes) {
                    gr.add(*p, &g[off..off + n]);
                    off += n;
                }
            })),
        )
    }

    /// Softmax along each row of a [r, c] matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.rc(x);
        let (r, c) = t.rows_cols();
        let mut out = t.data.clone();
        for row in out.chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        let y = Rc::new(out.clone());
        self.push(
            Tensor::new(t.shape.clone(), out),
            Some(Box::new(move |g, gr| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let (yr, gri) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                    let dot: f64 = yr.iter().zip(gri).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = yr[j] * (gri[j] - dot);
                    }
                }
                gr.add_owned(x, gx);
            })),
        )
    }

    /// Layer norm over the leading (feature) dimension of an [F, M]
    /// matrix, per column, with affine `gamma`, `beta` of length F.
    pub fn layer_norm_cols(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (t, tg, tb) = (self.rc(x), self.rc(gamma), self.rc(beta));
        let (f, m) = t.rows_cols();
        let (out, xhat, inv_std) = kernels::layer_norm_cols(&t.data, &tg.data, &tb.data, f, m);
        self.push(
            Tensor::new(t.shape.clone(), out),
            Some(Box::new(move |g, gr| {
                let (gx, gg, gb) = kernels::layer_norm_cols_backward(g, &xhat, &inv_std, &tg.data, f, m);
                gr.add_owned(x, gx);
                gr.add_owned(gamma, gg);
                gr.add_owned(beta, gb);
            })),
        )
    }

    /// Icosphere neighbourhood mixing on a [F, nv·N] matrix whose columns
    /// are ordered vertex-major: out = w_v·z_i + (w_n/|K|)·Σ_{j∈K(i)} z_j.
    pub fn graph_mix(&mut self, z: Var, wv: Var, wn: Var, knn: Rc<Vec<Vec<usize>>>) -> Var {
        let (t, a, b) = (self.rc(z), self.rc(wv), self.rc(wn));
        let (f, cols) = t.rows_cols();
        let nv = knn.len();
        assert_eq!(cols % nv, 0, "columns must be vertex-major");
        let n = cols / nv;
        let (wv_s, wn_s) = (a.data[0], b.data[0]);
        let nbr = kernels::neighbour_sum(&t.data, f, nv, n, &knn);
        let k = knn[0].len() as f64;
        let out: Vec<f64> = t.data.iter().zip(&nbr).map(|(zi, s)| wv_s * zi + wn_s / k * s).collect();
        self.push(
            Tensor::new(t.shape.clone(), out),
            Some(Box::new(move |g, gr| {
                // the neighbour operator is not symmetric under KNN, so the
                // adjoint scatters to neighbours instead of gathering
                let scattered = kernels::neighbour_scatter(g, f, nv, n, &knn);
                gr.add_owned(z, g.iter().zip(&scattered).map(|(gi, s)| wv_s * gi + wn_s / k * s).collect());
                gr.add_owned(wv, vec![g.iter().zip(&t.data).map(|(a, b)| a * b).sum()]);
                gr.add_owned(wn, vec![g.iter().zip(&nbr).map(|(a, b)| a * b).sum::<f64>() / k]);
            })),
        )
    }

    /// 3×3×3 zero-padded convolution. `w` is [C_out, C_in·27], `b` is [C_out].
    pub fn conv3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (self.rc(x), self.rc(w), self.rc(b));
        let dims = tx.spatial();
        let cin = tx.shape[0];
        let cout = tb.len();
        assert_eq!(tw.len(), cout * cin * 27, "conv weight shape");
        let out = kernels::conv3_forward(&tx.data, &tw.data, &tb.data, cin, cout, dims);
        self.push(
            Tensor::new(vec![cout, dims[0], dims[1], dims[2]], out),
            Some(Box::new(move |g, gr| {
                let (gx, gw, gb) = kernels::conv3_backward(g, &tx.data, &tw.data, cin, cout, dims);
                gr.add_owned(x, gx);
                gr.add_owned(w, gw);
                gr.add_owned(b, gb);
            })),
        )
    }

    /// 2×2×2 mean pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let t = self.rc(x);
        let d = t.spatial();
        let c = t.shape[0];
        let out = kernels::avg_pool2(&t.data, c, d);
        self.push(
            Tensor::new(vec![c, d[0] / 2, d[1] / 2, d[2] / 2], out),
            Some(Box::new(move |g, gr| gr.add_owned(x, kernels::avg_pool2_backward(g, c, d)))),
        )
    }

    /// 2×2×2 transposed convolution with stride 2. `w` is [C_in, C_out·8].
    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (self.rc(x), self.rc(w), self.rc(b));
        let d = tx.spatial();
        let cin = tx.shape[0];
        let cout = tb.len();
        assert_eq!(tw.len(), cin * cout * 8, "transposed conv weight shape");
        let out = kernels::convt2_forward(&tx.data, &tw.data, &tb.data, cin, cout, d);
        self.push(
            Tensor::new(vec![cout, 2 * d[0], 2 * d[1], 2 * d[2]], out),
            Some(Box::new(move |g, gr| {
                let (gx, gw, gb) = kernels::convt2_backward(g, &tx.data, &tw.data, cin, cout, d);
                gr.add_owned(x, gx);
                gr.add_owned(w, gw);
                gr.add_owned(b, gb);
            })),
        )
    }

    /// Zero-pad a [C, Z, Y, X] tensor at the far end of each axis.
    pub fn pad(&mut self, x: Var, size: [usize; 3]) -> Var {
        let t = self.rc(x);
        let d = t.spatial();
        let c = t.shape[0];
        if d == size {
            return x;
        }
        assert!((0..3).all(|a| size[a] >= d[a]), "pad target smaller than input");
        let out = kernels::pad(&t.data, c, d, size);
        self.push(
            Tensor::new(vec![c, size[0], size[1], size[2]], out),
            Some(Box::new(move |g, gr| gr.add_owned(x, kernels::crop(g, c, size, d)))),
        )
    }

    /// Spatial crop of a [C, Z, Y, X] tensor to `size` starting at the origin.
    pub fn crop(&mut self, x: Var, size: [usize; 3]) -> Var {
        let t = self.rc(x);
        let d = t.spatial();
        let c = t.shape[0];
        if d == size {
            return x;
        }
        let out = kernels::crop(&t.data, c, d, size);
        self.push(
            Tensor::new(vec![c, size[0], size[1], size[2]], out),
            Some(Box::new(move |g, gr| gr.add_owned(x, kernels::pad(g, c, size, d)))),
        )
    }
}
