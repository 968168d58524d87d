//! Small 3D U-Net with mean-pool downsampling, stride-2 transposed-conv
//! upsampling, skip connections and global-token attention at the
//! bottleneck.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiniUNetConfig {
    /// Number of pooling steps.
    pub levels: usize,
    pub base_features: usize,
    pub global_tokens: usize,
    pub in_channels: usize,
}

impl Default for MiniUNetConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            base_features: 16,
            global_tokens: 8,
            in_channels: 7,
        }
    }
}

impl MiniUNetConfig {
    pub fn paper_scale() -> Self {
        Self {
            levels: 4,
            base_features: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_features == 0 || self.in_channels == 0 {
            return Err(NetError::Config("feature and channel counts must be positive".into()));
        }
        if self.levels > 6 {
            return Err(NetError::Config(format!("{} levels is more than supported", self.levels)));
        }
        Ok(())
    }

    pub fn features(&self, level: usize) -> usize {
        self.base_features << level
    }

    /// Spatial dims padded up to a multiple of 2^levels.
    pub fn padded_dims(&self, d: [usize; 3]) -> [usize; 3] {
        let m = 1 << self.levels;
        d.map(|n| n.div_ceil(m) * m)
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, init: Init, rng: &mut R) -> Self {
        Self {
            w: store.add(format!("{name}.w"), vec![cout, cin * 27], init, rng),
            b: store.add(format!("{name}.b"), vec![cout], Init::Zeros, rng),
        }
    }

    fn he<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self::new(store, name, cin, cout, Init::Normal((2.0 / (27 * cin) as f64).sqrt()), rng)
    }

    fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Var {
        tape.conv3(x, p[self.w], p[self.b])
    }
}

/// Learned tokens read the bottleneck (tokens as queries, voxels as keys
/// and values); each voxel then attends over the token summaries and the
/// result is projected and added back. Single head, token dimension equal
/// to the bottleneck width. The output projection starts at zero.
#[derive(Debug, Clone)]
pub struct TokenAttention {
    pub tokens: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wq2: ParamId,
    pub wo: ParamId,
    pub channels: usize,
}

impl TokenAttention {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, c: usize, n_tokens: usize, rng: &mut R) -> Self {
        let std = (1.0 / c as f64).sqrt();
        Self {
            tokens: store.add("attn.tokens", vec![c, n_tokens], Init::Normal(1.0), rng),
            wq: store.add("attn.wq", vec![c, c], Init::Normal(std), rng),
            wk: store.add("attn.wk", vec![c, c], Init::Normal(std), rng),
            wv: store.add("attn.wv", vec![c, c], Init::Normal(std), rng),
            wq2: store.add("attn.wq2", vec![c, c], Init::Normal(std), rng),
            wo: store.add("attn.wo", vec![c, c], Init::Zeros, rng),
            channels: c,
        }
    }

    fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Var {
        let shape = tape.value(x).shape.clone();
        let c = self.channels;
        let v = tape.value(x).len() / c;
        let scale = 1.0 / (c as f64).sqrt();
        let xv = tape.reshape(x, vec![c, v]);

        let q = tape.matmul(p[self.wq], p[self.tokens]);
        let k = tape.matmul(p[self.wk], xv);
        let val = tape.matmul(p[self.wv], xv);
        let qt = tape.transpose(q);
        let logits = tape.matmul(qt, k);
        let logits = tape.scale(logits, scale);
        let a = tape.softmax_rows(logits);
        let vt = tape.transpose(val);
        let summary = tape.matmul(a, vt); // [T, C]

        let q2 = tape.matmul(p[self.wq2], xv);
        let q2t = tape.transpose(q2);
        let st = tape.transpose(summary);
        let logits2 = tape.matmul(q2t, st); // [V, T]
        let logits2 = tape.scale(logits2, scale);
        let b = tape.softmax_rows(logits2);
        let o = tape.matmul(b, summary); // [V, C]
        let ot = tape.transpose(o);
        let out = tape.matmul(p[self.wo], ot);
        let y = tape.add(xv, out);
        tape.reshape(y, shape)
    }
}

#[derive(Debug, Clone)]
pub struct MiniUNet {
    pub config: MiniUNetConfig,
    encoder: Vec<[Conv; 2]>,
    bottleneck: [Conv; 2],
    attention: Option<TokenAttention>,
    up: Vec<Conv>,
    decoder: Vec<[Conv; 2]>,
    head: Conv,
}

impl MiniUNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &MiniUNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let f = |l| config.features(l);
        let mut encoder = Vec::new();
        let mut cin = config.in_channels;
        for l in 0..config.levels {
            encoder.push([
                Conv::he(store, &format!("enc{l}.a"), cin, f(l), rng),
                Conv::he(store, &format!("enc{l}.b"), f(l), f(l), rng),
            ]);
            cin = f(l);
        }
        let fl = f(config.levels);
        let bottleneck = [
            Conv::he(store, "mid.a", cin, fl, rng),
            Conv::he(store, "mid.b", fl, fl, rng),
        ];
        let attention = (config.global_tokens > 0).then(|| TokenAttention::new(store, fl, config.global_tokens, rng));
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for l in (0..config.levels).rev() {
            let (fin, fout) = (f(l + 1), f(l));
            up.push(Conv {
                w: store.add(format!("up{l}.w"), vec![fin, fout * 8], Init::Normal((2.0 / fin as f64).sqrt()), rng),
                b: store.add(format!("up{l}.b"), vec![fout], Init::Zeros, rng),
            });
            decoder.push([
                Conv::he(store, &format!("dec{l}.a"), 2 * fout, fout, rng),
                Conv::he(store, &format!("dec{l}.b"), fout, fout, rng),
            ]);
        }
        let head = Conv::new(store, "head", f(0), config.in_channels, Init::Zeros, rng);
        Ok(Self {
            config: config.clone(),
            encoder,
            bottleneck,
            attention,
            up,
            decoder,
            head,
        })
    }

    /// `x` is `[C_in, Z, Y, X]`; any spatial size is accepted. Dims that are
    /// not multiples of 2^levels are zero-padded at the far end and the
    /// output is cropped back.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Var {
        let dims = tape.value(x).spatial();
        assert_eq!(tape.value(x).shape[0], self.config.in_channels, "U-Net input channels");
        let mut h = tape.pad(x, self.config.padded_dims(dims));
        let mut skips = Vec::new();
        for [a, b] in &self.encoder {
            let y = a.forward(tape, p, h);
            let y = tape.gelu(y);
            let y = b.forward(tape, p, y);
            let y = tape.gelu(y);
            skips.push(y);
            h = tape.avg_pool2(y);
        }
        let [a, b] = &self.bottleneck;
        h = a.forward(tape, p, h);
        h = tape.gelu(h);
        h = b.forward(tape, p, h);
        h = tape.gelu(h);
        if let Some(att) = &self.attention {
            h = att.forward(tape, p, h);
        }
        for (up, [a, b]) in self.up.iter().zip(&self.decoder) {
            let u = tape.conv_transpose2(h, p[up.w], p[up.b]);
            let u = tape.gelu(u);
            let skip = skips.pop().expect("one skip per level");
            let cat = tape.concat_rows(&[u, skip]);
            h = a.forward(tape, p, cat);
            h = tape.gelu(h);
            h = b.forward(tape, p, h);
            h = tape.gelu(h);
        }
        let out = self.head.forward(tape, p, h);
        tape.crop(out, dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(net: &MiniUNet, store: &ParamStore, dims: [usize; 3], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = net.config.in_channels * dims.iter().product::<usize>();
        let x = Tensor::new(
            vec![net.config.in_channels, dims[0], dims[1], dims[2]],
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let mut tape = Tape::inference();
        let p = store.bind(&mut tape);
        let x = tape.leaf(x);
        let y = net.forward(&mut tape, &p, x);
        tape.value(y).clone()
    }

    fn randomize_head(net: &MiniUNet, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for id in [net.head.w, net.head.b] {
            store.get_mut(id).data.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = MiniUNetConfig {
            base_features: 4,
            ..MiniUNetConfig::default()
        };
        let net = MiniUNet::new(&mut store, &cfg, &mut rng).unwrap();
        for dims in [[8, 8, 8], [12, 8, 4], [5, 7, 9]] {
            assert_eq!(run(&net, &store, dims, 1).shape, vec![7, dims[0], dims[1], dims[2]]);
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = MiniUNetConfig {
            base_features: 4,
            ..MiniUNetConfig::default()
        };
        let net = MiniUNet::new(&mut store, &cfg, &mut rng).unwrap();
        for t in &mut store.values {
            t.data.fill(0.0);
        }
        assert!(run(&net, &store, [8, 8, 8], 2).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fresh_head_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let net = MiniUNet::new(&mut store, &MiniUNetConfig::default(), &mut rng).unwrap();
        assert!(run(&net, &store, [8, 8, 8], 3).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padding_matches_explicit_zero_padding_inside_region() {
        // A padded odd-sized input must equal the crop of running the padded
        // volume directly.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = MiniUNetConfig {
            base_features: 2,
            levels: 1,
            global_tokens: 2,
            ..MiniUNetConfig::default()
        };
        let net = MiniUNet::new(&mut store, &cfg, &mut rng).unwrap();
        randomize_head(&net, &mut store, &mut rng);
        let small = run(&net, &store, [3, 5, 4], 9);
        let mut tape = Tape::inference();
        let p = store.bind(&mut tape);
        let x = tape.leaf(small_input(&net, [3, 5, 4], 9));
        let xp = tape.pad(x, [4, 6, 4]);
        let y = net.forward(&mut tape, &p, xp);
        let y = tape.crop(y, [3, 5, 4]);
        assert_eq!(tape.value(y).data, small.data);
    }

    fn small_input(net: &MiniUNet, dims: [usize; 3], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = net.config.in_channels * dims.iter().product::<usize>();
        Tensor::new(
            vec![net.config.in_channels, dims[0], dims[1], dims[2]],
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }
}
