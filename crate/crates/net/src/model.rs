//! Full network: ico-block on the SH channels, residual U-Net on all seven
//! channels, second ico-block on the SH channels. The low-b channel skips
//! both ico-blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ulfdti::sample::SAMPLE_CHANNELS;

use crate::error::{NetError, Result};
use crate::graph::IcoBlock;
use crate::params::ParamStore;
use crate::tape::{Tape, Tensor, Var};
use crate::unet::{MiniUNet, MiniUNetConfig};

/// Voxels per chunk when running ico-blocks without gradients.
pub const ICO_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub unet: MiniUNetConfig,
    /// Hidden features of the graph convolutions.
    pub ico_hidden: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            unet: MiniUNetConfig::default(),
            ico_hidden: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiffSrModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub ico_in: IcoBlock,
    pub unet: MiniUNet,
    pub ico_out: IcoBlock,
    pub trained: bool,
    pub iterations: usize,
}

impl DiffSrModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.unet.in_channels != SAMPLE_CHANNELS {
            return Err(NetError::Config(format!(
                "the network maps {SAMPLE_CHANNELS}-channel samples, got {} input channels",
                config.unet.in_channels
            )));
        }
        if config.ico_hidden == 0 {
            return Err(NetError::Config("ico_hidden must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let ico_in = IcoBlock::new(&mut params, "ico_in", config.ico_hidden, &mut rng);
        let unet = MiniUNet::new(&mut params, &config.unet, &mut rng)?;
        let ico_out = IcoBlock::new(&mut params, "ico_out", config.ico_hidden, &mut rng);
        Ok(Self {
            config,
            params,
            ico_in,
            unet,
            ico_out,
            trained: false,
            iterations: 0,
        })
    }

    fn sh_block(tape: &mut Tape, p: &[Var], block: &IcoBlock, x: Var) -> Var {
        let shape = tape.value(x).shape.clone();
        let n = tape.value(x).len() / SAMPLE_CHANNELS;
        let flat = tape.reshape(x, vec![SAMPLE_CHANNELS, n]);
        let lowb = tape.slice_rows(flat, 0, 1);
        let sh = tape.slice_rows(flat, 1, SAMPLE_CHANNELS);
        let sh = block.forward(tape, p, sh);
        let y = tape.concat_rows(&[lowb, sh]);
        tape.reshape(y, shape)
    }

    /// Differentiable forward pass; `x` is `[7, Z, Y, X]`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Var {
        let y = Self::sh_block(tape, p, &self.ico_in, x);
        let u = self.unet.forward(tape, p, y);
        let y = tape.add(y, u);
        Self::sh_block(tape, p, &self.ico_out, y)
    }

    fn apply_sh_block(&self, block: &IcoBlock, data: &mut [f64]) {
        let n = data.len() / SAMPLE_CHANNELS;
        let out = block.apply(&self.params, &data[n..], ICO_CHUNK);
        data[n..].copy_from_slice(&out);
    }

    /// Forward pass without gradients, running the ico-blocks in voxel
    /// chunks. Agrees with [`forward`](Self::forward) to rounding.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 4 || x.shape[0] != SAMPLE_CHANNELS {
            return Err(NetError::Shape(format!("expected [7, Z, Y, X], got {:?}", x.shape)));
        }
        let mut y = x.clone();
        self.apply_sh_block(&self.ico_in, &mut y.data);
        let u = {
            let mut tape = Tape::inference();
            let p = self.params.bind(&mut tape);
            let xin = tape.leaf(y.clone());
            let u = self.unet.forward(&mut tape, &p, xin);
            tape.value(u).data.clone()
        };
        y.data.iter_mut().zip(&u).for_each(|(a, b)| *a += b);
        self.apply_sh_block(&self.ico_out, &mut y.data);
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            unet: MiniUNetConfig {
                base_features: 4,
                ..MiniUNetConfig::default()
            },
            ico_hidden: 4,
            seed: 3,
        }
    }

    #[test]
    fn fresh_model_is_identity() {
        let m = DiffSrModel::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(vec![7, 4, 4, 4], (0..7 * 64).map(|_| rng.random_range(-1.0..1.0)).collect());
        let y = m.predict(&x).unwrap();
        for (a, b) in x.data.iter().zip(&y.data) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn predict_matches_taped_forward() {
        let mut m = DiffSrModel::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in &mut m.params.values {
            if t.data.iter().all(|&v| v == 0.0) {
                t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
            }
        }
        let x = Tensor::new(vec![7, 4, 6, 5], (0..7 * 120).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = m.forward(&mut tape, &p, xv);
        let a = tape.value(y).clone();
        let b = m.predict(&x).unwrap();
        assert_eq!(a.shape, b.shape);
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((u - v).abs() < 1e-10);
        }
        // low-b only sees the U-Net
        assert!(a.data.iter().zip(&x.data).take(120).any(|(u, v)| (u - v).abs() > 1e-6));
    }

    #[test]
    fn initialization_is_seeded() {
        let a = DiffSrModel::new(small()).unwrap();
        let b = DiffSrModel::new(small()).unwrap();
        assert_eq!(a.params, b.params);
        let c = DiffSrModel::new(ModelConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.params, c.params);
    }
}
