//! Training loop: augmented HR/LR pairs, composite loss, ADAM with linear
//! warm-up.

use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ulfdti::augment::{make_training_pair, AugmentConfig};
use ulfdti::optim::Adam;
use ulfdti::ShSample;

use crate::data::sample_to_tensor;
use crate::error::{NetError, Result};
use crate::loss::{CompositeLoss, LossTerms, LossWeights};
use crate::model::DiffSrModel;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub iterations_per_epoch: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    /// Fraction of the run after which the rate falls linearly to zero at
    /// the last iteration; `None` keeps it constant.
    pub decay_start: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub augment: AugmentConfig,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            iterations_per_epoch: 20,
            lr_start: 1e-5,
            lr_peak: 1e-4,
            warmup_epochs: 100,
            decay_start: None,
            beta1: 0.9,
            beta2: 0.95,
            augment: AugmentConfig::default(),
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Short schedule for phantom-scale runs: 16³ patches of 1.75 mm
    /// phantoms, a higher peak rate, a 5-epoch warm-up, linear decay over
    /// the second half, resampling around 3.5 mm and milder angular
    /// subsampling.
    pub fn desk(iterations: usize, seed: u64) -> Self {
        Self {
            iterations,
            lr_start: 1e-4,
            lr_peak: 5e-4,
            warmup_epochs: 5,
            decay_start: Some(0.5),
            augment: AugmentConfig {
                crop_size: [16, 16, 16],
                resample_range_mm: [2.5, 4.5],
                deform_patch_fraction: 0.75,
                taper_length_voxels: 3,
                subsample_rows: [12, 30],
                seed,
                ..AugmentConfig::default()
            },
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations_per_epoch == 0 {
            return Err(NetError::Config("iterations_per_epoch must be positive".into()));
        }
        if !(self.lr_start > 0.0 && self.lr_peak > 0.0) {
            return Err(NetError::Config("learning rates must be positive".into()));
        }
        if self.decay_start.is_some_and(|f| !(0.0..=1.0).contains(&f)) {
            return Err(NetError::Config("decay_start must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(NetError::Config("ADAM betas must lie in [0, 1)".into()));
        }
        self.augment.validate()?;
        self.loss.validate()
    }

    /// Linear from `lr_start` at epoch 0 to `lr_peak` at the end of the
    /// warm-up, constant afterwards. Epochs may be fractional.
    pub fn learning_rate(&self, epoch: f64) -> f64 {
        if self.warmup_epochs == 0 || epoch >= self.warmup_epochs as f64 {
            return self.lr_peak;
        }
        let t = epoch.max(0.0) / self.warmup_epochs as f64;
        self.lr_start + t * (self.lr_peak - self.lr_start)
    }

    /// Rate for a 0-based iteration: warm-up by epoch, then the optional
    /// linear decay.
    pub fn rate_at(&self, iteration: usize) -> f64 {
        let lr = self.learning_rate(iteration as f64 / self.iterations_per_epoch as f64);
        match self.decay_start {
            Some(f) if self.iterations > 0 => {
                let start = f * self.iterations as f64;
                let it = iteration as f64;
                if it <= start {
                    lr
                } else {
                    lr * ((self.iterations as f64 - it) / (self.iterations as f64 - start)).max(0.0)
                }
            }
            _ => lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub total: f64,
    pub lowb_l2: f64,
    pub l2order_l1: f64,
    pub angular: f64,
    pub consistency: f64,
}

impl LossRecord {
    fn new(iteration: usize, per_epoch: usize, t: &LossTerms) -> Self {
        Self {
            epoch: iteration / per_epoch,
            iteration,
            total: t.total,
            lowb_l2: t.lowb_l2,
            l2order_l1: t.l2order_l1,
            angular: t.angular,
            consistency: t.consistency,
        }
    }
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| NetError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| NetError::io(path, e))?;
    Ok(())
}

pub fn read_history_csv(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Mean of the first and last `window` totals.
pub fn smoothed_ends(history: &[LossRecord], window: usize) -> (f64, f64) {
    let w = window.clamp(1, history.len().max(1));
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.total).sum::<f64>() / s.len().max(1) as f64;
    (mean(&history[..w.min(history.len())]), mean(&history[history.len().saturating_sub(w)..]))
}

/// Train `model` in place. Each iteration draws a sample, builds an
/// augmented pair, and takes one ADAM step. A non-finite loss or gradient
/// aborts with the parameters of the last finite step left in `model`.
pub fn train<F>(model: &mut DiffSrModel, data: &[ShSample], config: &TrainConfig, mut progress: F) -> Result<Vec<LossRecord>>
where
    F: FnMut(&LossRecord),
{
    config.validate()?;
    if data.is_empty() {
        return Err(NetError::Config("training needs at least one sample".into()));
    }
    let loss = CompositeLoss::new(config.loss.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model.params.n_scalars(), config.beta1, config.beta2);
    let mut flat = model.params.flatten();
    let mut history = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let sample = &data[rng.random_range(0..data.len())];
        let pair = make_training_pair(sample, &config.augment, &mut rng)?;
        let x = sample_to_tensor(&pair.lr);
        let target = sample_to_tensor(&pair.target);

        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = model.forward(&mut tape, &p, xv);
        let (terms, grad) = loss.evaluate(tape.value(out), &target, &x, Some(&pair.degrade))?;
        let grads = tape.backward(out, grad);
        let g = model.params.flat_grads(&p, &grads);
        drop(tape);

        if !terms.total.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFiniteLoss { iteration: it });
        }
        let lr = config.rate_at(it);
        adam.step(&mut flat, &g, lr);
        model.params.set_flat(&flat);
        model.iterations += 1;
        let rec = LossRecord::new(it, config.iterations_per_epoch, &terms);
        debug!("iteration {it}: loss {:.5} (lr {lr:.2e})", terms.total);
        progress(&rec);
        history.push(rec);
    }
    if let Some(last) = history.last() {
        info!("trained {} iterations, final loss {:.5}", history.len(), last.total);
    }
    model.trained = true;
    Ok(history)
}
