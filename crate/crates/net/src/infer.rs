//! Super-resolution inference: upsample, normalize, run the network whole
//! or in overlapping tiles, and restore the input intensity scale.

use serde::{Deserialize, Serialize};
use ulfdti::resample::resample_to;
use ulfdti::sample::{LOWB_CHANNEL, SAMPLE_CHANNELS};
use ulfdti::stats::mean;
use ulfdti::{DwiDataset, ShSample, VolumeGrid};

use crate::data::{normalize, sample_to_tensor, scale_sample, tensor_to_sample};
use crate::error::{NetError, Result};
use crate::model::DiffSrModel;
use crate::tape::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tiling {
    Whole,
    /// Cubic tiles of `size` voxels overlapping by `overlap`, blended with
    /// linear ramps across the overlap.
    Tiles { size: usize, overlap: usize },
}

impl Default for Tiling {
    fn default() -> Self {
        Tiling::Tiles { size: 32, overlap: 8 }
    }
}

/// Tile starts along one axis of length `n`.
pub fn tile_starts(n: usize, size: usize, overlap: usize) -> Vec<usize> {
    if n <= size {
        return vec![0];
    }
    let step = size - overlap;
    let mut starts: Vec<usize> = (0..).map(|k| k * step).take_while(|&s| s + size < n).collect();
    starts.push(n - size);
    starts.dedup();
    starts
}

/// Blend weight of position `i` in a tile of length `len` along an axis;
/// sides that touch the volume boundary are not ramped.
fn ramp(i: usize, len: usize, overlap: usize, at_lo: bool, at_hi: bool) -> f64 {
    if overlap == 0 {
        return 1.0;
    }
    let o = overlap as f64;
    let mut w: f64 = 1.0;
    if !at_lo {
        w = w.min((i as f64 + 0.5) / o);
    }
    if !at_hi {
        w = w.min((len as f64 - i as f64 - 0.5) / o);
    }
    w
}

fn extract(x: &Tensor, lo: [usize; 3], size: [usize; 3]) -> Tensor {
    let c = x.shape[0];
    let d = x.spatial();
    let mut out = Vec::with_capacity(c * size.iter().product::<usize>());
    for ch in 0..c {
        for z in 0..size[0] {
            for y in 0..size[1] {
                let base = ((ch * d[0] + lo[0] + z) * d[1] + lo[1] + y) * d[2] + lo[2];
                out.extend_from_slice(&x.data[base..base + size[2]]);
            }
        }
    }
    Tensor::new(vec![c, size[0], size[1], size[2]], out)
}

/// Runs the network on overlapping tiles and blends the results.
pub fn predict_tiled(model: &DiffSrModel, x: &Tensor, size: usize, overlap: usize) -> Result<Tensor> {
    if size == 0 || overlap >= size {
        return Err(NetError::Config("tile overlap must be smaller than the tile size".into()));
    }
    let d = x.spatial();
    let c = x.shape[0];
    let starts: Vec<Vec<usize>> = d.iter().map(|&n| tile_starts(n, size, overlap)).collect();
    let mut acc = vec![0.0; x.len()];
    let mut wsum = vec![0.0; d.iter().product()];
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let lo = [z0, y0, x0];
                let len: [usize; 3] = std::array::from_fn(|a| size.min(d[a]));
                let y = model.predict(&extract(x, lo, len))?;
                let w: [Vec<f64>; 3] = std::array::from_fn(|a| {
                    (0..len[a]).map(|i| ramp(i, len[a], overlap, lo[a] == 0, lo[a] + len[a] == d[a])).collect()
                });
                for zz in 0..len[0] {
                    for yy in 0..len[1] {
                        for xx in 0..len[2] {
                            let wt = w[0][zz] * w[1][yy] * w[2][xx];
                            let v = ((z0 + zz) * d[1] + y0 + yy) * d[2] + x0 + xx;
                            wsum[v] += wt;
                            let tv = (zz * len[1] + yy) * len[2] + xx;
                            let tn = len.iter().product::<usize>();
                            for ch in 0..c {
                                acc[ch * wsum.len() + v] += wt * y.data[ch * tn + tv];
                            }
                        }
                    }
                }
            }
        }
    }
    let n = wsum.len();
    for ch in 0..c {
        for v in 0..n {
            acc[ch * n + v] /= wsum[v];
        }
    }
    Ok(Tensor::new(x.shape.clone(), acc))
}

/// Upsample `input` to `target`, run the network, and rescale so the
/// global low-b mean and the global ℓ=0 mean equal those of `input`
/// (ℓ=2 channels share the ℓ=0 factor).
pub fn superresolve(model: &DiffSrModel, input: &ShSample, target: &VolumeGrid, tiling: Tiling) -> Result<ShSample> {
    if !model.trained {
        return Err(NetError::State("superresolution needs trained parameters".into()));
    }
    let up = ShSample::new(resample_to(&input.volume, target))?;
    let (norm, scales) = normalize(&up)?;
    let x = sample_to_tensor(&norm);
    let y = match tiling {
        Tiling::Whole => model.predict(&x)?,
        Tiling::Tiles { size, overlap } => predict_tiled(model, &x, size, overlap)?,
    };
    let out = scale_sample(&tensor_to_sample(&y, target)?, scales.lowb, scales.sh);
    let n = out.n_voxels();
    let ratio = |ch: usize| {
        let a = mean(input.volume.channel(ch));
        let b = mean(&out.volume.data[ch * n..(ch + 1) * n]);
        if b != 0.0 {
            a / b
        } else {
            1.0
        }
    };
    let (rl, rs) = (ratio(LOWB_CHANNEL), ratio(1));
    let out = scale_sample(&out, rl, rs);
    debug_assert_eq!(out.volume.channels, SAMPLE_CHANNELS);
    Ok(out)
}

/// Fits SH to raw DWI first.
pub fn superresolve_dwi(model: &DiffSrModel, input: &DwiDataset, target: &VolumeGrid, tiling: Tiling) -> Result<ShSample> {
    superresolve(model, &ShSample::from_dwi(input)?, target, tiling)
}
