//! Evaluation metrics and the statistics used to compare reconstructions.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::derived;
use crate::volume::Volume;

pub const DEFAULT_LNCC_WINDOW: usize = 10;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Argument(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (n − 1).
pub fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)).sqrt()
}

/// Pearson correlation; 0 when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

pub fn mae(a: &[f64], b: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    check_len(a.len(), b.len())?;
    let (mut s, mut n) = (0.0, 0usize);
    for i in 0..a.len() {
        if mask.is_none_or(|m| m[i]) {
            s += (a[i] - b[i]).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Argument("empty mask".into()));
    }
    Ok(s / n as f64)
}

/// 3-D inclusive prefix sums with a zero border, (nx+1)(ny+1)(nz+1).
struct Integral {
    d: [usize; 3],
    s: Vec<f64>,
}

impl Integral {
    fn new(dims: [usize; 3], f: impl Fn(usize) -> f64) -> Self {
        let d = [dims[0] + 1, dims[1] + 1, dims[2] + 1];
        let mut s = vec![0.0; d[0] * d[1] * d[2]];
        let at = |x: usize, y: usize, z: usize| x + d[0] * (y + d[1] * z);
        for z in 1..d[2] {
            for y in 1..d[1] {
                for x in 1..d[0] {
                    let v = f((x - 1) + dims[0] * ((y - 1) + dims[1] * (z - 1)));
                    s[at(x, y, z)] = v + s[at(x - 1, y, z)] + s[at(x, y - 1, z)] + s[at(x, y, z - 1)]
                        - s[at(x - 1, y - 1, z)]
                        - s[at(x - 1, y, z - 1)]
                        - s[at(x, y - 1, z - 1)]
                        + s[at(x - 1, y - 1, z - 1)];
                }
            }
        }
        Self { d, s }
    }

    /// Sum over the half-open box [lo, hi).
    fn sum(&self, lo: [usize; 3], hi: [usize; 3]) -> f64 {
        let at = |x: usize, y: usize, z: usize| self.s[x + self.d[0] * (y + self.d[1] * z)];
        at(hi[0], hi[1], hi[2]) - at(lo[0], hi[1], hi[2]) - at(hi[0], lo[1], hi[2]) - at(hi[0], hi[1], lo[2])
            + at(lo[0], lo[1], hi[2])
            + at(lo[0], hi[1], lo[2])
            + at(hi[0], lo[1], lo[2])
            - at(lo[0], lo[1], lo[2])
    }
}

/// Window covering [c − w/2, c + w − w/2) clipped to the grid.
pub fn lncc_window(c: usize, n: usize, window: usize) -> (usize, usize) {
    let lo = c.saturating_sub(window / 2);
    let hi = (c + window - window / 2).min(n);
    (lo, hi)
}

/// Local normalized cross-correlation averaged over all voxels of the
/// first channel. Zero-variance windows contribute 0.
pub fn lncc(a: &Volume, b: &Volume, window: usize) -> Result<f64> {
    if a.grid.dims != b.grid.dims {
        return Err(Error::Argument("lncc grids differ".into()));
    }
    if window < 2 {
        return Err(Error::Argument("lncc window must be at least 2".into()));
    }
    let dims = a.grid.dims;
    let (fa, fb) = (a.channel(0), b.channel(0));
    // center to keep the moment sums well conditioned
    let (ma, mb) = (mean(fa), mean(fb));
    let ia = Integral::new(dims, |i| fa[i] - ma);
    let ib = Integral::new(dims, |i| fb[i] - mb);
    let iaa = Integral::new(dims, |i| (fa[i] - ma).powi(2));
    let ibb = Integral::new(dims, |i| (fb[i] - mb).powi(2));
    let iab = Integral::new(dims, |i| (fa[i] - ma) * (fb[i] - mb));
    let n = a.grid.n_voxels();
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|v| {
            let c = a.grid.coords(v);
            let mut lo = [0; 3];
            let mut hi = [0; 3];
            for k in 0..3 {
                (lo[k], hi[k]) = lncc_window(c[k], dims[k], window);
            }
            let cnt = ((hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2])) as f64;
            let (sa, sb) = (ia.sum(lo, hi), ib.sum(lo, hi));
            let vaa = iaa.sum(lo, hi) - sa * sa / cnt;
            let vbb = ibb.sum(lo, hi) - sb * sb / cnt;
            let vab = iab.sum(lo, hi) - sa * sb / cnt;
            let tiny = 1e-12 * cnt;
            if vaa <= tiny * (iaa.sum(lo, hi) / cnt).max(f64::MIN_POSITIVE)
                || vbb <= tiny * (ibb.sum(lo, hi) / cnt).max(f64::MIN_POSITIVE)
                || vaa <= 0.0
                || vbb <= 0.0
            {
                0.0
            } else {
                (vab / (vaa * vbb).sqrt()).clamp(-1.0, 1.0)
            }
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(total / n as f64)
}

/// Mean axial angle in degrees between direction fields over the mask.
pub fn angular_error_v1(va: &[[f64; 3]], vb: &[[f64; 3]], mask: Option<&[bool]>) -> Result<f64> {
    check_len(va.len(), vb.len())?;
    let (mut s, mut n) = (0.0, 0usize);
    for i in 0..va.len() {
        if mask.is_none_or(|m| m[i]) {
            let d: f64 = (0..3).map(|k| va[i][k] * vb[i][k]).sum();
            s += d.abs().min(1.0).acos().to_degrees();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Argument("empty mask".into()));
    }
    Ok(s / n as f64)
}

/// ICC(2,1): two-way random effects, absolute agreement, single rater.
/// `m` is subjects × raters, row-major.
pub fn icc_2way_absolute(m: &[Vec<f64>]) -> Result<f64> {
    let n = m.len();
    if n < 2 {
        return Err(Error::Argument("ICC needs at least 2 subjects".into()));
    }
    let k = m[0].len();
    if k < 2 || m.iter().any(|r| r.len() != k) {
        return Err(Error::Argument("ICC needs a full matrix with at least 2 raters".into()));
    }
    let (nf, kf) = (n as f64, k as f64);
    let grand = m.iter().flatten().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = m.iter().map(|r| r.iter().sum::<f64>() / kf).collect();
    let col_means: Vec<f64> = (0..k).map(|j| m.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
    let ss_total: f64 = m.iter().flatten().map(|v| (v - grand).powi(2)).sum();
    if ss_total <= 0.0 {
        return Err(Error::Undefined("ICC of a constant matrix".into()));
    }
    let ss_r = kf * row_means.iter().map(|v| (v - grand).powi(2)).sum::<f64>();
    let ss_c = nf * col_means.iter().map(|v| (v - grand).powi(2)).sum::<f64>();
    let ss_e = ss_total - ss_r - ss_c;
    let ms_r = ss_r / (nf - 1.0);
    let ms_c = ss_c / (kf - 1.0);
    let ms_e = ss_e / ((nf - 1.0) * (kf - 1.0));
    let den = ms_r + (kf - 1.0) * ms_e + kf / nf * (ms_c - ms_e);
    if den == 0.0 {
        return Err(Error::Undefined("ICC denominator is zero".into()));
    }
    Ok((ms_r - ms_e) / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub bias: f64,
    pub lower: f64,
    pub upper: f64,
    /// (mean, difference) per pair.
    pub points: Vec<(f64, f64)>,
    /// LS slope of difference on mean (proportional bias).
    pub slope: f64,
}

pub fn bland_altman(a: &[f64], b: &[f64]) -> Result<BlandAltman> {
    check_len(a.len(), b.len())?;
    if a.len() < 3 {
        return Err(Error::Argument("Bland-Altman needs at least 3 pairs".into()));
    }
    let points: Vec<(f64, f64)> = a.iter().zip(b).map(|(x, y)| ((x + y) / 2.0, x - y)).collect();
    let d: Vec<f64> = points.iter().map(|p| p.1).collect();
    let bias = mean(&d);
    let sd = std_dev(&d);
    let mx = points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - bias)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    Ok(BlandAltman {
        bias,
        lower: bias - 1.96 * sd,
        upper: bias + 1.96 * sd,
        points,
        slope,
    })
}

/// Midranks (1-based) of the values.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankSumMethod {
    Auto,
    Exact,
    Normal,
}

pub fn wilcoxon_ranksum(x: &[f64], y: &[f64]) -> Result<f64> {
    wilcoxon_ranksum_with(x, y, RankSumMethod::Auto)
}

/// Two-tailed Wilcoxon rank-sum p-value.
pub fn wilcoxon_ranksum_with(x: &[f64], y: &[f64], method: RankSumMethod) -> Result<f64> {
    let (n, m) = (x.len(), y.len());
    if n == 0 || m == 0 {
        return Err(Error::Argument("rank-sum test needs two non-empty samples".into()));
    }
    let all: Vec<f64> = x.iter().chain(y).copied().collect();
    let r = ranks(&all);
    let w: f64 = r[..n].iter().sum();
    let total = n + m;
    let expected = n as f64 * (total as f64 + 1.0) / 2.0;
    let exact = match method {
        RankSumMethod::Exact => true,
        RankSumMethod::Normal => false,
        RankSumMethod::Auto => n.min(m) <= 10 && total <= 20,
    };
    if exact {
        if total > 30 {
            return Err(Error::Argument("exact rank-sum limited to 30 observations".into()));
        }
        let dev = (w - expected).abs();
        let (mut hits, mut count) = (0u64, 0u64);
        enumerate_subsets(&r, n, &mut |s| {
            count += 1;
            if (s - expected).abs() >= dev - 1e-9 {
                hits += 1;
            }
        });
        return Ok(hits as f64 / count as f64);
    }
    let (nf, mf, tf) = (n as f64, m as f64, total as f64);
    let u = w - nf * (nf + 1.0) / 2.0;
    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie += t * t * t - t;
        i = j + 1;
    }
    let var = nf * mf / 12.0 * ((tf + 1.0) - tie / (tf * (tf - 1.0)));
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = ((u - nf * mf / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok((2.0 * (1.0 - normal.cdf(z))).min(1.0))
}

/// Calls `f` with the rank sum of every k-subset of `ranks`.
fn enumerate_subsets(ranks: &[f64], k: usize, f: &mut dyn FnMut(f64)) {
    fn rec(r: &[f64], start: usize, left: usize, acc: f64, f: &mut dyn FnMut(f64)) {
        if left == 0 {
            f(acc);
            return;
        }
        for i in start..=(r.len() - left) {
            rec(r, i + 1, left - 1, acc + r[i], f);
        }
    }
    rec(ranks, 0, k, 0.0, f);
}

/// Benjamini–Hochberg adjusted p-values in the input order.
pub fn bh_fdr(p: &[f64]) -> Result<Vec<f64>> {
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Argument("p-values must lie in [0, 1]".into()));
    }
    let m = p.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = idx[rank];
        running = running.min(p[i] * m as f64 / (rank + 1) as f64);
        out[i] = running.min(1.0);
    }
    Ok(out)
}

/// AUC from the Mann–Whitney rank statistic (ties count one half).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len(scores.len(), labels.len())?;
    let n1 = labels.iter().filter(|&&l| l).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::Argument("AUC needs both classes".into()));
    }
    let r = ranks(scores);
    let r1: f64 = r.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    Ok((r1 - (n1 * (n1 + 1)) as f64 / 2.0) / (n1 * n0) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaResult {
    pub auc: f64,
    /// Held-out score per subject.
    pub scores: Vec<f64>,
    /// Folds where the within-class scatter needed a ridge.
    pub ridged_folds: usize,
}

pub const LDA_RIDGE: f64 = 1e-6;

/// Leave-one-out Fisher LDA. The held-out score is wᵀ(x − m) with m the
/// midpoint of the training class means.
pub fn fisher_lda_auc(points: &[Vec<f64>], labels: &[bool]) -> Result<LdaResult> {
    check_len(points.len(), labels.len())?;
    let n = points.len();
    if n < 3 {
        return Err(Error::Argument("LDA needs at least 3 subjects".into()));
    }
    let p = points[0].len();
    if p == 0 || points.iter().any(|x| x.len() != p) {
        return Err(Error::Argument("LDA feature vectors must share a nonzero length".into()));
    }
    let mut scores = Vec::with_capacity(n);
    let mut ridged = 0;
    for held in 0..n {
        let mut mu = [DVector::<f64>::zeros(p), DVector::<f64>::zeros(p)];
        let mut cnt = [0usize; 2];
        for i in (0..n).filter(|&i| i != held) {
            let c = labels[i] as usize;
            mu[c] += DVector::from_column_slice(&points[i]);
            cnt[c] += 1;
        }
        if cnt[0] == 0 || cnt[1] == 0 {
            return Err(Error::Argument(format!("fold {held} lacks one class")));
        }
        mu[0] /= cnt[0] as f64;
        mu[1] /= cnt[1] as f64;
        let mut sw = DMatrix::<f64>::zeros(p, p);
        for i in (0..n).filter(|&i| i != held) {
            let d = DVector::from_column_slice(&points[i]) - &mu[labels[i] as usize];
            sw += &d * d.transpose();
        }
        let diff = &mu[1] - &mu[0];
        let scale = sw.diagonal().iter().cloned().fold(0.0f64, f64::max);
        let w = match solve_spd(&sw, &diff, scale) {
            Some(w) => w,
            None => {
                warn!("singular within-class scatter in fold {held}; adding ridge {LDA_RIDGE}");
                ridged += 1;
                let reg = &sw + DMatrix::identity(p, p) * LDA_RIDGE * scale.max(1.0);
                solve_spd(&reg, &diff, scale).ok_or_else(|| {
                    Error::Numerical(format!("within-class scatter singular in fold {held}"))
                })?
            }
        };
        let mid = (&mu[0] + &mu[1]) / 2.0;
        let x = DVector::from_column_slice(&points[held]);
        scores.push(w.dot(&(x - mid)));
    }
    Ok(LdaResult {
        auc: auc(&scores, labels)?,
        scores,
        ridged_folds: ridged,
    })
}

fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>, scale: f64) -> Option<DVector<f64>> {
    let ch = a.clone().cholesky()?;
    let l = ch.l();
    let dmin = l.diagonal().iter().cloned().fold(f64::INFINITY, f64::min);
    if dmin * dmin <= 1e-12 * scale {
        return None;
    }
    Some(ch.solve(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub p_value: f64,
    pub observed_diff: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Replicates redrawn because they contained a single class.
    pub rejected: usize,
    pub method: String,
}

/// Paired subject bootstrap of AUC(a) − AUC(b), percentile method.
pub fn paired_bootstrap_auc_diff(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[bool],
    iterations: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    check_len(scores_a.len(), labels.len())?;
    check_len(scores_b.len(), labels.len())?;
    if iterations == 0 {
        return Err(Error::Argument("bootstrap needs at least one replicate".into()));
    }
    let observed = auc(scores_a, labels)? - auc(scores_b, labels)?;
    let n = labels.len();
    let reps: Vec<(f64, usize)> = (0..iterations)
        .into_par_iter()
        .map(|r| {
            let mut rng = derived(seed, r as u64);
            let mut rejected = 0;
            loop {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
                if l.iter().all(|&v| v) || l.iter().all(|&v| !v) {
                    rejected += 1;
                    continue;
                }
                let a: Vec<f64> = idx.iter().map(|&i| scores_a[i]).collect();
                let b: Vec<f64> = idx.iter().map(|&i| scores_b[i]).collect();
                let d = auc(&a, &l).expect("both classes") - auc(&b, &l).expect("both classes");
                return (d, rejected);
            }
        })
        .collect();
    let mut diffs: Vec<f64> = reps.iter().map(|r| r.0).collect();
    let rejected = reps.iter().map(|r| r.1).sum();
    let le = diffs.iter().filter(|&&d| d <= 0.0).count() as f64 / iterations as f64;
    let ge = diffs.iter().filter(|&&d| d >= 0.0).count() as f64 / iterations as f64;
    diffs.sort_by(f64::total_cmp);
    let q = |f: f64| diffs[((f * (iterations - 1) as f64).round() as usize).min(iterations - 1)];
    Ok(BootstrapResult {
        p_value: (2.0 * le.min(ge)).min(1.0),
        observed_diff: observed,
        ci_low: q(0.025),
        ci_high: q(0.975),
        rejected,
        method: "percentile".into(),
    })
}

/// z-score pooled over every entry of the matrix.
pub fn zscore_by_tract(values: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let flat: Vec<f64> = values.iter().flatten().copied().collect();
    if flat.len() < 2 {
        return Err(Error::Argument("z-scoring needs at least 2 entries".into()));
    }
    let m = mean(&flat);
    let sd = std_dev(&flat);
    if !(sd > 0.0) || sd < 1e-300 {
        return Err(Error::Undefined("zero variance".into()));
    }
    Ok(values
        .iter()
        .map(|r| r.iter().map(|v| (v - m) / sd).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatRow {
    pub metric: String,
    pub value: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub p_raw: Option<f64>,
    pub p_fdr: Option<f64>,
}

pub fn write_stats_csv(path: &Path, rows: &[StatRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeGrid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let grid = VolumeGrid::isotropic(dims, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..grid.n_voxels()).map(|_| rng.random::<f64>()).collect();
        Volume::new(grid, 1, data).unwrap()
    }

    fn naive_lncc(a: &Volume, b: &Volume, w: usize) -> f64 {
        let d = a.grid.dims;
        let mut total = 0.0;
        for v in 0..a.grid.n_voxels() {
            let c = a.grid.coords(v);
            let r: Vec<(usize, usize)> = (0..3).map(|k| lncc_window(c[k], d[k], w)).collect();
            let (mut xa, mut xb) = (Vec::new(), Vec::new());
            for z in r[2].0..r[2].1 {
                for y in r[1].0..r[1].1 {
                    for x in r[0].0..r[0].1 {
                        let i = a.grid.index(x, y, z);
                        xa.push(a.data[i]);
                        xb.push(b.data[i]);
                    }
                }
            }
            total += pearson(&xa, &xb);
        }
        total / a.grid.n_voxels() as f64
    }

    #[test]
    fn mae_cases() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(mae(&a, &a, None).unwrap(), 0.0);
        let b = [0.0, 1.0, 2.0];
        assert_eq!(mae(&a, &b, None).unwrap(), 1.0);
        assert!(mae(&a, &b, Some(&[false; 3])).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..500).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..500).map(|_| rng.random()).collect();
        let mask: Vec<bool> = (0..500).map(|i| i % 3 != 0).collect();
        let mut s = 0.0;
        let mut n = 0.0;
        for i in 0..500 {
            if mask[i] {
                s += (x[i] - y[i]).abs();
                n += 1.0;
            }
        }
        assert_eq!(mae(&x, &y, Some(&mask)).unwrap(), s / n);
    }

    #[test]
    fn lncc_self_and_anti() {
        let a = random_volume([12, 12, 12], 1);
        assert!((lncc(&a, &a, 10).unwrap() - 1.0).abs() < 1e-12);
        let mut b = a.clone();
        b.data.iter_mut().for_each(|v| *v = -*v);
        assert!((lncc(&a, &b, 10).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn lncc_matches_naive_loop() {
        let a = random_volume([12, 12, 12], 2);
        let b = random_volume([12, 12, 12], 3);
        for w in [2, 5, 10] {
            let fast = lncc(&a, &b, w).unwrap();
            let slow = naive_lncc(&a, &b, w);
            assert!((fast - slow).abs() < 1e-10, "w={w}: {fast} vs {slow}");
        }
    }

    #[test]
    fn lncc_constant_windows_contribute_zero() {
        let grid = VolumeGrid::isotropic([6, 6, 6], 1.0);
        let a = Volume::new(grid.clone(), 1, vec![2.0; 216]).unwrap();
        let b = random_volume([6, 6, 6], 4);
        assert_eq!(lncc(&a, &b, 4).unwrap(), 0.0);
    }

    #[test]
    fn angular_cases() {
        let a = vec![[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]];
        let neg: Vec<[f64; 3]> = a.iter().map(|v| [-v[0], -v[1], -v[2]]).collect();
        assert_eq!(angular_error_v1(&a, &a, None).unwrap(), 0.0);
        assert!(angular_error_v1(&a, &neg, None).unwrap().abs() < 1e-12);
        let orth = vec![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
        assert!((angular_error_v1(&a, &orth, None).unwrap() - 90.0).abs() < 1e-12);
    }

    #[test]
    fn icc_perfect_agreement() {
        let m: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, i as f64, i as f64]).collect();
        assert!((icc_2way_absolute(&m).unwrap() - 1.0).abs() < 1e-12);
        assert!(icc_2way_absolute(&vec![vec![1.0, 1.0]; 3]).is_err());
    }

    #[test]
    fn icc_hand_anova() {
        // subjects × raters: [[1,2],[3,5],[4,4],[6,8]]
        // grand 33/8; row means 1.5,4,4,7; col means 3.5,4.75
        // SS_R = 30.375, SS_C = 3.125, SS_T = 34.875, SS_E = 1.375
        let m = vec![vec![1.0, 2.0], vec![3.0, 5.0], vec![4.0, 4.0], vec![6.0, 8.0]];
        let (msr, msc, mse) = (30.375 / 3.0, 3.125, 1.375 / 3.0);
        let expected = (msr - mse) / (msr + mse + 0.5 * (msc - mse));
        assert!((icc_2way_absolute(&m).unwrap() - expected).abs() < 1e-14);
        assert!((expected - 0.811188811188811).abs() < 1e-12);
    }

    #[test]
    fn icc_independent_columns_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
            .collect();
        assert!(icc_2way_absolute(&m).unwrap().abs() < 0.1);
    }

    #[test]
    fn bland_altman_cases() {
        let b = [1.0, 2.0, 4.0, 7.0];
        let r = bland_altman(&b, &b).unwrap();
        assert_eq!((r.bias, r.lower, r.upper, r.slope), (0.0, 0.0, 0.0, 0.0));
        let a: Vec<f64> = b.iter().map(|v| v + 2.0).collect();
        let r = bland_altman(&a, &b).unwrap();
        assert!((r.bias - 2.0).abs() < 1e-12 && r.slope.abs() < 1e-12);
        // a = 1.5b: diff = 0.5b, mean = 1.25b, so slope = 0.4
        let a: Vec<f64> = b.iter().map(|v| 1.5 * v).collect();
        assert!((bland_altman(&a, &b).unwrap().slope - 0.4).abs() < 1e-9);
    }

    #[test]
    fn ranksum_exact_cases() {
        let p = wilcoxon_ranksum(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((p - 0.1).abs() < 1e-12);
        let p = wilcoxon_ranksum(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn ranksum_normal_close_to_exact() {
        // n = m = 8 without ties: the continuity-corrected approximation is
        // within 0.01 of the exact p in the tails and peaks at 0.0109 for
        // exact p between 0.33 and 0.58
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for shift in [0.0, 0.5, 1.0, 1.5, 2.0] {
            let x: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y: Vec<f64> = (0..8)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    shift + z
                })
                .collect();
            let e = wilcoxon_ranksum_with(&x, &y, RankSumMethod::Exact).unwrap();
            let a = wilcoxon_ranksum_with(&x, &y, RankSumMethod::Normal).unwrap();
            let tol = if e < 0.3 { 0.01 } else { 0.011 };
            assert!((e - a).abs() < tol, "exact {e} normal {a}");
        }
    }

    #[test]
    fn ranksum_exact_matches_enumeration() {
        // brute force over all labelings of the pooled sample
        let pooled = [0.3, 1.2, 1.2, 2.5, 0.7, 3.1, 2.5, 4.0, 0.1, 5.5];
        let n = 4;
        let r = ranks(&pooled);
        let w_obs: f64 = r[..n].iter().sum();
        let e = n as f64 * (pooled.len() as f64 + 1.0) / 2.0;
        let (mut hit, mut tot) = (0, 0);
        for mask in 0u32..(1 << pooled.len()) {
            if mask.count_ones() as usize != n {
                continue;
            }
            tot += 1;
            let w: f64 = (0..pooled.len()).filter(|i| mask >> i & 1 == 1).map(|i| r[i]).sum();
            if (w - e).abs() >= (w_obs - e).abs() - 1e-9 {
                hit += 1;
            }
        }
        let p = wilcoxon_ranksum(&pooled[..n], &pooled[n..]).unwrap();
        assert_eq!(p, hit as f64 / tot as f64);
    }

    #[test]
    fn bh_cases() {
        assert_eq!(bh_fdr(&[0.03]).unwrap(), vec![0.03]);
        assert_eq!(bh_fdr(&[0.2; 4]).unwrap(), vec![0.2; 4]);
        let r = bh_fdr(&[0.01, 0.02, 0.03, 0.04]).unwrap();
        assert!(r.iter().all(|v| (v - 0.04).abs() < 1e-15));
        assert!(bh_fdr(&[1.5]).is_err());
    }

    #[test]
    fn auc_matches_pair_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s: Vec<f64> = (0..40).map(|_| (rng.random::<f64>() * 10.0).round()).collect();
        let l: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let mut acc = 0.0;
        let mut pairs = 0.0;
        for i in 0..40 {
            for j in 0..40 {
                if l[i] && !l[j] {
                    pairs += 1.0;
                    acc += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        assert_eq!(auc(&s, &l).unwrap(), acc / pairs);
    }

    #[test]
    fn lda_separated_and_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let off = if i < 10 { 0.0 } else { 10.0 };
                vec![off + rng.random::<f64>(), rng.random::<f64>()]
            })
            .collect();
        let labels: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        assert_eq!(fisher_lda_auc(&pts, &labels).unwrap().auc, 1.0);

        let pts: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
            .collect();
        let labels: Vec<bool> = (0..200).map(|_| rng.random()).collect();
        let a = fisher_lda_auc(&pts, &labels).unwrap().auc;
        assert!((a - 0.5).abs() < 0.08, "null AUC {a}");
    }

    #[test]
    fn bootstrap_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let a: Vec<f64> = labels
            .iter()
            .map(|&l| if l { 1.0 } else { 0.0 } + 0.2 * rng.random::<f64>())
            .collect();
        let r = paired_bootstrap_auc_diff(&a, &a, &labels, 200, 1).unwrap();
        assert_eq!(r.p_value, 1.0);
        let b: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
        let r1 = paired_bootstrap_auc_diff(&a, &b, &labels, 10_000, 5).unwrap();
        let r2 = paired_bootstrap_auc_diff(&a, &b, &labels, 10_000, 5).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.p_value < 0.01, "p {}", r1.p_value);
        assert_eq!(r1.method, "percentile");
    }

    #[test]
    fn zscore_cases() {
        assert!(zscore_by_tract(&[vec![3.0, 3.0], vec![3.0, 3.0]]).is_err());
        let x = vec![vec![1.0, 5.0, 2.0], vec![8.0, 3.0, 4.0]];
        let z = zscore_by_tract(&x).unwrap();
        let flat: Vec<f64> = z.iter().flatten().copied().collect();
        assert!(mean(&flat).abs() < 1e-12 && (std_dev(&flat) - 1.0).abs() < 1e-12);
        let t: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|v| 3.0 * v - 7.0).collect()).collect();
        let zt = zscore_by_tract(&t).unwrap();
        for (a, b) in z.iter().flatten().zip(zt.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stats_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let rows = vec![StatRow {
            metric: "auc".into(),
            value: 0.7,
            ci_low: Some(0.6),
            ci_high: Some(0.8),
            p_raw: Some(0.03),
            p_fdr: None,
        }];
        write_stats_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("metric,value,ci_low,ci_high,p_raw,p_fdr"));
        assert!(text.contains("auc,0.7,0.6,0.8,0.03,"));
    }
}
