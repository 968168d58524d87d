//! Gradient tables (FSL bvals/bvecs) and the validated DWI dataset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Default b-value clustering tolerance in s/mm². Also the threshold below
/// which an entry counts as a b=0 (low-b) volume.
pub const DEFAULT_SHELL_TOLERANCE: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientTable {
    pub bvals: Vec<f64>,
    pub bvecs: Vec<[f64; 3]>,
}

impl GradientTable {
    /// Build a table, normalizing every nonzero b-vector to unit length.
    pub fn new(bvals: Vec<f64>, bvecs: Vec<[f64; 3]>) -> Result<Self> {
        if bvals.len() != bvecs.len() {
            return Err(Error::Format(format!(
                "{} b-values but {} b-vectors",
                bvals.len(),
                bvecs.len()
            )));
        }
        let mut out = Vec::with_capacity(bvecs.len());
        for (i, (&b, v)) in bvals.iter().zip(&bvecs).enumerate() {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(Error::Format(format!("b-value {b} at entry {i} is not >= 0")));
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::Format(format!("non-finite b-vector at entry {i}")));
            }
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if norm == 0.0 {
                if b > 0.0 {
                    return Err(Error::Format(format!("zero b-vector with b = {b} at entry {i}")));
                }
                out.push(*v);
            } else if (norm - 1.0).abs() > 1e-12 {
                // leave already-unit vectors untouched so write/read is lossless
                out.push([v[0] / norm, v[1] / norm, v[2] / norm]);
            } else {
                out.push(*v);
            }
        }
        Ok(Self { bvals, bvecs: out })
    }

    pub fn len(&self) -> usize {
        self.bvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvals.is_empty()
    }

    /// Indices with b at or below `threshold`.
    pub fn lowb_indices(&self, threshold: f64) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.bvals[i] <= threshold).collect()
    }

    /// Indices with b above `threshold`.
    pub fn dwi_indices(&self, threshold: f64) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.bvals[i] > threshold).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> GradientTable {
        GradientTable {
            bvals: indices.iter().map(|&i| self.bvals[i]).collect(),
            bvecs: indices.iter().map(|&i| self.bvecs[i]).collect(),
        }
    }

    /// Rank of the six-column quadratic design built from the directions
    /// above `threshold`; 6 means a tensor is identifiable.
    pub fn tensor_rank(&self, threshold: f64) -> usize {
        let dirs: Vec<[f64; 3]> = self.dwi_indices(threshold).iter().map(|&i| self.bvecs[i]).collect();
        if dirs.is_empty() {
            return 0;
        }
        quadratic_design(&dirs).rank(1e-10)
    }
}

fn quadratic_design(dirs: &[[f64; 3]]) -> DMatrix<f64> {
    DMatrix::from_fn(dirs.len(), 6, |r, c| {
        let [x, y, z] = dirs[r];
        [x * x, y * y, z * z, x * y, x * z, y * z][c]
    })
}

fn parse_rows(text: &str, what: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(row, line)| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| {
                        Error::Parse(format!("{what} row {}: non-numeric token {tok:?}", row + 1))
                    })
                })
                .collect()
        })
        .collect()
}

/// Parse FSL-style text: bvals is one row of N numbers, bvecs is three rows
/// of N numbers (N rows of three are accepted as well).
pub fn parse_gradient_text(bval_text: &str, bvec_text: &str) -> Result<GradientTable> {
    let bval_rows = parse_rows(bval_text, "bvals")?;
    let bvals: Vec<f64> = match bval_rows.len() {
        1 => bval_rows.into_iter().next().unwrap_or_default(),
        0 => return Err(Error::Format("bvals file is empty".into())),
        _ if bval_rows.iter().all(|r| r.len() == 1) => bval_rows.into_iter().flatten().collect(),
        n => return Err(Error::Format(format!("bvals has {n} rows, expected 1"))),
    };
    let rows = parse_rows(bvec_text, "bvecs")?;
    let n = bvals.len();
    let bvecs: Vec<[f64; 3]> = if rows.len() == 3 && rows.iter().all(|r| r.len() == n) {
        (0..n).map(|i| [rows[0][i], rows[1][i], rows[2][i]]).collect()
    } else if rows.len() == n && rows.iter().all(|r| r.len() == 3) {
        rows.iter().map(|r| [r[0], r[1], r[2]]).collect()
    } else {
        let lens: Vec<usize> = rows.iter().map(Vec::len).collect();
        return Err(Error::Format(format!(
            "bvecs row lengths {lens:?} do not match {n} b-values"
        )));
    };
    GradientTable::new(bvals, bvecs)
}

pub fn parse_gradient_table(bval_path: impl AsRef<Path>, bvec_path: impl AsRef<Path>) -> Result<GradientTable> {
    let (bp, vp) = (bval_path.as_ref(), bvec_path.as_ref());
    let bval_text = fs::read_to_string(bp).map_err(|e| Error::io(bp, e))?;
    let bvec_text = fs::read_to_string(vp).map_err(|e| Error::io(vp, e))?;
    parse_gradient_text(&bval_text, &bvec_text)
}

/// Text of the bvals and bvecs files. Numbers use shortest round-trip
/// formatting, so parsing the output reproduces the table exactly.
pub fn format_gradient_table(table: &GradientTable) -> (String, String) {
    let join = |it: &mut dyn Iterator<Item = f64>| {
        it.map(|v| format!("{v}")).collect::<Vec<_>>().join(" ")
    };
    let bvals = join(&mut table.bvals.iter().copied()) + "\n";
    let mut bvecs = String::new();
    for axis in 0..3 {
        bvecs += &join(&mut table.bvecs.iter().map(|v| v[axis]));
        bvecs.push('\n');
    }
    (bvals, bvecs)
}

pub fn write_gradient_table(
    table: &GradientTable,
    bval_path: impl AsRef<Path>,
    bvec_path: impl AsRef<Path>,
) -> Result<()> {
    let (bvals, bvecs) = format_gradient_table(table);
    let (bp, vp) = (bval_path.as_ref(), bvec_path.as_ref());
    fs::write(bp, bvals).map_err(|e| Error::io(bp, e))?;
    fs::write(vp, bvecs).map_err(|e| Error::io(vp, e))
}

/// Group entries into shells by single-linkage clustering of sorted
/// b-values: neighbours closer than `tolerance` join the same shell.
/// Entries with b <= tolerance form the b=0 group (key 0). Keys are the
/// rounded mean b-value of each group.
pub fn split_shells(gradients: &GradientTable, tolerance: f64) -> BTreeMap<u32, Vec<usize>> {
    let tol = tolerance.max(0.0);
    let mut order: Vec<usize> = (0..gradients.len()).collect();
    order.sort_by(|&a, &b| gradients.bvals[a].total_cmp(&gradients.bvals[b]).then(a.cmp(&b)));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut zero: Vec<usize> = Vec::new();
    let mut last_b = f64::NEG_INFINITY;
    for i in order {
        let b = gradients.bvals[i];
        if b <= tol {
            zero.push(i);
            continue;
        }
        match groups.last_mut() {
            Some(g) if b - last_b <= tol => g.push(i),
            _ => groups.push(vec![i]),
        }
        last_b = b;
    }

    let mut out = BTreeMap::new();
    if !zero.is_empty() {
        zero.sort_unstable();
        out.insert(0, zero);
    }
    for mut g in groups {
        let mean = g.iter().map(|&i| gradients.bvals[i]).sum::<f64>() / g.len() as f64;
        g.sort_unstable();
        out.entry(mean.round() as u32).or_insert_with(Vec::new).extend(g);
    }
    for v in out.values_mut() {
        v.sort_unstable();
    }
    out
}

/// DWI volumes with one channel per gradient entry.
#[derive(Debug, Clone, PartialEq)]
pub struct DwiDataset {
    pub volume: Volume,
    pub gradients: GradientTable,
}

impl DwiDataset {
    pub fn new(volume: Volume, gradients: GradientTable) -> Result<Self> {
        let ds = Self { volume, gradients };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        self.volume.validate()?;
        if self.volume.channels != self.gradients.len() {
            return Err(Error::Argument(format!(
                "volume has {} channels but gradient table has {} entries",
                self.volume.channels,
                self.gradients.len()
            )));
        }
        if self.gradients.lowb_indices(DEFAULT_SHELL_TOLERANCE).is_empty() {
            return Err(Error::Argument("dataset needs at least one b=0 volume".into()));
        }
        if self.gradients.tensor_rank(DEFAULT_SHELL_TOLERANCE) < 6 {
            return Err(Error::DegenerateGeometry(
                "fewer than six non-collinear diffusion directions".into(),
            ));
        }
        Ok(())
    }

    pub fn lowb_indices(&self) -> Vec<usize> {
        self.gradients.lowb_indices(DEFAULT_SHELL_TOLERANCE)
    }

    pub fn dwi_indices(&self) -> Vec<usize> {
        self.gradients.dwi_indices(DEFAULT_SHELL_TOLERANCE)
    }

    /// Voxelwise mean of the low-b volumes.
    pub fn mean_lowb(&self) -> Vec<f64> {
        self.volume.mean_of_channels(&self.lowb_indices())
    }
}

pub fn unit(v: [f64; 3]) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2]).normalize()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_three_entries() {
        let t = parse_gradient_text("0 700 700\n", "0 1 0\n0 0 1\n0 0 0\n").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.bvals[0], 0.0);
        assert_eq!(t.bvecs[0], [0.0, 0.0, 0.0]);
        assert_eq!(t.bvecs[1], [1.0, 0.0, 0.0]);
        assert_eq!(t.bvecs[2], [0.0, 1.0, 0.0]);
    }

    #[test]
    fn normalizes_nonunit() {
        let t = parse_gradient_text("700", "2\n0\n0").unwrap();
        assert_eq!(t.bvecs[0], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn row_mismatch_is_format_error() {
        let e = parse_gradient_text("0 700", "0 1 0\n0 0\n0 0").unwrap_err();
        assert!(matches!(e, Error::Format(_)));
    }

    #[test]
    fn bad_token_is_parse_error() {
        let e = parse_gradient_text("0 abc", "0 1\n0 0\n0 0").unwrap_err();
        assert!(matches!(e, Error::Parse(_)));
    }

    #[test]
    fn zero_vector_with_positive_b_rejected() {
        assert!(GradientTable::new(vec![700.0], vec![[0.0; 3]]).is_err());
    }

    #[test]
    fn shells_exact_grouping() {
        let t = GradientTable::new(
            vec![0.0, 0.0, 1000.0, 1000.0, 3000.0],
            vec![[0.0; 3], [0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        )
        .unwrap();
        let s = split_shells(&t, 50.0);
        assert_eq!(s.len(), 3);
        assert_eq!(s[&0], vec![0, 1]);
        assert_eq!(s[&1000], vec![2, 3]);
        assert_eq!(s[&3000], vec![4]);
    }

    #[test]
    fn shells_within_tolerance_merge() {
        let t = GradientTable::new(vec![995.0, 1005.0], vec![[1.0, 0.0, 0.0]; 2]).unwrap();
        let s = split_shells(&t, 50.0);
        assert_eq!(s.len(), 1);
        assert_eq!(s[&1000], vec![0, 1]);
    }

    #[test]
    fn three_training_shells() {
        let t = GradientTable::new(vec![1000.0, 2000.0, 3000.0], vec![[1.0, 0.0, 0.0]; 3]).unwrap();
        let s = split_shells(&t, 50.0);
        assert_eq!(s.keys().copied().collect::<Vec<_>>(), vec![1000, 2000, 3000]);
    }

    #[test]
    fn text_roundtrip_is_lossless() {
        let t = GradientTable::new(
            vec![0.0, 700.0, 1000.5],
            vec![[0.0; 3], [0.6, 0.8, 0.0], [0.1, -0.3, 0.9486832980505138]],
        )
        .unwrap();
        let (a, b) = format_gradient_table(&t);
        assert_eq!(parse_gradient_text(&a, &b).unwrap(), t);
    }
}
