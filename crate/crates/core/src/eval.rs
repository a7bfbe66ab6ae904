//! Evaluation metrics: label overlaps, bias recovery error, template
//! sharpness.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::{gradient_central, LabelVolume, Volume3};

fn counts<T: Real>(a: &LabelVolume<T>, b: &LabelVolume<T>, label: u16) -> Result<(usize, usize, usize)> {
    a.grid().ensure_matches(b.grid(), "overlap")?;
    let mut na = 0;
    let mut nb = 0;
    let mut both = 0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok((na, nb, both))
}

/// Mean overlap `2|A∩B| / (|A| + |B|)`; 1 when both masks are empty.
pub fn dice<T: Real>(a: &LabelVolume<T>, b: &LabelVolume<T>, label: u16) -> Result<f64> {
    let (na, nb, both) = counts(a, b, label)?;
    Ok(if na + nb == 0 { 1.0 } else { 2.0 * both as f64 / (na + nb) as f64 })
}

/// Target overlap `|A∩B| / |B|` with `b` the target; 1 when both are empty.
pub fn target_overlap<T: Real>(a: &LabelVolume<T>, b: &LabelVolume<T>, label: u16) -> Result<f64> {
    let (na, nb, both) = counts(a, b, label)?;
    match (na, nb) {
        (0, 0) => Ok(1.0),
        (_, 0) => Err(Error::InvalidInput(format!("label {label} is empty in the target"))),
        _ => Ok(both as f64 / nb as f64),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapRow {
    pub source: usize,
    pub target: usize,
    pub label: u16,
    pub dice: f64,
    pub target_overlap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapReport {
    pub rows: Vec<OverlapRow>,
    pub mean_dice: f64,
    pub mean_target_overlap: f64,
}

/// Overlaps between every ordered pair of label maps sharing one space.
pub fn pairwise_overlaps<T: Real>(maps: &[LabelVolume<T>], labels: &[u16]) -> Result<OverlapReport> {
    let mut rows = Vec::new();
    for (s, a) in maps.iter().enumerate() {
        for (t, b) in maps.iter().enumerate() {
            if s == t {
                continue;
            }
            for &label in labels {
                rows.push(OverlapRow {
                    source: s,
                    target: t,
                    label,
                    dice: dice(a, b, label)?,
                    target_overlap: target_overlap(a, b, label)?,
                });
            }
        }
    }
    let n = rows.len().max(1) as f64;
    Ok(OverlapReport {
        mean_dice: rows.iter().map(|r| r.dice).sum::<f64>() / n,
        mean_target_overlap: rows.iter().map(|r| r.target_overlap).sum::<f64>() / n,
        rows,
    })
}

fn masked<'a, T: Real>(
    a: &'a Volume3<T>,
    b: &'a Volume3<T>,
    mask: &'a [bool],
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    a.grid().ensure_matches(b.grid(), "evaluation")?;
    if mask.len() != a.data().len() {
        return Err(Error::InvalidInput("mask does not cover the grid".into()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidInput("empty evaluation mask".into()));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((x, y), _)| (x.as_f64(), y.as_f64())))
}

/// Root mean squared difference over `mask`.
pub fn bias_rmse<T: Real>(recovered: &Volume3<T>, truth: &Volume3<T>, mask: &[bool]) -> Result<f64> {
    let (sum, n) = masked(recovered, truth, mask)?.fold((0.0, 0usize), |(s, n), (x, y)| (s + (x - y).powi(2), n + 1));
    Ok((sum / n as f64).sqrt())
}

/// Pearson correlation over `mask`; 0 when either side is constant.
pub fn pearson<T: Real>(a: &Volume3<T>, b: &Volume3<T>, mask: &[bool]) -> Result<f64> {
    let pairs: Vec<(f64, f64)> = masked(a, b, mask)?.collect();
    let n = pairs.len() as f64;
    let (ma, mb) = pairs.iter().fold((0.0, 0.0), |(x, y), (a, b)| (x + a / n, y + b / n));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        sab += (a - ma) * (b - mb);
        saa += (a - ma).powi(2);
        sbb += (b - mb).powi(2);
    }
    Ok(if saa == 0.0 || sbb == 0.0 { 0.0 } else { sab / (saa * sbb).sqrt() })
}

/// Root mean squared difference over all voxels.
pub fn rmse<T: Real>(a: &Volume3<T>, b: &Volume3<T>) -> Result<f64> {
    bias_rmse(a, b, &vec![true; a.data().len()])
}

/// Mean gradient magnitude over voxels at least one voxel away from every
/// face (the whole grid along axes too short to have an interior).
pub fn sharpness<T: Real>(vol: &Volume3<T>) -> Result<f64> {
    let g = gradient_central(vol)?;
    let grid = vol.grid();
    let range = |n: usize| if n > 2 { 1..n - 1 } else { 0..n };
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in range(grid.dims[2]) {
        for j in range(grid.dims[1]) {
            for i in range(grid.dims[0]) {
                sum += g.data()[grid.index(i, j, k)].norm().as_f64();
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}
