//! Evaluation metrics over the challenge regions: Dice score and the 95th
//! percentile Hausdorff distance, computed on nested region masks composed
//! from label classes (ET = {3}, TC = {1,3}, WT = {1,2,3}).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Et,
    Tc,
    Wt,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Et, Region::Tc, Region::Wt];

    pub fn name(self) -> &'static str {
        match self {
            Region::Et => "et",
            Region::Tc => "tc",
            Region::Wt => "wt",
        }
    }

    fn classes(self) -> &'static [u8] {
        match self {
            Region::Et => &[3],
            Region::Tc => &[1, 3],
            Region::Wt => &[1, 2, 3],
        }
    }
}

/// Boolean voxel grid in x-fastest order; `extents[2] == 1` for 2-D masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub extents: [usize; 3],
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(extents: [usize; 3], bits: Vec<bool>) -> Result<Self> {
        if bits.len() != extents.iter().product::<usize>() {
            return Err(Error::Dim(format!(
                "mask extents {extents:?} vs {} bits",
                bits.len()
            )));
        }
        Ok(Mask { extents, bits })
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.extents[0] * (y + self.extents[1] * z)
    }

    /// Set voxels with at least one unset axis neighbor, or on the grid
    /// boundary. Axes of extent 1 contribute no neighbors (a single-slice
    /// mask uses the in-plane 4-neighborhood).
    pub fn surface_points(&self) -> Vec<[usize; 3]> {
        let [ex, ey, ez] = self.extents;
        let mut out = Vec::new();
        for z in 0..ez {
            for y in 0..ey {
                for x in 0..ex {
                    if !self.bits[self.index(x, y, z)] {
                        continue;
                    }
                    let mut exposed = false;
                    for (axis, (&extent, &pos)) in self.extents.iter().zip([x, y, z].iter()).enumerate() {
                        if extent == 1 {
                            continue;
                        }
                        if pos == 0 || pos == extent - 1 {
                            exposed = true;
                            break;
                        }
                        let (lo, hi) = match axis {
                            0 => (self.index(x - 1, y, z), self.index(x + 1, y, z)),
                            1 => (self.index(x, y - 1, z), self.index(x, y + 1, z)),
                            _ => (self.index(x, y, z - 1), self.index(x, y, z + 1)),
                        };
                        if !self.bits[lo] || !self.bits[hi] {
                            exposed = true;
                            break;
                        }
                    }
                    if exposed {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }
}

/// Compose the three nested region masks from a label grid.
pub fn compose_regions(labels: &[u8], extents: [usize; 3]) -> Result<[Mask; 3]> {
    if labels.len() != extents.iter().product::<usize>() {
        return Err(Error::Dim(format!(
            "label grid extents {extents:?} vs {} values",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&v| v > 3) {
        return Err(Error::Data(format!("label value {bad} outside 0..=3")));
    }
    let mut masks = Vec::with_capacity(3);
    for region in Region::ALL {
        let classes = region.classes();
        let bits: Vec<bool> = labels.iter().map(|c| classes.contains(c)).collect();
        masks.push(Mask::new(extents, bits)?);
    }
    Ok(masks.try_into().expect("three regions"))
}

/// 2|P∩G| / (|P|+|G|); two empty masks agree perfectly (1.0).
pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.extents != gt.extents {
        return Err(Error::Dim(format!("mask extents {:?} vs {:?}", pred.extents, gt.extents)));
    }
    let inter = pred
        .bits
        .iter()
        .zip(&gt.bits)
        .filter(|(&p, &g)| p && g)
        .count();
    let total = pred.count() + gt.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct Hd95Config {
    pub percentile: f64,
    /// Returned when both masks are empty.
    pub empty_both: f64,
    /// Penalty when exactly one mask is empty; `None` uses the grid
    /// corner-to-corner diagonal.
    pub one_empty_penalty: Option<f64>,
    pub spacing: [f64; 3],
}

impl Default for Hd95Config {
    fn default() -> Self {
        Hd95Config { percentile: 95.0, empty_both: 0.0, one_empty_penalty: None, spacing: [1.0; 3] }
    }
}

impl Hd95Config {
    fn validate(&self) -> Result<()> {
        if !(0.0 < self.percentile && self.percentile <= 100.0) {
            return Err(Error::Config(format!("percentile {} outside (0, 100]", self.percentile)));
        }
        if self.spacing.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config(format!("non-positive spacing {:?}", self.spacing)));
        }
        Ok(())
    }

    fn penalty(&self, extents: [usize; 3]) -> f64 {
        self.one_empty_penalty.unwrap_or_else(|| {
            extents
                .iter()
                .zip(&self.spacing)
                .map(|(&e, &s)| ((e - 1) as f64 * s).powi(2))
                .sum::<f64>()
                .sqrt()
        })
    }
}

/// Percentile by linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    if values.len() == 1 {
        return values[0];
    }
    let rank = p / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 >= values.len() {
        values[values.len() - 1]
    } else {
        values[lo] + (values[lo + 1] - values[lo]) * frac
    }
}

/// One-dimensional squared-distance transform (lower envelope of
/// parabolas) over samples at positions i * spacing.
fn edt_1d(f: &[f64], spacing: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut zbound = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    zbound[0] = f64::NEG_INFINITY;
    zbound[1] = f64::INFINITY;
    let pos = |i: usize| i as f64 * spacing;
    for q in 1..n {
        if f[q] == f64::INFINITY && f[v[k]] == f64::INFINITY {
            continue;
        }
        let mut s;
        loop {
            let p = v[k];
            s = if f[q] == f64::INFINITY {
                f64::INFINITY
            } else if f[p] == f64::INFINITY {
                f64::NEG_INFINITY
            } else {
                ((f[q] + pos(q).powi(2)) - (f[p] + pos(p).powi(2))) / (2.0 * pos(q) - 2.0 * pos(p))
            };
            if s > zbound[k] {
                break;
            }
            if k == 0 {
                break;
            }
            k -= 1;
        }
        if s <= zbound[k] && f[q] == f[v[k]] {
            continue;
        }
        k += 1;
        v[k] = q;
        zbound[k] = s;
        zbound[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for q in 0..n {
        while zbound[k + 1] < pos(q) {
            k += 1;
        }
        let p = v[k];
        out[q] = if f[p] == f64::INFINITY {
            f64::INFINITY
        } else {
            (pos(q) - pos(p)).powi(2) + f[p]
        };
    }
}

/// Exact squared Euclidean distance to the nearest set voxel, per voxel.
fn squared_edt(mask: &Mask, spacing: [f64; 3]) -> Vec<f64> {
    let [ex, ey, ez] = mask.extents;
    let mut d: Vec<f64> = mask.bits.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let mut line: Vec<f64> = Vec::new();
    let mut out_line: Vec<f64> = Vec::new();
    // x rows
    if ex > 1 {
        line.resize(ex, 0.0);
        out_line.resize(ex, 0.0);
        for z in 0..ez {
            for y in 0..ey {
                let base = ex * (y + ey * z);
                line.copy_from_slice(&d[base..base + ex]);
                edt_1d(&line, spacing[0], &mut out_line);
                d[base..base + ex].copy_from_slice(&out_line);
            }
        }
    }
    // y columns
    if ey > 1 {
        line.resize(ey, 0.0);
        out_line.resize(ey, 0.0);
        for z in 0..ez {
            for x in 0..ex {
                for y in 0..ey {
                    line[y] = d[x + ex * (y + ey * z)];
                }
                edt_1d(&line[..ey], spacing[1], &mut out_line[..ey]);
                for y in 0..ey {
                    d[x + ex * (y + ey * z)] = out_line[y];
                }
            }
        }
    }
    // z columns
    if ez > 1 {
        line.resize(ez, 0.0);
        out_line.resize(ez, 0.0);
        for y in 0..ey {
            for x in 0..ex {
                for z in 0..ez {
                    line[z] = d[x + ex * (y + ey * z)];
                }
                edt_1d(&line[..ez], spacing[2], &mut out_line[..ez]);
                for z in 0..ez {
                    d[x + ex * (y + ey * z)] = out_line[z];
                }
            }
        }
    }
    d
}

fn directed_distances(from: &Mask, to_edt: &[f64], ex: [usize; 3]) -> Vec<f64> {
    from.surface_points()
        .into_iter()
        .map(|[x, y, z]| to_edt[x + ex[0] * (y + ex[1] * z)].sqrt())
        .collect()
}

/// Hausdorff-95: the maximum over both directions of the 95th percentile
/// of distances from each surface point of one mask to the nearest set
/// voxel of the other.
pub fn hausdorff95(pred: &Mask, gt: &Mask, cfg: &Hd95Config) -> Result<f64> {
    cfg.validate()?;
    if pred.extents != gt.extents {
        return Err(Error::Dim(format!("mask extents {:?} vs {:?}", pred.extents, gt.extents)));
    }
    let np = pred.count();
    let ng = gt.count();
    if np == 0 && ng == 0 {
        return Ok(cfg.empty_both);
    }
    if np == 0 || ng == 0 {
        return Ok(cfg.penalty(pred.extents));
    }
    let gt_edt = squared_edt(gt, cfg.spacing);
    let pred_edt = squared_edt(pred, cfg.spacing);
    let mut fwd = directed_distances(pred, &gt_edt, pred.extents);
    let mut back = directed_distances(gt, &pred_edt, gt.extents);
    Ok(percentile(&mut fwd, cfg.percentile).max(percentile(&mut back, cfg.percentile)))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RegionValues {
    pub et: f64,
    pub tc: f64,
    pub wt: f64,
}

impl RegionValues {
    pub fn from_array(v: [f64; 3]) -> Self {
        RegionValues { et: v[0], tc: v[1], wt: v[2] }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.et, self.tc, self.wt]
    }
}

/// One case's metrics plus run metadata; serialized as one JSON object per
/// line in report files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub case_id: String,
    pub dropped_modality: Option<String>,
    pub beta: f64,
    pub dice: RegionValues,
    pub hd95: RegionValues,
}

/// Per-region Dice and HD95 over stacked (3-D indexed) label grids.
pub fn evaluate_case(
    pred_labels: &[u8],
    gt_labels: &[u8],
    extents: [usize; 3],
    cfg: &Hd95Config,
) -> Result<(RegionValues, RegionValues)> {
    if pred_labels.len() != gt_labels.len() {
        return Err(Error::Alignment(format!(
            "prediction has {} voxels, ground truth {}",
            pred_labels.len(),
            gt_labels.len()
        )));
    }
    let pred_masks = compose_regions(pred_labels, extents)?;
    let gt_masks = compose_regions(gt_labels, extents)?;
    let mut dice = [0.0f64; 3];
    let mut hd = [0.0f64; 3];
    for (i, (p, g)) in pred_masks.iter().zip(&gt_masks).enumerate() {
        dice[i] = dice_score(p, g)?;
        hd[i] = hausdorff95(p, g, cfg)?;
    }
    Ok((RegionValues::from_array(dice), RegionValues::from_array(hd)))
}
