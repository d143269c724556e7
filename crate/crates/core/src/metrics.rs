//! Dice similarity and 95th-percentile Hausdorff distance on 2-D label maps.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, shape_err, Result};

/// Dice coefficient of `pred == cls` against `gt == cls`; 1 when both are
/// empty.
pub fn dsc(pred: ArrayView2<u32>, gt: ArrayView2<u32>, cls: u32) -> f64 {
    let mut a = 0usize;
    let mut b = 0usize;
    let mut both = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (pa, gb) = (p == cls, g == cls);
        a += pa as usize;
        b += gb as usize;
        both += (pa && gb) as usize;
    }
    if a + b == 0 {
        return 1.0;
    }
    2.0 * both as f64 / (a + b) as f64
}

/// Mask pixels with at least one 4-neighbour outside the mask (the image
/// border counts as outside).
pub fn boundary(mask: ArrayView2<bool>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask[[y - 1, x]]
                || !mask[[y + 1, x]]
                || !mask[[y, x - 1]]
                || !mask[[y, x + 1]];
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Percentile `q` in [0, 100] of `values` with linear interpolation
/// between order statistics. Sorts in place.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let pos = q / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

fn check_spacing(spacing: (f64, f64)) -> Result<()> {
    if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.0.is_finite() && spacing.1.is_finite()) {
        return Err(config_err!("pixel spacing must be positive, got {spacing:?}"));
    }
    Ok(())
}

/// Distance from each point of `from` to the nearest point of `to`, in mm.
fn directed(from: &[(usize, usize)], to: &[(usize, usize)], spacing: (f64, f64)) -> Vec<f64> {
    // Bucket targets by row so each query scans rows outward and stops once
    // the row gap alone exceeds the best distance found.
    let max_row = to.iter().map(|p| p.0).max().unwrap_or(0);
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); max_row + 1];
    for &(y, x) in to {
        rows[y].push(x);
    }
    from.iter()
        .map(|&(fy, fx)| {
            let mut best = f64::INFINITY;
            let visit = |ty: usize, best: &mut f64| {
                let dy = (fy as f64 - ty as f64) * spacing.0;
                for &tx in &rows[ty] {
                    let dx = (fx as f64 - tx as f64) * spacing.1;
                    let d2 = dy * dy + dx * dx;
                    if d2 < *best {
                        *best = d2;
                    }
                }
            };
            let start = fy.min(max_row);
            let mut up = start as isize;
            let mut down = start + 1;
            loop {
                let gap_up = if up >= 0 { Some((fy as f64 - up as f64).abs() * spacing.0) } else { None };
                let gap_down = if down <= max_row { Some((down as f64 - fy as f64).abs() * spacing.0) } else { None };
                let mut progressed = false;
                if let Some(g) = gap_up {
                    if g * g <= best {
                        visit(up as usize, &mut best);
                        up -= 1;
                        progressed = true;
                    } else {
                        up = -1;
                    }
                }
                if let Some(g) = gap_down {
                    if g * g <= best {
                        visit(down, &mut best);
                        down += 1;
                        progressed = true;
                    } else {
                        down = max_row + 1;
                    }
                }
                if !progressed {
                    break;
                }
            }
            best.sqrt()
        })
        .collect()
}

/// Symmetric 95th-percentile boundary distance for class `cls`, in mm.
/// Both masks empty gives 0; exactly one empty gives the image diagonal.
pub fn hd95(pred: ArrayView2<u32>, gt: ArrayView2<u32>, cls: u32, spacing: (f64, f64)) -> Result<f64> {
    check_spacing(spacing)?;
    if pred.dim() != gt.dim() {
        return Err(shape_err!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim()));
    }
    let a = boundary(pred.mapv(|v| v == cls).view());
    let b = boundary(gt.mapv(|v| v == cls).view());
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Ok(0.0),
        (true, false) | (false, true) => {
            let (h, w) = pred.dim();
            Ok(((h as f64 * spacing.0).powi(2) + (w as f64 * spacing.1).powi(2)).sqrt())
        }
        (false, false) => {
            let p_ab = percentile(&mut directed(&a, &b, spacing), 95.0);
            let p_ba = percentile(&mut directed(&b, &a, spacing), 95.0);
            Ok(p_ab.max(p_ba))
        }
    }
}

/// Per-class DSC and HD95 over foreground classes, with their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class_dsc: BTreeMap<u32, f64>,
    pub per_class_hd95: BTreeMap<u32, f64>,
    pub dsc_avg: f64,
    pub hd95_avg: f64,
}

impl MetricReport {
    /// Evaluates classes `1..num_classes` of one slice.
    pub fn compute(pred: ArrayView2<u32>, gt: ArrayView2<u32>, num_classes: usize, spacing: (f64, f64)) -> Result<Self> {
        if num_classes < 2 {
            return Err(config_err!("need at least 2 classes, got {num_classes}"));
        }
        let mut per_class_dsc = BTreeMap::new();
        let mut per_class_hd95 = BTreeMap::new();
        for c in 1..num_classes as u32 {
            per_class_dsc.insert(c, dsc(pred, gt, c));
            per_class_hd95.insert(c, hd95(pred, gt, c, spacing)?);
        }
        Ok(Self::from_maps(per_class_dsc, per_class_hd95))
    }

    fn from_maps(per_class_dsc: BTreeMap<u32, f64>, per_class_hd95: BTreeMap<u32, f64>) -> Self {
        let mean = |m: &BTreeMap<u32, f64>| m.values().sum::<f64>() / m.len().max(1) as f64;
        Self {
            dsc_avg: mean(&per_class_dsc),
            hd95_avg: mean(&per_class_hd95),
            per_class_dsc,
            per_class_hd95,
        }
    }

    /// Flat `dsc.class_k`, `hd95.class_k`, `dsc.avg`, `hd95.avg` entries.
    pub fn flat(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (c, v) in &self.per_class_dsc {
            out.insert(format!("dsc.class_{c}"), *v);
        }
        for (c, v) in &self.per_class_hd95 {
            out.insert(format!("hd95.class_{c}"), *v);
        }
        out.insert("dsc.avg".into(), self.dsc_avg);
        out.insert("hd95.avg".into(), self.hd95_avg);
        out
    }
}

/// Mean of each per-class entry and of the averages, in list order.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    let first = reports.first().ok_or_else(|| data_err!("cannot aggregate an empty list of reports"))?;
    let n = reports.len() as f64;
    let mut dsc_sum: BTreeMap<u32, f64> = first.per_class_dsc.keys().map(|&k| (k, 0.0)).collect();
    let mut hd_sum: BTreeMap<u32, f64> = first.per_class_hd95.keys().map(|&k| (k, 0.0)).collect();
    let (mut dsc_avg, mut hd_avg) = (0.0, 0.0);
    for r in reports {
        if r.per_class_dsc.len() != dsc_sum.len() || r.per_class_hd95.len() != hd_sum.len() {
            return Err(data_err!("reports cover different class sets"));
        }
        for (k, v) in &r.per_class_dsc {
            *dsc_sum.get_mut(k).ok_or_else(|| data_err!("class {k} missing from first report"))? += v;
        }
        for (k, v) in &r.per_class_hd95 {
            *hd_sum.get_mut(k).ok_or_else(|| data_err!("class {k} missing from first report"))? += v;
        }
        dsc_avg += r.dsc_avg;
        hd_avg += r.hd95_avg;
    }
    dsc_sum.values_mut().for_each(|v| *v /= n);
    hd_sum.values_mut().for_each(|v| *v /= n);
    Ok(MetricReport {
        per_class_dsc: dsc_sum,
        per_class_hd95: hd_sum,
        dsc_avg: dsc_avg / n,
        hd95_avg: hd_avg / n,
    })
}

/// Convenience for tests and tools: a label map from rows.
pub fn label_map(rows: &[&[u32]]) -> Array2<u32> {
    let h = rows.len();
    let w = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((h, w), |(y, x)| rows[y][x])
}
