//! Label masks and segmentation quality metrics: region overlap (Dice, IoU)
//! and boundary distances (ASSD, HD95).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense H x W grid of class ids in `[0, classes)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub classes: usize,
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn new(classes: usize, h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::Shape(format!(
                "mask labels {} != {}x{}",
                labels.len(),
                h,
                w
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| (l as usize) >= classes) {
            return Err(Error::LabelRange {
                found: bad,
                classes,
            });
        }
        Ok(Mask { classes, h, w, labels })
    }

    /// One-hot view as a constant `[classes, h, w]` tensor; channels sum to 1
    /// at every pixel.
    pub fn one_hot(&self) -> Tensor {
        let mut data = vec![0.0f32; self.classes * self.h * self.w];
        for (i, &l) in self.labels.iter().enumerate() {
            data[(l as usize) * self.h * self.w + i] = 1.0;
        }
        Tensor::from_vec(vec![self.classes, self.h, self.w], data, false).unwrap()
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l as usize == class).count()
    }
}

/// Region overlap for one class, in percent. `both_empty` marks the
/// convention case where prediction and ground truth are both empty and the
/// scores default to 100.
#[derive(Debug, Clone, Copy)]
pub struct ClassRegion {
    pub dice: f64,
    pub iou: f64,
    pub both_empty: bool,
}

/// Boundary distances for one class, in pixels. `None` when either side has
/// no pixels of the class (undefined, excluded from means).
#[derive(Debug, Clone, Copy)]
pub struct ClassSurface {
    pub assd: Option<f64>,
    pub hd95: Option<f64>,
}

fn check_same_extent(a: &Mask, b: &Mask) -> Result<usize> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::Shape(format!(
            "mask extents {}x{} vs {}x{}",
            a.h, a.w, b.h, b.w
        )));
    }
    Ok(a.classes.max(b.classes))
}

/// Per-class Dice and IoU between predicted and ground-truth masks.
pub fn region_metrics(pred: &Mask, gt: &Mask) -> Result<Vec<ClassRegion>> {
    let classes = check_same_extent(pred, gt)?;
    let mut out = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut inter = 0usize;
        let mut np = 0usize;
        let mut ng = 0usize;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            let ip = p as usize == c;
            let ig = g as usize == c;
            np += ip as usize;
            ng += ig as usize;
            inter += (ip && ig) as usize;
        }
        if np == 0 && ng == 0 {
            out.push(ClassRegion {
                dice: 100.0,
                iou: 100.0,
                both_empty: true,
            });
        } else {
            let union = np + ng - inter;
            out.push(ClassRegion {
                dice: 100.0 * 2.0 * inter as f64 / (np + ng) as f64,
                iou: 100.0 * inter as f64 / union as f64,
                both_empty: false,
            });
        }
    }
    Ok(out)
}

/// Boundary pixels of `class`: mask pixels whose 4-neighborhood leaves the
/// class (pixels on the image border count as boundary).
fn boundary_pixels(m: &Mask, class: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let at = |y: isize, x: isize| -> bool {
        if y < 0 || x < 0 || y >= m.h as isize || x >= m.w as isize {
            return false;
        }
        m.labels[y as usize * m.w + x as usize] as usize == class
    };
    for y in 0..m.h {
        for x in 0..m.w {
            if m.labels[y * m.w + x] as usize != class {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if !at(yi - 1, xi) || !at(yi + 1, xi) || !at(yi, xi - 1) || !at(yi, xi + 1) {
                out.push((y, x));
            }
        }
    }
    out
}

fn directed_distances(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(ay, ax)| {
            let mut best = u64::MAX;
            for &(by, bx) in to {
                let dy = ay as i64 - by as i64;
                let dx = ax as i64 - bx as i64;
                let d2 = (dy * dy + dx * dx) as u64;
                if d2 < best {
                    best = d2;
                }
            }
            (best as f64).sqrt()
        })
        .collect()
}

/// Percentile with linear interpolation on the sorted values
/// (rank = q * (n - 1)).
pub fn percentile_linear(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        values[lo]
    } else {
        let frac = rank - lo as f64;
        values[lo] + frac * (values[hi] - values[lo])
    }
}

/// Per-class ASSD and HD95 between boundary sets. ASSD is the mean of the
/// two directed average surface distances; HD95 is the 95th percentile of
/// the pooled directed distances from both directions.
pub fn surface_metrics(pred: &Mask, gt: &Mask) -> Result<Vec<ClassSurface>> {
    let classes = check_same_extent(pred, gt)?;
    let mut out = Vec::with_capacity(classes);
    for c in 0..classes {
        let bp = boundary_pixels(pred, c);
        let bg = boundary_pixels(gt, c);
        if bp.is_empty() || bg.is_empty() {
            out.push(ClassSurface {
                assd: None,
                hd95: None,
            });
            continue;
        }
        let d_pg = directed_distances(&bp, &bg);
        let d_gp = directed_distances(&bg, &bp);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let assd = 0.5 * (mean(&d_pg) + mean(&d_gp));
        let mut pooled: Vec<f64> = d_pg.iter().chain(d_gp.iter()).copied().collect();
        let hd95 = percentile_linear(&mut pooled, 0.95);
        out.push(ClassSurface {
            assd: Some(assd),
            hd95: Some(hd95),
        });
    }
    Ok(out)
}

/// Aggregated metrics over an evaluation split: per class (index 0 is
/// background) and means over the non-background classes. Undefined surface
/// entries are excluded from means and counted in the flags.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub classes: usize,
    pub samples: usize,
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    pub assd: Vec<Option<f64>>,
    pub hd95: Vec<Option<f64>>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mean_assd: Option<f64>,
    pub mean_hd95: Option<f64>,
    /// Per class: samples where both masks were empty (scored 100).
    pub both_empty_flags: Vec<usize>,
    /// Per class: samples where surface distances were undefined.
    pub surface_undefined_flags: Vec<usize>,
}

/// Streaming builder for [`MetricReport`].
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    classes: usize,
    samples: usize,
    dice_sum: Vec<f64>,
    iou_sum: Vec<f64>,
    assd_sum: Vec<f64>,
    assd_n: Vec<usize>,
    hd95_sum: Vec<f64>,
    hd95_n: Vec<usize>,
    both_empty: Vec<usize>,
    surface_undefined: Vec<usize>,
}

impl MetricAccumulator {
    pub fn new(classes: usize) -> Self {
        MetricAccumulator {
            classes,
            samples: 0,
            dice_sum: vec![0.0; classes],
            iou_sum: vec![0.0; classes],
            assd_sum: vec![0.0; classes],
            assd_n: vec![0; classes],
            hd95_sum: vec![0.0; classes],
            hd95_n: vec![0; classes],
            both_empty: vec![0; classes],
            surface_undefined: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &Mask, gt: &Mask) -> Result<()> {
        let region = region_metrics(pred, gt)?;
        let surface = surface_metrics(pred, gt)?;
        self.samples += 1;
        for c in 0..self.classes {
            self.dice_sum[c] += region[c].dice;
            self.iou_sum[c] += region[c].iou;
            if region[c].both_empty {
                self.both_empty[c] += 1;
            }
            match (surface[c].assd, surface[c].hd95) {
                (Some(a), Some(h)) => {
                    self.assd_sum[c] += a;
                    self.assd_n[c] += 1;
                    self.hd95_sum[c] += h;
                    self.hd95_n[c] += 1;
                }
                _ => self.surface_undefined[c] += 1,
            }
        }
        Ok(())
    }

    pub fn finish(self) -> MetricReport {
        let n = self.samples.max(1) as f64;
        let dice: Vec<f64> = self.dice_sum.iter().map(|s| s / n).collect();
        let iou: Vec<f64> = self.iou_sum.iter().map(|s| s / n).collect();
        let assd: Vec<Option<f64>> = self
            .assd_sum
            .iter()
            .zip(&self.assd_n)
            .map(|(s, &k)| (k > 0).then(|| s / k as f64))
            .collect();
        let hd95: Vec<Option<f64>> = self
            .hd95_sum
            .iter()
            .zip(&self.hd95_n)
            .map(|(s, &k)| (k > 0).then(|| s / k as f64))
            .collect();
        let fg = 1..self.classes;
        let mean_over = |v: &[f64]| {
            let vals: Vec<f64> = fg.clone().map(|c| v[c]).collect();
            vals.iter().sum::<f64>() / vals.len().max(1) as f64
        };
        let mean_opt = |v: &[Option<f64>]| {
            let vals: Vec<f64> = fg.clone().filter_map(|c| v[c]).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        MetricReport {
            classes: self.classes,
            samples: self.samples,
            mean_dice: mean_over(&dice),
            mean_iou: mean_over(&iou),
            mean_assd: mean_opt(&assd),
            mean_hd95: mean_opt(&hd95),
            dice,
            iou,
            assd,
            hd95,
            both_empty_flags: self.both_empty,
            surface_undefined_flags: self.surface_undefined,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(classes: usize, h: usize, w: usize, labels: &[u8]) -> Mask {
        Mask::new(classes, h, w, labels.to_vec()).unwrap()
    }

    #[test]
    fn mask_rejects_out_of_range_labels() {
        let e = Mask::new(2, 1, 2, vec![0, 5]).unwrap_err();
        assert!(matches!(e, Error::LabelRange { found: 5, classes: 2 }));
    }

    #[test]
    fn one_hot_sums_to_one_per_pixel() {
        let m = mask(3, 2, 2, &[0, 1, 2, 1]);
        let oh = m.one_hot().to_vec();
        for px in 0..4 {
            let s: f32 = (0..3).map(|c| oh[c * 4 + px]).sum();
            assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn identical_masks_score_perfect() {
        let m = mask(2, 3, 3, &[0, 0, 0, 0, 1, 1, 0, 1, 1]);
        let r = region_metrics(&m, &m).unwrap();
        assert_eq!(r[1].dice, 100.0);
        assert_eq!(r[1].iou, 100.0);
        let s = surface_metrics(&m, &m).unwrap();
        assert_eq!(s[1].assd, Some(0.0));
        assert_eq!(s[1].hd95, Some(0.0));
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let a = mask(2, 1, 4, &[1, 1, 0, 0]);
        let b = mask(2, 1, 4, &[0, 0, 1, 1]);
        let r = region_metrics(&a, &b).unwrap();
        assert_eq!(r[1].dice, 0.0);
        assert_eq!(r[1].iou, 0.0);
    }

    #[test]
    fn half_overlap_region_scores() {
        // |P| = |G| = 4, overlap 2: dice 50%, iou 33.33%.
        let p = mask(2, 2, 4, &[1, 1, 1, 1, 0, 0, 0, 0]);
        let g = mask(2, 2, 4, &[0, 0, 1, 1, 1, 1, 0, 0]);
        let r = region_metrics(&p, &g).unwrap();
        assert!((r[1].dice - 50.0).abs() < 1e-12);
        assert!((r[1].iou - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn both_empty_class_is_flagged_perfect() {
        let a = mask(3, 1, 2, &[0, 1]);
        let b = mask(3, 1, 2, &[1, 0]);
        let r = region_metrics(&a, &b).unwrap();
        assert!(r[2].both_empty);
        assert_eq!(r[2].dice, 100.0);
    }

    #[test]
    fn single_pixels_three_apart() {
        let mut la = vec![0u8; 8];
        la[1] = 1;
        let mut lb = vec![0u8; 8];
        lb[4] = 1;
        let a = mask(2, 1, 8, &la);
        let b = mask(2, 1, 8, &lb);
        let s = surface_metrics(&a, &b).unwrap();
        assert_eq!(s[1].assd, Some(3.0));
        assert_eq!(s[1].hd95, Some(3.0));
    }

    #[test]
    fn one_side_empty_is_undefined() {
        let a = mask(2, 1, 4, &[0, 0, 0, 0]);
        let b = mask(2, 1, 4, &[0, 1, 0, 0]);
        let s = surface_metrics(&a, &b).unwrap();
        assert_eq!(s[1].assd, None);
        assert_eq!(s[1].hd95, None);
    }

    #[test]
    fn metrics_are_symmetric() {
        let a = mask(2, 3, 3, &[1, 1, 0, 1, 0, 0, 0, 0, 0]);
        let b = mask(2, 3, 3, &[0, 1, 1, 0, 0, 1, 0, 0, 0]);
        let r1 = region_metrics(&a, &b).unwrap();
        let r2 = region_metrics(&b, &a).unwrap();
        assert_eq!(r1[1].dice, r2[1].dice);
        assert_eq!(r1[1].iou, r2[1].iou);
        let s1 = surface_metrics(&a, &b).unwrap();
        let s2 = surface_metrics(&b, &a).unwrap();
        assert_eq!(s1[1].assd, s2[1].assd);
        assert_eq!(s1[1].hd95, s2[1].hd95);
    }

    #[test]
    fn dice_equals_two_iou_over_one_plus_iou() {
        let a = mask(2, 2, 4, &[1, 1, 1, 0, 0, 1, 0, 0]);
        let b = mask(2, 2, 4, &[1, 0, 1, 1, 0, 0, 1, 0]);
        let r = region_metrics(&a, &b).unwrap();
        let (d, i) = (r[1].dice / 100.0, r[1].iou / 100.0);
        assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
        assert!(r[1].dice >= r[1].iou);
    }

    #[test]
    fn percentile_interpolates_linearly() {
        let mut v = vec![0.0, 10.0];
        assert_eq!(percentile_linear(&mut v, 0.95), 9.5);
        let mut v = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile_linear(&mut v, 0.5), 3.0);
    }

    #[test]
    fn accumulator_averages_per_sample_metrics() {
        let a = mask(2, 1, 4, &[1, 1, 0, 0]);
        let b = mask(2, 1, 4, &[1, 0, 0, 0]);
        let mut acc = MetricAccumulator::new(2);
        acc.add(&a, &a).unwrap();
        acc.add(&a, &b).unwrap();
        let rep = acc.finish();
        let d2 = region_metrics(&a, &b).unwrap()[1].dice;
        assert!((rep.dice[1] - (100.0 + d2) / 2.0).abs() < 1e-9);
        assert_eq!(rep.samples, 2);
    }
}
