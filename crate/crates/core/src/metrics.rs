//! Losses over class-index maps and IoU reporting.

use std::fmt::Write as _;

use crate::diff::{Graph, Var};
use crate::error::{Error, Result};
use crate::pnm::GrayImage;
use crate::scalar::Scalar;

/// Class-index raster (one class per pixel).
pub type ClassMap = GrayImage;

pub const FOCAL_GAMMA: f64 = 2.0;

fn check_target<T: Scalar>(g: &Graph<T>, logits: Var, target: &ClassMap) -> Result<()> {
    let s = g.shape(logits);
    if s.len() != 3 || s[1] != target.height || s[2] != target.width {
        return Err(Error::shape("loss", format!("[C, {}, {}]", target.height, target.width), format!("{s:?}")));
    }
    Ok(())
}

/// Mean pixel cross-entropy.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, target: &ClassMap) -> Result<Var> {
    check_target(g, logits, target)?;
    g.cross_entropy(logits, &target.data)
}

/// Mean pixel focal loss `-(1 - p_t)^gamma log p_t`.
pub fn focal_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, target: &ClassMap, gamma: f64) -> Result<Var> {
    check_target(g, logits, target)?;
    g.focal_loss(logits, &target.data, gamma)
}

/// Nearest-neighbour downscale by an integer factor, taking the sample at
/// offset `factor / 2` inside each block.
pub fn downscale_nearest(map: &ClassMap, factor: usize) -> Result<ClassMap> {
    if factor == 0 || map.width % factor != 0 || map.height % factor != 0 {
        return Err(Error::InvalidArgument(format!("{}x{} map is not divisible by {factor}", map.width, map.height)));
    }
    let (w, h) = (map.width / factor, map.height / factor);
    let mut out = ClassMap::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, map.get(x * factor + factor / 2, y * factor + factor / 2));
        }
    }
    Ok(out)
}

/// Per-pixel argmax of logits `[C, H, W]`.
pub fn argmax_map<T: Scalar>(logits: &crate::diff::Tensor<T>) -> Result<ClassMap> {
    let s = logits.shape();
    if s.len() != 3 || s[0] == 0 || s[0] > 256 {
        return Err(Error::shape("argmax_map", "[C, H, W] with 1..=256 classes", format!("{s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let v = logits.data();
    let mut out = ClassMap::new(w, h);
    for p in 0..h * w {
        let mut best = 0;
        for k in 1..c {
            if v[k * h * w + p] > v[best * h * w + p] {
                best = k;
            }
        }
        out.data[p] = best as u8;
    }
    Ok(out)
}

/// Pixel confusion counts, `counts[target * C + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &ClassMap, target: &ClassMap) -> Result<()> {
        if pred.width != target.width || pred.height != target.height {
            return Err(Error::shape(
                "iou",
                format!("{}x{}", target.width, target.height),
                format!("{}x{}", pred.width, pred.height),
            ));
        }
        let c = self.classes;
        for (&p, &t) in pred.data.iter().zip(&target.data) {
            let (p, t) = (p as usize, t as usize);
            if p >= c || t >= c {
                return Err(Error::InvalidArgument(format!("class index {} out of range for {c} classes", p.max(t))));
            }
            self.counts[t * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn report(&self, excluded: &[usize]) -> IoUReport {
        let c = self.classes;
        let mut per_class = Vec::with_capacity(c);
        let mut pixel_counts = Vec::with_capacity(c);
        for k in 0..c {
            let tp = self.counts[k * c + k];
            let gt: u64 = self.counts[k * c..(k + 1) * c].iter().sum();
            let pr: u64 = (0..c).map(|t| self.counts[t * c + k]).sum();
            let union = gt + pr - tp;
            per_class.push(if union == 0 { 1.0 } else { tp as f64 / union as f64 });
            pixel_counts.push(gt);
        }
        let mean = per_class.iter().sum::<f64>() / c as f64;
        let kept: Vec<usize> = (0..c).filter(|k| !excluded.contains(k)).collect();
        let weight: u64 = kept.iter().map(|&k| pixel_counts[k]).sum();
        let freq_weighted = if weight > 0 {
            kept.iter().map(|&k| pixel_counts[k] as f64 * per_class[k]).sum::<f64>() / weight as f64
        } else if kept.is_empty() {
            mean
        } else {
            kept.iter().map(|&k| per_class[k]).sum::<f64>() / kept.len() as f64
        };
        IoUReport {
            per_class,
            mean,
            freq_weighted,
            excluded: excluded.to_vec(),
            pixel_counts,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IoUReport {
    pub per_class: Vec<f64>,
    pub mean: f64,
    pub freq_weighted: f64,
    pub excluded: Vec<usize>,
    /// Ground-truth pixels per class.
    pub pixel_counts: Vec<u64>,
}

/// IoU of a single pair of maps.
pub fn iou_report(pred: &ClassMap, target: &ClassMap, classes: usize, excluded: &[usize]) -> Result<IoUReport> {
    let mut c = Confusion::new(classes);
    c.add(pred, target)?;
    Ok(c.report(excluded))
}

impl IoUReport {
    pub fn csv_header(class_names: &[&str]) -> String {
        let mut s = String::from("sequence,task");
        for n in class_names {
            let _ = write!(s, ",iou_{n}");
        }
        s.push_str(",mean_iou,freq_weighted_iou");
        s
    }

    pub fn csv_row(&self, sequence: &str, task: &str) -> String {
        let mut s = format!("{sequence},{task}");
        for v in &self.per_class {
            let _ = write!(s, ",{v:.6}");
        }
        let _ = write!(s, ",{:.6},{:.6}", self.mean, self.freq_weighted);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;

    fn map(w: usize, h: usize, v: &[u8]) -> ClassMap {
        ClassMap {
            width: w,
            height: h,
            data: v.to_vec(),
        }
    }

    #[test]
    fn hand_enumerated_two_by_two() {
        let r = iou_report(&map(2, 2, &[0, 0, 1, 1]), &map(2, 2, &[0, 1, 1, 1]), 2, &[]).unwrap();
        assert_eq!(r.per_class, vec![0.5, 2.0 / 3.0]);
        assert!((r.mean - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn identical_and_disjoint() {
        let m = map(3, 1, &[0, 2, 1]);
        let r = iou_report(&m, &m, 4, &[0]).unwrap();
        assert!(r.per_class.iter().all(|&v| v == 1.0));
        let r = iou_report(&map(2, 1, &[1, 1]), &map(2, 1, &[2, 2]), 3, &[]).unwrap();
        assert_eq!(r.per_class, vec![1.0, 0.0, 0.0]);
        assert!(iou_report(&map(2, 1, &[0, 0]), &map(1, 2, &[0, 0]), 2, &[]).is_err());
    }

    #[test]
    fn background_exclusion_changes_weighting() {
        let target = map(4, 1, &[0, 0, 0, 1]);
        let pred = map(4, 1, &[0, 0, 1, 1]);
        let incl = iou_report(&pred, &target, 2, &[]).unwrap();
        let excl = iou_report(&pred, &target, 2, &[0]).unwrap();
        assert!((incl.freq_weighted - (3.0 * (2.0 / 3.0) + 0.5) / 4.0).abs() < 1e-15);
        assert_eq!(excl.freq_weighted, 0.5);
    }

    #[test]
    fn focal_zero_gamma_equals_ce() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_fn(&[3, 2, 2], |i| (i as f64 * 1.3).sin() * 2.0));
        let t = map(2, 2, &[0, 2, 1, 1]);
        let ce = cross_entropy(&mut g, z, &t).unwrap();
        let fl = focal_loss(&mut g, z, &t, 0.0).unwrap();
        assert!((g.value(ce).data()[0] - g.value(fl).data()[0]).abs() < 1e-15);
        let f2 = focal_loss(&mut g, z, &t, 2.0).unwrap();
        assert!(g.value(f2).data()[0] < g.value(ce).data()[0]);
    }

    #[test]
    fn downscale_and_argmax() {
        let m = map(4, 2, &[0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(downscale_nearest(&m, 2).unwrap().data, vec![5, 7]);
        let t = Tensor::<f32>::from_f64(&[2, 1, 2], &[0.0, 5.0, 1.0, 2.0]).unwrap();
        assert_eq!(argmax_map(&t).unwrap().data, vec![1, 0]);
    }
}
