//! Evaluation: per-class IoU maximized over score thresholds, mIoU,
//! argmax decoding and report output.

mod flops;

pub use flops::{count_flops, count_layers, parse_layers, FlopBudget, Layer, StageFlops};

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::netpbm::{quantize, Image8};
use crate::tensor::Tensor;

/// `{0.05, 0.10, ..., 0.95}`.
pub fn default_thresholds() -> Vec<f64> {
    (1..=19).map(|k| k as f64 / 20.0).collect()
}

/// Every distinct score plus one value above the maximum, ascending, so
/// that every achievable prediction set (including the empty one) is tried.
pub fn exhaustive_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = scores.to_vec();
    t.sort_by(f64::total_cmp);
    t.dedup();
    let top = t.last().copied().unwrap_or(0.0);
    t.push(top.next_up());
    t
}

/// Intersection and union counts per threshold, accumulated over any
/// number of maps so the IoU is pooled over a whole dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSweep {
    thresholds: Vec<f64>,
    inter: Vec<u64>,
    union: Vec<u64>,
}

impl ThresholdSweep {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::Invalid("threshold list is empty".into()));
        }
        if thresholds.iter().any(|t| t.is_nan()) {
            return Err(Error::Invalid("threshold list contains NaN".into()));
        }
        let n = thresholds.len();
        Ok(ThresholdSweep { thresholds, inter: vec![0; n], union: vec![0; n] })
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// Adds one map. `probs` in `[0, 1]`, `gt` in `{0, 1}`.
    pub fn add(&mut self, probs: &[f64], gt: &[f64]) -> Result<()> {
        if probs.len() != gt.len() {
            return Err(Error::shape("iou", format!("{} scores vs {} labels", probs.len(), gt.len())));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Invalid(format!("score {p} outside [0, 1]")));
        }
        if let Some(g) = gt.iter().find(|g| **g != 0.0 && **g != 1.0) {
            return Err(Error::Invalid(format!("label {g} is not binary")));
        }
        for (k, &t) in self.thresholds.iter().enumerate() {
            let (mut i, mut u) = (0, 0);
            for (&p, &g) in probs.iter().zip(gt) {
                let (pred, pos) = (p >= t, g == 1.0);
                i += u64::from(pred && pos);
                u += u64::from(pred || pos);
            }
            self.inter[k] += i;
            self.union[k] += u;
        }
        Ok(())
    }

    /// Adds the counts of another sweep over the same thresholds.
    pub fn merge(&mut self, other: &ThresholdSweep) -> Result<()> {
        if self.thresholds != other.thresholds {
            return Err(Error::Invalid("merging sweeps over different thresholds".into()));
        }
        for k in 0..self.inter.len() {
            self.inter[k] += other.inter[k];
            self.union[k] += other.union[k];
        }
        Ok(())
    }

    /// IoU per threshold; an empty union counts as a perfect match.
    pub fn ious(&self) -> Vec<f64> {
        self.inter
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
            .collect()
    }

    /// `(iou, threshold)` of the best threshold, ties going to the lowest.
    pub fn best(&self) -> (f64, f64) {
        let mut best: Option<(f64, f64)> = None;
        for (iou, &t) in self.ious().into_iter().zip(&self.thresholds) {
            best = match best {
                Some((bi, bt)) if bi > iou || (bi == iou && bt <= t) => Some((bi, bt)),
                _ => Some((iou, t)),
            };
        }
        best.expect("non-empty thresholds")
    }
}

/// Best IoU of one binary map over `thresholds`, with its threshold.
pub fn class_iou_best_threshold(probs: &[f64], gt: &[f64], thresholds: &[f64]) -> Result<(f64, f64)> {
    let mut sweep = ThresholdSweep::new(thresholds.to_vec())?;
    sweep.add(probs, gt)?;
    Ok(sweep.best())
}

pub fn miou(per_class: &[f64]) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::Invalid("mIoU of zero classes".into()));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Per-pixel class index of `[S, H, W]` scores, ties to the lowest class.
pub fn argmax_map(probs: &Tensor) -> Result<Vec<usize>> {
    let [s, h, w] = <[usize; 3]>::try_from(probs.shape())
        .map_err(|_| Error::shape("argmax_map", format!("expected [S, H, W], got {:?}", probs.shape())))?;
    if s == 0 {
        return Err(Error::shape("argmax_map", "zero classes"));
    }
    let d = probs.data();
    let plane = h * w;
    Ok((0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..s {
                if d[c * plane + p] > d[best * plane + p] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub ious: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub miou: f64,
}

impl EvalReport {
    pub fn from_sweeps(classes: &[&str], sweeps: &[ThresholdSweep]) -> Result<Self> {
        if classes.len() != sweeps.len() {
            return Err(Error::Invalid(format!("{} class names for {} sweeps", classes.len(), sweeps.len())));
        }
        let (ious, thresholds): (Vec<f64>, Vec<f64>) = sweeps.iter().map(ThresholdSweep::best).unzip();
        let miou = miou(&ious)?;
        Ok(EvalReport { classes: classes.iter().map(|s| s.to_string()).collect(), ious, thresholds, miou })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,best_threshold,iou\n");
        self.rows(&mut s, "");
        s
    }

    fn rows(&self, s: &mut String, prefix: &str) {
        for ((c, t), iou) in self.classes.iter().zip(&self.thresholds).zip(&self.ious) {
            let _ = writeln!(s, "{prefix}{c},{t},{iou}");
        }
        let _ = writeln!(s, "{prefix}mIoU,,{}", self.miou);
    }
}

/// One block of rows per noise level, prefixed with the sigma column.
pub fn noise_sweep_csv(blocks: &[(f64, EvalReport)]) -> String {
    let mut s = String::from("sigma,class,best_threshold,iou\n");
    for (sigma, r) in blocks {
        r.rows(&mut s, &format!("{sigma},"));
    }
    s
}

/// Display colors of the argmax map, background last.
pub const CLASS_COLORS: [[u8; 3]; 5] = [[128, 64, 128], [244, 35, 232], [250, 170, 30], [0, 0, 142], [0, 0, 0]];

/// Writes one graymap per class plane of `[S, H, W]` probabilities and a
/// color pixmap of the argmax map to `dir/<stem>_<class>.pgm` and
/// `dir/<stem>_argmax.ppm`. Pixels whose best score is below
/// `background_below` are painted with the background color.
pub fn dump_maps(dir: &Path, stem: &str, classes: &[&str], probs: &Tensor, background_below: f64) -> Result<()> {
    let [s, h, w] = <[usize; 3]>::try_from(probs.shape())
        .map_err(|_| Error::shape("dump_maps", format!("expected [S, H, W], got {:?}", probs.shape())))?;
    if classes.len() != s {
        return Err(Error::Invalid(format!("{} class names for {s} planes", classes.len())));
    }
    let plane = h * w;
    for (c, name) in classes.iter().enumerate() {
        let data = probs.data()[c * plane..(c + 1) * plane].iter().map(|&v| quantize(v)).collect();
        Image8::new(w, h, 1, data)?.write(&dir.join(format!("{stem}_{name}.pgm")))?;
    }
    let arg = argmax_map(probs)?;
    let bg = CLASS_COLORS[CLASS_COLORS.len() - 1];
    let mut rgb = Vec::with_capacity(plane * 3);
    for (p, &c) in arg.iter().enumerate() {
        let color = if probs.data()[c * plane + p] < background_below { bg } else { CLASS_COLORS[c % (CLASS_COLORS.len() - 1)] };
        rgb.extend_from_slice(&color);
    }
    Image8::new(w, h, 3, rgb)?.write(&dir.join(format!("{stem}_argmax.ppm")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_maps_and_hand_example() {
        let gt: Vec<f64> = (0..16).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        assert_eq!(class_iou_best_threshold(&gt, &gt, &default_thresholds()).unwrap(), (1.0, 0.05));
        let half: Vec<f64> = (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect();
        let uniform = vec![0.5; 16];
        assert_eq!(class_iou_best_threshold(&uniform, &half, &[0.4, 0.6]).unwrap(), (0.5, 0.4));
        assert!(class_iou_best_threshold(&uniform, &half, &[]).is_err());
        assert!(class_iou_best_threshold(&[1.5], &[1.0], &[0.5]).is_err());
        assert!(class_iou_best_threshold(&[0.5], &[0.5], &[0.5]).is_err());
        // both empty
        assert_eq!(class_iou_best_threshold(&[0.1, 0.2], &[0.0, 0.0], &[0.5]).unwrap(), (1.0, 0.5));
    }

    fn brute_force(probs: &[f64], gt: &[f64]) -> f64 {
        let mut best = 0.0f64;
        let mut cands: Vec<f64> = probs.to_vec();
        cands.push(f64::INFINITY);
        for t in cands {
            let i = probs.iter().zip(gt).filter(|(p, g)| **p >= t && **g == 1.0).count();
            let u = probs.iter().zip(gt).filter(|(p, g)| **p >= t || **g == 1.0).count();
            best = best.max(if u == 0 { 1.0 } else { i as f64 / u as f64 });
        }
        best
    }

    #[test]
    fn exhaustive_sweep_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let probs: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
            let gt: Vec<f64> = (0..64).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect();
            let (iou, _) = class_iou_best_threshold(&probs, &gt, &exhaustive_thresholds(&probs)).unwrap();
            assert_eq!(iou, brute_force(&probs, &gt));
            let (grid, _) = class_iou_best_threshold(&probs, &gt, &default_thresholds()).unwrap();
            assert!(grid <= iou);
        }
    }

    #[test]
    fn miou_and_argmax() {
        assert_eq!(miou(&[1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(miou(&[0.3]).unwrap(), 0.3);
        assert!(miou(&[]).is_err());
        let onehot = Tensor::from_fn([3, 2, 2], |i| if i / 4 == (i % 4) % 3 { 1.0 } else { 0.0 });
        let m = argmax_map(&onehot).unwrap();
        for (p, &c) in m.iter().enumerate() {
            assert_eq!(onehot.data()[c * 4 + p], 1.0);
        }
        assert_eq!(argmax_map(&Tensor::full([3, 2, 2], 0.2)).unwrap(), vec![0; 4]);
        assert!(argmax_map(&Tensor::zeros([2, 2])).is_err());
    }

    #[test]
    fn pooled_report_and_csv() {
        let mut a = ThresholdSweep::new(vec![0.5]).unwrap();
        a.add(&[0.9, 0.9], &[1.0, 0.0]).unwrap();
        a.add(&[0.9, 0.1], &[1.0, 1.0]).unwrap();
        // pooled: inter 2, union 4
        assert_eq!(a.best(), (0.5, 0.5));
        let mut b = ThresholdSweep::new(vec![0.5]).unwrap();
        b.add(&[0.9], &[1.0]).unwrap();
        let r = EvalReport::from_sweeps(&["x", "y"], &[a, b]).unwrap();
        assert_eq!(r.miou, 0.75);
        assert_eq!(r.to_csv(), "class,best_threshold,iou\nx,0.5,0.5\ny,0.5,1\nmIoU,,0.75\n");
        assert!(noise_sweep_csv(&[(0.1, r)]).contains("0.1,mIoU,,0.75"));

        let dir = tempfile::tempdir().unwrap();
        let probs = Tensor::from_fn([2, 2, 3], |i| i as f64 / 12.0);
        dump_maps(dir.path(), "s0", &["x", "y"], &probs, 0.55).unwrap();
        let img = Image8::read(&dir.path().join("s0_argmax.ppm")).unwrap();
        assert_eq!(&img.data[..3], &CLASS_COLORS[4]);
        assert_eq!(&img.data[15..], &CLASS_COLORS[1]);
        assert_eq!(Image8::read(&dir.path().join("s0_y.pgm")).unwrap().data.len(), 6);
    }
}
