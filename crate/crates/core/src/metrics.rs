//! Confusion counting, IoU and Dice.
//!
//! The headline numbers use dataset-level accumulation: one tally over all
//! pixels of all images, then per-class ratios, then an unweighted mean over
//! classes that occur at all. Classes with `tp + fp + fn = 0` are absent and
//! excluded from the means.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::class_name;
use crate::error::{Error, Result};
use crate::mask::Mask;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    #[serde(rename = "fn")]
    pub fn_: Vec<u64>,
    pub pixels: u64,
    pub samples: u64,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        ConfusionCounts {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            pixels: 0,
            samples: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    /// Adds one (prediction, ground truth) pair.
    pub fn accumulate(&mut self, pred: &[u32], gt: &Mask) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Argument(format!(
                "prediction has {} pixels, ground truth has {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.num_classes();
        gt.check_classes(k)?;
        if let Some(c) = pred.iter().find(|&&c| c as usize >= k) {
            return Err(Error::Argument(format!("predicted class {c} out of range for {k} classes")));
        }
        for (&p, &g) in pred.iter().zip(gt.data()) {
            if p == g {
                self.tp[p as usize] += 1;
            } else {
                self.fp[p as usize] += 1;
                self.fn_[g as usize] += 1;
            }
        }
        self.pixels += pred.len() as u64;
        self.samples += 1;
        Ok(())
    }

    /// Elementwise sum; associative and commutative.
    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::Argument(format!(
                "cannot merge counts over {} and {} classes",
                self.num_classes(),
                other.num_classes()
            )));
        }
        for c in 0..self.num_classes() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        self.pixels += other.pixels;
        self.samples += other.samples;
        Ok(())
    }

    fn present(&self, c: usize) -> bool {
        self.tp[c] + self.fp[c] + self.fn_[c] > 0
    }
}

/// `tp / (tp + fp + fn)` per class, `None` for absent classes.
pub fn iou_per_class(counts: &ConfusionCounts) -> Vec<Option<f64>> {
    (0..counts.num_classes())
        .map(|c| {
            counts.present(c).then(|| {
                counts.tp[c] as f64 / (counts.tp[c] + counts.fp[c] + counts.fn_[c]) as f64
            })
        })
        .collect()
}

/// `2 tp / (2 tp + fp + fn)` per class, `None` for absent classes.
pub fn dice_per_class(counts: &ConfusionCounts) -> Vec<Option<f64>> {
    (0..counts.num_classes())
        .map(|c| {
            counts.present(c).then(|| {
                2.0 * counts.tp[c] as f64 / (2 * counts.tp[c] + counts.fp[c] + counts.fn_[c]) as f64
            })
        })
        .collect()
}

/// Unweighted mean over present classes; 0 when nothing is present.
pub fn mean_present(values: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

pub fn mean_iou(per_class: &[Option<f64>]) -> f64 {
    mean_present(per_class)
}

pub fn dice_coefficient(counts: &ConfusionCounts) -> f64 {
    mean_present(&dice_per_class(counts))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// One confusion tally over the whole set.
    Dataset,
    /// Metrics per image, then averaged over images.
    PerImage,
}

/// Accumulates both aggregations in one pass.
#[derive(Clone, Debug)]
pub struct Evaluator {
    counts: ConfusionCounts,
    image_miou_sum: f64,
    image_dice_sum: f64,
}

impl Evaluator {
    pub fn new(num_classes: usize) -> Self {
        Evaluator {
            counts: ConfusionCounts::new(num_classes),
            image_miou_sum: 0.0,
            image_dice_sum: 0.0,
        }
    }

    pub fn add(&mut self, pred: &[u32], gt: &Mask) -> Result<()> {
        let mut one = ConfusionCounts::new(self.counts.num_classes());
        one.accumulate(pred, gt)?;
        self.image_miou_sum += mean_iou(&iou_per_class(&one));
        self.image_dice_sum += dice_coefficient(&one);
        self.counts.merge(&one)
    }

    pub fn counts(&self) -> &ConfusionCounts {
        &self.counts
    }

    pub fn report(&self) -> MetricsReport {
        let n = self.counts.samples.max(1) as f64;
        let mut r = MetricsReport::from_counts(&self.counts);
        r.per_image = Some(PerImageSummary {
            mean_iou: self.image_miou_sum / n,
            dice: self.image_dice_sum / n,
        });
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerImageSummary {
    pub mean_iou: f64,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: usize,
    pub name: String,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_iou: f64,
    pub dice: f64,
    pub num_samples: u64,
    pub per_class: Vec<ClassRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_image: Option<PerImageSummary>,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    pub fn from_counts(counts: &ConfusionCounts) -> Self {
        let iou = iou_per_class(counts);
        let dice = dice_per_class(counts);
        MetricsReport {
            mean_iou: mean_iou(&iou),
            dice: mean_present(&dice),
            num_samples: counts.samples,
            per_class: (0..counts.num_classes())
                .map(|c| ClassRow {
                    class: c,
                    name: class_name(c),
                    iou: iou[c],
                    dice: dice[c],
                })
                .collect(),
            per_image: None,
            counts: counts.clone(),
        }
    }

    pub fn value(&self, aggregation: Aggregation) -> (f64, f64) {
        match (aggregation, &self.per_image) {
            (Aggregation::PerImage, Some(p)) => (p.mean_iou, p.dice),
            _ => (self.mean_iou, self.dice),
        }
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        self.per_class.iter().map(|r| r.iou).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("metrics report: {e}")))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Aligned text table: one row per class, then the overall row.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let width = self.per_class.iter().map(|r| r.name.len()).max().unwrap_or(5).max(7);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>8}  {:>8}", "Class", "IoU", "Dice");
        let _ = writeln!(s, "{}", "-".repeat(width + 20));
        for r in &self.per_class {
            let _ = writeln!(s, "{:<width$}  {:>8}  {:>8}", r.name, fmt(r.iou), fmt(r.dice));
        }
        let _ = writeln!(s, "{}", "-".repeat(width + 20));
        let _ = writeln!(
            s,
            "{:<width$}  {:>8}  {:>8}",
            "Overall",
            format!("{:.4}", self.mean_iou),
            format!("{:.4}", self.dice)
        );
        if let Some(p) = &self.per_image {
            let _ = writeln!(
                s,
                "{:<width$}  {:>8}  {:>8}",
                "PerImage",
                format!("{:.4}", p.mean_iou),
                format!("{:.4}", p.dice)
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(h: usize, w: usize, v: Vec<u32>) -> Mask {
        Mask::new(h, w, v).unwrap()
    }

    #[test]
    fn perfect_and_total_confusion() {
        let gt = mask(2, 2, vec![0, 1, 2, 1]);
        let mut c = ConfusionCounts::new(3);
        c.accumulate(gt.data(), &gt).unwrap();
        assert!(c.fp.iter().chain(&c.fn_).all(|&v| v == 0));
        assert_eq!(iou_per_class(&c), vec![Some(1.0); 3]);
        assert_eq!(dice_coefficient(&c), 1.0);

        let gt = mask(3, 3, vec![1; 9]);
        let mut c = ConfusionCounts::new(2);
        c.accumulate(&[0; 9], &gt).unwrap();
        assert_eq!(c.fp[0], 9);
        assert_eq!(c.fn_[1], 9);
        assert_eq!(iou_per_class(&c), vec![Some(0.0), Some(0.0)]);
        assert_eq!(dice_coefficient(&c), 0.0);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let gt = mask(1, 2, vec![0, 0]);
        let mut c = ConfusionCounts::new(3);
        c.accumulate(&[0, 1], &gt).unwrap();
        let iou = iou_per_class(&c);
        assert_eq!(iou, vec![Some(0.5), Some(0.0), None]);
        assert_eq!(mean_iou(&iou), 0.25);
    }

    #[test]
    fn formula_examples() {
        let c = ConfusionCounts {
            tp: vec![3],
            fp: vec![1],
            fn_: vec![2],
            pixels: 0,
            samples: 1,
        };
        assert_eq!(iou_per_class(&c), vec![Some(0.5)]);
        let d = dice_per_class(&c)[0].unwrap();
        assert!((d - 6.0 / 9.0).abs() < 1e-15);
        assert!((d - 2.0 * 0.5 / 1.5).abs() < 1e-15);
        assert_eq!(mean_iou(&[Some(0.5), Some(1.0)]), 0.75);
        assert_eq!(mean_iou(&[None, Some(0.3)]), 0.3);
        let toy = [0.93, 0.85, 0.83, 0.60, 0.77, 0.91, 0.70, 0.88, 0.65, 0.79, 0.81];
        let want = toy.iter().sum::<f64>() / 11.0;
        let got = mean_iou(&toy.iter().map(|&v| Some(v)).collect::<Vec<_>>());
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_argument_error() {
        let gt = mask(2, 2, vec![0; 4]);
        let mut c = ConfusionCounts::new(2);
        assert!(matches!(c.accumulate(&[0; 3], &gt), Err(Error::Argument(_))));
        assert!(matches!(c.accumulate(&[0, 0, 0, 2], &gt), Err(Error::Argument(_))));
        assert!(c.merge(&ConfusionCounts::new(3)).is_err());
    }

    /// Independent oracle: a K×K confusion matrix built pixel by pixel.
    fn brute(pred: &[u32], gt: &[u32], k: usize) -> (Vec<u64>, Vec<u64>, Vec<u64>) {
        let mut m = vec![vec![0u64; k]; k];
        for i in 0..pred.len() {
            m[gt[i] as usize][pred[i] as usize] += 1;
        }
        let tp = (0..k).map(|c| m[c][c]).collect();
        let fp = (0..k).map(|c| (0..k).filter(|&g| g != c).map(|g| m[g][c]).sum()).collect();
        let fn_ = (0..k).map(|c| (0..k).filter(|&p| p != c).map(|p| m[c][p]).sum()).collect();
        (tp, fp, fn_)
    }

    #[test]
    fn random_pairs_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let k = rng.random_range(2..6);
            let p: Vec<u32> = (0..64).map(|_| rng.random_range(0..k as u32)).collect();
            let g: Vec<u32> = (0..64).map(|_| rng.random_range(0..k as u32)).collect();
            let mut c = ConfusionCounts::new(k);
            c.accumulate(&p, &mask(8, 8, g.clone())).unwrap();
            let (tp, fp, fn_) = brute(&p, &g, k);
            assert_eq!((c.tp.clone(), c.fp.clone(), c.fn_.clone()), (tp, fp, fn_));
        }
    }

    #[test]
    fn evaluator_tracks_both_aggregations() {
        let mut e = Evaluator::new(2);
        e.add(&[0, 0, 1, 1], &mask(2, 2, vec![0, 0, 1, 1])).unwrap();
        e.add(&[0, 0, 0, 0], &mask(2, 2, vec![1, 1, 1, 1])).unwrap();
        let r = e.report();
        // image 1: mIoU 1; image 2: class0 0, class1 0 → 0
        assert_eq!(r.value(Aggregation::PerImage).0, 0.5);
        // pooled: tp0=2 fp0=4 fn0=0 → 1/3, tp1=2 fp1=0 fn1=4 → 1/3
        assert!((r.value(Aggregation::Dataset).0 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.num_samples, 2);
    }

    #[test]
    fn report_round_trips_and_table_has_k_rows() {
        let mut e = Evaluator::new(4);
        e.add(&[0, 1, 2, 2], &mask(2, 2, vec![0, 1, 2, 3])).unwrap();
        let r = e.report();
        let back = MetricsReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let table = r.to_table();
        for name in ["background", "organ", "instrument", "thread", "Overall"] {
            assert!(table.contains(name), "{table}");
        }
        assert_eq!(table.lines().count(), 4 + 5);
        let recomputed = mean_present(&back.per_class_iou());
        assert_eq!(recomputed, back.mean_iou);
    }

    proptest! {
        #[test]
        fn dice_iou_identity(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
            let c = ConfusionCounts { tp: vec![tp], fp: vec![fp], fn_: vec![fn_], pixels: 0, samples: 1 };
            match (iou_per_class(&c)[0], dice_per_class(&c)[0]) {
                (Some(i), Some(d)) => prop_assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12),
                (None, None) => prop_assert_eq!(tp + fp + fn_, 0),
                _ => prop_assert!(false, "presence disagrees"),
            }
        }

        #[test]
        fn correct_pixel_never_lowers_iou(tp in 0u64..100, fp in 0u64..100, fn_ in 0u64..100) {
            let c = ConfusionCounts { tp: vec![tp], fp: vec![fp], fn_: vec![fn_], pixels: 0, samples: 1 };
            let mut c2 = c.clone();
            c2.tp[0] += 1;
            let before = iou_per_class(&c)[0].unwrap_or(0.0);
            prop_assert!(iou_per_class(&c2)[0].unwrap() >= before);
        }

        #[test]
        fn accumulation_order_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs: Vec<(Vec<u32>, Mask)> = (0..5).map(|_| {
                let p = (0..16).map(|_| rng.random_range(0..3)).collect();
                let g = mask(4, 4, (0..16).map(|_| rng.random_range(0..3)).collect());
                (p, g)
            }).collect();
            let mut a = ConfusionCounts::new(3);
            for (p, g) in &pairs { a.accumulate(p, g).unwrap(); }
            let mut b = ConfusionCounts::new(3);
            for (p, g) in pairs.iter().rev() { b.accumulate(p, g).unwrap(); }
            prop_assert_eq!(a, b);
        }
    }
}
