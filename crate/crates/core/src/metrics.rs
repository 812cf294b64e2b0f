//! Confusion-matrix accumulation and the evaluation measures: mean IU,
//! pixel accuracy, mean accuracy, per-class IU.
//!
//! Counts are exact integers; only the final divisions are floating point.
//! Classes absent from both prediction and ground truth (empty union) are
//! excluded from the means and reported separately, since their IU is
//! undefined.

use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};

/// counts[g][p] = pixels of ground-truth class g predicted as p. Pixels
/// labeled `ignore_label` in the ground truth are never counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_cl: usize,
    ignore_label: u8,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_cl: usize, ignore_label: u8) -> ConfusionMatrix {
        ConfusionMatrix {
            n_cl,
            ignore_label,
            counts: vec![0; n_cl * n_cl],
        }
    }

    pub fn n_cl(&self) -> usize {
        self.n_cl
    }

    #[inline]
    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n_cl + pred]
    }

    /// Total pixels accumulated (non-ignored).
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Row sum t_i: ground-truth pixels of class i.
    pub fn gt_total(&self, i: usize) -> u64 {
        self.counts[i * self.n_cl..(i + 1) * self.n_cl].iter().sum()
    }

    /// Column sum: pixels predicted as class i.
    pub fn pred_total(&self, i: usize) -> u64 {
        (0..self.n_cl).map(|g| self.count(g, i)).sum()
    }

    /// Tally one prediction/ground-truth pair. Order of calls never affects
    /// the totals.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::shape(
                "confusion accumulate",
                &[gt.height(), gt.width()],
                &[pred.height(), pred.width()],
            ));
        }
        for (p, g) in pred.data().iter().zip(gt.data()) {
            if *g == self.ignore_label {
                continue;
            }
            let (p, g) = (usize::from(*p), usize::from(*g));
            if g >= self.n_cl {
                return Err(Error::Data(format!(
                    "ground-truth label {g} out of range for {} classes",
                    self.n_cl
                )));
            }
            if p >= self.n_cl {
                return Err(Error::Data(format!(
                    "predicted label {p} out of range for {} classes",
                    self.n_cl
                )));
            }
            self.counts[g * self.n_cl + p] += 1;
        }
        Ok(())
    }

    /// Elementwise merge; associative and commutative.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_cl != self.n_cl {
            return Err(Error::Config(format!(
                "merging confusion matrices of {} and {} classes",
                self.n_cl, other.n_cl
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class intersection over union: n_ii / (t_i + Σ_j n_ji − n_ii).
    /// `None` for classes with an empty union.
    pub fn per_class_iu(&self) -> Vec<Option<f64>> {
        (0..self.n_cl)
            .map(|i| {
                let n_ii = self.count(i, i);
                let union = self.gt_total(i) + self.pred_total(i) - n_ii;
                if union == 0 {
                    None
                } else {
                    Some(n_ii as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Mean IU over classes with non-empty union.
    pub fn mean_iu(&self) -> Result<f64> {
        let ius: Vec<f64> = self.per_class_iu().into_iter().flatten().collect();
        if ius.is_empty() {
            return Err(Error::Numeric(
                "mean IU undefined: every class has an empty union".into(),
            ));
        }
        Ok(ius.iter().sum::<f64>() / ius.len() as f64)
    }

    /// Σ n_ii / Σ t_i.
    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Numeric("pixel accuracy of an empty matrix".into()));
        }
        let correct: u64 = (0..self.n_cl).map(|i| self.count(i, i)).sum();
        Ok(correct as f64 / total as f64)
    }

    /// Mean over classes with t_i > 0 of n_ii / t_i.
    pub fn mean_accuracy(&self) -> Result<f64> {
        let mut accs = Vec::new();
        for i in 0..self.n_cl {
            let t_i = self.gt_total(i);
            if t_i > 0 {
                accs.push(self.count(i, i) as f64 / t_i as f64);
            }
        }
        if accs.is_empty() {
            return Err(Error::Numeric("mean accuracy of an empty matrix".into()));
        }
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// Classes excluded from mean IU (empty union).
    pub fn excluded_classes(&self) -> Vec<usize> {
        self.per_class_iu()
            .iter()
            .enumerate()
            .filter_map(|(i, iu)| iu.is_none().then_some(i))
            .collect()
    }

    pub fn report(&self) -> Result<MetricsReport> {
        Ok(MetricsReport {
            mean_iu: self.mean_iu()?,
            pixel_accuracy: self.pixel_accuracy()?,
            mean_accuracy: self.mean_accuracy()?,
            per_class_iu: self.per_class_iu(),
            excluded_classes: self.excluded_classes(),
        })
    }
}

/// The JSON evaluation report; `per_class_iu` holds null for classes with an
/// empty union.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_iu: f64,
    pub pixel_accuracy: f64,
    pub mean_accuracy: f64,
    pub per_class_iu: Vec<Option<f64>>,
    pub excluded_classes: Vec<usize>,
}

impl MetricsReport {
    /// CSV mirror of the JSON report: one metric per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("mean_iu,{}\n", self.mean_iu));
        out.push_str(&format!("pixel_accuracy,{}\n", self.pixel_accuracy));
        out.push_str(&format!("mean_accuracy,{}\n", self.mean_accuracy));
        for (i, iu) in self.per_class_iu.iter().enumerate() {
            match iu {
                Some(v) => out.push_str(&format!("iu_class_{i},{v}\n")),
                None => out.push_str(&format!("iu_class_{i},\n")),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn from_counts(n_cl: usize, counts: &[&[u64]]) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(n_cl, 255);
        for (g, row) in counts.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                cm.counts[g * n_cl + p] = c;
            }
        }
        cm
    }

    #[test]
    fn perfect_prediction_gives_all_ones() {
        let gt = LabelMap::from_fn(4, 4, |y, x| ((y * 4 + x) % 3) as u8);
        let mut cm = ConfusionMatrix::new(3, 255);
        cm.accumulate(&gt, &gt).unwrap();
        assert_eq!(cm.mean_iu().unwrap(), 1.0);
        assert_eq!(cm.pixel_accuracy().unwrap(), 1.0);
        assert_eq!(cm.mean_accuracy().unwrap(), 1.0);
    }

    #[test]
    fn diagonal_accumulation() {
        let gt = LabelMap::filled(4, 4, 2);
        let mut cm = ConfusionMatrix::new(3, 255);
        cm.accumulate(&gt, &gt).unwrap();
        assert_eq!(cm.count(2, 2), 16);
        assert_eq!(cm.total(), 16);
    }

    #[test]
    fn ignored_ground_truth_counts_nothing() {
        let gt = LabelMap::filled(4, 4, 255);
        let pred = LabelMap::filled(4, 4, 1);
        let mut cm = ConfusionMatrix::new(3, 255);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(cm.mean_iu().is_err());
    }

    #[test]
    fn hand_example_from_counts() {
        // counts = [[3,1],[2,4]]: IU_0 = 3/(4+5-3) = 0.5, IU_1 = 4/(6+5-4) = 4/7
        let cm = from_counts(2, &[&[3, 1], &[2, 4]]);
        let ius = cm.per_class_iu();
        assert!((ius[0].unwrap() - 0.5).abs() < 1e-15);
        assert!((ius[1].unwrap() - 4.0 / 7.0).abs() < 1e-15);
        assert!((cm.mean_iu().unwrap() - (0.5 + 4.0 / 7.0) / 2.0).abs() < 1e-15);
        assert!((cm.mean_iu().unwrap() - 0.535714).abs() < 1e-6);
        assert!((cm.pixel_accuracy().unwrap() - 0.7).abs() < 1e-15);
        assert!((cm.mean_accuracy().unwrap() - (0.75 + 4.0 / 6.0) / 2.0).abs() < 1e-15);
        assert!((cm.mean_accuracy().unwrap() - 0.708333).abs() < 1e-6);
    }

    #[test]
    fn disjoint_single_classes_give_zero_iu() {
        let gt = LabelMap::filled(3, 3, 0);
        let pred = LabelMap::filled(3, 3, 1);
        let mut cm = ConfusionMatrix::new(2, 255);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm.mean_iu().unwrap(), 0.0);
    }

    #[test]
    fn absent_classes_are_excluded_and_reported() {
        let gt = LabelMap::filled(2, 2, 0);
        let mut cm = ConfusionMatrix::new(4, 255);
        cm.accumulate(&gt, &gt).unwrap();
        assert_eq!(cm.excluded_classes(), vec![1, 2, 3]);
        assert_eq!(cm.mean_iu().unwrap(), 1.0); // only class 0 participates
        let report = cm.report().unwrap();
        assert_eq!(report.per_class_iu[1], None);
        assert!(report.to_csv().contains("iu_class_0,1\n"));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let gt = LabelMap::filled(2, 2, 0);
        let pred = LabelMap::filled(2, 3, 0);
        let mut cm = ConfusionMatrix::new(2, 255);
        assert!(cm.accumulate(&pred, &gt).is_err());
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let gt = LabelMap::filled(2, 2, 9);
        let pred = LabelMap::filled(2, 2, 0);
        let mut cm = ConfusionMatrix::new(3, 255);
        assert!(cm.accumulate(&pred, &gt).is_err());
    }

    /// Brute-force recomputation of all metrics from raw label maps: set
    /// arithmetic per class, no confusion matrix.
    fn brute_force(preds: &[LabelMap], gts: &[LabelMap], n_cl: usize) -> (f64, f64, f64) {
        let mut inter = vec![0u64; n_cl];
        let mut pred_ct = vec![0u64; n_cl];
        let mut gt_ct = vec![0u64; n_cl];
        let mut correct = 0u64;
        let mut total = 0u64;
        for (pm, gm) in preds.iter().zip(gts) {
            for (p, g) in pm.data().iter().zip(gm.data()) {
                if *g == 255 {
                    continue;
                }
                total += 1;
                gt_ct[usize::from(*g)] += 1;
                pred_ct[usize::from(*p)] += 1;
                if p == g {
                    correct += 1;
                    inter[usize::from(*g)] += 1;
                }
            }
        }
        let mut ius = Vec::new();
        let mut accs = Vec::new();
        for i in 0..n_cl {
            let union = gt_ct[i] + pred_ct[i] - inter[i];
            if union > 0 {
                ius.push(inter[i] as f64 / union as f64);
            }
            if gt_ct[i] > 0 {
                accs.push(inter[i] as f64 / gt_ct[i] as f64);
            }
        }
        (
            ius.iter().sum::<f64>() / ius.len() as f64,
            correct as f64 / total as f64,
            accs.iter().sum::<f64>() / accs.len() as f64,
        )
    }

    #[test]
    fn matches_brute_force_on_random_maps() {
        let mut s = Stream::named(7, "bf");
        let n_cl = 5;
        for _ in 0..100 {
            let gt = LabelMap::from_fn(8, 8, |_, _| {
                if s.below(10) == 0 {
                    255
                } else {
                    s.below(n_cl) as u8
                }
            });
            let pred = LabelMap::from_fn(8, 8, |_, _| s.below(n_cl) as u8);
            let mut cm = ConfusionMatrix::new(n_cl, 255);
            cm.accumulate(&pred, &gt).unwrap();
            let (miu, pacc, macc) = brute_force(&[pred], &[gt], n_cl);
            assert!((cm.mean_iu().unwrap() - miu).abs() <= 1e-15);
            assert!((cm.pixel_accuracy().unwrap() - pacc).abs() <= 1e-15);
            assert!((cm.mean_accuracy().unwrap() - macc).abs() <= 1e-15);
        }
    }

    #[test]
    fn accumulation_is_additive_over_image_halves() {
        let mut s = Stream::named(8, "halves");
        let n_cl = 4;
        let gt = LabelMap::from_fn(8, 8, |_, _| s.below(n_cl) as u8);
        let pred = LabelMap::from_fn(8, 8, |_, _| s.below(n_cl) as u8);

        let top = |m: &LabelMap| {
            LabelMap::from_fn(4, 8, |y, x| m.get(y, x))
        };
        let bottom = |m: &LabelMap| {
            LabelMap::from_fn(4, 8, |y, x| m.get(y + 4, x))
        };

        let mut whole = ConfusionMatrix::new(n_cl, 255);
        whole.accumulate(&pred, &gt).unwrap();

        let mut halves = ConfusionMatrix::new(n_cl, 255);
        halves.accumulate(&top(&pred), &top(&gt)).unwrap();
        let mut second = ConfusionMatrix::new(n_cl, 255);
        second.accumulate(&bottom(&pred), &bottom(&gt)).unwrap();
        halves.merge(&second).unwrap();

        assert_eq!(whole, halves);
    }

    #[test]
    fn mean_iu_is_relabeling_invariant() {
        let mut s = Stream::named(9, "relabel");
        let n_cl = 4;
        let gt = LabelMap::from_fn(8, 8, |_, _| s.below(n_cl) as u8);
        let pred = LabelMap::from_fn(8, 8, |_, _| s.below(n_cl) as u8);
        let perm = [2u8, 3, 0, 1];
        let relabel = |m: &LabelMap| {
            LabelMap::from_fn(8, 8, |y, x| perm[usize::from(m.get(y, x))])
        };
        let mut a = ConfusionMatrix::new(n_cl, 255);
        a.accumulate(&pred, &gt).unwrap();
        let mut b = ConfusionMatrix::new(n_cl, 255);
        b.accumulate(&relabel(&pred), &relabel(&gt)).unwrap();
        assert!((a.mean_iu().unwrap() - b.mean_iu().unwrap()).abs() <= 1e-15);
    }

    #[test]
    fn uniform_random_prediction_scores_one_over_ncl() {
        // binomial expectation: pixel accuracy ~ 1/n_cl within 3 sigma
        let mut s = Stream::named(11, "uniform");
        let n_cl = 5;
        let side = 100; // 10_000 pixels
        let gt = LabelMap::from_fn(side, side, |_, _| s.below(n_cl) as u8);
        let pred = LabelMap::from_fn(side, side, |_, _| s.below(n_cl) as u8);
        let mut cm = ConfusionMatrix::new(n_cl, 255);
        cm.accumulate(&pred, &gt).unwrap();
        let p = 1.0 / n_cl as f64;
        let n = (side * side) as f64;
        let sigma = (p * (1.0 - p) / n).sqrt();
        let acc = cm.pixel_accuracy().unwrap();
        assert!(
            (acc - p).abs() <= 3.0 * sigma,
            "accuracy {acc} vs expectation {p} (sigma {sigma})"
        );
    }

    #[test]
    fn per_class_iu_bounded_by_class_accuracy() {
        let mut s = Stream::named(10, "bound");
        let n_cl = 3;
        let gt = LabelMap::from_fn(8, 8, |_, _| s.below(n_cl) as u8);
        let pred = LabelMap::from_fn(8, 8, |_, _| s.below(n_cl) as u8);
        let mut cm = ConfusionMatrix::new(n_cl, 255);
        cm.accumulate(&pred, &gt).unwrap();
        for i in 0..n_cl {
            if let Some(iu) = cm.per_class_iu()[i] {
                let t_i = cm.gt_total(i);
                if t_i > 0 {
                    let acc = cm.count(i, i) as f64 / t_i as f64;
                    assert!(iu <= acc + 1e-15);
                    assert!((0.0..=1.0).contains(&iu));
                }
            }
        }
    }
}
