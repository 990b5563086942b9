use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};

/// Counts with fake as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// The same counts with real as the positive class.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            tn: self.tp,
            fp: self.fn_,
            fn_: self.fp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub real: ClassMetrics,
    pub fake: ClassMetrics,
}

impl Metrics {
    pub fn precision(&self) -> f64 {
        self.fake.precision
    }

    pub fn recall(&self) -> f64 {
        self.fake.recall
    }

    pub fn f1(&self) -> f64 {
        self.fake.f1
    }
}

/// Labels are `true` for fake.
pub fn confusion(pred_fake: &[bool], true_fake: &[bool]) -> Result<ConfusionCounts> {
    if pred_fake.len() != true_fake.len() {
        return Err(HarnessError::Input(format!(
            "{} predictions for {} labels",
            pred_fake.len(),
            true_fake.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred_fake.iter().zip(true_fake) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn positive_class(c: &ConfusionCounts) -> ClassMetrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics { precision, recall, f1 }
}

pub fn metrics(c: &ConfusionCounts) -> Result<Metrics> {
    if c.total() == 0 {
        return Err(HarnessError::Input("no evaluated samples".into()));
    }
    Ok(Metrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        real: positive_class(&c.swapped()),
        fake: positive_class(c),
    })
}

/// Area under the ROC curve from the Mann-Whitney statistic, with tied
/// scores sharing their average rank.
pub fn auc(scores_fake: &[f64], true_fake: &[bool]) -> Result<f64> {
    if scores_fake.len() != true_fake.len() {
        return Err(HarnessError::Input("scores and labels differ in length".into()));
    }
    if scores_fake.iter().any(|s| s.is_nan()) {
        return Err(HarnessError::Input("NaN score".into()));
    }
    let n_pos = true_fake.iter().filter(|&&t| t).count();
    let n_neg = true_fake.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(HarnessError::Input("both classes are needed for AUC".into()));
    }
    let mut order: Vec<usize> = (0..scores_fake.len()).collect();
    order.sort_by(|&a, &b| scores_fake[a].total_cmp(&scores_fake[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores_fake[order[j + 1]] == scores_fake[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| true_fake[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_confusion() {
        let p = [true, true, true, false, false, false, false, true];
        let t = [true, true, false, true, false, false, true, false];
        let c = confusion(&p, &t).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (2, 2, 2, 2));
        assert!(confusion(&p, &t[..3]).is_err());
        let all_fake = confusion(&[true; 6], &[true, false, true, false, true, false]).unwrap();
        assert_eq!((all_fake.tp, all_fake.fp), (3, 3));
    }

    #[test]
    fn hand_computed_metrics() {
        let m = metrics(&ConfusionCounts { tp: 3, tn: 2, fp: 1, fn_: 2 }).unwrap();
        assert_eq!(m.accuracy, 0.625);
        assert_eq!(m.precision(), 0.75);
        assert_eq!(m.recall(), 0.6);
        assert!((m.f1() - 2.0 / 3.0).abs() < 1e-12);
        // real row: TP'=2, FP'=2, FN'=1
        assert_eq!(m.real.precision, 0.5);
        assert!((m.real.recall - 2.0 / 3.0).abs() < 1e-15);

        let perfect = metrics(&ConfusionCounts { tp: 10, tn: 10, fp: 0, fn_: 0 }).unwrap();
        assert_eq!(perfect.accuracy, 1.0);
        assert_eq!(perfect.real, ClassMetrics { precision: 1.0, recall: 1.0, f1: 1.0 });
        assert_eq!(perfect.fake, perfect.real);

        let none = metrics(&ConfusionCounts { tp: 0, tn: 5, fp: 0, fn_: 5 }).unwrap();
        assert_eq!(none.fake, ClassMetrics { precision: 0.0, recall: 0.0, f1: 0.0 });
        assert!(metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.3], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.2, 0.9], &[true, true, false]).unwrap(), 0.0);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }
}
