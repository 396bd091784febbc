use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DetectionError, LogisticModel, Sample};
use crate::event_space::EventSelector;

/// Which ratios had a zero denominator and were reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UndefinedMetrics {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
    pub auc: bool,
}

impl UndefinedMetrics {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.f1 || self.auc
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub undefined: UndefinedMetrics,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den != 0).then(|| num as f64 / den as f64)
}

impl MetricsReport {
    /// Threshold metrics from a confusion matrix. `auc` of `None` means
    /// only one class was present.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64, auc: Option<f64>) -> Self {
        let mut undefined = UndefinedMetrics::default();
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        undefined.precision = precision.is_none();
        undefined.recall = recall.is_none();
        undefined.f1 = f1.is_none();
        undefined.auc = auc.is_none();
        Self {
            tp,
            fp,
            fn_,
            tn,
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn).unwrap_or(0.0),
            precision: precision.unwrap_or(0.0),
            recall: recall.unwrap_or(0.0),
            f1: f1.unwrap_or(0.0),
            auc: auc.unwrap_or(0.0),
            undefined,
        }
    }
}

/// Mann-Whitney AUC over `(score, label)` pairs using midranks, so tied
/// scores across classes count one half. `None` unless both labels occur.
pub fn auc_rank(scored: &[(f64, u8)]) -> Option<f64> {
    let pos = scored.iter().filter(|s| s.1 == 1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));

    // ranks doubled so that midranks stay integral
    let mut pos_rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].0 == scored[order[i]].0 {
            j += 1;
        }
        let midrank2 = (i + 1 + j + 1) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| scored[k].1 == 1).count() as u64;
        pos_rank_sum2 += midrank2 * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    let u2 = pos_rank_sum2 - p * (p + 1);
    Some(u2 as f64 / (2 * p * n) as f64)
}

/// Scores `test` with `model` and classifies at `threshold`.
pub fn compute_metrics(model: &LogisticModel, test: &[Sample], threshold: f64) -> Result<MetricsReport, DetectionError> {
    if test.is_empty() {
        return Err(DetectionError::EmptyTestSet);
    }
    let scored: Vec<(f64, u8)> = test.iter().map(|s| (model.predict(s.delta), s.label)).collect();
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for &(p, y) in &scored {
        match (p >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, fn_, tn, auc_rank(&scored)))
}

/// Handling of the F1 band (0.9, 1).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Band {
    #[default]
    Off,
    Exclude,
    Retain,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenCriteria {
    pub min_accuracy: f64,
    pub min_f1: f64,
    pub min_auc: f64,
    /// Drop selectors with any metric exactly 1.0 as likely overfit.
    pub exclude_perfect: bool,
    pub f1_band: F1Band,
}

impl Default for ScreenCriteria {
    fn default() -> Self {
        Self {
            min_accuracy: 0.8,
            min_f1: 0.8,
            min_auc: 0.7,
            exclude_perfect: false,
            f1_band: F1Band::Off,
        }
    }
}

impl ScreenCriteria {
    pub fn passes(&self, r: &MetricsReport) -> bool {
        if !(r.accuracy > self.min_accuracy && r.f1 > self.min_f1 && r.auc > self.min_auc) {
            return false;
        }
        if self.exclude_perfect && [r.accuracy, r.precision, r.recall, r.f1, r.auc].contains(&1.0) {
            return false;
        }
        let in_band = r.f1 > 0.9 && r.f1 < 1.0;
        match self.f1_band {
            F1Band::Off => true,
            F1Band::Exclude => !in_band,
            F1Band::Retain => in_band,
        }
    }
}

/// Selectors whose reports pass `criteria`, ascending.
pub fn screen(reports: &BTreeMap<EventSelector, MetricsReport>, criteria: &ScreenCriteria) -> Vec<EventSelector> {
    reports
        .iter()
        .filter(|(_, r)| criteria.passes(r))
        .map(|(s, _)| *s)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with(acc: f64, f1: f64, auc: f64) -> MetricsReport {
        MetricsReport {
            accuracy: acc,
            f1,
            auc,
            precision: 0.8,
            recall: 0.8,
            ..MetricsReport::from_counts(0, 0, 0, 0, None)
        }
    }

    #[test]
    fn counts_example() {
        let r = MetricsReport::from_counts(3, 1, 1, 5, None);
        assert_eq!((r.precision, r.recall, r.f1, r.accuracy), (0.75, 0.75, 0.75, 0.8));
    }

    #[test]
    fn undefined_ratios_are_zero_and_flagged() {
        let r = MetricsReport::from_counts(0, 0, 0, 4, None);
        assert_eq!((r.precision, r.recall, r.f1, r.auc), (0.0, 0.0, 0.0, 0.0));
        assert!(r.undefined.precision && r.undefined.recall && r.undefined.f1 && r.undefined.auc);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_rank(&[(0.9, 1), (0.4, 1), (0.8, 0), (0.1, 0)]), Some(0.75));
        assert_eq!(auc_rank(&[(0.9, 1), (0.8, 1), (0.2, 0)]), Some(1.0));
        assert_eq!(auc_rank(&[(0.5, 1), (0.5, 0)]), Some(0.5));
        assert_eq!(auc_rank(&[(0.5, 1)]), None);
    }

    #[test]
    fn screen_predicates() {
        let c = ScreenCriteria::default();
        assert!(c.passes(&with(0.85, 0.82, 0.9)));
        assert!(c.passes(&with(0.85, 0.82, 1.0)));
        assert!(!ScreenCriteria { exclude_perfect: true, ..c }.passes(&with(0.85, 0.82, 1.0)));
        assert!(!c.passes(&with(0.80, 0.82, 0.9)));
        assert!(!c.passes(&with(0.85, 0.82, 0.7)));
        let band = with(0.95, 0.95, 0.97);
        assert!(c.passes(&band));
        assert!(!ScreenCriteria { f1_band: F1Band::Exclude, ..c }.passes(&band));
        assert!(ScreenCriteria { f1_band: F1Band::Retain, ..c }.passes(&band));
        assert!(!ScreenCriteria { f1_band: F1Band::Retain, ..c }.passes(&with(0.85, 0.82, 0.9)));
    }

    #[test]
    fn planted_suite_passes_exactly_k() {
        let mut reports = BTreeMap::new();
        // passing matrices: 45/5/5/45 (acc .9); failing: 30/20/20/30 (acc .6)
        for i in 0..20u8 {
            let r = if i % 3 == 0 {
                MetricsReport::from_counts(45, 5, 5, 45, Some(0.9))
            } else {
                MetricsReport::from_counts(30, 20, 20, 30, Some(0.6))
            };
            reports.insert(EventSelector::new(i, 0), r);
        }
        let passed = screen(&reports, &ScreenCriteria::default());
        assert_eq!(passed.len(), 7);
        assert!(passed.iter().all(|s| s.event_code % 3 == 0));
    }
}
