//! Confusion matrix, summary metrics, and outcome categories.

use core::fmt;

/// Prediction outcome of one patient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OutcomeCategory {
    Tp,
    Tn,
    Fp,
    Fn,
}

impl OutcomeCategory {
    pub const ALL: [OutcomeCategory; 4] = [Self::Tp, Self::Tn, Self::Fp, Self::Fn];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tp => "TP",
            Self::Tn => "TN",
            Self::Fp => "FP",
            Self::Fn => "FN",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for OutcomeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Any nonzero value counts as positive.
pub fn categorize_outcome(prediction: u8, label: u8) -> OutcomeCategory {
    match (prediction != 0, label != 0) {
        (true, true) => OutcomeCategory::Tp,
        (false, false) => OutcomeCategory::Tn,
        (true, false) => OutcomeCategory::Fp,
        (false, true) => OutcomeCategory::Fn,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn add(&mut self, category: OutcomeCategory) {
        match category {
            OutcomeCategory::Tp => self.tp += 1,
            OutcomeCategory::Tn => self.tn += 1,
            OutcomeCategory::Fp => self.fp += 1,
            OutcomeCategory::Fn => self.fn_ += 1,
        }
    }
}

/// Builds the matrix from `(predicted_class, label)` pairs.
pub fn confusion_matrix<I>(pairs: I) -> ConfusionMatrix
where
    I: IntoIterator<Item = (u8, u8)>,
{
    let mut cm = ConfusionMatrix::default();
    for (p, l) in pairs {
        cm.add(categorize_outcome(p, l));
    }
    cm
}

/// Fractions in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Zero denominators give 0 (including accuracy of an empty matrix).
pub fn aggregate_metrics(cm: &ConfusionMatrix) -> MetricsReport {
    MetricsReport {
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        sensitivity: ratio(cm.tp, cm.tp + cm.fn_),
        specificity: ratio(cm.tn, cm.tn + cm.fp),
        f1: ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_pairs_four_categories() {
        let mut seen = alloc::vec::Vec::new();
        for p in 0..2 {
            for l in 0..2 {
                let c = categorize_outcome(p, l);
                assert!(!seen.contains(&c));
                seen.push(c);
            }
        }
        assert_eq!(categorize_outcome(1, 1), OutcomeCategory::Tp);
        assert_eq!(categorize_outcome(0, 1), OutcomeCategory::Fn);
    }

    #[test]
    fn all_negative_predictions() {
        let pairs = (0..200).map(|i| (0u8, u8::from(i < 70)));
        let cm = confusion_matrix(pairs);
        assert_eq!(cm, ConfusionMatrix { tp: 0, tn: 130, fp: 0, fn_: 70 });
        let m = aggregate_metrics(&cm);
        assert_eq!(m.sensitivity, 0.0);
        assert_eq!(m.specificity, 1.0);
        assert_eq!(m.f1, 0.0);
        assert!((m.accuracy - 0.65).abs() < 1e-15);
    }

    #[test]
    fn single_true_positive() {
        let cm = confusion_matrix([(1, 1)]);
        assert_eq!(cm, ConfusionMatrix { tp: 1, ..Default::default() });
    }

    #[test]
    fn zero_denominators() {
        let m = aggregate_metrics(&ConfusionMatrix::default());
        assert_eq!(m, MetricsReport::default());
    }

    #[test]
    fn category_names_round_trip() {
        for c in OutcomeCategory::ALL {
            assert_eq!(OutcomeCategory::parse(c.as_str()), Some(c));
        }
        assert_eq!(OutcomeCategory::parse("xx"), None);
    }
}
