//! Detection metrics over two score samples: in-distribution scores are the
//! positives, OOD scores the negatives, and higher scores mean "more
//! in-distribution".

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::softmax;
use crate::mahalanobis::ConfidenceScore;

/// Confidence scores of in-distribution and OOD examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSample {
    pub in_scores: Vec<f64>,
    pub out_scores: Vec<f64>,
}

impl ScoreSample {
    pub fn new(in_scores: Vec<f64>, out_scores: Vec<f64>) -> Result<Self> {
        if in_scores.is_empty() || out_scores.is_empty() {
            return Err(Error::Validation("score sample needs both in and out scores".into()));
        }
        if in_scores.iter().chain(&out_scores).any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite score".into()));
        }
        Ok(Self { in_scores, out_scores })
    }

    /// The same scores with the roles of the two sets exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            in_scores: self.out_scores.clone(),
            out_scores: self.in_scores.clone(),
        }
    }
}

/// The three headline metrics, each a fraction in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub tnr95: f64,
    pub auroc: f64,
    pub dacc: f64,
}

/// Maximum softmax probability.
pub fn msp_score(logits: &[f64]) -> ConfidenceScore {
    ConfidenceScore::new(softmax(logits).into_iter().fold(0.0, f64::max))
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Number of entries of ascending `sorted` strictly below `t`.
fn count_below(sorted: &[f64], t: f64) -> usize {
    sorted.partition_point(|&v| v < t)
}

/// Number of entries of ascending `sorted` at or below `t`.
fn count_at_or_below(sorted: &[f64], t: f64) -> usize {
    sorted.partition_point(|&v| v <= t)
}

/// True-negative rate at the largest observed in-distribution threshold
/// whose true-positive rate is at least `tpr_target`.
pub fn tnr_at_tpr(sample: &ScoreSample, tpr_target: f64) -> f64 {
    let ins = sorted(&sample.in_scores);
    let outs = sorted(&sample.out_scores);
    let n = ins.len();
    // Candidates in descending order; the first that reaches the target is
    // the largest such threshold.
    let mut tau = ins[0];
    for k in (0..n).rev() {
        let t = ins[k];
        let tp = n - count_below(&ins, t);
        if tp as f64 / n as f64 >= tpr_target {
            tau = t;
            break;
        }
    }
    count_below(&outs, tau) as f64 / outs.len() as f64
}

/// Mann–Whitney AUROC with ties counted one half.
pub fn auroc(sample: &ScoreSample) -> f64 {
    let outs = sorted(&sample.out_scores);
    // Twice the statistic, kept integral so the result is exact.
    let mut twice: u128 = 0;
    for &s in &sample.in_scores {
        let below = count_below(&outs, s) as u128;
        let ties = count_at_or_below(&outs, s) as u128 - below;
        twice += 2 * below + ties;
    }
    let pairs = sample.in_scores.len() as f64 * outs.len() as f64;
    twice as f64 / (2.0 * pairs)
}

/// Best balanced accuracy over all thresholds `ε`, classifying `q(x) ≤ ε`
/// as OOD; candidates are every observed score plus ±∞.
pub fn detection_accuracy(sample: &ScoreSample) -> f64 {
    let ins = sorted(&sample.in_scores);
    let outs = sorted(&sample.out_scores);
    let (n, m) = (ins.len(), outs.len());
    let eval = |eps: f64| {
        let tp = n - count_at_or_below(&ins, eps);
        let tn = count_at_or_below(&outs, eps);
        0.5 * (tp as f64 / n as f64 + tn as f64 / m as f64)
    };
    let mut best = eval(f64::NEG_INFINITY).max(eval(f64::INFINITY));
    for &eps in ins.iter().chain(&outs) {
        best = best.max(eval(eps));
    }
    best
}

pub fn evaluate(sample: &ScoreSample) -> EvalResult {
    EvalResult {
        tnr95: tnr_at_tpr(sample, 0.95),
        auroc: auroc(sample),
        dacc: detection_accuracy(sample),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(a: &[f64], b: &[f64]) -> ScoreSample {
        ScoreSample::new(a.to_vec(), b.to_vec()).unwrap()
    }

    #[test]
    fn msp_cases() {
        assert!((msp_score(&[0.3; 10]).value() - 0.1).abs() < 1e-15);
        assert!((msp_score(&[1000.0, 0.0]).value() - 1.0).abs() < 1e-12);
        assert!((msp_score(&[1.0, 2.0, 3.0]).value() - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn separated_scores() {
        let s = sample(&[5.0, 6.0, 7.0], &[1.0, 2.0]);
        assert_eq!(tnr_at_tpr(&s, 0.95), 1.0);
        assert_eq!(auroc(&s), 1.0);
        assert_eq!(detection_accuracy(&s), 1.0);
    }

    #[test]
    fn identical_distributions() {
        let v: Vec<f64> = (0..40).map(|i| (i % 7) as f64).collect();
        let s = sample(&v, &v);
        assert_eq!(auroc(&s), 0.5);
        assert_eq!(detection_accuracy(&s), 0.5);
        assert!(tnr_at_tpr(&s, 0.95) <= 0.05 + 1.0 / 40.0);

        let u: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let s = sample(&u, &u);
        assert!(tnr_at_tpr(&s, 0.95) <= 0.05 + 1.0 / 100.0);
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(ScoreSample::new(vec![], vec![1.0]).is_err());
        assert!(ScoreSample::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn rank_invariance(a in prop::collection::vec(-5.0f64..5.0, 1..40), b in prop::collection::vec(-5.0f64..5.0, 1..40)) {
            let s = sample(&a, &b);
            let f = |v: f64| (v * 0.7).exp() + 3.0;
            let t = sample(&a.iter().map(|&v| f(v)).collect::<Vec<_>>(), &b.iter().map(|&v| f(v)).collect::<Vec<_>>());
            prop_assert_eq!(evaluate(&s), evaluate(&t));
        }

        #[test]
        fn auroc_swap_complement(a in prop::collection::vec(-3i32..3, 1..30), b in prop::collection::vec(-3i32..3, 1..30)) {
            let s = sample(&a.iter().map(|&v| v as f64).collect::<Vec<_>>(), &b.iter().map(|&v| v as f64).collect::<Vec<_>>());
            prop_assert!((auroc(&s.swapped()) - (1.0 - auroc(&s))).abs() < 1e-12);
        }

        #[test]
        fn tnr_monotone_in_target(a in prop::collection::vec(-5.0f64..5.0, 1..50), b in prop::collection::vec(-5.0f64..5.0, 1..50), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let s = sample(&a, &b);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(tnr_at_tpr(&s, hi) <= tnr_at_tpr(&s, lo));
        }

        #[test]
        fn dacc_at_least_half(a in prop::collection::vec(-5.0f64..5.0, 1..50), b in prop::collection::vec(-5.0f64..5.0, 1..50)) {
            prop_assert!(detection_accuracy(&sample(&a, &b)) >= 0.5);
        }
    }
}
