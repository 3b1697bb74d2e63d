//! Imbalance-aware evaluation: accuracy, F1, AUROC, AUPRC over pooled
//! per-pixel flags.
//!
//! All metrics are micro-averaged: pixels from every patch are pooled before
//! anything is counted or ranked, so the result is independent of how the
//! pixels were split into patches. AUROC uses the Mann–Whitney statistic
//! with an integer numerator (2·wins + ties), which makes tie handling exact
//! and lets tests compare against a brute-force pair count bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::encode::ScoreMap;
use crate::error::{Error, Result};
use ndarray::Array2;

/// Counts at a fixed decision threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// F1 = 2tp/(2tp+fp+fn); defined as 0 when the denominator is 0.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            return 0.0;
        }
        2.0 * self.tp as f64 / denom as f64
    }

    /// tp/(tp+fp); defined as 0 when nothing was flagged.
    pub fn precision(&self) -> f64 {
        let denom = self.tp + self.fp;
        if denom == 0 {
            return 0.0;
        }
        self.tp as f64 / denom as f64
    }

    /// tp/(tp+fn); defined as 0 when there are no positives.
    pub fn recall(&self) -> f64 {
        let denom = self.tp + self.fn_;
        if denom == 0 {
            return 0.0;
        }
        self.tp as f64 / denom as f64
    }
}

/// One evaluation report. AUROC/AUPRC are absent (not zero) when the truth
/// is single-class and the metric is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub f1: f64,
    pub confusion: Confusion,
    pub n_pixels: u64,
}

fn pool(scores: &[ScoreMap], truth: &[Array2<bool>]) -> Result<(Vec<f32>, Vec<bool>)> {
    if scores.len() != truth.len() {
        return Err(Error::Data(format!(
            "{} score maps vs {} truth masks",
            scores.len(),
            truth.len()
        )));
    }
    let mut s = Vec::new();
    let mut t = Vec::new();
    for (map, mask) in scores.iter().zip(truth) {
        if map.scores.dim() != mask.dim() {
            return Err(Error::Data(format!(
                "score map {:?} vs mask {:?}",
                map.scores.dim(),
                mask.dim()
            )));
        }
        s.extend(map.scores.iter().copied());
        t.extend(mask.iter().copied());
    }
    if let Some(bad) = s.iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite score {bad}")));
    }
    Ok((s, t))
}

/// Accuracy, F1, and the confusion counts at threshold `thr`
/// (flag ⇔ score > thr).
pub fn threshold_metrics(
    scores: &[ScoreMap],
    truth: &[Array2<bool>],
    thr: f64,
) -> Result<(f64, f64, Confusion)> {
    let (s, t) = pool(scores, truth)?;
    let c = confusion_flat(&s, &t, thr)?;
    Ok((c.accuracy(), c.f1(), c))
}

pub fn confusion_flat(scores: &[f32], truth: &[bool], thr: f64) -> Result<Confusion> {
    if !(thr > 0.0 && thr < 1.0) {
        return Err(Error::Config(format!("threshold must be in (0,1), got {thr}")));
    }
    if scores.len() != truth.len() {
        return Err(Error::Data(format!("{} scores vs {} labels", scores.len(), truth.len())));
    }
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(truth) {
        let flag = s as f64 > thr;
        match (flag, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Area under the ROC curve via the Mann–Whitney statistic with midrank tie
/// handling (equal to exact trapezoidal ROC integration).
pub fn auroc(scores: &[ScoreMap], truth: &[Array2<bool>]) -> Result<f64> {
    let (s, t) = pool(scores, truth)?;
    auroc_flat(&s, &t)
}

pub fn auroc_flat(scores: &[f32], truth: &[bool]) -> Result<f64> {
    let (numer2, denom2) = auroc_counts(scores, truth)?;
    Ok(numer2 as f64 / denom2 as f64)
}

/// Integer core of AUROC: (2·wins + ties, 2·P·N), where wins counts
/// positive-negative pairs ranked correctly and ties those with equal score.
fn auroc_counts(scores: &[f32], truth: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != truth.len() {
        return Err(Error::Data(format!("{} scores vs {} labels", scores.len(), truth.len())));
    }
    let p = truth.iter().filter(|&&y| y).count() as u64;
    let n = truth.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes; got {p} positive, {n} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Walk ascending tie groups: every positive beats all negatives in
    // strictly lower groups and half-ties with negatives in its own group.
    let mut wins = 0u64;
    let mut ties = 0u64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut pos_here = 0u64;
        let mut neg_here = 0u64;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if truth[order[j]] {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            j += 1;
        }
        wins += pos_here * neg_below;
        ties += pos_here * neg_here;
        neg_below += neg_here;
        i = j;
    }
    Ok((2 * wins + ties, 2 * p * n))
}

/// Area under the precision-recall curve as average precision:
/// Σ_k (R_k − R_{k−1})·P_k over descending unique score thresholds.
pub fn auprc(scores: &[ScoreMap], truth: &[Array2<bool>]) -> Result<f64> {
    let (s, t) = pool(scores, truth)?;
    auprc_flat(&s, &t)
}

pub fn auprc_flat(scores: &[f32], truth: &[bool]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::Data(format!("{} scores vs {} labels", scores.len(), truth.len())));
    }
    let p_total = truth.iter().filter(|&&y| y).count() as u64;
    if p_total == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ap = 0.0f64;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut recall_prev = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        // Everything with the same score enters the flagged set together.
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if truth[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / p_total as f64;
        ap += (recall - recall_prev) * precision;
        recall_prev = recall;
        i = j;
    }
    Ok(ap)
}

/// All four metrics plus confusion counts in one report. AUROC/AUPRC come
/// back as None when undefined on this truth.
pub fn evaluate(scores: &[ScoreMap], truth: &[Array2<bool>], thr: f64) -> Result<EvalResult> {
    let (s, t) = pool(scores, truth)?;
    let confusion = confusion_flat(&s, &t, thr)?;
    let optional = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    };
    Ok(EvalResult {
        accuracy: confusion.accuracy(),
        auroc: optional(auroc_flat(&s, &t))?,
        auprc: optional(auprc_flat(&s, &t))?,
        f1: confusion.f1(),
        confusion,
        n_pixels: s.len() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn maps(scores: Vec<f32>) -> Vec<ScoreMap> {
        let n = scores.len();
        vec![ScoreMap { scores: Array2::from_shape_vec((1, n), scores).unwrap() }]
    }

    fn masks(truth: Vec<bool>) -> Vec<Array2<bool>> {
        let n = truth.len();
        vec![Array2::from_shape_vec((1, n), truth).unwrap()]
    }

    /// All-pairs AUROC oracle: counts wins twice and ties once per
    /// positive-negative pair, then divides once — the same final arithmetic
    /// as the ranking implementation, so results must match bit-for-bit.
    fn auroc_oracle(scores: &[f32], truth: &[bool]) -> f64 {
        let mut numer2 = 0u64;
        let mut pairs = 0u64;
        for (i, &yi) in truth.iter().enumerate() {
            if !yi {
                continue;
            }
            for (j, &yj) in truth.iter().enumerate() {
                if yj {
                    continue;
                }
                pairs += 1;
                if scores[i] > scores[j] {
                    numer2 += 2;
                } else if scores[i] == scores[j] {
                    numer2 += 1;
                }
            }
        }
        numer2 as f64 / (2 * pairs) as f64
    }

    /// Threshold-sweep AUPRC oracle: recount the confusion from scratch at
    /// every unique threshold instead of accumulating.
    fn auprc_oracle(scores: &[f32], truth: &[bool]) -> f64 {
        let mut thresholds: Vec<f32> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let p_total = truth.iter().filter(|&&y| y).count() as f64;
        let mut ap = 0.0;
        let mut recall_prev = 0.0;
        for &thr in &thresholds {
            let mut tp = 0u64;
            let mut flagged = 0u64;
            for (&s, &y) in scores.iter().zip(truth) {
                if s >= thr {
                    flagged += 1;
                    if y {
                        tp += 1;
                    }
                }
            }
            let precision = tp as f64 / flagged as f64;
            let recall = tp as f64 / p_total;
            ap += (recall - recall_prev) * precision;
            recall_prev = recall;
        }
        ap
    }

    #[test]
    fn perfect_prediction() {
        let s = maps(vec![1.0, 0.0, 1.0, 0.0]);
        let t = masks(vec![true, false, true, false]);
        let (acc, f1, c) = threshold_metrics(&s, &t, 0.5).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(f1, 1.0);
        assert_eq!(c, Confusion { tp: 2, fp: 0, tn: 2, fn_: 0 });
        assert_eq!(auroc(&s, &t).unwrap(), 1.0);
        assert_eq!(auprc(&s, &t).unwrap(), 1.0);
    }

    #[test]
    fn all_negative_on_imbalanced_data() {
        // 3% positives, all-negative prediction: high accuracy, zero F1 —
        // exactly the pathology F1 is there to expose.
        let n = 1000;
        let scores: Vec<f32> = vec![0.0; n];
        let truth: Vec<bool> = (0..n).map(|i| i < 30).collect();
        let (acc, f1, _) = threshold_metrics(&maps(scores), &masks(truth), 0.5).unwrap();
        assert!((acc - 0.97).abs() < 1e-12);
        assert_eq!(f1, 0.0);
    }

    #[test]
    fn hand_counted_confusion() {
        let s = maps(vec![0.9, 0.4, 0.6, 0.1]);
        let t = masks(vec![true, true, false, false]);
        let (_, f1, c) = threshold_metrics(&s, &t, 0.5).unwrap();
        assert_eq!(c, Confusion { tp: 1, fn_: 1, fp: 1, tn: 1 });
        assert_eq!(f1, 0.5);
    }

    #[test]
    fn threshold_out_of_range_rejected() {
        let s = maps(vec![0.5]);
        let t = masks(vec![true]);
        assert!(matches!(threshold_metrics(&s, &t, 0.0), Err(Error::Config(_))));
        assert!(matches!(threshold_metrics(&s, &t, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let s = maps(vec![0.5, 0.5]);
        let t = masks(vec![true]);
        assert!(matches!(threshold_metrics(&s, &t, 0.5), Err(Error::Data(_))));
    }

    #[test]
    fn auroc_constant_scores_is_half() {
        let s = maps(vec![0.5; 6]);
        let t = masks(vec![true, false, true, false, false, true]);
        assert_eq!(auroc(&s, &t).unwrap(), 0.5);
    }

    #[test]
    fn auroc_hand_case() {
        // pairs: (0.8 vs 0.6) win, (0.4 vs 0.6) loss → 1 of 2 → 0.5
        let s = maps(vec![0.8, 0.6, 0.4]);
        let t = masks(vec![true, false, true]);
        assert_eq!(auroc(&s, &t).unwrap(), 0.5);
    }

    #[test]
    fn auroc_single_class_is_undefined() {
        let s = maps(vec![0.2, 0.8]);
        assert!(matches!(
            auroc(&s, &masks(vec![true, true])),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            auroc(&s, &masks(vec![false, false])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auprc_hand_case() {
        let s = maps(vec![0.9, 0.8, 0.7]);
        let t = masks(vec![true, false, true]);
        let got = auprc(&s, &t).unwrap();
        assert!((got - (0.5 + 1.0 / 3.0)).abs() < 1e-15, "got {got}");
    }

    #[test]
    fn auprc_no_positives_is_undefined() {
        let s = maps(vec![0.2, 0.8]);
        assert!(matches!(
            auprc(&s, &masks(vec![false, false])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auprc_random_scores_approach_positive_rate() {
        let mut rng = crate::util::rng_from(123);
        let n = 100_000;
        let scores: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.1)).collect();
        let ap = auprc_flat(&scores, &truth).unwrap();
        assert!((ap - 0.1).abs() < 0.02, "AP {ap}");
    }

    #[test]
    fn evaluate_reports_absent_metrics_on_single_class() {
        let s = maps(vec![0.9, 0.2, 0.4]);
        let t = masks(vec![false, false, false]);
        let r = evaluate(&s, &t, 0.5).unwrap();
        assert_eq!(r.auroc, None);
        assert_eq!(r.auprc, None);
        assert_eq!(r.n_pixels, 3);
        assert_eq!(r.confusion.total(), 3);
        // JSON must carry null, not 0, for the undefined metrics.
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"auroc\":null"));
    }

    #[test]
    fn aucs_match_brute_force_oracles_exactly() {
        let mut rng = crate::util::rng_from(7);
        for case in 0..1000 {
            let n = rng.random_range(2..=8usize);
            // Coarse score grid makes ties frequent.
            let scores: Vec<f32> = (0..n).map(|_| rng.random_range(0..5) as f32 / 4.0).collect();
            let truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            let p = truth.iter().filter(|&&y| y).count();
            if p > 0 && p < n {
                let fast = auroc_flat(&scores, &truth).unwrap();
                let slow = auroc_oracle(&scores, &truth);
                assert_eq!(fast, slow, "case {case}: auroc {scores:?} {truth:?}");
            }
            if p > 0 {
                let fast = auprc_flat(&scores, &truth).unwrap();
                let slow = auprc_oracle(&scores, &truth);
                assert_eq!(fast, slow, "case {case}: auprc {scores:?} {truth:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn auroc_negation_symmetry(
            raw in proptest::collection::vec((0u8..8, proptest::bool::ANY), 2..40)
        ) {
            let scores: Vec<f32> = raw.iter().map(|&(s, _)| s as f32 / 7.0).collect();
            let truth: Vec<bool> = raw.iter().map(|&(_, y)| y).collect();
            let p = truth.iter().filter(|&&y| y).count();
            prop_assume!(p > 0 && p < truth.len());
            let neg: Vec<f32> = scores.iter().map(|&s| -s).collect();
            let (a, d) = auroc_counts(&scores, &truth).unwrap();
            let (b, d2) = auroc_counts(&neg, &truth).unwrap();
            // Integer identity: the two numerators tile the pair count.
            prop_assert_eq!(d, d2);
            prop_assert_eq!(a + b, d);
            let sum = auroc_flat(&scores, &truth).unwrap() + auroc_flat(&neg, &truth).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn aucs_invariant_under_monotone_rescale(
            raw in proptest::collection::vec((0u8..12, proptest::bool::ANY), 2..40)
        ) {
            let scores: Vec<f32> = raw.iter().map(|&(s, _)| s as f32 / 11.0).collect();
            let truth: Vec<bool> = raw.iter().map(|&(_, y)| y).collect();
            let p = truth.iter().filter(|&&y| y).count();
            prop_assume!(p > 0 && p < truth.len());
            // Halving is exact in floating point, so ranks are untouched.
            let scaled: Vec<f32> = scores.iter().map(|&s| s * 0.5).collect();
            prop_assert_eq!(
                auroc_flat(&scores, &truth).unwrap(),
                auroc_flat(&scaled, &truth).unwrap()
            );
            prop_assert_eq!(
                auprc_flat(&scores, &truth).unwrap(),
                auprc_flat(&scaled, &truth).unwrap()
            );
        }

        #[test]
        fn pooling_is_split_invariant(
            raw in proptest::collection::vec((0u8..6, proptest::bool::ANY), 4..60),
            cut in 1usize..3,
        ) {
            let scores: Vec<f32> = raw.iter().map(|&(s, _)| s as f32 / 5.0).collect();
            let truth: Vec<bool> = raw.iter().map(|&(_, y)| y).collect();
            let p = truth.iter().filter(|&&y| y).count();
            prop_assume!(p > 0 && p < truth.len());
            let k = raw.len() * cut / 3;
            prop_assume!(k > 0 && k < raw.len());
            // One big map vs the same pixels split in two.
            let one = evaluate(&maps(scores.clone()), &masks(truth.clone()), 0.5).unwrap();
            let s2 = vec![maps(scores[..k].to_vec()).remove(0), maps(scores[k..].to_vec()).remove(0)];
            let t2 = vec![masks(truth[..k].to_vec()).remove(0), masks(truth[k..].to_vec()).remove(0)];
            let two = evaluate(&s2, &t2, 0.5).unwrap();
            prop_assert_eq!(one, two);
        }
    }
}
