//! Verification metrics: EER, minimum detection cost, and DET-curve points.
//!
//! Operating points use two threshold conventions, both swept over the
//! distinct scores plus ±∞:
//!
//! * EER: a score exactly at the threshold counts half as a miss and half as
//!   a false alarm, and the miss/false-alarm crossing is located by linear
//!   interpolation between adjacent operating points.
//! * minDCF and DET points: the decision is accept-iff-score>threshold, which
//!   makes each distinct score cover one step of the ROC exactly (so a
//!   perfectly separating score set reaches cost zero).

use crate::error::{Error, Result};
use crate::scoring::{ScoreSet, TrialLabel};

/// Detection-cost parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CostParams {
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_target: f64,
    pub normalized: bool,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            c_miss: 1.0,
            c_fa: 1.0,
            p_target: 0.001,
            normalized: true,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_miss > 0.0) || !(self.c_fa > 0.0) {
            return Err(Error::Config("costs must be > 0".into()));
        }
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::Config(format!(
                "p_target must lie in (0,1), got {}",
                self.p_target
            )));
        }
        Ok(())
    }
}

/// One DET operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// DET curve: miss/false-alarm rates over increasing thresholds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
}

/// Splits a score set into `(scores, labels)`, dropping unknown-label trials.
pub fn labeled_scores(set: &ScoreSet) -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in &set.scores {
        match s.trial.label {
            TrialLabel::Target => {
                scores.push(s.score);
                labels.push(true);
            }
            TrialLabel::Impostor => {
                scores.push(s.score);
                labels.push(false);
            }
            TrialLabel::Unknown => {}
        }
    }
    (scores, labels)
}

struct SortedTrials {
    /// Distinct scores, ascending.
    thresholds: Vec<f64>,
    /// Targets (strictly below, exactly at) each threshold.
    tar_below_at: Vec<(usize, usize)>,
    /// Impostors (strictly above, exactly at) each threshold.
    imp_above_at: Vec<(usize, usize)>,
    n_tar: usize,
    n_imp: usize,
}

fn sort_trials(scores: &[f64], labels: &[bool]) -> Result<SortedTrials> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_tar = labels.iter().filter(|&&l| l).count();
    let n_imp = labels.len() - n_tar;
    if n_tar == 0 || n_imp == 0 {
        return Err(Error::InsufficientData(
            "undefined EER: need at least one target and one impostor trial".into(),
        ));
    }
    for (i, &s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::numeric("metrics", format!("score[{i}] = {s}")));
        }
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let mut thresholds = Vec::new();
    let mut tar_below_at = Vec::new();
    let mut imp_above_at = Vec::new();
    let mut tar_below = 0usize;
    let mut imp_below = 0usize;
    let mut i = 0;
    while i < pairs.len() {
        let s = pairs[i].0;
        let mut tar_at = 0usize;
        let mut imp_at = 0usize;
        while i < pairs.len() && pairs[i].0 == s {
            if pairs[i].1 {
                tar_at += 1;
            } else {
                imp_at += 1;
            }
            i += 1;
        }
        thresholds.push(s);
        tar_below_at.push((tar_below, tar_at));
        imp_above_at.push((n_imp - imp_below - imp_at, imp_at));
        tar_below += tar_at;
        imp_below += imp_at;
    }
    Ok(SortedTrials {
        thresholds,
        tar_below_at,
        imp_above_at,
        n_tar,
        n_imp,
    })
}

/// Equal error rate and the threshold at which it is attained.
///
/// The sweep visits, per distinct score s in ascending order, the operating
/// point exactly at s (scores equal to the threshold count half as a miss and
/// half as a false alarm) and the point just above s (every score ≤ s missed
/// or rejected). The miss/false-alarm crossing is located on this polyline by
/// linear interpolation.
pub fn compute_eer(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    let st = sort_trials(scores, labels)?;
    let n_tar = st.n_tar as f64;
    let n_imp = st.n_imp as f64;
    // (threshold, p_miss, p_fa), with the accept-all corner first.
    let mut points: Vec<(f64, f64, f64)> = Vec::with_capacity(2 * st.thresholds.len() + 1);
    points.push((f64::NEG_INFINITY, 0.0, 1.0));
    for (idx, &t) in st.thresholds.iter().enumerate() {
        let (tb, ta) = st.tar_below_at[idx];
        let (ia, iat) = st.imp_above_at[idx];
        // Threshold exactly at t, ties half-counted.
        points.push((
            t,
            (tb as f64 + 0.5 * ta as f64) / n_tar,
            (ia as f64 + 0.5 * iat as f64) / n_imp,
        ));
        // Threshold just above t: representative value is the midpoint to the
        // next distinct score (or t itself at the top, where this is the
        // reject-all corner).
        let thr = if idx + 1 < st.thresholds.len() {
            0.5 * (t + st.thresholds[idx + 1])
        } else {
            t
        };
        points.push((
            thr,
            (tb + ta) as f64 / n_tar,
            ia as f64 / n_imp,
        ));
    }

    for w in points.windows(2) {
        let (t0, m0, f0) = w[0];
        let (t1, m1, f1) = w[1];
        let d0 = m0 - f0;
        let d1 = m1 - f1;
        if d1 >= 0.0 {
            if d1 == 0.0 {
                return Ok((m1, t1));
            }
            // d0 < 0 < d1: interpolate.
            let alpha = -d0 / (d1 - d0);
            let eer = m0 + alpha * (m1 - m0);
            let thr = if t0.is_finite() {
                t0 + alpha * (t1 - t0)
            } else {
                t1
            };
            return Ok((eer, thr));
        }
    }
    unreachable!("p_miss - p_fa reaches +1 at the reject-all corner");
}

/// Minimum detection cost and its threshold (decision: accept iff
/// score > threshold).
pub fn compute_min_dcf(scores: &[f64], labels: &[bool], costs: &CostParams) -> Result<(f64, f64)> {
    costs.validate()?;
    let st = sort_trials(scores, labels)?;
    let norm = if costs.normalized {
        (costs.c_miss * costs.p_target).min(costs.c_fa * (1.0 - costs.p_target))
    } else {
        1.0
    };
    let mut best = f64::INFINITY;
    let mut best_thr = f64::NEG_INFINITY;
    let mut consider = |thr: f64, p_miss: f64, p_fa: f64| {
        let dcf =
            (costs.c_miss * costs.p_target * p_miss + costs.c_fa * (1.0 - costs.p_target) * p_fa)
                / norm;
        if dcf < best {
            best = dcf;
            best_thr = thr;
        }
    };
    // Accept everything.
    consider(f64::NEG_INFINITY, 0.0, 1.0);
    let mut tar_le = 0usize;
    for (idx, &t) in st.thresholds.iter().enumerate() {
        let (_, ta) = st.tar_below_at[idx];
        let (ia, _) = st.imp_above_at[idx];
        tar_le += ta;
        consider(t, tar_le as f64 / st.n_tar as f64, ia as f64 / st.n_imp as f64);
    }
    // Reject everything.
    consider(f64::INFINITY, 1.0, 0.0);
    Ok((best, best_thr))
}

/// DET operating points (accept iff score > threshold), one per distinct
/// score plus the accept-all corner.
pub fn det_points(scores: &[f64], labels: &[bool]) -> Result<DetCurve> {
    let st = sort_trials(scores, labels)?;
    let mut points = Vec::with_capacity(st.thresholds.len() + 1);
    points.push(DetPoint {
        threshold: f64::NEG_INFINITY,
        p_miss: 0.0,
        p_fa: 1.0,
    });
    let mut tar_le = 0usize;
    for (idx, &t) in st.thresholds.iter().enumerate() {
        let (_, ta) = st.tar_below_at[idx];
        let (ia, _) = st.imp_above_at[idx];
        tar_le += ta;
        points.push(DetPoint {
            threshold: t,
            p_miss: tar_le as f64 / st.n_tar as f64,
            p_fa: ia as f64 / st.n_imp as f64,
        });
    }
    Ok(DetCurve { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    // Brute-force oracles: direct counting at every candidate threshold.

    fn oracle_point_half_ties(scores: &[f64], labels: &[bool], t: f64) -> (f64, f64) {
        let mut miss = 0.0;
        let mut fa = 0.0;
        let mut n_tar = 0.0;
        let mut n_imp = 0.0;
        for (&s, &l) in scores.iter().zip(labels) {
            if l {
                n_tar += 1.0;
                if s < t {
                    miss += 1.0;
                } else if s == t {
                    miss += 0.5;
                }
            } else {
                n_imp += 1.0;
                if s > t {
                    fa += 1.0;
                } else if s == t {
                    fa += 0.5;
                }
            }
        }
        (miss / n_tar, fa / n_imp)
    }

    fn oracle_eer(scores: &[f64], labels: &[bool]) -> f64 {
        let mut ts: Vec<f64> = scores.to_vec();
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts.dedup();
        let mut pts = vec![(0.0f64, 1.0f64)];
        for &t in &ts {
            pts.push(oracle_point_half_ties(scores, labels, t));
            pts.push(oracle_point_strict(scores, labels, t));
        }
        for w in pts.windows(2) {
            let d0 = w[0].0 - w[0].1;
            let d1 = w[1].0 - w[1].1;
            if d1 >= 0.0 {
                if d1 == 0.0 {
                    return w[1].0;
                }
                let alpha = -d0 / (d1 - d0);
                return w[0].0 + alpha * (w[1].0 - w[0].0);
            }
        }
        unreachable!()
    }

    fn oracle_point_strict(scores: &[f64], labels: &[bool], t: f64) -> (f64, f64) {
        let mut miss = 0.0;
        let mut fa = 0.0;
        let mut n_tar = 0.0;
        let mut n_imp = 0.0;
        for (&s, &l) in scores.iter().zip(labels) {
            if l {
                n_tar += 1.0;
                if s <= t {
                    miss += 1.0;
                }
            } else {
                n_imp += 1.0;
                if s > t {
                    fa += 1.0;
                }
            }
        }
        (miss / n_tar, fa / n_imp)
    }

    fn oracle_min_dcf(scores: &[f64], labels: &[bool], c: &CostParams) -> f64 {
        let mut ts: Vec<f64> = scores.to_vec();
        ts.push(f64::NEG_INFINITY);
        ts.push(f64::INFINITY);
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts.dedup();
        let norm = if c.normalized {
            (c.c_miss * c.p_target).min(c.c_fa * (1.0 - c.p_target))
        } else {
            1.0
        };
        let mut best = f64::INFINITY;
        for &t in &ts {
            let (pm, pf) = if t == f64::NEG_INFINITY {
                (0.0, 1.0)
            } else if t == f64::INFINITY {
                (1.0, 0.0)
            } else {
                oracle_point_strict(scores, labels, t)
            };
            let dcf = (c.c_miss * c.p_target * pm + c.c_fa * (1.0 - c.p_target) * pf) / norm;
            best = best.min(dcf);
        }
        best
    }

    #[test]
    fn perfect_separation() {
        let scores = [1.0, 1.0, 1.0, 0.0, 0.0];
        let labels = [true, true, true, false, false];
        let (eer, _) = compute_eer(&scores, &labels).unwrap();
        assert_eq!(eer, 0.0);
        let (dcf, _) = compute_min_dcf(&scores, &labels, &CostParams::default()).unwrap();
        assert_eq!(dcf, 0.0);
    }

    #[test]
    fn identical_scores_give_chance() {
        let scores = [0.3; 6];
        let labels = [true, true, true, false, false, false];
        let (eer, _) = compute_eer(&scores, &labels).unwrap();
        assert_eq!(eer, 0.5);
    }

    #[test]
    fn six_trial_example_matches_oracle() {
        let scores = [0.9, 0.8, 0.3, 0.7, 0.2, 0.1];
        let labels = [true, true, true, false, false, false];
        let (eer, _) = compute_eer(&scores, &labels).unwrap();
        assert!((eer - oracle_eer(&scores, &labels)).abs() < 1e-15);
        // Hand value: just above 0.3, one target (0.3) is missed and one
        // impostor (0.7) is accepted.
        assert!((eer - 1.0 / 3.0).abs() < 1e-12);
        let costs = CostParams {
            p_target: 0.001,
            ..Default::default()
        };
        let (dcf, _) = compute_min_dcf(&scores, &labels, &costs).unwrap();
        assert!((dcf - oracle_min_dcf(&scores, &labels, &costs)).abs() < 1e-15);
    }

    #[test]
    fn all_reject_boundary_cost_is_one_when_normalizer_is_miss_side() {
        // p_target small => normalizer = c_miss * p_target; the all-reject
        // point costs exactly 1 after normalization, and the minimum can
        // never exceed it.
        let scores = [0.5, 0.4];
        let labels = [false, true]; // targets score lower: poor separation
        let costs = CostParams::default();
        let (dcf, _) = compute_min_dcf(&scores, &labels, &costs).unwrap();
        assert!(dcf <= 1.0 + 1e-15);
        // The all-reject operating point itself evaluates to exactly 1.
        let norm = (costs.c_miss * costs.p_target).min(costs.c_fa * (1.0 - costs.p_target));
        let reject_all = costs.c_miss * costs.p_target * 1.0 / norm;
        assert_eq!(reject_all, 1.0);
    }

    #[test]
    fn random_sets_match_brute_force() {
        let mut rng = ChaCha12Rng::seed_from_u64(5150);
        for case in 0..50 {
            let n = rng.random_range(4..30);
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            let mut n_tar = 0;
            for i in 0..n {
                // Quantize scores so ties actually occur.
                let s = (rng.random_range(-1.0f64..1.0) * 4.0).round() / 4.0;
                let l = rng.random_bool(0.5) || (i == n - 1 && n_tar == 0);
                if l {
                    n_tar += 1;
                }
                scores.push(s);
                labels.push(l);
            }
            if n_tar == n {
                labels[0] = false;
            }
            let (eer, _) = compute_eer(&scores, &labels).unwrap();
            let want = oracle_eer(&scores, &labels);
            assert!(
                (eer - want).abs() < 1e-12,
                "case {case}: eer {eer} vs oracle {want}"
            );
            let costs = CostParams {
                c_miss: 1.0,
                c_fa: 2.0,
                p_target: 0.05,
                normalized: true,
            };
            let (dcf, _) = compute_min_dcf(&scores, &labels, &costs).unwrap();
            let want = oracle_min_dcf(&scores, &labels, &costs);
            assert!(
                (dcf - want).abs() < 1e-12,
                "case {case}: dcf {dcf} vs oracle {want}"
            );
        }
    }

    #[test]
    fn metrics_invariant_under_monotone_transforms() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let scores: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0f64..2.0)).collect();
        let labels: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let (eer0, _) = compute_eer(&scores, &labels).unwrap();
        let (dcf0, _) = compute_min_dcf(&scores, &labels, &CostParams::default()).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| 3.5 * s + 11.0).collect();
        let cubic: Vec<f64> = scores.iter().map(|s| s.powi(3) + s).collect();
        for transformed in [affine, cubic] {
            let (eer, _) = compute_eer(&transformed, &labels).unwrap();
            let (dcf, _) = compute_min_dcf(&transformed, &labels, &CostParams::default()).unwrap();
            assert!((eer - eer0).abs() < 1e-12);
            assert!((dcf - dcf0).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_invariant_under_permutation() {
        let scores = [0.9, 0.1, 0.5, 0.4, 0.6, 0.2];
        let labels = [true, false, true, false, true, false];
        let perm = [3usize, 0, 5, 1, 4, 2];
        let pscores: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let plabels: Vec<bool> = perm.iter().map(|&i| labels[i]).collect();
        assert_eq!(
            compute_eer(&scores, &labels).unwrap().0,
            compute_eer(&pscores, &plabels).unwrap().0
        );
        assert_eq!(
            compute_min_dcf(&scores, &labels, &CostParams::default())
                .unwrap()
                .0,
            compute_min_dcf(&pscores, &plabels, &CostParams::default())
                .unwrap()
                .0
        );
    }

    #[test]
    fn min_dcf_not_above_cost_at_eer_threshold() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0f64..1.0)).collect();
            let labels: Vec<bool> = (0..30).map(|i| i % 2 == 0).collect();
            let costs = CostParams::default();
            let (dcf, _) = compute_min_dcf(&scores, &labels, &costs).unwrap();
            let (_, thr) = compute_eer(&scores, &labels).unwrap();
            let (pm, pf) = oracle_point_strict(&scores, &labels, thr);
            let norm = (costs.c_miss * costs.p_target).min(costs.c_fa * (1.0 - costs.p_target));
            let at_eer =
                (costs.c_miss * costs.p_target * pm + costs.c_fa * (1.0 - costs.p_target) * pf)
                    / norm;
            assert!(dcf <= at_eer + 1e-12);
        }
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(compute_eer(&[1.0, 2.0], &[true, true]).is_err());
        assert!(compute_eer(&[1.0, 2.0], &[false, false]).is_err());
        assert!(det_points(&[1.0], &[true]).is_err());
    }

    #[test]
    fn det_three_point_curve() {
        let scores = [1.0, 0.0];
        let labels = [true, false];
        let det = det_points(&scores, &labels).unwrap();
        assert_eq!(det.points.len(), 3);
        assert_eq!((det.points[0].p_miss, det.points[0].p_fa), (0.0, 1.0));
        assert_eq!((det.points[1].p_miss, det.points[1].p_fa), (0.0, 0.0));
        assert_eq!((det.points[2].p_miss, det.points[2].p_fa), (1.0, 0.0));
    }

    #[test]
    fn det_collapses_duplicate_scores() {
        let scores = [0.5, 0.5, 0.5, 0.2];
        let labels = [true, true, false, false];
        let det = det_points(&scores, &labels).unwrap();
        // -inf, 0.2, 0.5
        assert_eq!(det.points.len(), 3);
    }

    #[test]
    fn det_matches_counting_oracle_and_is_monotone() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let scores: Vec<f64> = (0..100)
            .map(|_| (rng.random_range(-1.0f64..1.0) * 8.0).round() / 8.0)
            .collect();
        let labels: Vec<bool> = (0..100).map(|i| i % 4 != 0).collect();
        let det = det_points(&scores, &labels).unwrap();
        for p in &det.points[1..] {
            let (pm, pf) = oracle_point_strict(&scores, &labels, p.threshold);
            assert_eq!(p.p_miss, pm);
            assert_eq!(p.p_fa, pf);
        }
        for w in det.points.windows(2) {
            assert!(w[0].p_miss <= w[1].p_miss);
            assert!(w[0].p_fa >= w[1].p_fa);
            assert!(w[0].threshold < w[1].threshold);
        }
    }
}
