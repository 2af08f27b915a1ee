//! Exact binary-classification metrics: step ROC, AUC, EER, HTER, TPR at a
//! fixed FPR. Scores are live probabilities; label 1 = live, 0 = spoof.
//!
//! Counts stay integral as long as possible so the trapezoid AUC equals the
//! tie-corrected rank statistic without accumulation error.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// One operating point of the step ROC: classify live when score >= threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    /// True positives at this threshold (lives accepted).
    pub tp: usize,
    /// False positives at this threshold (spoofs accepted).
    pub fp: usize,
    pub tpr: f64,
    pub fpr: f64,
}

fn validate_scores(scores: &[f64], labels: &[usize]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::usage(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::usage("scores must be finite"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::usage(format!("label {bad} out of range")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::usage(format!(
            "need both classes to rank: {pos} live / {neg} spoof"
        )));
    }
    Ok((pos, neg))
}

/// Exact step ROC over descending unique scores. All samples sharing a tied
/// score flip together, so each point is a reachable operating point. The
/// first point is the accept-nothing sentinel at threshold +inf.
pub fn roc(scores: &[f64], labels: &[usize]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = validate_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        tp: 0,
        fp: 0,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            tp,
            fp,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        });
    }
    Ok(points)
}

/// Trapezoidal area under the step ROC. The numerator is accumulated in
/// integers, making this exactly the rank statistic
/// P(score_live > score_spoof) + P(equal)/2.
pub fn auc(points: &[RocPoint]) -> f64 {
    let last = points.last().expect("roc always yields points");
    let (pos, neg) = (last.tp, last.fp);
    let mut num: u64 = 0;
    for w in points.windows(2) {
        let dfp = (w[1].fp - w[0].fp) as u64;
        num += dfp * (w[0].tp + w[1].tp) as u64;
    }
    num as f64 / (2 * pos * neg) as f64
}

/// Equal-error-rate summary; `hter` here is FAR/FRR averaged at `threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerReport {
    pub eer: f64,
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Threshold choice: minimal |FAR - FRR| over the ROC points, then minimal
/// (FAR+FRR)/2, then the lowest threshold. The second key only matters when
/// the step curve jumps over the FAR = FRR crossing with equal overshoot on
/// both sides; preferring the smaller error there keeps the result invariant
/// under score negation + label swap.
pub fn eer(points: &[RocPoint]) -> EerReport {
    let last = points.last().expect("roc always yields points");
    let (pos, neg) = (last.tp as f64, last.fp as f64);
    let mut best: Option<(f64, f64, EerReport)> = None;
    for p in points {
        let far = p.fp as f64 / neg;
        let frr = (last.tp - p.tp) as f64 / pos;
        let gap = (far - frr).abs();
        let mean = (far + frr) / 2.0;
        let replace = match &best {
            None => true,
            // later point = lower threshold, so ties replace
            Some((g, m, _)) => (gap, mean) <= (*g, *m),
        };
        if replace {
            best = Some((
                gap,
                mean,
                EerReport {
                    eer: mean,
                    threshold: p.threshold,
                    far,
                    frr,
                },
            ));
        }
    }
    best.unwrap().2
}

/// Maximum TPR among ROC points with FPR <= target; step convention, no
/// interpolation.
pub fn tpr_at_fpr(points: &[RocPoint], fpr_target: f64) -> Result<f64> {
    if !(fpr_target > 0.0 && fpr_target < 1.0) {
        return Err(Error::usage(format!(
            "FPR target must lie in (0,1), got {fpr_target}"
        )));
    }
    Ok(points
        .iter()
        .filter(|p| p.fpr <= fpr_target)
        .map(|p| p.tpr)
        .fold(0.0, f64::max))
}

/// How the reported HTER picks its operating threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HterMode {
    /// At the EER threshold of the same score set (so HTER == EER).
    #[default]
    AtEerThreshold,
    /// At a fixed threshold of 0.5 on the live probability.
    FixedHalf,
}

/// FAR/FRR of the rule "live iff score >= threshold".
pub fn far_frr_at(scores: &[f64], labels: &[usize], threshold: f64) -> Result<(f64, f64)> {
    let (pos, neg) = validate_scores(scores, labels)?;
    let mut fa = 0usize;
    let mut fr = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        if l == 1 && s < threshold {
            fr += 1;
        }
        if l == 0 && s >= threshold {
            fa += 1;
        }
    }
    Ok((fa as f64 / neg as f64, fr as f64 / pos as f64))
}

/// Full evaluation summary of one scored sample set.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub live: usize,
    pub spoof: usize,
    pub auc: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    pub hter: f64,
    /// (FPR target, achieved TPR) pairs, ascending by target.
    pub tpr_at_fpr: Vec<(f64, f64)>,
}

/// Default FPR target reported everywhere: 1%.
pub const FPR_TARGET: f64 = 0.01;

pub fn eval_report(
    scores: &[f64],
    labels: &[usize],
    mode: HterMode,
    fpr_targets: &[f64],
) -> Result<EvalReport> {
    let (pos, neg) = validate_scores(scores, labels)?;
    let points = roc(scores, labels)?;
    let e = eer(&points);
    let hter = match mode {
        HterMode::AtEerThreshold => e.eer,
        HterMode::FixedHalf => {
            let (far, frr) = far_frr_at(scores, labels, 0.5)?;
            (far + frr) / 2.0
        }
    };
    let mut targets = fpr_targets.to_vec();
    targets.sort_by(f64::total_cmp);
    let tpr_at = targets
        .into_iter()
        .map(|t| tpr_at_fpr(&points, t).map(|v| (t, v)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        live: pos,
        spoof: neg,
        auc: auc(&points),
        eer: e.eer,
        eer_threshold: e.threshold,
        hter,
        tpr_at_fpr: tpr_at,
    })
}

impl EvalReport {
    /// TPR at the standard 1% FPR target, if it was requested.
    pub fn tpr_at_standard(&self) -> Option<f64> {
        self.tpr_at_fpr
            .iter()
            .find(|(t, _)| *t == FPR_TARGET)
            .map(|&(_, v)| v)
    }

    pub fn to_csv(&self) -> String {
        let mut head = vec![
            "live".to_string(),
            "spoof".into(),
            "auc".into(),
            "eer".into(),
            "eer_threshold".into(),
            "hter".into(),
        ];
        let mut row = vec![
            self.live.to_string(),
            self.spoof.to_string(),
            format!("{:.6}", self.auc),
            format!("{:.6}", self.eer),
            format!("{:.6}", self.eer_threshold),
            format!("{:.6}", self.hter),
        ];
        for (t, v) in &self.tpr_at_fpr {
            head.push(format!("tpr_at_fpr_{t}"));
            row.push(format!("{v:.6}"));
        }
        format!("{}\n{}\n", head.join(","), row.join(","))
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples:       {} live / {} spoof", self.live, self.spoof)?;
        writeln!(f, "auc:           {:.4}", self.auc)?;
        writeln!(
            f,
            "eer:           {:.4} (threshold {:.4})",
            self.eer, self.eer_threshold
        )?;
        writeln!(f, "hter:          {:.4}", self.hter)?;
        for (t, v) in &self.tpr_at_fpr {
            writeln!(f, "tpr@fpr={:<5} {v:.4}", format!("{t}:"))?;
        }
        Ok(())
    }
}

/// Reads `sample_id,score,label` rows. Returns (ids, scores, labels).
pub fn read_scores_csv(path: &Path) -> Result<(Vec<String>, Vec<f64>, Vec<usize>)> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let expect = ["sample_id", "score", "label"];
    if headers.iter().collect::<Vec<_>>() != expect {
        return Err(Error::format(format!(
            "{}: expected header {}, got {}",
            path.display(),
            expect.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let (mut ids, mut scores, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let ctx = |what: &str| {
            Error::format(format!(
                "{} row {}: bad {what} {:?}",
                path.display(),
                i + 2,
                rec.iter().collect::<Vec<_>>()
            ))
        };
        if rec.len() != 3 {
            return Err(ctx("field count"));
        }
        ids.push(rec[0].to_string());
        scores.push(rec[1].parse::<f64>().map_err(|_| ctx("score"))?);
        let label: usize = rec[2].parse().map_err(|_| ctx("label"))?;
        if label > 1 {
            return Err(ctx("label"));
        }
        labels.push(label);
    }
    Ok((ids, scores, labels))
}

/// Writes `sample_id,score,label` rows readable by [`read_scores_csv`].
pub fn write_scores_csv(
    path: &Path,
    ids: &[String],
    scores: &[f64],
    labels: &[usize],
) -> Result<()> {
    let mut out = String::from("sample_id,score,label\n");
    for ((id, s), l) in ids.iter().zip(scores).zip(labels) {
        out.push_str(&format!("{id},{s},{l}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng as _;

    // ---- brute-force oracles: enumerate candidate thresholds directly ----

    fn oracle_counts(scores: &[f64], labels: &[usize], t: f64) -> (usize, usize) {
        let mut tp = 0;
        let mut fp = 0;
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                if l == 1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        (tp, fp)
    }

    fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
        let mut t = scores.to_vec();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t.push(f64::INFINITY);
        t
    }

    fn oracle_auc(scores: &[f64], labels: &[usize]) -> f64 {
        let mut num = 0u64;
        let mut pairs = 0u64;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1;
                num += match si.total_cmp(&sj) {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
        num as f64 / (2 * pairs) as f64
    }

    fn oracle_eer(scores: &[f64], labels: &[usize]) -> EerReport {
        let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
        let neg = labels.len() as f64 - pos;
        let mut best: Option<(f64, f64, EerReport)> = None;
        // descending thresholds, so later = lower, matching the tie rule
        for &t in candidate_thresholds(scores).iter().rev() {
            let (tp, fp) = oracle_counts(scores, labels, t);
            let far = fp as f64 / neg;
            let frr = (pos - tp as f64) / pos;
            let gap = (far - frr).abs();
            let mean = (far + frr) / 2.0;
            if best
                .as_ref()
                .map(|(g, m, _)| (gap, mean) <= (*g, *m))
                .unwrap_or(true)
            {
                best = Some((
                    gap,
                    mean,
                    EerReport {
                        eer: mean,
                        threshold: t,
                        far,
                        frr,
                    },
                ));
            }
        }
        best.unwrap().2
    }

    fn oracle_tpr_at_fpr(scores: &[f64], labels: &[usize], target: f64) -> f64 {
        let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
        let neg = labels.len() as f64 - pos;
        let mut best = 0.0f64;
        for &t in &candidate_thresholds(scores) {
            let (tp, fp) = oracle_counts(scores, labels, t);
            if fp as f64 / neg <= target {
                best = best.max(tp as f64 / pos);
            }
        }
        best
    }

    fn random_instance(seed: u64, max_n: usize) -> (Vec<f64>, Vec<usize>) {
        let mut rng = stream_rng(seed, Stream::Check);
        loop {
            let n = rng.random_range(2..=max_n);
            // a coarse grid makes ties common
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..=8) as f64 / 8.0).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..=1)).collect();
            if labels.iter().any(|&l| l == 1) && labels.iter().any(|&l| l == 0) {
                return (scores, labels);
            }
        }
    }

    #[test]
    fn hand_case_auc_eight_ninths() {
        let scores = [0.9, 0.8, 0.4, 0.7, 0.3, 0.1];
        let labels = [1, 1, 1, 0, 0, 0];
        let points = roc(&scores, &labels).unwrap();
        assert_eq!(auc(&points), 8.0 / 9.0);
        let e = eer(&points);
        assert!((e.eer - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(e.threshold, 0.7);
    }

    #[test]
    fn perfect_separation() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [1, 1, 0, 0];
        let points = roc(&scores, &labels).unwrap();
        assert!(points.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(auc(&points), 1.0);
        let e = eer(&points);
        assert_eq!(e.eer, 0.0);
        assert_eq!(e.threshold, 0.8); // lowest zero-gap threshold
        assert_eq!(tpr_at_fpr(&points, 0.01).unwrap(), 1.0);
    }

    #[test]
    fn all_scores_equal() {
        let scores = [0.5; 4];
        let labels = [1, 0, 1, 0];
        let points = roc(&scores, &labels).unwrap();
        assert_eq!(points.len(), 2);
        assert_eq!((points[0].fpr, points[0].tpr), (0.0, 0.0));
        assert_eq!((points[1].fpr, points[1].tpr), (1.0, 1.0));
        assert_eq!(auc(&points), 0.5);
        assert_eq!(eer(&points).eer, 0.5);
    }

    #[test]
    fn single_class_is_usage_error() {
        let err = roc(&[0.1, 0.2], &[1, 1]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let err = roc(&[0.1, f64::NAN], &[1, 0]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn tpr_at_fpr_validation_and_step() {
        let scores = [0.9, 0.8, 0.7, 0.1];
        let labels = [0, 1, 1, 0];
        let points = roc(&scores, &labels).unwrap();
        // one spoof sits above every live: nothing accepted below fpr 0.5
        assert_eq!(tpr_at_fpr(&points, 0.01).unwrap(), 0.0);
        assert_eq!(tpr_at_fpr(&points, 0.5).unwrap(), 1.0);
        assert!(tpr_at_fpr(&points, 0.0).is_err());
        assert!(tpr_at_fpr(&points, 1.0).is_err());
    }

    #[test]
    fn spoofs_above_lives_scores_zero() {
        let mut scores = vec![0.9; 10];
        let mut labels = vec![0usize; 10];
        scores.extend([0.1, 0.2]);
        labels.extend([1, 1]);
        let points = roc(&scores, &labels).unwrap();
        assert_eq!(tpr_at_fpr(&points, 0.01).unwrap(), 0.0);
        assert_eq!(auc(&points), 0.0);
    }

    #[test]
    fn oracle_equivalence_small_instances() {
        for seed in 0..400u64 {
            let (scores, labels) = random_instance(seed, 12);
            let points = roc(&scores, &labels).unwrap();
            assert_eq!(
                auc(&points),
                oracle_auc(&scores, &labels),
                "auc seed {seed} {scores:?} {labels:?}"
            );
            let got = eer(&points);
            let want = oracle_eer(&scores, &labels);
            assert_eq!(got, want, "eer seed {seed} {scores:?} {labels:?}");
            for target in [0.01, 0.1, 0.25, 0.5] {
                assert_eq!(
                    tpr_at_fpr(&points, target).unwrap(),
                    oracle_tpr_at_fpr(&scores, &labels, target),
                    "tpr seed {seed} target {target}"
                );
            }
        }
    }

    #[test]
    fn roc_matches_enumeration_on_mixed_case() {
        let scores = [0.9, 0.7, 0.7, 0.5, 0.3, 0.3];
        let labels = [1, 1, 0, 0, 1, 0];
        let points = roc(&scores, &labels).unwrap();
        for p in &points {
            let (tp, fp) = oracle_counts(&scores, &labels, p.threshold);
            assert_eq!((p.tp, p.fp), (tp, fp), "at {}", p.threshold);
        }
        // every distinct enumerated operating point appears
        assert_eq!(points.len(), candidate_thresholds(&scores).len());
    }

    #[test]
    fn monotone_transform_invariance() {
        let maps: [fn(f64) -> f64; 5] = [
            |x| 2.0 * x + 1.0,
            |x| x * x * x,
            |x| x.atan(),
            |x| x.exp(),
            |x| x / (1.0 + x.abs()),
        ];
        for seed in 0..40u64 {
            let (scores, labels) = random_instance(seed, 12);
            let base = roc(&scores, &labels).unwrap();
            let (a0, e0) = (auc(&base), eer(&base).eer);
            let t0 = tpr_at_fpr(&base, 0.25).unwrap();
            for (mi, m) in maps.iter().enumerate() {
                let mapped: Vec<f64> = scores.iter().map(|&s| m(s)).collect();
                let pts = roc(&mapped, &labels).unwrap();
                assert_eq!(auc(&pts), a0, "map {mi} seed {seed}");
                assert_eq!(eer(&pts).eer, e0, "map {mi} seed {seed}");
                assert_eq!(tpr_at_fpr(&pts, 0.25).unwrap(), t0, "map {mi} seed {seed}");
            }
        }
    }

    #[test]
    fn flip_symmetry_of_rank_metrics() {
        // negating scores and swapping labels mirrors every operating point,
        // so AUC, EER and HTER are preserved; TPR@FPR is tied to one axis
        // and is not expected to survive the flip under the step convention.
        for seed in 0..60u64 {
            let (scores, labels) = random_instance(seed, 12);
            let flipped_scores: Vec<f64> = scores.iter().map(|s| -s).collect();
            let flipped_labels: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
            let a = roc(&scores, &labels).unwrap();
            let b = roc(&flipped_scores, &flipped_labels).unwrap();
            assert_eq!(auc(&a), auc(&b), "seed {seed}");
            assert_eq!(eer(&a).eer, eer(&b).eer, "seed {seed}");
        }
    }

    #[test]
    fn auc_complement_under_negation() {
        for seed in 0..60u64 {
            let (scores, labels) = random_instance(seed, 12);
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let a = auc(&roc(&scores, &labels).unwrap());
            let b = auc(&roc(&neg, &labels).unwrap());
            // exact in counts; the two float divisions leave at most an ulp
            assert!((a + b - 1.0).abs() < 1e-12, "seed {seed}: {a} + {b}");
        }
    }

    #[test]
    fn random_scores_auc_near_half() {
        let mut rng = stream_rng(99, Stream::Check);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..=1)).collect();
        let a = auc(&roc(&scores, &labels).unwrap());
        assert!((a - 0.5).abs() < 0.02, "{a}");
    }

    #[test]
    fn hter_modes() {
        let scores = [0.9, 0.6, 0.4, 0.1];
        let labels = [1, 0, 1, 0];
        let r = eval_report(&scores, &labels, HterMode::AtEerThreshold, &[0.01]).unwrap();
        assert_eq!(r.hter, r.eer);
        let f = eval_report(&scores, &labels, HterMode::FixedHalf, &[0.01]).unwrap();
        // at 0.5: one spoof accepted (0.6), one live rejected (0.4)
        assert_eq!(f.hter, 0.5);
        assert_eq!(r.tpr_at_standard(), Some(0.5));
    }

    #[test]
    fn csv_round_trip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        let scores = [0.9, 0.8, 0.3, 0.2];
        let labels = [1, 1, 0, 0];
        write_scores_csv(&path, &ids, &scores, &labels).unwrap();
        let (rids, rscores, rlabels) = read_scores_csv(&path).unwrap();
        assert_eq!(rids, ids);
        assert_eq!(rscores, scores);
        assert_eq!(rlabels, labels);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "sample_id,score,label\na,0.5,2\n").unwrap();
        assert_eq!(read_scores_csv(&bad).unwrap_err().exit_code(), 2);
        std::fs::write(&bad, "sample_id,points,label\na,0.5,1\n").unwrap();
        assert_eq!(read_scores_csv(&bad).unwrap_err().exit_code(), 2);
        std::fs::write(&bad, "sample_id,score,label\na,zap,1\n").unwrap();
        assert_eq!(read_scores_csv(&bad).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn report_render() {
        let scores = [0.9, 0.8, 0.3, 0.2];
        let labels = [1, 1, 0, 0];
        let r = eval_report(&scores, &labels, HterMode::AtEerThreshold, &[0.01, 0.1]).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("live,spoof,auc,"), "{csv}");
        assert!(csv.contains("tpr_at_fpr_0.01"));
        assert_eq!(csv.lines().count(), 2);
        let text = format!("{r}");
        assert!(text.contains("auc:"), "{text}");
    }
}
