//! Evaluation metrics: point-wise detection quality over label assignments,
//! and set-to-set quality of generated poses against ground-truth poses.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{rotation_angle, translation_distance, Pose};

/// Point-wise detection quality for one or more clouds, computed from
/// flattened per-point label assignments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionReport {
    /// Fraction of points whose predicted label matches the truth,
    /// background included.
    pub accuracy: f64,
    /// Mean intersection-over-union over non-background classes that appear
    /// in the prediction or the truth (classes absent from both are skipped).
    pub mean_iou: f64,
    /// Mean per-class recall over non-background classes present in the
    /// truth.
    pub mean_class_accuracy: f64,
    /// Intersection-over-union per participating non-background class.
    pub per_class_iou: BTreeMap<String, f64>,
    /// Intersection-over-union of the background class itself, reported
    /// separately so `mean_iou` stays a foreground metric.
    pub background_iou: f64,
    pub points: usize,
}

/// Computes detection metrics from per-point class indices into `labels`.
/// `background` is the index of the background class, which counts toward
/// `accuracy` but is excluded from `mean_iou` and `mean_class_accuracy`.
pub fn detection_report(
    predicted: &[usize],
    truth: &[usize],
    labels: &[String],
    background: usize,
) -> Result<DetectionReport> {
    if predicted.len() != truth.len() {
        return Err(Error::shape(
            "detection_report",
            format!(
                "prediction has {} points but truth has {}",
                predicted.len(),
                truth.len()
            ),
        ));
    }
    if predicted.is_empty() {
        return Err(Error::Usage("no points to score".into()));
    }
    if background >= labels.len() {
        return Err(Error::shape(
            "detection_report",
            format!("background index {background} outside the {} labels", labels.len()),
        ));
    }
    let k = labels.len();
    let mut intersection = vec![0usize; k];
    let mut predicted_count = vec![0usize; k];
    let mut truth_count = vec![0usize; k];
    let mut hits = 0usize;
    for (i, (&p, &t)) in predicted.iter().zip(truth.iter()).enumerate() {
        if p >= k || t >= k {
            return Err(Error::shape(
                "detection_report",
                format!("point {i}: class index {} outside the {k} labels", p.max(t)),
            ));
        }
        predicted_count[p] += 1;
        truth_count[t] += 1;
        if p == t {
            hits += 1;
            intersection[p] += 1;
        }
    }
    let mut per_class_iou = BTreeMap::new();
    let mut iou_sum = 0.0;
    let mut iou_classes = 0usize;
    let mut recall_sum = 0.0;
    let mut recall_classes = 0usize;
    for j in 0..k {
        if j == background {
            continue;
        }
        let union = predicted_count[j] + truth_count[j] - intersection[j];
        if union > 0 {
            let iou = intersection[j] as f64 / union as f64;
            per_class_iou.insert(labels[j].clone(), iou);
            iou_sum += iou;
            iou_classes += 1;
        }
        if truth_count[j] > 0 {
            recall_sum += intersection[j] as f64 / truth_count[j] as f64;
            recall_classes += 1;
        }
    }
    let bg_union = predicted_count[background] + truth_count[background] - intersection[background];
    Ok(DetectionReport {
        accuracy: hits as f64 / predicted.len() as f64,
        mean_iou: if iou_classes > 0 {
            iou_sum / iou_classes as f64
        } else {
            0.0
        },
        mean_class_accuracy: if recall_classes > 0 {
            recall_sum / recall_classes as f64
        } else {
            0.0
        },
        per_class_iou,
        background_iou: if bg_union > 0 {
            intersection[background] as f64 / bg_union as f64
        } else {
            1.0
        },
        points: predicted.len(),
    })
}

/// Match thresholds and the rotation weight used by the pose metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseThresholds {
    /// Maximum translation distance for a pose to count as covered, meters.
    pub max_translation: f64,
    /// Maximum rotation angle for a pose to count as covered, radians.
    pub max_rotation: f64,
    /// Meters-per-radian weight folding rotation into the similarity cost,
    /// chosen so the two thresholds contribute equally at their limits.
    pub rotation_weight: f64,
}

impl Default for PoseThresholds {
    fn default() -> Self {
        let max_translation = 0.02;
        let max_rotation = 30f64.to_radians();
        PoseThresholds {
            max_translation,
            max_rotation,
            rotation_weight: max_translation / max_rotation,
        }
    }
}

impl PoseThresholds {
    /// Display name of the coverage variant, e.g. `mCR@2cm/30°`.
    pub fn coverage_name(&self) -> String {
        format!(
            "mCR@{}cm/{}°",
            trim_float(self.max_translation * 100.0),
            trim_float(self.max_rotation.to_degrees())
        )
    }

    /// Display name of the similarity variant.
    pub fn similarity_name(&self) -> String {
        "mESM-λ".into()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_translation > 0.0
            && self.max_rotation > 0.0
            && self.rotation_weight > 0.0
            && self.max_translation.is_finite()
            && self.max_rotation.is_finite()
            && self.rotation_weight.is_finite())
        {
            return Err(Error::Usage(format!("invalid pose thresholds {self:?}")));
        }
        Ok(())
    }
}

fn trim_float(v: f64) -> String {
    let rounded = (v * 100.0).round() / 100.0;
    if (rounded - rounded.round()).abs() < 1e-9 {
        format!("{}", rounded.round() as i64)
    } else {
        format!("{rounded}")
    }
}

/// Fraction of `truth` poses that have at least one generated pose within
/// both thresholds. Truth must be non-empty; no generated poses means zero.
pub fn coverage_rate(generated: &[Pose], truth: &[Pose], th: &PoseThresholds) -> Result<f64> {
    th.validate()?;
    if truth.is_empty() {
        return Err(Error::Usage(
            "coverage is undefined for an empty ground-truth pose set".into(),
        ));
    }
    if generated.is_empty() {
        return Ok(0.0);
    }
    let mut covered = 0usize;
    for t in truth {
        for g in generated {
            if translation_distance(g, t) <= th.max_translation
                && rotation_angle(&g.quaternion, &t.quaternion)? <= th.max_rotation
            {
                covered += 1;
                break;
            }
        }
    }
    Ok(covered as f64 / truth.len() as f64)
}

/// Mean over generated poses of the distance to the nearest truth pose,
/// where distance is translation plus `rotation_weight` times the rotation
/// angle. Both sets must be non-empty.
pub fn similarity_metric(generated: &[Pose], truth: &[Pose], th: &PoseThresholds) -> Result<f64> {
    th.validate()?;
    if generated.is_empty() || truth.is_empty() {
        return Err(Error::Usage(
            "similarity needs non-empty generated and truth pose sets".into(),
        ));
    }
    let mut sum = 0.0;
    for g in generated {
        let mut best = f64::INFINITY;
        for t in truth {
            let cost = translation_distance(g, t)
                + th.rotation_weight * rotation_angle(&g.quaternion, &t.quaternion)?;
            if cost < best {
                best = cost;
            }
        }
        sum += best;
    }
    Ok(sum / generated.len() as f64)
}

/// Pose metrics for one (object, affordance) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosePairReport {
    pub object_id: String,
    pub label: String,
    pub coverage: f64,
    pub similarity: f64,
    pub truth_count: usize,
    pub generated_count: usize,
}

/// Aggregated pose metrics over all scored (object, affordance) pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseReport {
    /// Name of the coverage variant these numbers correspond to.
    pub coverage_metric: String,
    /// Name of the similarity variant.
    pub similarity_metric: String,
    pub thresholds: PoseThresholds,
    /// Mean of per-pair coverage rates.
    pub mean_coverage: f64,
    /// Mean of per-pair similarity costs.
    pub mean_similarity: f64,
    pub pairs: Vec<PosePairReport>,
}

/// Scores one (object, affordance) pair and aggregates many into a report.
pub fn score_pose_pair(
    object_id: &str,
    label: &str,
    generated: &[Pose],
    truth: &[Pose],
    th: &PoseThresholds,
) -> Result<PosePairReport> {
    let coverage = coverage_rate(generated, truth, th)?;
    let similarity = if generated.is_empty() {
        f64::INFINITY
    } else {
        similarity_metric(generated, truth, th)?
    };
    Ok(PosePairReport {
        object_id: object_id.into(),
        label: label.into(),
        coverage,
        similarity,
        truth_count: truth.len(),
        generated_count: generated.len(),
    })
}

pub fn pose_report(pairs: Vec<PosePairReport>, th: PoseThresholds) -> Result<PoseReport> {
    th.validate()?;
    if pairs.is_empty() {
        return Err(Error::Usage("no pose pairs were scored".into()));
    }
    let n = pairs.len() as f64;
    let mean_coverage = pairs.iter().map(|p| p.coverage).sum::<f64>() / n;
    let mean_similarity = pairs.iter().map(|p| p.similarity).sum::<f64>() / n;
    Ok(PoseReport {
        coverage_metric: th.coverage_name(),
        similarity_metric: th.similarity_name(),
        thresholds: th,
        mean_coverage,
        mean_similarity,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle_quaternion;

    fn labels(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn at(t: [f64; 3]) -> Pose {
        Pose::new([1.0, 0.0, 0.0, 0.0], t).unwrap()
    }

    fn rotated(axis: [f64; 3], angle: f64) -> Pose {
        Pose::new(axis_angle_quaternion(axis, angle).unwrap(), [0.0; 3]).unwrap()
    }

    #[test]
    fn hand_counted_detection_example() {
        // truth (A, A, B, B), prediction (A, B, B, B):
        // accuracy 3/4; IoU(A) = 1/2, IoU(B) = 2/3, mean 7/12;
        // recall(A) = 1/2, recall(B) = 1, mean 3/4.
        let names = labels(&["a", "b", "none"]);
        let report = detection_report(&[0, 1, 1, 1], &[0, 0, 1, 1], &names, 2).unwrap();
        assert_eq!(report.accuracy, 0.75);
        assert!((report.mean_iou - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(report.mean_class_accuracy, 0.75);
        assert_eq!(report.per_class_iou["a"], 0.5);
        assert!((report.per_class_iou["b"] - 2.0 / 3.0).abs() < 1e-15);
        // Background never appears on either side: vacuously perfect.
        assert_eq!(report.background_iou, 1.0);
        assert_eq!(report.points, 4);

        // Same points with one background point each side, one of them wrong:
        // truth (A, A, none, B), prediction (A, none, none, B) gives
        // background intersection 1 over union 2.
        let r2 = detection_report(&[0, 2, 2, 1], &[0, 0, 2, 1], &names, 2).unwrap();
        assert_eq!(r2.background_iou, 0.5);
    }

    #[test]
    fn accuracy_and_iou_are_symmetric_under_swap() {
        let names = labels(&["a", "b", "c", "none"]);
        let x = vec![0, 1, 2, 3, 0, 1, 3, 2, 2];
        let y = vec![0, 2, 2, 3, 1, 1, 0, 3, 2];
        let r1 = detection_report(&x, &y, &names, 3).unwrap();
        let r2 = detection_report(&y, &x, &names, 3).unwrap();
        assert_eq!(r1.accuracy, r2.accuracy);
        assert_eq!(r1.per_class_iou, r2.per_class_iou);
        assert_eq!(r1.mean_iou, r2.mean_iou);
    }

    #[test]
    fn perfect_prediction_scores_one_everywhere() {
        let names = labels(&["a", "b", "none"]);
        let t = vec![0, 1, 2, 0, 2];
        let r = detection_report(&t, &t, &names, 2).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.mean_iou, 1.0);
        assert_eq!(r.mean_class_accuracy, 1.0);
    }

    #[test]
    fn classes_absent_from_both_sides_are_skipped() {
        // `c` never appears: mIoU averages only over a and b.
        let names = labels(&["a", "b", "c", "none"]);
        let r = detection_report(&[0, 1, 3], &[0, 3, 3], &names, 3).unwrap();
        assert!(!r.per_class_iou.contains_key("c"));
        assert_eq!(r.per_class_iou.len(), 2);
        // IoU(a) = 1, IoU(b) = 0 (predicted only), mean 1/2.
        assert_eq!(r.mean_iou, 0.5);
        // Only `a` is present in the truth, fully recalled.
        assert_eq!(r.mean_class_accuracy, 1.0);
    }

    #[test]
    fn background_counts_toward_accuracy_only() {
        let names = labels(&["a", "none"]);
        // Every point is background and predicted as such.
        let r = detection_report(&[1, 1, 1], &[1, 1, 1], &names, 1).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.per_class_iou.is_empty());
        assert_eq!(r.mean_iou, 0.0);
        assert_eq!(r.mean_class_accuracy, 0.0);
    }

    #[test]
    fn detection_rejects_bad_shapes() {
        let names = labels(&["a", "none"]);
        assert!(detection_report(&[0], &[0, 1], &names, 1).is_err());
        assert!(detection_report(&[], &[], &names, 1).is_err());
        assert!(detection_report(&[5], &[0], &names, 1).is_err());
        assert!(detection_report(&[0], &[0], &names, 9).is_err());
    }

    #[test]
    fn coverage_counts_truth_poses_with_a_close_match() {
        let th = PoseThresholds::default();
        let truth = vec![at([0.0, 0.0, 0.0]), at([1.0, 0.0, 0.0])];
        // One generated pose 1 cm from the first truth, nothing near the second.
        let generated = vec![at([0.01, 0.0, 0.0]), at([0.5, 0.0, 0.0])];
        assert_eq!(coverage_rate(&generated, &truth, &th).unwrap(), 0.5);
        assert_eq!(coverage_rate(&[], &truth, &th).unwrap(), 0.0);
        assert!(coverage_rate(&generated, &[], &th).is_err());
    }

    #[test]
    fn coverage_gates_on_rotation_too() {
        let th = PoseThresholds::default();
        let truth = vec![at([0.0; 3])];
        let close = vec![rotated([0.0, 0.0, 1.0], 29f64.to_radians())];
        let far = vec![rotated([0.0, 0.0, 1.0], 31f64.to_radians())];
        assert_eq!(coverage_rate(&close, &truth, &th).unwrap(), 1.0);
        assert_eq!(coverage_rate(&far, &truth, &th).unwrap(), 0.0);
    }

    #[test]
    fn widening_thresholds_never_reduces_coverage() {
        let th = PoseThresholds::default();
        let wide = PoseThresholds {
            max_translation: th.max_translation * 3.0,
            max_rotation: th.max_rotation * 2.0,
            ..th
        };
        let truth = vec![at([0.0; 3]), at([0.03, 0.0, 0.0]), at([0.2, 0.0, 0.0])];
        let generated = vec![at([0.0; 3]), at([0.05, 0.0, 0.0])];
        let narrow_rate = coverage_rate(&generated, &truth, &th).unwrap();
        let wide_rate = coverage_rate(&generated, &truth, &wide).unwrap();
        assert!(wide_rate >= narrow_rate);
        assert_eq!(narrow_rate, 1.0 / 3.0);
        assert_eq!(wide_rate, 2.0 / 3.0);
    }

    #[test]
    fn similarity_matches_hand_value() {
        let th = PoseThresholds::default();
        let truth = vec![at([0.0; 3])];
        // One exact match (cost 0), one 4 cm away (cost 0.04), and one
        // rotated by exactly the rotation threshold (cost = max_translation).
        let generated = vec![
            at([0.0; 3]),
            at([0.0, 0.04, 0.0]),
            rotated([1.0, 0.0, 0.0], th.max_rotation),
        ];
        let got = similarity_metric(&generated, &truth, &th).unwrap();
        let expected = (0.0 + 0.04 + th.max_translation) / 3.0;
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!(similarity_metric(&[], &truth, &th).is_err());
        assert!(similarity_metric(&generated, &[], &th).is_err());
    }

    #[test]
    fn similarity_picks_the_nearest_truth_pose() {
        let th = PoseThresholds::default();
        let truth = vec![at([0.0; 3]), at([0.1, 0.0, 0.0])];
        let generated = vec![at([0.09, 0.0, 0.0])];
        let got = similarity_metric(&generated, &truth, &th).unwrap();
        assert!((got - 0.01).abs() < 1e-12);
        let mut reversed = truth.clone();
        reversed.reverse();
        assert_eq!(
            got,
            similarity_metric(&generated, &reversed, &th).unwrap()
        );
    }

    #[test]
    fn report_aggregates_pairs_and_names_variants() {
        let th = PoseThresholds::default();
        let truth = vec![at([0.0; 3])];
        let a = score_pose_pair("x", "grasp", &[at([0.0; 3])], &truth, &th).unwrap();
        let b = score_pose_pair("y", "open", &[at([0.5, 0.0, 0.0])], &truth, &th).unwrap();
        assert_eq!(a.coverage, 1.0);
        assert_eq!(b.coverage, 0.0);
        let report = pose_report(vec![a, b], th).unwrap();
        assert_eq!(report.coverage_metric, "mCR@2cm/30°");
        assert_eq!(report.similarity_metric, "mESM-λ");
        assert_eq!(report.mean_coverage, 0.5);
        assert!((report.mean_similarity - 0.25).abs() < 1e-12);
        assert!(pose_report(Vec::new(), th).is_err());
    }

    #[test]
    fn default_thresholds_match_the_benchmark_definition() {
        let th = PoseThresholds::default();
        assert_eq!(th.max_translation, 0.02);
        assert!((th.max_rotation - std::f64::consts::PI / 6.0).abs() < 1e-15);
        assert!((th.rotation_weight - 0.02 / (std::f64::consts::PI / 6.0)).abs() < 1e-15);
    }
}
