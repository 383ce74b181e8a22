//! Pose-error metrics, threshold accuracy, cumulative error curves and
//! report files.

mod predictions;
mod report;

use serde::{Deserialize, Serialize};

pub use predictions::{read_predictions, write_predictions, Prediction};
pub use report::{emit_report, render_curve_svg, ConditionResult, EvalReport, RunMeta};

use crate::synthworld::{rotation_distance_deg, translation_distance, CameraPose};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("quaternion norm {norm} is not 1 (tolerance 1e-6)")]
    NonUnitQuaternion { norm: f64 },
    #[error("{0} needs a non-empty input")]
    Empty(&'static str),
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error("{0}")]
    InvalidArgument(String),
}

pub(crate) fn file_err(path: &std::path::Path, message: impl std::fmt::Display) -> EvalError {
    EvalError::File {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub translation_m: f64,
    /// In `[0, 180]`.
    pub rotation_deg: f64,
}

/// Translation and geodesic rotation error.
pub fn pose_error(estimated: &CameraPose, ground_truth: &CameraPose) -> Result<PoseError, EvalError> {
    for p in [estimated, ground_truth] {
        let norm = p.quaternion_norm();
        if !((norm - 1.0).abs() <= 1e-6) {
            return Err(EvalError::NonUnitQuaternion { norm });
        }
    }
    Ok(PoseError {
        translation_m: translation_distance(estimated, ground_truth),
        rotation_deg: rotation_distance_deg(estimated, ground_truth),
    })
}

/// A (distance, angle) precision bin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdBin {
    pub t_m: f64,
    pub r_deg: f64,
}

impl ThresholdBin {
    pub fn contains(&self, e: &PoseError) -> bool {
        e.translation_m <= self.t_m && e.rotation_deg <= self.r_deg
    }
}

/// Fine, medium and coarse bins.
pub fn default_bins() -> Vec<ThresholdBin> {
    vec![
        ThresholdBin { t_m: 0.25, r_deg: 2.0 },
        ThresholdBin { t_m: 0.5, r_deg: 5.0 },
        ThresholdBin { t_m: 5.0, r_deg: 10.0 },
    ]
}

/// Percentage of errors inside each bin.
pub fn threshold_accuracy(errors: &[PoseError], bins: &[ThresholdBin]) -> Result<Vec<f64>, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::Empty("threshold_accuracy"));
    }
    Ok(bins
        .iter()
        .map(|b| 100.0 * errors.iter().filter(|e| b.contains(e)).count() as f64 / errors.len() as f64)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorAxis {
    Translation,
    Rotation,
}

impl ErrorAxis {
    pub fn of(self, e: &PoseError) -> f64 {
        match self {
            ErrorAxis::Translation => e.translation_m,
            ErrorAxis::Rotation => e.rotation_deg,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorAxis::Translation => "translation",
            ErrorAxis::Rotation => "rotation",
        }
    }
}

/// Empirical CDF as `(threshold, fraction ≤ threshold)` at each distinct
/// error value, ascending.
pub fn cumulative_error_curve(errors: &[PoseError], axis: ErrorAxis) -> Result<Vec<(f64, f64)>, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::Empty("cumulative_error_curve"));
    }
    let mut v: Vec<f64> = errors.iter().map(|e| axis.of(e)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *x => last.1 = frac,
            _ => out.push((*x, frac)),
        }
    }
    Ok(out)
}

/// Smallest threshold at which the curve reaches `fraction`.
pub fn curve_quantile(curve: &[(f64, f64)], fraction: f64) -> Option<f64> {
    curve.iter().find(|(_, f)| *f >= fraction).map(|(x, _)| x).copied()
}

/// Expected accuracy of guessing a uniformly random reference pose for
/// every query, computed exactly over all reference poses.
pub fn random_pose_baseline(
    queries: &[CameraPose],
    reference: &[CameraPose],
    bins: &[ThresholdBin],
) -> Result<Vec<f64>, EvalError> {
    if queries.is_empty() || reference.is_empty() {
        return Err(EvalError::Empty("random_pose_baseline"));
    }
    let mut hits = vec![0usize; bins.len()];
    for q in queries {
        for r in reference {
            let e = pose_error(r, q)?;
            for (h, b) in hits.iter_mut().zip(bins) {
                if b.contains(&e) {
                    *h += 1;
                }
            }
        }
    }
    let total = (queries.len() * reference.len()) as f64;
    Ok(hits.into_iter().map(|h| 100.0 * h as f64 / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(t: f64, r: f64) -> PoseError {
        PoseError {
            translation_m: t,
            rotation_deg: r,
        }
    }

    #[test]
    fn pose_error_examples() {
        let a = CameraPose::identity();
        assert_eq!(pose_error(&a, &a).unwrap(), e(0.0, 0.0));
        let neg = CameraPose {
            rotation: [-1.0, 0.0, 0.0, 0.0],
            ..a
        };
        assert_eq!(pose_error(&a, &neg).unwrap(), e(0.0, 0.0));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let b = CameraPose {
            rotation: [h, 0.0, 0.0, h],
            translation: [3.0, 4.0, 0.0],
        };
        let got = pose_error(&b, &a).unwrap();
        assert!((got.translation_m - 5.0).abs() < 1e-12);
        assert!((got.rotation_deg - 90.0).abs() < 1e-9);
        let bad = CameraPose {
            rotation: [1.1, 0.0, 0.0, 0.0],
            ..a
        };
        assert!(matches!(pose_error(&bad, &a), Err(EvalError::NonUnitQuaternion { .. })));
    }

    #[test]
    fn single_error_bins() {
        let acc = threshold_accuracy(&[e(0.3, 1.0)], &default_bins()).unwrap();
        assert_eq!(acc, vec![0.0, 100.0, 100.0]);
        assert!(threshold_accuracy(&[], &default_bins()).is_err());
        assert_eq!(
            threshold_accuracy(&[e(0.0, 0.0); 3], &default_bins()).unwrap(),
            vec![100.0; 3]
        );
    }

    #[test]
    fn curve_examples() {
        let c = cumulative_error_curve(&[e(2.5, 0.0)], ErrorAxis::Translation).unwrap();
        assert_eq!(c, vec![(2.5, 1.0)]);
        let errs: Vec<PoseError> = [5.0, 1.0, 4.0, 2.0, 3.0].iter().map(|t| e(*t, 0.0)).collect();
        let c = cumulative_error_curve(&errs, ErrorAxis::Translation).unwrap();
        assert_eq!(curve_quantile(&c, 0.5), Some(3.0));
        let ties = cumulative_error_curve(&[e(0.0, 1.0), e(0.0, 1.0), e(0.0, 2.0)], ErrorAxis::Rotation).unwrap();
        assert_eq!(ties.len(), 2);
        assert!((ties[0].1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn baseline_of_matching_poses() {
        let p = CameraPose::identity();
        let far = CameraPose {
            translation: [100.0, 0.0, 0.0],
            ..p
        };
        let acc = random_pose_baseline(&[p], &[p, far], &default_bins()).unwrap();
        assert_eq!(acc, vec![50.0; 3]);
    }
}
