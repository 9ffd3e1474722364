//! Gaze data-quality metrics: dropout rate, accuracy error and precision
//! error per fixation group, the dropout-threshold retention sweep, and
//! cross-subject aggregation.
//!
//! Angular distances use the flat az/el Euclidean form
//! `√((ā − a)² + (ē − e)²)` unless [`AngularMetric::GreatCircle`] is chosen.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::SphericalDirection;

pub const DEFAULT_DROPOUT_THRESHOLD: f64 = 10.0;
/// Protocol eccentricity rings, degrees.
pub const ECCENTRICITY_RINGS: [f64; 4] = [0.0, 10.0, 15.0, 20.0];

#[derive(Error, Debug, Clone, PartialEq)]
pub enum MetricsError {
    #[error("fixation group has no samples")]
    EmptyGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AngularMetric {
    #[default]
    Flat,
    GreatCircle,
}

impl AngularMetric {
    pub fn distance(&self, a: &SphericalDirection, b: &SphericalDirection) -> f64 {
        match self {
            AngularMetric::Flat => a.flat_distance(b),
            AngularMetric::GreatCircle => a.great_circle_distance(b),
        }
    }
}

/// One gaze estimate; `direction == None` marks a detection dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeSample {
    pub timestamp: f64,
    pub direction: Option<SphericalDirection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixationGroup {
    pub samples: Vec<GazeSample>,
    pub truth: SphericalDirection,
    pub eccentricity_bin: f64,
}

impl FixationGroup {
    pub fn new(samples: Vec<GazeSample>, truth: SphericalDirection) -> Self {
        Self {
            samples,
            eccentricity_bin: eccentricity_bin(&truth),
            truth,
        }
    }
}

/// Nearest protocol ring to the flat angular distance of `truth` from (0, 0).
pub fn eccentricity_bin(truth: &SphericalDirection) -> f64 {
    let ecc = truth.flat_distance(&SphericalDirection::default());
    ECCENTRICITY_RINGS
        .iter()
        .copied()
        .min_by(|a, b| (a - ecc).abs().total_cmp(&(b - ecc).abs()))
        .expect("rings are non-empty")
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutResult {
    pub rate: f64,
    pub retained: Vec<SphericalDirection>,
}

/// Samples with no estimate or with error `≥ threshold` are dropouts.
pub fn dropout_rate(
    group: &FixationGroup,
    threshold: f64,
    metric: AngularMetric,
) -> Result<DropoutResult, MetricsError> {
    if group.samples.is_empty() {
        return Err(MetricsError::EmptyGroup);
    }
    let retained: Vec<SphericalDirection> = group
        .samples
        .iter()
        .filter_map(|s| s.direction)
        .filter(|d| metric.distance(&group.truth, d) < threshold)
        .collect();
    let total = group.samples.len();
    Ok(DropoutResult {
        rate: (total - retained.len()) as f64 / total as f64,
        retained,
    })
}

/// Mean distance of retained samples to the target; `None` when empty.
pub fn accuracy_error(
    retained: &[SphericalDirection],
    truth: &SphericalDirection,
    metric: AngularMetric,
) -> Option<f64> {
    if retained.is_empty() {
        return None;
    }
    let sum: f64 = retained.iter().map(|s| metric.distance(truth, s)).sum();
    Some(sum / retained.len() as f64)
}

/// Mean distance of retained samples to their own centroid; `None` below
/// two samples.
pub fn precision_error(retained: &[SphericalDirection], metric: AngularMetric) -> Option<f64> {
    if retained.len() < 2 {
        return None;
    }
    let n = retained.len() as f64;
    let centroid = SphericalDirection::new(
        retained.iter().map(|s| s.azimuth).sum::<f64>() / n,
        retained.iter().map(|s| s.elevation).sum::<f64>() / n,
    );
    Some(retained.iter().map(|s| metric.distance(&centroid, s)).sum::<f64>() / n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupMetrics {
    pub dropout_rate: f64,
    pub err_acc: Option<f64>,
    pub err_prec: Option<f64>,
    pub n_retained: usize,
    pub n_total: usize,
}

impl GroupMetrics {
    /// Precision was undefined because fewer than two samples survived.
    pub fn precision_flagged(&self) -> bool {
        self.err_prec.is_none()
    }
}

pub fn group_metrics(
    group: &FixationGroup,
    threshold: f64,
    metric: AngularMetric,
) -> Result<GroupMetrics, MetricsError> {
    let d = dropout_rate(group, threshold, metric)?;
    Ok(GroupMetrics {
        dropout_rate: d.rate,
        err_acc: accuracy_error(&d.retained, &group.truth, metric),
        err_prec: precision_error(&d.retained, metric),
        n_retained: d.retained.len(),
        n_total: group.samples.len(),
    })
}

/// Angular error of one sample against its group truth; `None` for dropouts.
pub fn sample_errors(group: &FixationGroup, metric: AngularMetric) -> Vec<Option<f64>> {
    group
        .samples
        .iter()
        .map(|s| s.direction.map(|d| metric.distance(&group.truth, &d)))
        .collect()
}

/// Percentage of samples with a defined error strictly below each threshold.
pub fn threshold_sweep(errors: &[Option<f64>], thresholds: &[f64]) -> Vec<(f64, f64)> {
    let total = errors.len();
    let mut defined: Vec<f64> = errors.iter().flatten().copied().collect();
    defined.sort_by(f64::total_cmp);
    thresholds
        .iter()
        .map(|&t| {
            let below = defined.partition_point(|&e| e < t);
            let pct = if total == 0 {
                0.0
            } else {
                100.0 * below as f64 / total as f64
            };
            (t, pct)
        })
        .collect()
}

/// Integer thresholds 0..=50 degrees.
pub fn default_sweep_thresholds() -> Vec<f64> {
    (0..=50).map(|t| t as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MetricKind {
    DropoutRate,
    Accuracy,
    Precision,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::DropoutRate, MetricKind::Accuracy, MetricKind::Precision];

    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::DropoutRate => "dropout_rate",
            MetricKind::Accuracy => "accuracy_error",
            MetricKind::Precision => "precision_error",
        }
    }

    pub fn value(&self, m: &GroupMetrics) -> Option<f64> {
        match self {
            MetricKind::DropoutRate => Some(m.dropout_rate),
            MetricKind::Accuracy => m.err_acc,
            MetricKind::Precision => m.err_prec,
        }
    }
}

/// Aggregation cell. `eccentricity` is `None` for pooled-over-eccentricity rows.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub detector: String,
    pub gazer: String,
    pub resolution: String,
    /// Eccentricity ring in whole degrees.
    pub eccentricity: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedMetrics {
    pub key: CellKey,
    pub subject: String,
    pub metrics: GroupMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub key: CellKey,
    pub metric: MetricKind,
    pub mean: f64,
    /// Sample standard deviation over subjects divided by √k; 0 for k = 1.
    pub std_error: f64,
    pub n_subjects: usize,
}

impl SummaryRow {
    /// Half-width of the normal-approximation 95% confidence interval.
    pub fn ci95_half_width(&self) -> f64 {
        1.96 * self.std_error
    }
}

/// Subject-level means first, then cross-subject mean and standard error.
/// Cells where no subject has a defined value are omitted. The output order
/// is sorted by key and metric, independent of input order.
pub fn aggregate(rows: &[TaggedMetrics]) -> Vec<SummaryRow> {
    // key -> metric -> subject -> values
    let mut cells: BTreeMap<(CellKey, MetricKind), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for row in rows {
        for kind in MetricKind::ALL {
            let entry = cells
                .entry((row.key.clone(), kind))
                .or_default()
                .entry(row.subject.clone())
                .or_default();
            if let Some(v) = kind.value(&row.metrics) {
                entry.push(v);
            }
        }
    }
    let mut out = Vec::new();
    for ((key, metric), subjects) in cells {
        let subject_means: Vec<f64> = subjects
            .values()
            .filter(|v| !v.is_empty())
            .map(|v| sorted_sum(v) / v.len() as f64)
            .collect();
        let k = subject_means.len();
        if k == 0 {
            continue;
        }
        let mean = sorted_sum(&subject_means) / k as f64;
        let std_error = if k > 1 {
            let var = subject_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
            var.sqrt() / (k as f64).sqrt()
        } else {
            0.0
        };
        out.push(SummaryRow {
            key,
            metric,
            mean,
            std_error,
            n_subjects: k,
        });
    }
    out
}

/// Order-independent summation.
fn sorted_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir(a: f64, e: f64) -> SphericalDirection {
        SphericalDirection::new(a, e)
    }

    fn group(dirs: &[Option<(f64, f64)>], truth: (f64, f64)) -> FixationGroup {
        FixationGroup::new(
            dirs.iter()
                .enumerate()
                .map(|(i, d)| GazeSample {
                    timestamp: i as f64,
                    direction: d.map(|(a, e)| dir(a, e)),
                })
                .collect(),
            dir(truth.0, truth.1),
        )
    }

    #[test]
    fn dropout_examples() {
        let g = group(&[Some((1.0, 0.0)), Some((5.0, 0.0)), Some((12.0, 0.0)), Some((50.0, 0.0))], (0.0, 0.0));
        let d = dropout_rate(&g, 10.0, AngularMetric::Flat).unwrap();
        assert_eq!(d.rate, 0.5);
        assert_eq!(d.retained, vec![dir(1.0, 0.0), dir(5.0, 0.0)]);

        let g = group(&[None, None, None], (0.0, 0.0));
        let d = dropout_rate(&g, 10.0, AngularMetric::Flat).unwrap();
        assert_eq!(d.rate, 1.0);
        assert!(d.retained.is_empty());

        let g = group(&[Some((0.0, 0.0)), Some((1.0, 1.0))], (0.0, 0.0));
        assert_eq!(dropout_rate(&g, 0.0, AngularMetric::Flat).unwrap().rate, 1.0);

        let g = group(&[], (0.0, 0.0));
        assert_eq!(dropout_rate(&g, 10.0, AngularMetric::Flat), Err(MetricsError::EmptyGroup));
    }

    #[test]
    fn error_exactly_at_threshold_is_dropout() {
        let g = group(&[Some((10.0, 0.0)), Some((9.999, 0.0))], (0.0, 0.0));
        assert_eq!(dropout_rate(&g, 10.0, AngularMetric::Flat).unwrap().rate, 0.5);
    }

    #[test]
    fn accuracy_examples() {
        let m = AngularMetric::Flat;
        assert_eq!(accuracy_error(&[dir(2.0, 3.0)], &dir(2.0, 3.0), m), Some(0.0));
        assert_eq!(accuracy_error(&[dir(3.0, 4.0), dir(0.0, 0.0)], &dir(0.0, 0.0), m), Some(2.5));
        assert_eq!(accuracy_error(&[dir(1.0, 0.0), dir(-1.0, 0.0)], &dir(0.0, 0.0), m), Some(1.0));
        assert_eq!(accuracy_error(&[], &dir(0.0, 0.0), m), None);
    }

    #[test]
    fn precision_examples() {
        let m = AngularMetric::Flat;
        assert_eq!(precision_error(&[dir(1.0, 1.0); 4], m), Some(0.0));
        assert_eq!(precision_error(&[dir(1.0, 0.0), dir(-1.0, 0.0)], m), Some(1.0));
        let p = precision_error(&[dir(0.0, 0.0), dir(2.0, 0.0), dir(0.0, 2.0), dir(2.0, 2.0)], m).unwrap();
        assert!((p - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(precision_error(&[dir(1.0, 0.0)], m), None);
    }

    #[test]
    fn group_metrics_flags_single_sample() {
        let g = group(&[Some((1.0, 0.0)), None], (0.0, 0.0));
        let m = group_metrics(&g, 10.0, AngularMetric::Flat).unwrap();
        assert_eq!(m.n_retained, 1);
        assert_eq!(m.err_acc, Some(1.0));
        assert!(m.precision_flagged());
    }

    #[test]
    fn sweep_examples() {
        let errs = [Some(1.0), Some(5.0), Some(12.0), Some(50.0)];
        let curve = threshold_sweep(&errs, &[0.0, 10.0, 51.0]);
        assert_eq!(curve, vec![(0.0, 0.0), (10.0, 50.0), (51.0, 100.0)]);
        let with_drop = [Some(1.0), None];
        assert_eq!(threshold_sweep(&with_drop, &[100.0])[0].1, 50.0);
    }

    #[test]
    fn eccentricity_bins() {
        assert_eq!(eccentricity_bin(&dir(0.0, 0.0)), 0.0);
        assert_eq!(eccentricity_bin(&dir(7.1, 7.0)), 10.0);
        assert_eq!(eccentricity_bin(&dir(0.0, -15.2)), 15.0);
        assert_eq!(eccentricity_bin(&dir(-19.6, 0.0)), 20.0);
    }

    fn tagged(subject: &str, acc: f64) -> TaggedMetrics {
        TaggedMetrics {
            key: CellKey {
                detector: "direct-pupil".into(),
                gazer: "feature".into(),
                resolution: "192x192".into(),
                eccentricity: None,
            },
            subject: subject.into(),
            metrics: GroupMetrics {
                dropout_rate: 0.0,
                err_acc: Some(acc),
                err_prec: None,
                n_retained: 1,
                n_total: 1,
            },
        }
    }

    #[test]
    fn aggregate_examples() {
        let rows = aggregate(&[tagged("s1", 2.5)]);
        let acc = rows.iter().find(|r| r.metric == MetricKind::Accuracy).unwrap();
        assert_eq!((acc.mean, acc.std_error, acc.n_subjects), (2.5, 0.0, 1));
        // Precision undefined for every subject: the cell is absent.
        assert!(rows.iter().all(|r| r.metric != MetricKind::Precision));

        // Subject means 2 and 4 (s1 averages 1 and 3).
        let rows = aggregate(&[tagged("s1", 1.0), tagged("s2", 4.0), tagged("s1", 3.0)]);
        let acc = rows.iter().find(|r| r.metric == MetricKind::Accuracy).unwrap();
        assert!((acc.mean - 3.0).abs() < 1e-12);
        assert!((acc.std_error - 1.0).abs() < 1e-12);
        assert_eq!(acc.n_subjects, 2);
        assert!((acc.ci95_half_width() - 1.96).abs() < 1e-12);
    }
}
