//! One-to-one matching of detections to ground truth and the resulting
//! precision, recall and F1.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::fusion::{total_order, CandidateSet};
use crate::geometry::{iou, AnnotationSet, Detection};
use crate::spatial::GridIndex;

pub const DEFAULT_MATCH_RADIUS: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("detections for slide `{dets}` evaluated against annotations of slide `{gt}`")]
    SlideMismatch { dets: String, gt: String },
    #[error("invalid match criterion: {0}")]
    Criterion(String),
}

/// When a detection may claim an annotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatchCriterion {
    /// Box centers at most `radius` pixels apart.
    CenterDistance { radius: f64 },
    /// IoU with the annotation's uniform box at least `threshold`.
    BoxIou { threshold: f64 },
}

impl Default for MatchCriterion {
    fn default() -> Self {
        MatchCriterion::CenterDistance {
            radius: DEFAULT_MATCH_RADIUS,
        }
    }
}

impl MatchCriterion {
    pub fn validate(&self) -> Result<(), EvalError> {
        match *self {
            MatchCriterion::CenterDistance { radius } if !(radius.is_finite() && radius > 0.0) => {
                Err(EvalError::Criterion(format!("radius must be positive, got {radius}")))
            }
            MatchCriterion::BoxIou { threshold } if !(threshold > 0.0 && threshold < 1.0) => Err(
                EvalError::Criterion(format!("IoU threshold must be in (0, 1), got {threshold}")),
            ),
            _ => Ok(()),
        }
    }
}

/// TP/FP/FN assignment, by index into the evaluated detections and
/// annotations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// `(detection, annotation)` pairs in the order they were matched.
    pub tp_pairs: Vec<(usize, usize)>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

impl MatchResult {
    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.tp_pairs.len() as u64,
            fp: self.fp.len() as u64,
            fn_: self.fn_.len() as u64,
        }
    }
}

/// Confusion counts. Summing is how slides are aggregated (micro average).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Add for Counts {
    type Output = Counts;

    fn add(self, rhs: Counts) -> Counts {
        Counts {
            tp: self.tp + rhs.tp,
            fp: self.fp + rhs.fp,
            fn_: self.fn_ + rhs.fn_,
        }
    }
}

impl AddAssign for Counts {
    fn add_assign(&mut self, rhs: Counts) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for Counts {
    fn sum<I: Iterator<Item = Counts>>(iter: I) -> Counts {
        iter.fold(Counts::default(), Add::add)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricsReport {
    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
        }
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision, recall and F1 from confusion counts.
///
/// Empty denominators: precision with no detections is 1 when nothing was
/// missed and 0 otherwise; recall with no annotations is 1 when nothing was
/// falsely reported and 0 otherwise. Empty against empty is a perfect score.
pub fn metrics_from_counts(tp: u64, fp: u64, fn_: u64) -> MetricsReport {
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else if fn_ == 0 {
        1.0
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else if fp == 0 {
        1.0
    } else {
        0.0
    };
    MetricsReport {
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

impl From<Counts> for MetricsReport {
    fn from(c: Counts) -> Self {
        metrics_from_counts(c.tp, c.fp, c.fn_)
    }
}

/// Greedy matching: detections in descending score order (ties by the
/// fusion tie rule) each claim the best unclaimed annotation that satisfies
/// `crit`, nearest center for distance matching and highest IoU for box
/// matching, with the lower annotation index breaking exact ties.
pub fn match_greedy(
    dets: &CandidateSet,
    gt: &AnnotationSet,
    crit: MatchCriterion,
) -> Result<MatchResult, EvalError> {
    crit.validate()?;
    if dets.slide_id != gt.slide_id() {
        return Err(EvalError::SlideMismatch {
            dets: dets.slide_id.clone(),
            gt: gt.slide_id().to_owned(),
        });
    }
    Ok(match_detections(&dets.detections, gt, crit))
}

fn match_detections(dets: &[Detection], gt: &AnnotationSet, crit: MatchCriterion) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| total_order(&dets[a], &dets[b]).then(a.cmp(&b)));

    let centers: Vec<(f64, f64)> = gt.annotations().iter().map(|a| (a.x, a.y)).collect();
    // neighbourhood wide enough for every candidate the criterion can accept
    let reach = match crit {
        MatchCriterion::CenterDistance { radius } => radius,
        MatchCriterion::BoxIou { .. } => dets
            .iter()
            .map(|d| d.bbox.width().max(d.bbox.height()))
            .fold(gt.box_size(), f64::max),
    };
    let grid = GridIndex::build(&centers, reach * (1.0 + 1e-9) + f64::EPSILON);

    let mut claimed = vec![false; gt.len()];
    let mut result = MatchResult::default();
    for &di in &order {
        let det = &dets[di];
        let (cx, cy) = det.bbox.center();
        // (key, annotation index); smaller key is better
        let mut best: Option<(f64, usize)> = None;
        grid.for_each_neighbor(cx, cy, |ai| {
            if claimed[ai] {
                return;
            }
            let key = match crit {
                MatchCriterion::CenterDistance { radius } => {
                    let dist = gt.annotations()[ai].distance_to(cx, cy);
                    if dist > radius {
                        return;
                    }
                    dist
                }
                MatchCriterion::BoxIou { threshold } => {
                    let overlap = iou(&det.bbox, &gt.bbox(ai));
                    if overlap < threshold {
                        return;
                    }
                    -overlap
                }
            };
            let better = match best {
                None => true,
                Some((bk, bi)) => key < bk || (key == bk && ai < bi),
            };
            if better {
                best = Some((key, ai));
            }
        });
        match best {
            Some((_, ai)) => {
                claimed[ai] = true;
                result.tp_pairs.push((di, ai));
            }
            None => result.fp.push(di),
        }
    }
    result.fn_ = (0..gt.len()).filter(|&i| !claimed[i]).collect();
    result
}

/// Metrics of one slide.
pub fn evaluate(
    dets: &CandidateSet,
    gt: &AnnotationSet,
    crit: MatchCriterion,
) -> Result<MetricsReport, EvalError> {
    Ok(match_greedy(dets, gt, crit)?.counts().into())
}

/// Micro-averaged metrics over several slides: counts are summed before
/// precision and recall are formed.
pub fn evaluate_slides(
    slides: &[(CandidateSet, AnnotationSet)],
    crit: MatchCriterion,
    exec: Exec,
) -> Result<MetricsReport, EvalError> {
    let per_slide = exec.try_map(slides, |(d, g)| {
        match_greedy(d, g, crit).map(|m| m.counts())
    })?;
    Ok(per_slide.into_iter().sum::<Counts>().into())
}
