//! Ensemble fusion: per-model score thresholding, mapping to slide
//! coordinates, pooling across models and a single greedy NMS pass that keeps
//! the highest-confidence box of every overlap cluster.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::geometry::{iou, Detection, Frame};
use crate::spatial::GridIndex;
use crate::tiling::{to_global, TilePlan, TilingError};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.399;
pub const DEFAULT_NMS_IOU: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("score threshold {0} outside [0, 1]")]
    ScoreThreshold(f64),
    #[error("NMS IoU threshold {0} outside (0, 1)")]
    IouThreshold(f64),
    #[error("detection from slide `{found}` in candidate set for slide `{expected}`")]
    SlideMismatch { expected: String, found: String },
    #[error("detection from model `{model_id}` is still in tile-local frame {frame:?}")]
    NotGlobal { model_id: String, frame: Frame },
    #[error(transparent)]
    Tiling(#[from] TilingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub score_threshold: f64,
    pub nms_iou_threshold: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            nms_iou_threshold: DEFAULT_NMS_IOU,
        }
    }
}

impl FusionConfig {
    pub fn new(score_threshold: f64, nms_iou_threshold: f64) -> Result<Self, FusionError> {
        let cfg = Self {
            score_threshold,
            nms_iou_threshold,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(FusionError::ScoreThreshold(self.score_threshold));
        }
        check_iou_threshold(self.nms_iou_threshold)
    }
}

fn check_iou_threshold(t: f64) -> Result<(), FusionError> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(FusionError::IouThreshold(t))
    }
}

/// Pooled slide-global detections of one slide, possibly from several models.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateSet {
    pub slide_id: String,
    pub detections: Vec<Detection>,
}

impl CandidateSet {
    pub fn new(slide_id: impl Into<String>, detections: Vec<Detection>) -> Result<Self, FusionError> {
        let set = Self {
            slide_id: slide_id.into(),
            detections,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        for d in &self.detections {
            if d.slide_id != self.slide_id {
                return Err(FusionError::SlideMismatch {
                    expected: self.slide_id.clone(),
                    found: d.slide_id.clone(),
                });
            }
            if !d.is_global() {
                return Err(FusionError::NotGlobal {
                    model_id: d.model_id.clone(),
                    frame: d.frame,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

/// Order in which NMS visits candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieRule {
    /// Score descending, then `x1`, `y1`, `model_id` ascending, then `x2`,
    /// `y2` ascending. Total on distinguishable detections, so NMS output
    /// does not depend on input order.
    #[default]
    Total,
    /// Score descending, equal scores keep their input order.
    InputOrder,
}

/// Comparison used by [`TieRule::Total`]. Also drives the visiting order of
/// evaluation matching.
pub fn total_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.x1().total_cmp(&b.bbox.x1()))
        .then_with(|| a.bbox.y1().total_cmp(&b.bbox.y1()))
        .then_with(|| a.model_id.cmp(&b.model_id))
        .then_with(|| a.bbox.x2().total_cmp(&b.bbox.x2()))
        .then_with(|| a.bbox.y2().total_cmp(&b.bbox.y2()))
}

/// Indices of `dets` in NMS visiting order.
pub fn visit_order(dets: &[Detection], rule: TieRule, exec: Exec) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    match rule {
        TieRule::Total => exec.sort_by(&mut order, |&a, &b| {
            total_order(&dets[a], &dets[b]).then(a.cmp(&b))
        }),
        // stable on index
        TieRule::InputOrder => exec.sort_by(&mut order, |&a, &b| {
            dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b))
        }),
    }
    order
}

/// Detections with `score >= tau`, in their original order.
pub fn threshold_detections(dets: &[Detection], tau: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.score >= tau).cloned().collect()
}

/// Concatenates per-model outputs into one candidate set, keeping provenance.
pub fn merge_model_outputs(
    slide_id: &str,
    per_model: Vec<Vec<Detection>>,
) -> Result<CandidateSet, FusionError> {
    let detections: Vec<Detection> = per_model.into_iter().flatten().collect();
    CandidateSet::new(slide_id, detections)
}

/// Greedy NMS: visit candidates best-first, keep a box unless a kept box
/// overlaps it with IoU >= `iou_thr`. Output is in kept order.
///
/// Suppression queries go through a uniform grid keyed by box center with
/// cells as large as the largest box side, so only nearby candidates are
/// compared. Output is identical to [`nms_reference`].
pub fn nms(c: &CandidateSet, iou_thr: f64, rule: TieRule) -> Result<CandidateSet, FusionError> {
    nms_with(c, iou_thr, rule, Exec::default())
}

pub fn nms_with(
    c: &CandidateSet,
    iou_thr: f64,
    rule: TieRule,
    exec: Exec,
) -> Result<CandidateSet, FusionError> {
    check_iou_threshold(iou_thr)?;
    let dets = &c.detections;
    if dets.is_empty() {
        return Ok(CandidateSet {
            slide_id: c.slide_id.clone(),
            detections: Vec::new(),
        });
    }
    let order = visit_order(dets, rule, exec);

    // rank[i] = position of detection i in visiting order
    let mut rank = vec![0u32; dets.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r as u32;
    }

    // Any pair with positive IoU has center offsets below the mean of their
    // sides on both axes, hence below the largest side present.
    let max_extent = dets
        .iter()
        .map(|d| d.bbox.width().max(d.bbox.height()))
        .fold(0.0f64, f64::max);
    let centers: Vec<(f64, f64)> = dets.iter().map(|d| d.bbox.center()).collect();
    let grid = GridIndex::build(&centers, max_extent * (1.0 + 1e-9));

    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i].clone());
        let (cx, cy) = centers[i];
        let ri = rank[i];
        grid.for_each_neighbor(cx, cy, |j| {
            if rank[j] > ri && !suppressed[j] && iou(&dets[i].bbox, &dets[j].bbox) >= iou_thr {
                suppressed[j] = true;
            }
        });
    }
    Ok(CandidateSet {
        slide_id: c.slide_id.clone(),
        detections: kept,
    })
}

/// Quadratic greedy NMS without spatial indexing. Kept as the reference the
/// grid version is checked against.
pub fn nms_reference(
    c: &CandidateSet,
    iou_thr: f64,
    rule: TieRule,
) -> Result<CandidateSet, FusionError> {
    check_iou_threshold(iou_thr)?;
    let dets = &c.detections;
    let order = visit_order(dets, rule, Exec::Sequential);
    let mut kept: Vec<&Detection> = Vec::new();
    for &i in &order {
        let d = &dets[i];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) < iou_thr) {
            kept.push(d);
        }
    }
    Ok(CandidateSet {
        slide_id: c.slide_id.clone(),
        detections: kept.into_iter().cloned().collect(),
    })
}

/// Full ensemble pipeline for one slide: threshold each model's raw output,
/// move tile-local boxes to slide coordinates through `plan`, pool all models
/// and run one NMS pass.
///
/// Detections already in the slide-global frame pass through the mapping
/// step unchanged.
pub fn fuse(
    per_model: &[Vec<Detection>],
    plan: &TilePlan,
    cfg: &FusionConfig,
) -> Result<CandidateSet, FusionError> {
    fuse_with(per_model, plan, cfg, Exec::default())
}

pub fn fuse_with(
    per_model: &[Vec<Detection>],
    plan: &TilePlan,
    cfg: &FusionConfig,
    exec: Exec,
) -> Result<CandidateSet, FusionError> {
    cfg.validate()?;
    let slide_id = plan.slide.slide_id.as_str();
    let mut globals = Vec::with_capacity(per_model.len());
    for dets in per_model {
        let kept = threshold_detections(dets, cfg.score_threshold);
        let mapped = exec.try_map(&kept, |d| -> Result<Detection, FusionError> {
            if d.slide_id != slide_id {
                return Err(FusionError::SlideMismatch {
                    expected: slide_id.to_owned(),
                    found: d.slide_id.clone(),
                });
            }
            match d.frame {
                Frame::SlideGlobal => Ok(d.clone()),
                Frame::TileLocal(index) => {
                    let tile = plan.tile(index).ok_or_else(|| TilingError::UnknownTile {
                        slide_id: slide_id.to_owned(),
                        index,
                    })?;
                    Ok(to_global(d, tile)?)
                }
            }
        })?;
        globals.push(mapped);
    }
    fuse_candidates(slide_id, globals, cfg, exec)
}

/// Threshold, pool and suppress detections that are already in slide
/// coordinates.
pub fn fuse_candidates(
    slide_id: &str,
    per_model: Vec<Vec<Detection>>,
    cfg: &FusionConfig,
    exec: Exec,
) -> Result<CandidateSet, FusionError> {
    cfg.validate()?;
    let kept = per_model
        .into_iter()
        .map(|dets| {
            dets.into_iter()
                .filter(|d| d.score >= cfg.score_threshold)
                .collect()
        })
        .collect();
    let merged = merge_model_outputs(slide_id, kept)?;
    nms_with(&merged, cfg.nms_iou_threshold, TieRule::Total, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, SlideInfo};
    use crate::tiling::plan_tiles;
    use proptest::prelude::*;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, model: &str) -> Detection {
        Detection::new(
            BBox::new(x1, y1, x2, y2).unwrap(),
            score,
            model,
            "s",
            Frame::SlideGlobal,
        )
        .unwrap()
    }

    fn set(dets: Vec<Detection>) -> CandidateSet {
        CandidateSet::new("s", dets).unwrap()
    }

    fn scores(c: &CandidateSet) -> Vec<f64> {
        c.detections.iter().map(|d| d.score).collect()
    }

    #[test]
    fn threshold_is_inclusive() {
        let dets = vec![
            det(0.0, 0.0, 1.0, 1.0, 0.5, "a"),
            det(0.0, 0.0, 1.0, 1.0, 0.399, "a"),
            det(0.0, 0.0, 1.0, 1.0, 0.3989, "a"),
            det(0.0, 0.0, 1.0, 1.0, 1.0, "a"),
        ];
        let kept: Vec<f64> = threshold_detections(&dets, 0.399).iter().map(|d| d.score).collect();
        assert_eq!(kept, vec![0.5, 0.399, 1.0]);
        assert_eq!(threshold_detections(&dets, 0.0).len(), 4);
        let top: Vec<f64> = threshold_detections(&dets, 1.0).iter().map(|d| d.score).collect();
        assert_eq!(top, vec![1.0]);
    }

    #[test]
    fn merge_keeps_provenance() {
        let a = det(0.0, 0.0, 1.0, 1.0, 0.5, "v5");
        let b = det(2.0, 0.0, 3.0, 1.0, 0.6, "v5");
        let c = det(4.0, 0.0, 5.0, 1.0, 0.7, "v8");
        let m = merge_model_outputs("s", vec![vec![a.clone(), b.clone()], vec![c.clone()]]).unwrap();
        assert_eq!(m.detections, vec![a.clone(), b.clone(), c]);
        assert!(merge_model_outputs("s", vec![vec![], vec![]]).unwrap().is_empty());
        let one = merge_model_outputs("s", vec![vec![], vec![a.clone(), b.clone()]]).unwrap();
        assert_eq!(one.detections, vec![a, b]);
    }

    #[test]
    fn merge_rejects_mixed_inputs() {
        let mut other = det(0.0, 0.0, 1.0, 1.0, 0.5, "v5");
        other.slide_id = "t".into();
        assert!(matches!(
            merge_model_outputs("s", vec![vec![other]]),
            Err(FusionError::SlideMismatch { .. })
        ));
        let mut local = det(0.0, 0.0, 1.0, 1.0, 0.5, "v5");
        local.frame = Frame::TileLocal(0);
        assert!(matches!(
            merge_model_outputs("s", vec![vec![local]]),
            Err(FusionError::NotGlobal { .. })
        ));
    }

    #[test]
    fn nms_suppresses_overlap() {
        let a = det(0.0, 0.0, 10.0, 10.0, 0.9, "a");
        let b = det(1.0, 1.0, 11.0, 11.0, 0.8, "b");
        let out = nms(&set(vec![b, a.clone()]), 0.4, TieRule::Total).unwrap();
        assert_eq!(out.detections, vec![a]);
    }

    #[test]
    fn nms_keeps_disjoint() {
        let a = det(0.0, 0.0, 10.0, 10.0, 0.1, "a");
        let b = det(50.0, 50.0, 60.0, 60.0, 0.95, "b");
        let out = nms(&set(vec![a, b]), 0.4, TieRule::Total).unwrap();
        assert_eq!(scores(&out), vec![0.95, 0.1]);
    }

    #[test]
    fn nms_threshold_is_inclusive() {
        // IoU exactly 1/3: 10x10 boxes sharing a 10x5 strip
        let a = det(0.0, 0.0, 10.0, 10.0, 0.9, "a");
        let b = det(0.0, 5.0, 10.0, 15.0, 0.8, "a");
        assert_eq!(iou(&a.bbox, &b.bbox), 50.0 / 150.0);
        assert_eq!(nms(&set(vec![a.clone(), b.clone()]), 50.0 / 150.0, TieRule::Total).unwrap().len(), 1);
        assert_eq!(nms(&set(vec![a, b]), 0.34, TieRule::Total).unwrap().len(), 2);
    }

    #[test]
    fn tie_rules() {
        let a = det(5.0, 0.0, 15.0, 10.0, 0.5, "a");
        let b = det(0.0, 0.0, 10.0, 10.0, 0.5, "b");
        let total = nms(&set(vec![a.clone(), b.clone()]), 0.3, TieRule::Total).unwrap();
        assert_eq!(total.detections, vec![b.clone()]);
        let first = nms(&set(vec![a.clone(), b]), 0.3, TieRule::InputOrder).unwrap();
        assert_eq!(first.detections, vec![a]);
    }

    #[test]
    fn nms_rejects_bad_threshold() {
        let c = set(vec![]);
        assert!(nms(&c, 0.0, TieRule::Total).is_err());
        assert!(nms(&c, 1.0, TieRule::Total).is_err());
        assert!(FusionConfig::new(1.2, 0.4).is_err());
        assert_eq!(FusionConfig::default(), FusionConfig::new(0.399, 0.4).unwrap());
    }

    #[test]
    fn foreign_box_can_revive_isolated_detection() {
        // d overlaps only e; e is suppressed by the other model's f, so d
        // survives pooling although e suppresses it within its own model
        let e = det(0.0, 0.0, 10.0, 10.0, 0.9, "a");
        let d = det(0.0, 6.0, 10.0, 16.0, 0.5, "a");
        let f = det(-6.0, 0.0, 4.0, 10.0, 0.95, "b");
        assert!(iou(&f.bbox, &d.bbox) < 0.2);
        let alone = nms(&set(vec![e.clone(), d.clone()]), 0.2, TieRule::Total).unwrap();
        assert!(!alone.detections.contains(&d));
        let pooled = nms(&set(vec![e, d.clone(), f]), 0.2, TieRule::Total).unwrap();
        assert!(pooled.detections.contains(&d));
    }

    fn plan() -> TilePlan {
        plan_tiles(&SlideInfo::new("s", 2048, 1024).unwrap(), 1024, 0).unwrap()
    }

    fn local(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, model: &str, tile: usize) -> Detection {
        Detection {
            frame: Frame::TileLocal(tile),
            ..det(x1, y1, x2, y2, score, model)
        }
    }

    #[test]
    fn fuse_all_below_threshold() {
        let m = vec![vec![local(0.0, 0.0, 10.0, 10.0, 0.2, "a", 0)]];
        assert!(fuse(&m, &plan(), &FusionConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn fuse_collapses_cross_model_duplicates() {
        let x = local(0.0, 0.0, 10.0, 10.0, 0.9, "v5", 1);
        let x2 = local(1.0, 1.0, 11.0, 11.0, 0.7, "v8", 1);
        let out = fuse(&[vec![x], vec![x2]], &plan(), &FusionConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.detections[0].bbox.to_array(), [1024.0, 0.0, 1034.0, 10.0]);
        assert_eq!(out.detections[0].model_id, "v5");
    }

    #[test]
    fn fuse_unions_disjoint_models() {
        let a = local(0.0, 0.0, 10.0, 10.0, 0.6, "v5", 0);
        let b = local(100.0, 100.0, 110.0, 110.0, 0.5, "v8", 1);
        let out = fuse(&[vec![a], vec![b]], &plan(), &FusionConfig::default()).unwrap();
        let models: Vec<&str> = out.detections.iter().map(|d| d.model_id.as_str()).collect();
        assert_eq!(models, vec!["v5", "v8"]);
    }

    #[test]
    fn fuse_resolves_cross_tile_duplicates() {
        // the same figure seen from two overlapping tiles
        let p = plan_tiles(&SlideInfo::new("s", 1536, 1024).unwrap(), 1024, 512).unwrap();
        assert_eq!(p.tiles[1].ox, 512);
        let a = local(600.0, 40.0, 650.0, 90.0, 0.8, "v5", 0);
        let b = local(89.0, 41.0, 139.0, 91.0, 0.85, "v5", 1);
        let out = fuse(&[vec![a, b]], &p, &FusionConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.detections[0].score, 0.85);
    }

    #[test]
    fn fuse_errors() {
        let bad_tile = local(0.0, 0.0, 10.0, 10.0, 0.9, "v5", 9);
        assert!(matches!(
            fuse(&[vec![bad_tile]], &plan(), &FusionConfig::default()),
            Err(FusionError::Tiling(TilingError::UnknownTile { index: 9, .. }))
        ));
        let mut other = det(0.0, 0.0, 10.0, 10.0, 0.9, "v5");
        other.slide_id = "x".into();
        assert!(matches!(
            fuse(&[vec![other]], &plan(), &FusionConfig::default()),
            Err(FusionError::SlideMismatch { .. })
        ));
    }

    fn arb_dets(max: usize) -> impl Strategy<Value = Vec<Detection>> {
        proptest::collection::vec(
            (0.0f64..200.0, 0.0f64..200.0, 5.0f64..60.0, 5.0f64..60.0, 0u8..=20, 0usize..3),
            0..max,
        )
        .prop_map(|raw| {
            raw.into_iter()
                .map(|(x, y, w, h, s, m)| {
                    det(x, y, x + w, y + h, f64::from(s) / 20.0, ["a", "b", "c"][m])
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn grid_matches_reference(dets in arb_dets(80), thr in 0.05f64..0.95) {
            let c = set(dets);
            for rule in [TieRule::Total, TieRule::InputOrder] {
                let fast = nms_with(&c, thr, rule, Exec::Sequential).unwrap();
                let par = nms_with(&c, thr, rule, Exec::Parallel).unwrap();
                let slow = nms_reference(&c, thr, rule).unwrap();
                prop_assert_eq!(&fast, &slow);
                prop_assert_eq!(&par, &slow);
            }
        }

        #[test]
        fn separation_and_domination(dets in arb_dets(40), thr in 0.05f64..0.95) {
            let c = set(dets);
            let out = nms(&c, thr, TieRule::Total).unwrap();
            for (i, a) in out.detections.iter().enumerate() {
                for b in &out.detections[i + 1..] {
                    prop_assert!(iou(&a.bbox, &b.bbox) < thr);
                }
            }
            for d in &c.detections {
                if !out.detections.contains(d) {
                    let dominated = out.detections.iter().any(|k| {
                        iou(&k.bbox, &d.bbox) >= thr && total_order(k, d) != Ordering::Greater
                    });
                    prop_assert!(dominated);
                }
            }
        }

        #[test]
        fn pooling_leaves_single_model_clusters_alone(a in arb_dets(25), b in arb_dets(25), thr in 0.1f64..0.9) {
            let a: Vec<Detection> = a.into_iter().map(|d| Detection { model_id: "a".into(), ..d }).collect();
            let b: Vec<Detection> = b.into_iter().map(|d| Detection { model_id: "b".into(), ..d }).collect();
            let merged = merge_model_outputs("s", vec![a.clone(), b.clone()]).unwrap();
            let fused = nms(&merged, thr, TieRule::Total).unwrap();
            let alone = nms(&set(a.clone()), thr, TieRule::Total).unwrap();

            // overlap-graph components of the pooled set
            let all = &merged.detections;
            let mut comp: Vec<usize> = (0..all.len()).collect();
            fn find(c: &mut [usize], i: usize) -> usize {
                let mut r = i;
                while c[r] != r { r = c[r]; }
                c[i] = r;
                r
            }
            for i in 0..all.len() {
                for j in i + 1..all.len() {
                    if iou(&all[i].bbox, &all[j].bbox) >= thr {
                        let (ri, rj) = (find(&mut comp, i), find(&mut comp, j));
                        comp[ri] = rj;
                    }
                }
            }
            for (i, d) in a.iter().enumerate() {
                let root = find(&mut comp, i);
                let has_b = (a.len()..all.len()).any(|j| find(&mut comp, j) == root);
                if !has_b {
                    prop_assert_eq!(fused.detections.contains(d), alone.detections.contains(d));
                }
            }
        }
    }
}
