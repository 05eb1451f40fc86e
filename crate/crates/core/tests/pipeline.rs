use mitofuse::formats::{read_dump, write_dump_file, DatasetManifest};
use mitofuse::fusion::{fuse_with, FusionConfig};
use mitofuse::simulation::{generate_ground_truth, simulate_detector, GtConfig, Persona};
use mitofuse::{
    evaluate, evaluate_slides, plan_tiles, to_local, CandidateSet, Detection, Exec, Frame, MatchCriterion,
};

fn gt_config() -> GtConfig {
    GtConfig {
        width: 5000,
        height: 3000,
        n_objects: 150,
        min_separation: 100.0,
        box_size: 50.0,
        n_mimics: 30,
    }
}

/// Re-expresses global detections in the frame of the first tile that
/// contains their center, as a tiled detector would report them.
fn tiled(dets: &[Detection], plan: &mitofuse::TilePlan) -> Vec<Detection> {
    dets.iter()
        .map(|d| {
            let (cx, cy) = d.bbox.center();
            let tile = plan
                .tiles
                .iter()
                .find(|t| t.rect().contains_point(cx, cy))
                .expect("tiles cover the slide");
            to_local(d, tile).unwrap()
        })
        .collect()
}

#[test]
fn tiled_outputs_fuse_like_global_ones() {
    let gt = generate_ground_truth(&gt_config(), 3).unwrap();
    let plan = plan_tiles(&gt.slide, 1024, 0).unwrap();
    let a = simulate_detector(&gt, &Persona::conservative(), 3).unwrap().detections;
    let b = simulate_detector(&gt, &Persona::sensitive(), 3).unwrap().detections;
    let cfg = FusionConfig::default();

    let from_global = fuse_with(&[a.clone(), b.clone()], &plan, &cfg, Exec::Sequential).unwrap();
    let (la, lb) = (tiled(&a, &plan), tiled(&b, &plan));
    assert!(la.iter().all(|d| matches!(d.frame, Frame::TileLocal(_))));
    let from_local = fuse_with(&[la, lb], &plan, &cfg, Exec::Parallel).unwrap();

    // arbitrary floats survive the offset round trip only to within an ulp,
    // so compare evaluation outcomes rather than boxes
    let crit = MatchCriterion::default();
    assert_eq!(
        evaluate(&from_global, &gt.annotations, crit).unwrap(),
        evaluate(&from_local, &gt.annotations, crit).unwrap()
    );
    assert_eq!(from_global.len(), from_local.len());
}

#[test]
fn dump_and_manifest_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let gt = generate_ground_truth(&gt_config(), 9).unwrap();
    let sim = simulate_detector(&gt, &Persona::sensitive(), 9).unwrap();
    let path = dir.path().join("dets.jsonl");
    write_dump_file(&path, &sim.detections).unwrap();
    let read = read_dump(&path).unwrap();
    assert_eq!(read.len(), 1);
    assert_eq!(read["sensitive"], sim.detections);

    let centers: Vec<[f64; 2]> = gt.annotations.annotations().iter().map(|a| [a.x, a.y]).collect();
    let manifest = serde_json::json!({
        "box_size": 50.0,
        "slides": [gt.slide],
        "annotations": { gt.slide.slide_id.clone(): centers },
    });
    let mpath = dir.path().join("manifest.json");
    std::fs::write(&mpath, manifest.to_string()).unwrap();
    let m = DatasetManifest::read(&mpath).unwrap();
    assert_eq!(m.annotation_set(&gt.slide.slide_id).unwrap(), gt.annotations);
}

#[test]
fn evaluation_is_strategy_independent() {
    let slides: Vec<_> = (0..6)
        .map(|seed| {
            let gt = generate_ground_truth(&gt_config(), seed).unwrap();
            let sim = simulate_detector(&gt, &Persona::conservative(), seed).unwrap();
            (CandidateSet::new(gt.slide.slide_id.clone(), sim.detections).unwrap(), gt.annotations)
        })
        .collect();
    let crit = MatchCriterion::default();
    let seq = evaluate_slides(&slides, crit, Exec::Sequential).unwrap();
    let par = evaluate_slides(&slides, crit, Exec::Parallel).unwrap();
    assert_eq!(seq, par);
    let summed: u64 = slides.iter().map(|(d, g)| evaluate(d, g, crit).unwrap().tp).sum();
    assert_eq!(seq.tp, summed);
}
