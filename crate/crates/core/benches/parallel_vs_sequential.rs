use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use mitofuse::augmentation::{augment_batch, AugSeed, LabeledPatch, Patch, PixelAugment};
use mitofuse::fusion::{fuse_candidates, FusionConfig};
use mitofuse::simulation::{
    generate_ground_truth, run_experiment, simulate_detector, ExperimentConfig, GtConfig, Persona,
};
use mitofuse::{evaluate_slides, CandidateSet, Exec, MatchCriterion};

const STRATEGIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn experiment(c: &mut Criterion) {
    let cfg = ExperimentConfig {
        n_seeds: 16,
        ..ExperimentConfig::default()
    };
    let mut group = c.benchmark_group("run_experiment_16_seeds");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        group.bench_function(name, |b| b.iter(|| run_experiment(black_box(&cfg), exec).unwrap()));
    }
    group.finish();
}

fn fusion(c: &mut Criterion) {
    let gt = generate_ground_truth(
        &GtConfig {
            width: 100_000,
            height: 100_000,
            n_objects: 50_000,
            min_separation: 60.0,
            box_size: 50.0,
            n_mimics: 10_000,
        },
        1,
    )
    .unwrap();
    let noisy = |p: Persona| Persona {
        fp_per_megapixel: 5.0,
        ..p
    };
    let a = simulate_detector(&gt, &noisy(Persona::conservative()), 1).unwrap();
    let b = simulate_detector(&gt, &noisy(Persona::sensitive()), 1).unwrap();
    let id = gt.slide.slide_id.clone();
    let cfg = FusionConfig::default();
    let n = a.detections.len() + b.detections.len();

    let mut group = c.benchmark_group("fuse_candidates");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        group.bench_with_input(BenchmarkId::new(name, n), &exec, |bench, &exec| {
            bench.iter(|| {
                fuse_candidates(&id, vec![a.detections.clone(), b.detections.clone()], &cfg, exec)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let slides: Vec<(CandidateSet, mitofuse::AnnotationSet)> = (0..32)
        .map(|seed| {
            let gt = generate_ground_truth(
                &GtConfig {
                    width: 20_000,
                    height: 20_000,
                    n_objects: 2000,
                    min_separation: 100.0,
                    box_size: 50.0,
                    n_mimics: 200,
                },
                seed,
            )
            .unwrap();
            let sim = simulate_detector(&gt, &Persona::sensitive(), seed).unwrap();
            let dets = CandidateSet::new(gt.slide.slide_id.clone(), sim.detections).unwrap();
            (dets, gt.annotations)
        })
        .collect();
    let mut group = c.benchmark_group("evaluate_32_slides");
    for (name, exec) in STRATEGIES {
        group.bench_function(name, |b| {
            b.iter(|| evaluate_slides(black_box(&slides), MatchCriterion::default(), exec).unwrap())
        });
    }
    group.finish();
}

fn augmentation(c: &mut Criterion) {
    let items: Vec<LabeledPatch> = (0..16u8)
        .map(|i| {
            let data = (0..256 * 256 * 3).map(|k| (k as u8).wrapping_mul(i | 1)).collect();
            LabeledPatch::new(Patch::new(256, 256, data).unwrap(), vec![]).unwrap()
        })
        .collect();
    let params = PixelAugment {
        hsv: Some((8.0, 1.1, 0.95)),
        blur_sigma: Some(1.0),
        sharpen: None,
        noise_sigma: Some(5.0),
    };
    let mut group = c.benchmark_group("augment_batch_16x256");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        group.bench_function(name, |b| {
            b.iter(|| augment_batch(black_box(&items), &params, AugSeed::new(0, 0), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, experiment, fusion, evaluation, augmentation);
criterion_main!(benches);
