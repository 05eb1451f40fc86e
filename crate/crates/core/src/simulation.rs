//! Synthetic ground truth and parametric detector personas.
//!
//! A persona turns a ground-truth slide into a detection dump with a chosen
//! miss rate, false-positive density, localization jitter and confidence
//! distribution. Two personas can be made to miss overlapping or disjoint
//! subsets of the figures, which is what makes ensemble effects measurable
//! without trained networks.
//!
//! # Miss structure
//!
//! Every annotation `i` carries a latent difficulty `u_i ~ U[0, 1)` drawn
//! from a stream named by the persona's `overlap_tag`. A persona misses
//! annotation `i` when `(u_i - miss_phase) mod 1 < 1 - detect_prob`, i.e.
//! its misses form a window of the latent circle. Personas sharing a tag see
//! the same latents, so their miss windows overlap by a controllable amount:
//! equal phases give nested (maximally correlated) misses, shifted phases
//! give partially disjoint ones. Different tags give independent misses.
//!
//! # Mimics
//!
//! Besides Poisson background false positives, a slide may contain "mimic"
//! sites: non-mitotic structures every persona is tempted by. Each persona
//! fires on each mimic independently with `mimic_prob`, so two personas
//! share part of their false positives.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{evaluate, EvalError, MatchCriterion, MetricsReport};
use crate::exec::Exec;
use crate::fusion::{fuse_candidates, FusionConfig, FusionError};
use crate::geometry::{Annotation, AnnotationSet, BBox, Detection, Frame, GeometryError, SlideInfo};
use crate::spatial::GridIndex;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("cannot place {wanted} points {min_separation} px apart on the slide (placed {placed})")]
    Infeasible {
        wanted: usize,
        placed: usize,
        min_separation: f64,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Rejection-sampling budget per point.
const ATTEMPTS_PER_POINT: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtConfig {
    pub width: u32,
    pub height: u32,
    pub n_objects: usize,
    pub min_separation: f64,
    pub box_size: f64,
    /// Mimic sites placed like annotations (same separation rule).
    #[serde(default)]
    pub n_mimics: usize,
}

impl GtConfig {
    fn validate(&self) -> Result<(), SimError> {
        if !(self.box_size.is_finite() && self.box_size > 0.0) {
            return Err(SimError::Config(format!("box size must be positive, got {}", self.box_size)));
        }
        if !(self.min_separation.is_finite() && self.min_separation >= 0.0) {
            return Err(SimError::Config(format!(
                "min separation must be >= 0, got {}",
                self.min_separation
            )));
        }
        if f64::from(self.width) < self.box_size || f64::from(self.height) < self.box_size {
            return Err(SimError::Config(format!(
                "{}x{} slide cannot hold a {} px box",
                self.width, self.height, self.box_size
            )));
        }
        Ok(())
    }
}

/// A generated slide: annotations, mimic sites and the separation used.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSlide {
    pub slide: SlideInfo,
    pub annotations: AnnotationSet,
    pub mimics: Vec<(f64, f64)>,
    pub min_separation: f64,
}

/// 64-bit FNV-1a, used to name random streams by label.
fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_hash(label));
    rng
}

/// Incremental bucket grid for separation checks while points are added.
struct PlacementGrid {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<(f64, f64)>>,
}

impl PlacementGrid {
    fn new(min_separation: f64) -> Self {
        Self {
            cell: min_separation.max(1.0),
            buckets: HashMap::new(),
        }
    }

    fn key(&self, x: f64, y: f64) -> (i64, i64) {
        ((x / self.cell).floor() as i64, (y / self.cell).floor() as i64)
    }

    fn is_clear(&self, x: f64, y: f64, min_separation: f64) -> bool {
        if min_separation <= 0.0 {
            return true;
        }
        let (kx, ky) = self.key(x, y);
        for dy in -1..=1 {
            for dx in -1..=1 {
                if let Some(pts) = self.buckets.get(&(kx + dx, ky + dy)) {
                    if pts.iter().any(|&(px, py)| (px - x).hypot(py - y) < min_separation) {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn insert(&mut self, x: f64, y: f64) {
        let key = self.key(x, y);
        self.buckets.entry(key).or_default().push((x, y));
    }
}

/// Places `n_objects` annotation centers, then `n_mimics` mimic sites, by
/// rejection sampling so that every pair is at least `min_separation` apart
/// and every box lies inside the slide.
pub fn generate_ground_truth(cfg: &GtConfig, seed: u64) -> Result<SyntheticSlide, SimError> {
    cfg.validate()?;
    let slide = SlideInfo::new(format!("synthetic-{seed}"), cfg.width, cfg.height)?;
    let half = cfg.box_size / 2.0;
    let (x_hi, y_hi) = (f64::from(cfg.width) - half, f64::from(cfg.height) - half);
    let mut rng = stream(seed, "ground-truth");
    let mut grid = PlacementGrid::new(cfg.min_separation);

    let wanted = cfg.n_objects + cfg.n_mimics;
    let mut points = Vec::with_capacity(wanted);
    let budget = ATTEMPTS_PER_POINT * wanted;
    let mut attempts = 0;
    while points.len() < wanted {
        if attempts == budget {
            return Err(SimError::Infeasible {
                wanted,
                placed: points.len(),
                min_separation: cfg.min_separation,
            });
        }
        attempts += 1;
        let x = if x_hi > half { rng.random_range(half..x_hi) } else { half };
        let y = if y_hi > half { rng.random_range(half..y_hi) } else { half };
        if grid.is_clear(x, y, cfg.min_separation) {
            grid.insert(x, y);
            points.push((x, y));
        }
    }
    let mimics = points.split_off(cfg.n_objects);
    let annotations = AnnotationSet::new(
        &slide,
        cfg.box_size,
        points.into_iter().map(|(x, y)| Annotation { x, y }).collect(),
    )?;
    Ok(SyntheticSlide {
        slide,
        annotations,
        mimics,
        min_separation: cfg.min_separation,
    })
}

/// Gaussian clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreDist {
    pub mean: f64,
    pub spread: f64,
}

impl ScoreDist {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.spread == 0.0 {
            return self.mean.clamp(0.0, 1.0);
        }
        let n = Normal::new(self.mean, self.spread).expect("validated spread");
        n.sample(rng).clamp(0.0, 1.0)
    }
}

/// Parametric error model of one detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Persona {
    /// Model id stamped on the detections; also names the persona's random
    /// stream, so two equal personas produce identical dumps.
    pub name: String,
    pub detect_prob: f64,
    pub fp_per_megapixel: f64,
    pub jitter_sigma: f64,
    pub tp_score: ScoreDist,
    pub fp_score: ScoreDist,
    pub overlap_tag: String,
    #[serde(default)]
    pub miss_phase: f64,
    #[serde(default)]
    pub mimic_prob: f64,
}

impl Persona {
    /// Precision-leaning detector: misses more figures, fires on fewer
    /// mimics. Illustrative values, not measurements.
    pub fn conservative() -> Self {
        Self {
            name: "conservative".into(),
            detect_prob: 0.79,
            fp_per_megapixel: 0.05,
            jitter_sigma: 3.0,
            tp_score: ScoreDist { mean: 0.8, spread: 0.1 },
            fp_score: ScoreDist { mean: 0.6, spread: 0.1 },
            overlap_tag: "figures".into(),
            miss_phase: 0.0,
            mimic_prob: 0.65,
        }
    }

    /// Recall-leaning detector whose misses only partly overlap those of
    /// [`Persona::conservative`]. Illustrative values, not measurements.
    pub fn sensitive() -> Self {
        Self {
            name: "sensitive".into(),
            detect_prob: 0.83,
            fp_per_megapixel: 0.05,
            jitter_sigma: 3.0,
            tp_score: ScoreDist { mean: 0.75, spread: 0.1 },
            fp_score: ScoreDist { mean: 0.6, spread: 0.1 },
            overlap_tag: "figures".into(),
            miss_phase: 0.11,
            mimic_prob: 0.75,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let dist_ok = |d: &ScoreDist| d.mean.is_finite() && d.spread.is_finite() && d.spread >= 0.0;
        if !unit(self.detect_prob) || !unit(self.mimic_prob) || !unit(self.miss_phase) {
            return Err(SimError::Config(format!(
                "persona `{}`: probabilities and phase must lie in [0, 1]",
                self.name
            )));
        }
        if !(self.fp_per_megapixel.is_finite() && self.fp_per_megapixel >= 0.0)
            || !(self.jitter_sigma.is_finite() && self.jitter_sigma >= 0.0)
            || !dist_ok(&self.tp_score)
            || !dist_ok(&self.fp_score)
        {
            return Err(SimError::Config(format!(
                "persona `{}`: rates, jitter and spreads must be finite and >= 0",
                self.name
            )));
        }
        Ok(())
    }

    /// Whether this persona misses a figure with latent difficulty `u`.
    pub fn misses(&self, u: f64) -> bool {
        (u - self.miss_phase).rem_euclid(1.0) < 1.0 - self.detect_prob
    }
}

/// Where a simulated detection came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Annotation(usize),
    Mimic(usize),
    Background,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDetections {
    pub detections: Vec<Detection>,
    /// Parallel to `detections`.
    pub sources: Vec<Source>,
}

impl SimulatedDetections {
    /// Annotation indices hit by a detection scoring at least `tau`.
    pub fn detected_annotations(&self, tau: f64) -> Vec<usize> {
        let mut hit: Vec<usize> = self
            .detections
            .iter()
            .zip(&self.sources)
            .filter_map(|(d, s)| match s {
                Source::Annotation(i) if d.score >= tau => Some(*i),
                _ => None,
            })
            .collect();
        hit.sort_unstable();
        hit.dedup();
        hit
    }
}

/// Latent difficulties of the slide's annotations for one overlap tag.
pub fn latent_difficulty(n: usize, seed: u64, tag: &str) -> Vec<f64> {
    let mut rng = stream(seed, &format!("latent:{tag}"));
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Runs persona `p` over the synthetic slide.
pub fn simulate_detector(
    gt: &SyntheticSlide,
    p: &Persona,
    seed: u64,
) -> Result<SimulatedDetections, SimError> {
    p.validate()?;
    let anns = gt.annotations.annotations();
    let box_size = gt.annotations.box_size();
    let slide_id = gt.slide.slide_id.as_str();
    let latents = latent_difficulty(anns.len(), seed, &p.overlap_tag);
    let mut rng = stream(seed, &format!("persona:{}", p.name));
    let jitter = (p.jitter_sigma > 0.0)
        .then(|| Normal::new(0.0, p.jitter_sigma).expect("validated jitter"));
    let offset = |rng: &mut ChaCha8Rng| jitter.map_or(0.0, |n| n.sample(rng));

    let mut out = SimulatedDetections {
        detections: Vec::new(),
        sources: Vec::new(),
    };
    let mut emit = |cx: f64, cy: f64, score: f64, src: Source| -> Result<(), SimError> {
        let bbox = BBox::from_center(cx, cy, box_size)?;
        out.detections
            .push(Detection::new(bbox, score, p.name.as_str(), slide_id, Frame::SlideGlobal)?);
        out.sources.push(src);
        Ok(())
    };

    for (i, (a, &u)) in anns.iter().zip(&latents).enumerate() {
        if p.misses(u) {
            continue;
        }
        let (dx, dy) = (offset(&mut rng), offset(&mut rng));
        let score = p.tp_score.sample(&mut rng);
        emit(a.x + dx, a.y + dy, score, Source::Annotation(i))?;
    }

    for (j, &(mx, my)) in gt.mimics.iter().enumerate() {
        if rng.random::<f64>() >= p.mimic_prob {
            continue;
        }
        let (dx, dy) = (offset(&mut rng), offset(&mut rng));
        let score = p.fp_score.sample(&mut rng);
        emit(mx + dx, my + dy, score, Source::Mimic(j))?;
    }

    let lambda = p.fp_per_megapixel * gt.slide.area() / 1.0e6;
    if lambda > 0.0 {
        let count = Poisson::new(lambda)
            .map_err(|e| SimError::Config(e.to_string()))?
            .sample(&mut rng) as usize;
        let centers: Vec<(f64, f64)> = anns.iter().map(|a| (a.x, a.y)).collect();
        let sep = gt.min_separation;
        let grid = (sep > 0.0).then(|| GridIndex::build(&centers, sep));
        let clear = |x: f64, y: f64| {
            grid.as_ref().is_none_or(|g| {
                let mut ok = true;
                g.for_each_neighbor(x, y, |k| ok &= anns[k].distance_to(x, y) >= sep);
                ok
            })
        };
        let (w, h) = (f64::from(gt.slide.width), f64::from(gt.slide.height));
        for _ in 0..count {
            // give up on this false positive if the slide is too crowded
            for _ in 0..100 {
                let x = rng.random_range(0.0..w);
                let y = rng.random_range(0.0..h);
                if clear(x, y) {
                    let score = p.fp_score.sample(&mut rng);
                    emit(x, y, score, Source::Background)?;
                    break;
                }
            }
        }
    }
    Ok(out)
}

fn default_criterion() -> MatchCriterion {
    MatchCriterion::default()
}

fn default_seeds() -> usize {
    100
}

/// Everything one comparison run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub ground_truth: GtConfig,
    pub persona_a: Persona,
    pub persona_b: Persona,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default = "default_criterion")]
    pub criterion: MatchCriterion,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub base_seed: u64,
}

impl Default for ExperimentConfig {
    /// 1000 figures and 200 mimics on a 20000 px square slide, with the
    /// conservative and sensitive personas.
    fn default() -> Self {
        Self {
            ground_truth: GtConfig {
                width: 20_000,
                height: 20_000,
                n_objects: 1000,
                min_separation: 100.0,
                box_size: 50.0,
                n_mimics: 200,
            },
            persona_a: Persona::conservative(),
            persona_b: Persona::sensitive(),
            fusion: FusionConfig::default(),
            criterion: MatchCriterion::default(),
            n_seeds: default_seeds(),
            base_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|k| self.base_seed.wrapping_add(k)).collect()
    }
}

/// Event counts taken directly from the simulator's provenance records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleCounts {
    pub annotations: usize,
    /// Figures persona A hit with a score above the fusion threshold.
    pub detected_a: usize,
    pub detected_b: usize,
    pub detected_union: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub persona_a: MetricsReport,
    pub persona_b: MetricsReport,
    pub fused: MetricsReport,
    pub oracle: OracleCounts,
}

impl ExperimentReport {
    pub fn fused_recall_wins(&self) -> bool {
        self.fused.recall > self.persona_a.recall && self.fused.recall > self.persona_b.recall
    }

    pub fn fused_f1_wins(&self) -> bool {
        self.fused.f1 > self.persona_a.f1 && self.fused.f1 > self.persona_b.f1
    }
}

/// One trial: generate a slide, run both personas, score each one alone
/// (thresholded and NMS'd like a single-model ensemble) and their fusion.
pub fn run_trial(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentReport, SimError> {
    cfg.fusion.validate()?;
    cfg.criterion.validate()?;
    let gt = generate_ground_truth(&cfg.ground_truth, seed)?;
    let a = simulate_detector(&gt, &cfg.persona_a, seed)?;
    let b = simulate_detector(&gt, &cfg.persona_b, seed)?;
    let slide_id = gt.slide.slide_id.as_str();
    let seq = Exec::Sequential;

    let score = |models: Vec<Vec<Detection>>| -> Result<MetricsReport, SimError> {
        let fused = fuse_candidates(slide_id, models, &cfg.fusion, seq)?;
        Ok(evaluate(&fused, &gt.annotations, cfg.criterion)?)
    };
    let persona_a = score(vec![a.detections.clone()])?;
    let persona_b = score(vec![b.detections.clone()])?;
    let fused = score(vec![a.detections.clone(), b.detections.clone()])?;

    let tau = cfg.fusion.score_threshold;
    let (hit_a, hit_b) = (a.detected_annotations(tau), b.detected_annotations(tau));
    let mut union = [hit_a.as_slice(), hit_b.as_slice()].concat();
    union.sort_unstable();
    union.dedup();

    Ok(ExperimentReport {
        seed,
        persona_a,
        persona_b,
        fused,
        oracle: OracleCounts {
            annotations: gt.annotations.len(),
            detected_a: hit_a.len(),
            detected_b: hit_b.len(),
            detected_union: union.len(),
        },
    })
}

/// Runs every seed of the configuration; trials are independent and may run
/// concurrently, reports come back in seed order.
pub fn run_experiment(cfg: &ExperimentConfig, exec: Exec) -> Result<Vec<ExperimentReport>, SimError> {
    cfg.persona_a.validate()?;
    cfg.persona_b.validate()?;
    exec.try_map(&cfg.seeds(), |&seed| run_trial(cfg, seed))
}

/// Aggregate view over many trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub trials: usize,
    pub fused_recall_wins: usize,
    pub fused_f1_wins: usize,
    pub mean_persona_a: MeanMetrics,
    pub mean_persona_b: MeanMetrics,
    pub mean_fused: MeanMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MeanMetrics {
    fn of<'a>(reports: impl Iterator<Item = &'a MetricsReport>) -> Self {
        let (mut n, mut acc) = (0usize, MeanMetrics::default());
        for r in reports {
            n += 1;
            acc.precision += r.precision;
            acc.recall += r.recall;
            acc.f1 += r.f1;
        }
        if n > 0 {
            let n = n as f64;
            acc.precision /= n;
            acc.recall /= n;
            acc.f1 /= n;
        }
        acc
    }
}

pub fn summarize(reports: &[ExperimentReport]) -> ExperimentSummary {
    ExperimentSummary {
        trials: reports.len(),
        fused_recall_wins: reports.iter().filter(|r| r.fused_recall_wins()).count(),
        fused_f1_wins: reports.iter().filter(|r| r.fused_f1_wins()).count(),
        mean_persona_a: MeanMetrics::of(reports.iter().map(|r| &r.persona_a)),
        mean_persona_b: MeanMetrics::of(reports.iter().map(|r| &r.persona_b)),
        mean_fused: MeanMetrics::of(reports.iter().map(|r| &r.fused)),
    }
}
