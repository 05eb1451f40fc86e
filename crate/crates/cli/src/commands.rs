use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use mitofuse::formats::{read_dump, split_rois, write_detections, DatasetManifest, ModelDumps, Split};
use mitofuse::fusion::{fuse_candidates, fuse_with, FusionConfig};
use mitofuse::simulation::{run_experiment, summarize, ExperimentConfig, ExperimentReport, ExperimentSummary};
use mitofuse::{
    evaluate, metrics_from_counts, plan_tiles, CandidateSet, Detection, Exec, Frame, MatchCriterion,
    MetricsReport, SlideInfo, TilePlan,
};
use indexmap::IndexMap;

use crate::cli::{EvalArgs, FuseArgs, SimulateArgs, SplitArgs, TileArgs};

pub(crate) fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => io::stdout().write_all(text.as_bytes()).context("writing stdout"),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn tile(a: TileArgs) -> Result<()> {
    let slide = SlideInfo::new(a.slide_id, a.width, a.height)?;
    let plan = plan_tiles(&slide, a.tile_size, a.overlap)?;
    write_json(a.output.as_deref(), &plan)
}

fn read_plans(paths: &[impl AsRef<Path>]) -> Result<IndexMap<String, TilePlan>> {
    let mut plans = IndexMap::new();
    for path in paths {
        let path = path.as_ref();
        let text = read_text(path)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("{}: malformed JSON", path.display()))?;
        let list: Vec<TilePlan> = if value.is_array() {
            serde_json::from_value(value)
        } else {
            serde_json::from_value(value).map(|p| vec![p])
        }
        .with_context(|| format!("{}: not a tile plan", path.display()))?;
        for plan in list {
            let id = plan.slide.slide_id.clone();
            if plans.insert(id.clone(), plan).is_some() {
                bail!("{}: second plan for slide `{id}`", path.display());
            }
        }
    }
    Ok(plans)
}

/// Slide id -> model id -> detections, in order of first appearance.
fn group_by_slide(dumps: Vec<ModelDumps>) -> IndexMap<String, ModelDumps> {
    let mut out: IndexMap<String, ModelDumps> = IndexMap::new();
    for dump in dumps {
        for (model, dets) in dump {
            for d in dets {
                out.entry(d.slide_id.clone())
                    .or_default()
                    .entry(model.clone())
                    .or_default()
                    .push(d);
            }
        }
    }
    out
}

pub fn fuse(a: FuseArgs) -> Result<()> {
    let cfg = FusionConfig::new(a.score_threshold, a.nms_iou)?;
    let plans = read_plans(&a.plan)?;
    let dumps = a
        .inputs
        .iter()
        .map(|p| read_dump(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let slides: Vec<(String, ModelDumps)> = group_by_slide(dumps).into_iter().collect();

    let exec = Exec::default();
    let fused = exec.try_map(&slides, |(slide_id, models)| -> Result<Vec<Detection>> {
        let per_model: Vec<Vec<Detection>> = models.values().cloned().collect();
        let out = match plans.get(slide_id) {
            Some(plan) => fuse_with(&per_model, plan, &cfg, exec),
            None => {
                if per_model.iter().flatten().any(|d| d.frame != Frame::SlideGlobal) {
                    bail!("slide `{slide_id}` has tile-local records but no --plan");
                }
                fuse_candidates(slide_id, per_model, &cfg, exec)
            }
        }
        .with_context(|| format!("fusing slide `{slide_id}`"))?;
        Ok(out.detections)
    })?;

    match &a.output {
        Some(path) => {
            let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            let mut w = BufWriter::new(file);
            write_detections(&mut w, fused.iter().flatten())?;
            w.flush()?;
        }
        None => {
            let mut w = BufWriter::new(io::stdout().lock());
            write_detections(&mut w, fused.iter().flatten())?;
            w.flush()?;
        }
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let crit = match (a.radius, a.iou) {
        (_, Some(threshold)) => MatchCriterion::BoxIou { threshold },
        (Some(radius), None) => MatchCriterion::CenterDistance { radius },
        (None, None) => MatchCriterion::default(),
    };
    crit.validate()?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let split = match a.split.as_deref() {
        Some("train") => Some(Split::Train),
        Some("test") => Some(Split::Test),
        _ => None,
    };
    if split.is_some() && manifest.split.is_empty() {
        bail!("{}: manifest records no split", a.manifest.display());
    }

    let mut by_slide: IndexMap<String, Vec<Detection>> = IndexMap::new();
    for d in read_dump(&a.detections)?.into_values().flatten() {
        if manifest.slide(&d.slide_id).is_none() {
            bail!("{}: slide `{}` is not in the manifest", a.detections.display(), d.slide_id);
        }
        if d.frame != Frame::SlideGlobal {
            bail!(
                "{}: tile-local record on slide `{}`; run `fuse` first",
                a.detections.display(),
                d.slide_id
            );
        }
        by_slide.entry(d.slide_id.clone()).or_default().push(d);
    }

    let slides = manifest.slides_in(split);
    let reports = Exec::default().try_map(&slides, |s| -> Result<MetricsReport> {
        let gt = manifest.annotation_set(&s.slide_id)?;
        let dets = CandidateSet::new(s.slide_id.clone(), by_slide.get(&s.slide_id).cloned().unwrap_or_default())?;
        Ok(evaluate(&dets, &gt, crit)?)
    })?;
    let total = reports.iter().map(MetricsReport::counts).sum::<mitofuse::Counts>();
    let overall = metrics_from_counts(total.tp, total.fp, total.fn_);

    let mut out = io::stdout().lock();
    let width = slides.iter().map(|s| s.slide_id.len()).max().unwrap_or(0).max(7);
    writeln!(out, "{:<width$}  {:>6} {:>6} {:>6}  {:>9} {:>9} {:>9}", "slide", "tp", "fp", "fn", "precision", "recall", "f1")?;
    let row = |out: &mut dyn Write, name: &str, r: &MetricsReport| {
        writeln!(
            out,
            "{name:<width$}  {:>6} {:>6} {:>6}  {:>9.4} {:>9.4} {:>9.4}",
            r.tp, r.fp, r.fn_, r.precision, r.recall, r.f1
        )
    };
    for (s, r) in slides.iter().zip(&reports) {
        row(&mut out, &s.slide_id, r)?;
    }
    row(&mut out, "overall", &overall)?;

    if let Some(path) = &a.json {
        write_json(Some(path), &overall)?;
    }
    Ok(())
}

fn read_experiment(path: &Path) -> Result<ExperimentConfig> {
    let text = read_text(path)?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        toml::from_str(&text).with_context(|| format!("{}: bad experiment config", path.display()))
    } else {
        serde_json::from_str(&text).with_context(|| format!("{}: bad experiment config", path.display()))
    }
}

#[derive(Serialize)]
struct SimulationOutput<'a> {
    config: &'a ExperimentConfig,
    summary: ExperimentSummary,
    trials: Vec<ExperimentReport>,
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_experiment(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(n) = a.seeds {
        cfg.n_seeds = n;
    }
    if let Some(s) = a.seed {
        cfg.base_seed = s;
    }
    let trials = run_experiment(&cfg, Exec::default())?;
    let summary = summarize(&trials);

    let mut log = io::stderr().lock();
    writeln!(log, "{:<10} {:>9} {:>9} {:>9}", "mean", "precision", "recall", "f1")?;
    for (name, m) in [
        ("persona_a", summary.mean_persona_a),
        ("persona_b", summary.mean_persona_b),
        ("fused", summary.mean_fused),
    ] {
        writeln!(log, "{name:<10} {:>9.4} {:>9.4} {:>9.4}", m.precision, m.recall, m.f1)?;
    }
    writeln!(
        log,
        "fused wins: recall {}/{}, f1 {}/{}",
        summary.fused_recall_wins, summary.trials, summary.fused_f1_wins, summary.trials
    )?;

    write_json(a.output.as_deref(), &SimulationOutput { config: &cfg, summary, trials })
}

pub fn split(a: SplitArgs) -> Result<()> {
    let manifest = DatasetManifest::read(&a.manifest)?;
    let out = split_rois(&manifest, a.fraction, a.seed)?;
    let (train, test) = out.split_counts();
    eprintln!("{train} train, {test} test");
    write_json(a.output.as_deref(), &out)
}
