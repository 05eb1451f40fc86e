use std::path::PathBuf;

use clap::{Args as ClapArgs, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "mitofuse", version, about = "Tiled mitotic-figure detection post-processing")]
pub struct Args {
    /// Worker threads (default: MITOFUSE_THREADS, then all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan the tile grid of a slide.
    Tile(TileArgs),
    /// Threshold, pool and suppress detection dumps of several models.
    Fuse(FuseArgs),
    /// Match a dump against manifest annotations and report P/R/F1.
    Eval(EvalArgs),
    /// Augment a PNG patch and its boxes.
    Augment(AugmentArgs),
    /// Run the persona ensemble experiment.
    Simulate(SimulateArgs),
    /// Assign manifest ROIs to train/test with a seeded shuffle.
    Split(SplitArgs),
}

#[derive(Debug, ClapArgs)]
pub struct TileArgs {
    #[arg(long)]
    pub slide_id: String,
    #[arg(long)]
    pub width: u32,
    #[arg(long)]
    pub height: u32,
    #[arg(long, default_value_t = mitofuse::tiling::DEFAULT_TILE_SIZE)]
    pub tile_size: u32,
    #[arg(long, default_value_t = 0)]
    pub overlap: u32,
    /// Output file (stdout if omitted).
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, ClapArgs)]
pub struct FuseArgs {
    /// JSONL dumps; detections are grouped by slide and model_id across files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = mitofuse::fusion::DEFAULT_SCORE_THRESHOLD)]
    pub score_threshold: f64,
    #[arg(long, default_value_t = mitofuse::fusion::DEFAULT_NMS_IOU)]
    pub nms_iou: f64,
    /// Tile plan(s) from `tile`, one plan or a JSON array; needed for local records.
    #[arg(long)]
    pub plan: Vec<PathBuf>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, ClapArgs)]
pub struct EvalArgs {
    pub detections: PathBuf,
    pub manifest: PathBuf,
    /// Center-distance matching radius in pixels.
    #[arg(long, conflicts_with = "iou")]
    pub radius: Option<f64>,
    /// Match by box IoU instead of center distance.
    #[arg(long)]
    pub iou: Option<f64>,
    /// Only evaluate slides of this split.
    #[arg(long, value_parser = ["train", "test"])]
    pub split: Option<String>,
    /// Write the overall MetricsReport as JSON.
    #[arg(long, value_name = "PATH")]
    pub json: Option<PathBuf>,
}

#[derive(Debug, ClapArgs)]
pub struct AugmentArgs {
    /// Input PNG; boxes are read from the sibling `.json` file if present.
    pub input: PathBuf,
    /// Output PNG; boxes go to the sibling `.json` file.
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, value_name = "H,S,V", value_parser = parse_triple)]
    pub hsv_shift: Option<(f64, f64, f64)>,
    #[arg(long)]
    pub blur_sigma: Option<f64>,
    #[arg(long, value_name = "AMOUNT,SIGMA", value_parser = parse_pair)]
    pub sharpen: Option<(f64, f64)>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Three more patches for a 2x2 mosaic with the input in the top-left.
    #[arg(long, num_args = 3, value_name = "PNG")]
    pub mosaic: Option<Vec<PathBuf>>,
    /// Mosaic canvas side (default: input width).
    #[arg(long)]
    pub mosaic_size: Option<u32>,
    /// Source patch for CutMix, same size as the input.
    #[arg(long, value_name = "PNG")]
    pub cutmix: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, ClapArgs)]
pub struct SimulateArgs {
    /// Experiment config (.toml or .json); defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of seeds, overriding the config.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// First seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, ClapArgs)]
pub struct SplitArgs {
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

fn parse_floats(s: &str, n: usize) -> Result<Vec<f64>, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    if parts.len() != n {
        return Err(format!("expected {n} comma-separated numbers, got {}", parts.len()));
    }
    Ok(parts)
}

fn parse_triple(s: &str) -> Result<(f64, f64, f64), String> {
    let v = parse_floats(s, 3)?;
    Ok((v[0], v[1], v[2]))
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let v = parse_floats(s, 2)?;
    Ok((v[0], v[1]))
}
