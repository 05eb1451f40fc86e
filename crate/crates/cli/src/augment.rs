//! PNG patches with their boxes stored next to them: `patch.png` pairs with
//! `patch.json`, a JSON array of `[x1, y1, x2, y2]` boxes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use image::RgbImage;

use mitofuse::augmentation::{cutmix, mosaic, AugSeed, LabeledPatch, Patch, PixelAugment};
use mitofuse::BBox;

use crate::cli::AugmentArgs;

const MOSAIC_STREAM: u64 = 0;
const CUTMIX_STREAM: u64 = 1;
const PIXEL_STREAM: u64 = 2;

fn boxes_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

fn load(png: &Path) -> Result<LabeledPatch> {
    let img = image::open(png)
        .with_context(|| format!("reading {}", png.display()))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let patch = Patch::new(w, h, img.into_raw())?;
    let labels = boxes_path(png);
    let boxes: Vec<BBox> = if labels.exists() {
        let text = fs::read_to_string(&labels).with_context(|| format!("reading {}", labels.display()))?;
        serde_json::from_str(&text).with_context(|| format!("{}: expected an array of boxes", labels.display()))?
    } else {
        Vec::new()
    };
    LabeledPatch::new(patch, boxes).with_context(|| format!("{}", labels.display()))
}

fn save(item: LabeledPatch, png: &Path) -> Result<()> {
    let labels = boxes_path(png);
    let text = serde_json::to_string(&item.boxes)? + "\n";
    fs::write(&labels, text).with_context(|| format!("writing {}", labels.display()))?;
    let (w, h) = (item.patch.width(), item.patch.height());
    let img = RgbImage::from_raw(w, h, item.patch.into_data()).expect("patch buffers are w*h*3");
    img.save(png).with_context(|| format!("writing {}", png.display()))
}

pub fn run(a: AugmentArgs) -> Result<()> {
    let mut item = load(&a.input)?;

    if let Some(others) = &a.mosaic {
        let [b, c, d] = [&others[0], &others[1], &others[2]].map(|p| load(p));
        let inputs = [item, b?, c?, d?];
        let size = a.mosaic_size.unwrap_or(inputs[0].patch.width());
        item = mosaic(&inputs, size, AugSeed::new(a.seed, MOSAIC_STREAM))?;
    }
    if let Some(source) = &a.cutmix {
        let source = load(source)?;
        item = cutmix(&item, &source, AugSeed::new(a.seed, CUTMIX_STREAM))?;
    }
    let pixels = PixelAugment {
        hsv: a.hsv_shift,
        blur_sigma: a.blur_sigma,
        sharpen: a.sharpen,
        noise_sigma: a.noise_sigma,
    };
    if pixels != PixelAugment::default() {
        item = pixels.apply(&item, AugSeed::new(a.seed, PIXEL_STREAM))?;
    }
    save(item, &a.output)
}
