//! On-disk formats: the JSONL detection dump, the dataset manifest, and the
//! seeded train/test split of its ROIs.
//!
//! A dump holds one JSON object per line:
//!
//! ```text
//! {"slide_id":"s1","tile_index":3,"frame":"local","box":[10.0,12.5,60.0,62.5],"score":0.87,"model_id":"v5"}
//! {"slide_id":"s1","frame":"global","box":[1034.0,12.5,1084.0,62.5],"score":0.7,"model_id":"v8"}
//! ```
//!
//! `tile_index` is present exactly for `"local"` records. Writing uses this
//! field order and shortest round-trip number formatting, so reading and
//! re-writing a canonical file reproduces it byte for byte.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::geometry::{Annotation, AnnotationSet, BBox, Detection, Frame, GeometryError, SlideInfo};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: malformed JSON: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl FormatError {
    fn io(path: &Path, source: io::Error) -> Self {
        FormatError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameTag {
    Local,
    Global,
}

/// One line of a detection dump, as stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpRecord {
    pub slide_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile_index: Option<usize>,
    pub frame: FrameTag,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    pub model_id: String,
}

impl DumpRecord {
    pub fn to_detection(&self) -> Result<Detection, String> {
        let frame = match (self.frame, self.tile_index) {
            (FrameTag::Local, Some(i)) => Frame::TileLocal(i),
            (FrameTag::Global, None) => Frame::SlideGlobal,
            (FrameTag::Local, None) => return Err("local record without tile_index".into()),
            (FrameTag::Global, Some(_)) => return Err("global record must not carry tile_index".into()),
        };
        let bbox = BBox::try_from(self.bbox).map_err(|e| e.to_string())?;
        Detection::new(bbox, self.score, self.model_id.as_str(), self.slide_id.as_str(), frame)
            .map_err(|e| e.to_string())
    }
}

impl From<&Detection> for DumpRecord {
    fn from(d: &Detection) -> Self {
        let (frame, tile_index) = match d.frame {
            Frame::TileLocal(i) => (FrameTag::Local, Some(i)),
            Frame::SlideGlobal => (FrameTag::Global, None),
        };
        DumpRecord {
            slide_id: d.slide_id.clone(),
            tile_index,
            frame,
            bbox: d.bbox.to_array(),
            score: d.score,
            model_id: d.model_id.clone(),
        }
    }
}

/// Detections grouped by model id, in order of first appearance.
pub type ModelDumps = IndexMap<String, Vec<Detection>>;

/// Parses dump text. Lines are validated independently (in parallel when
/// `exec` allows); the first bad line, by line number, is reported.
pub fn parse_dump(text: &str, exec: Exec) -> Result<Vec<Detection>, FormatError> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    exec.try_map(&lines, |&(line, raw)| {
        let record: DumpRecord = serde_json::from_str(raw).map_err(|e| {
            if e.is_data() {
                FormatError::Schema {
                    line,
                    message: e.to_string(),
                }
            } else {
                FormatError::Parse {
                    line,
                    message: e.to_string(),
                }
            }
        })?;
        record
            .to_detection()
            .map_err(|message| FormatError::Schema { line, message })
    })
}

pub fn group_by_model(dets: Vec<Detection>) -> ModelDumps {
    let mut out = ModelDumps::new();
    for d in dets {
        out.entry(d.model_id.clone()).or_default().push(d);
    }
    out
}

pub fn read_dump(path: &Path) -> Result<ModelDumps, FormatError> {
    read_dump_with(path, Exec::default())
}

pub fn read_dump_with(path: &Path, exec: Exec) -> Result<ModelDumps, FormatError> {
    let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    Ok(group_by_model(parse_dump(&text, exec)?))
}

/// Reads a dump from any buffered reader, line by line.
pub fn read_dump_from(reader: impl BufRead) -> Result<ModelDumps, FormatError> {
    let mut dets = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| FormatError::Io {
            path: "<reader>".into(),
            source: e,
        })?;
        let mut parsed = parse_dump(&line, Exec::Sequential).map_err(|e| renumber(e, i + 1))?;
        dets.append(&mut parsed);
    }
    Ok(group_by_model(dets))
}

fn renumber(e: FormatError, line: usize) -> FormatError {
    match e {
        FormatError::Parse { message, .. } => FormatError::Parse { line, message },
        FormatError::Schema { message, .. } => FormatError::Schema { line, message },
        other => other,
    }
}

pub fn write_detections<'a>(
    mut w: impl Write,
    dets: impl IntoIterator<Item = &'a Detection>,
) -> io::Result<()> {
    for d in dets {
        serde_json::to_writer(&mut w, &DumpRecord::from(d))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_dump(w: impl Write, dumps: &ModelDumps) -> io::Result<()> {
    write_detections(w, dumps.values().flatten())
}

pub fn write_dump_file(path: &Path, dets: &[Detection]) -> Result<(), FormatError> {
    let file = fs::File::create(path).map_err(|e| FormatError::io(path, e))?;
    let mut w = io::BufWriter::new(file);
    write_detections(&mut w, dets).map_err(|e| FormatError::io(path, e))?;
    w.flush().map_err(|e| FormatError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Slides (ROIs) of a dataset with their annotation centers.
///
/// ```text
/// {
///   "box_size": 50.0,
///   "slides": [{"slide_id": "roi-1", "width": 7215, "height": 5412}],
///   "annotations": {"roi-1": [[1032.5, 881.0], [4410.0, 2310.5]]},
///   "split": {"roi-1": "train"}
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub box_size: f64,
    pub slides: Vec<SlideInfo>,
    #[serde(default)]
    pub annotations: IndexMap<String, Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub split: IndexMap<String, Split>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self, FormatError> {
        let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| FormatError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        for s in &self.slides {
            s.validate()?;
        }
        for id in self.annotations.keys().chain(self.split.keys()) {
            if self.slide(id).is_none() {
                return Err(FormatError::Manifest(format!("`{id}` is not a manifest slide")));
            }
        }
        for s in &self.slides {
            self.annotation_set(&s.slide_id)?;
        }
        Ok(())
    }

    pub fn slide(&self, slide_id: &str) -> Option<&SlideInfo> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }

    /// Annotations of one slide; slides without an entry have none.
    pub fn annotation_set(&self, slide_id: &str) -> Result<AnnotationSet, FormatError> {
        let slide = self
            .slide(slide_id)
            .ok_or_else(|| FormatError::Manifest(format!("unknown slide `{slide_id}`")))?;
        let centers = self
            .annotations
            .get(slide_id)
            .map(|v| v.iter().map(|&[x, y]| Annotation { x, y }).collect())
            .unwrap_or_default();
        Ok(AnnotationSet::new(slide, self.box_size, centers)?)
    }

    /// Slides assigned to `split`; all slides when no split is recorded.
    pub fn slides_in(&self, split: Option<Split>) -> Vec<&SlideInfo> {
        self.slides
            .iter()
            .filter(|s| match split {
                None => true,
                Some(want) => self.split.get(&s.slide_id) == Some(&want),
            })
            .collect()
    }

    /// `(train, test)` ROI counts.
    pub fn split_counts(&self) -> (usize, usize) {
        let train = self.split.values().filter(|s| **s == Split::Train).count();
        (train, self.split.len() - train)
    }
}

/// Seeded shuffle of the ROIs followed by a prefix split: the first
/// `floor(fraction * n)` go to training, with at least one training ROI.
pub fn split_rois(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest, FormatError> {
    if manifest.slides.is_empty() {
        return Err(FormatError::Manifest("cannot split an empty manifest".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(FormatError::Manifest(format!("train fraction must be in (0, 1), got {fraction}")));
    }
    let n = manifest.slides.len();
    // tolerate representation error such as 0.7 * 10 = 7.000000000000001
    let n_train = ((fraction * n as f64 + 1e-9).floor() as usize).max(1);

    let mut ids: Vec<&str> = manifest.slides.iter().map(|s| s.slide_id.as_str()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assigned: IndexMap<&str, Split> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (*id, if i < n_train { Split::Train } else { Split::Test }))
        .collect();

    let mut out = manifest.clone();
    out.split = manifest
        .slides
        .iter()
        .map(|s| (s.slide_id.clone(), assigned[s.slide_id.as_str()]))
        .collect();
    Ok(out)
}
