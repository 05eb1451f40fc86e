//! Fixed-size tile grids over a slide and the mapping of detections between
//! tile-local and slide-global coordinates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Detection, Frame, GeometryError, SlideInfo};

/// Detector input resolution.
pub const DEFAULT_TILE_SIZE: u32 = 1024;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TilingError {
    #[error("tile size must be at least 1")]
    ZeroTileSize,
    #[error("overlap {overlap} must be smaller than tile size {tile_size}")]
    OverlapTooLarge { tile_size: u32, overlap: u32 },
    #[error(transparent)]
    Slide(#[from] GeometryError),
    #[error("detection is in frame {found:?}, expected tile {expected}")]
    FrameMismatch { expected: usize, found: Frame },
    #[error("detection box {bbox} does not intersect tile {tile}")]
    OutsideTile { bbox: BBox, tile: usize },
    #[error("tile index {index} not present in plan for slide `{slide_id}`")]
    UnknownTile { slide_id: String, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub index: usize,
    pub ox: u32,
    pub oy: u32,
    pub width: u32,
    pub height: u32,
}

impl Tile {
    pub fn rect(&self) -> BBox {
        BBox::new(
            f64::from(self.ox),
            f64::from(self.oy),
            f64::from(self.ox) + f64::from(self.width),
            f64::from(self.oy) + f64::from(self.height),
        )
        .expect("tiles have positive size")
    }

    pub fn contains_pixel(&self, x: u32, y: u32) -> bool {
        self.ox <= x && x - self.ox < self.width && self.oy <= y && y - self.oy < self.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub slide: SlideInfo,
    pub tile_size: u32,
    pub overlap: u32,
    pub tiles: Vec<Tile>,
}

impl TilePlan {
    pub fn tile(&self, index: usize) -> Option<&Tile> {
        // plans are dense from 0 in row-major order
        self.tiles.get(index).filter(|t| t.index == index)
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }
}

/// Tile origins along one axis of length `len`.
fn axis_offsets(len: u32, size: u32, overlap: u32) -> Vec<u32> {
    if len <= size {
        return vec![0];
    }
    let stride = size - overlap;
    let last = len - size;
    let mut offsets = Vec::with_capacity((last / stride + 2) as usize);
    let mut pos = 0;
    while pos < last {
        offsets.push(pos);
        pos += stride;
    }
    // final tile clamped so its far edge sits on the slide edge
    offsets.push(last);
    offsets
}

/// Row-major grid of `tile_size` tiles advancing by `tile_size - overlap`.
///
/// The last tile on each axis is shifted inward so that it ends exactly at
/// the slide edge; slides smaller than a tile get one tile covering them.
pub fn plan_tiles(slide: &SlideInfo, tile_size: u32, overlap: u32) -> Result<TilePlan, TilingError> {
    if tile_size == 0 {
        return Err(TilingError::ZeroTileSize);
    }
    if overlap >= tile_size {
        return Err(TilingError::OverlapTooLarge { tile_size, overlap });
    }
    slide.validate()?;

    let xs = axis_offsets(slide.width, tile_size, overlap);
    let ys = axis_offsets(slide.height, tile_size, overlap);
    let width = tile_size.min(slide.width);
    let height = tile_size.min(slide.height);

    let tiles = ys
        .iter()
        .flat_map(|&oy| xs.iter().map(move |&ox| (ox, oy)))
        .enumerate()
        .map(|(index, (ox, oy))| Tile {
            index,
            ox,
            oy,
            width,
            height,
        })
        .collect();

    Ok(TilePlan {
        slide: slide.clone(),
        tile_size,
        overlap,
        tiles,
    })
}

/// Moves a tile-local detection into slide coordinates by adding the tile
/// offset.
pub fn to_global(d: &Detection, t: &Tile) -> Result<Detection, TilingError> {
    if d.frame != Frame::TileLocal(t.index) {
        return Err(TilingError::FrameMismatch {
            expected: t.index,
            found: d.frame,
        });
    }
    let bbox = d.bbox.translate(f64::from(t.ox), f64::from(t.oy))?;
    Ok(Detection {
        bbox,
        frame: Frame::SlideGlobal,
        ..d.clone()
    })
}

/// Inverse of [`to_global`]: expresses a slide-global detection relative to
/// tile `t`. The box must overlap the tile.
pub fn to_local(d: &Detection, t: &Tile) -> Result<Detection, TilingError> {
    if d.frame != Frame::SlideGlobal {
        return Err(TilingError::FrameMismatch {
            expected: t.index,
            found: d.frame,
        });
    }
    if d.bbox.intersection(&t.rect()).is_none() {
        return Err(TilingError::OutsideTile {
            bbox: d.bbox,
            tile: t.index,
        });
    }
    let bbox = d.bbox.translate(-f64::from(t.ox), -f64::from(t.oy))?;
    Ok(Detection {
        bbox,
        frame: Frame::TileLocal(t.index),
        ..d.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slide(w: u32, h: u32) -> SlideInfo {
        SlideInfo::new("s", w, h).unwrap()
    }

    fn offsets(plan: &TilePlan) -> Vec<(u32, u32)> {
        plan.tiles.iter().map(|t| (t.ox, t.oy)).collect()
    }

    #[test]
    fn exact_partition() {
        let plan = plan_tiles(&slide(2048, 2048), 1024, 0).unwrap();
        assert_eq!(
            offsets(&plan),
            vec![(0, 0), (1024, 0), (0, 1024), (1024, 1024)]
        );
        assert!(plan.tiles.iter().all(|t| t.width == 1024 && t.height == 1024));
    }

    #[test]
    fn overlapping_grid_clamps_last_tile() {
        let plan = plan_tiles(&slide(2048, 2048), 1024, 128).unwrap();
        assert_eq!(axis_offsets(2048, 1024, 128), vec![0, 896, 1024]);
        assert_eq!(plan.len(), 9);
        assert_eq!(plan.tiles[4].ox, 896);
        assert_eq!(plan.tiles[4].oy, 896);
        assert!(plan.tiles.iter().enumerate().all(|(i, t)| t.index == i));
    }

    #[test]
    fn small_slide_single_tile() {
        let plan = plan_tiles(&slide(500, 500), 1024, 0).unwrap();
        assert_eq!(plan.tiles, vec![Tile { index: 0, ox: 0, oy: 0, width: 500, height: 500 }]);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert_eq!(
            plan_tiles(&slide(10, 10), 8, 8),
            Err(TilingError::OverlapTooLarge { tile_size: 8, overlap: 8 })
        );
        assert_eq!(plan_tiles(&slide(10, 10), 0, 0), Err(TilingError::ZeroTileSize));
        let empty = SlideInfo {
            slide_id: "e".into(),
            width: 0,
            height: 5,
            microns_per_pixel: None,
        };
        assert!(matches!(plan_tiles(&empty, 8, 0), Err(TilingError::Slide(_))));
    }

    fn local(x1: f64, y1: f64, x2: f64, y2: f64, tile: usize) -> Detection {
        Detection::new(
            BBox::new(x1, y1, x2, y2).unwrap(),
            0.7,
            "m",
            "s",
            Frame::TileLocal(tile),
        )
        .unwrap()
    }

    #[test]
    fn offset_mapping() {
        let origin = Tile { index: 0, ox: 0, oy: 0, width: 1024, height: 1024 };
        let g = to_global(&local(10.0, 10.0, 60.0, 60.0, 0), &origin).unwrap();
        assert_eq!(g.bbox.to_array(), [10.0, 10.0, 60.0, 60.0]);
        assert_eq!(g.frame, Frame::SlideGlobal);

        let t = Tile { index: 7, ox: 1024, oy: 2048, width: 1024, height: 1024 };
        let d = local(10.0, 10.0, 60.0, 60.0, 7);
        let g = to_global(&d, &t).unwrap();
        assert_eq!(g.bbox.to_array(), [1034.0, 2058.0, 1084.0, 2108.0]);
        assert_eq!(g.score, d.score);
        assert_eq!(g.model_id, d.model_id);
        assert_eq!(to_local(&g, &t).unwrap(), d);
    }

    #[test]
    fn mapping_errors() {
        let t = Tile { index: 3, ox: 100, oy: 100, width: 50, height: 50 };
        let d = local(0.0, 0.0, 5.0, 5.0, 2);
        assert!(matches!(to_global(&d, &t), Err(TilingError::FrameMismatch { expected: 3, .. })));
        let far = Detection { frame: Frame::SlideGlobal, ..d.clone() };
        assert!(matches!(to_local(&far, &t), Err(TilingError::OutsideTile { .. })));
        assert!(matches!(to_local(&d, &t), Err(TilingError::FrameMismatch { .. })));
    }

    #[test]
    fn plan_json_shape() {
        let plan = plan_tiles(&slide(20, 10), 16, 4).unwrap();
        let v = serde_json::to_value(&plan).unwrap();
        assert_eq!(v["tile_size"], 16);
        assert_eq!(v["tiles"][1]["ox"], 4);
        let back: TilePlan = serde_json::from_value(v).unwrap();
        assert_eq!(back, plan);
    }
}
