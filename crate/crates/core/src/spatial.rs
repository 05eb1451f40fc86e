//! Uniform bucket grid over points.
//!
//! Points are bucketed by `floor(coord / cell_size)`. A query returns every
//! point in the 3×3 block of cells around the query cell, which is a superset
//! of all points within `cell_size` (per axis) of the query.

use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct GridIndex {
    cell_size: f64,
    origin: (f64, f64),
    cols: i64,
    rows: i64,
    storage: Storage,
}

#[derive(Debug, Clone)]
enum Storage {
    Dense(Vec<Vec<u32>>),
    Sparse(HashMap<(i64, i64), Vec<u32>>),
}

// dense storage is used while the cell count stays within this multiple of
// the point count
const DENSE_CELLS_PER_POINT: i64 = 4;

impl GridIndex {
    /// Builds an index over `points`; the i-th point is reported as `i`.
    ///
    /// `cell_size` must be positive and finite.
    pub fn build(points: &[(f64, f64)], cell_size: f64) -> Self {
        assert!(
            cell_size.is_finite() && cell_size > 0.0,
            "cell size must be positive, got {cell_size}"
        );
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points {
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
        if points.is_empty() {
            (min_x, min_y, max_x, max_y) = (0.0, 0.0, 0.0, 0.0);
        }
        let origin = (min_x, min_y);
        let cols = ((max_x - min_x) / cell_size).floor() as i64 + 1;
        let rows = ((max_y - min_y) / cell_size).floor() as i64 + 1;

        let dense_limit = DENSE_CELLS_PER_POINT * (points.len() as i64).max(16);
        let mut index = Self {
            cell_size,
            origin,
            cols,
            rows,
            storage: if cols.saturating_mul(rows) <= dense_limit {
                Storage::Dense(vec![Vec::new(); (cols * rows) as usize])
            } else {
                Storage::Sparse(HashMap::new())
            },
        };
        for (i, &(x, y)) in points.iter().enumerate() {
            let cell = index.cell_of(x, y);
            index.bucket_mut(cell).push(i as u32);
        }
        index
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    fn cell_of(&self, x: f64, y: f64) -> (i64, i64) {
        (
            ((x - self.origin.0) / self.cell_size).floor() as i64,
            ((y - self.origin.1) / self.cell_size).floor() as i64,
        )
    }

    fn bucket_mut(&mut self, (cx, cy): (i64, i64)) -> &mut Vec<u32> {
        match &mut self.storage {
            Storage::Dense(cells) => &mut cells[(cy * self.cols + cx) as usize],
            Storage::Sparse(map) => map.entry((cx, cy)).or_default(),
        }
    }

    fn bucket(&self, (cx, cy): (i64, i64)) -> &[u32] {
        if cx < 0 || cy < 0 || cx >= self.cols || cy >= self.rows {
            return &[];
        }
        match &self.storage {
            Storage::Dense(cells) => &cells[(cy * self.cols + cx) as usize],
            Storage::Sparse(map) => map.get(&(cx, cy)).map_or(&[], Vec::as_slice),
        }
    }

    /// Calls `visit` with the index of every point in the 3×3 cell
    /// neighbourhood of `(x, y)`. Covers all points whose coordinates differ
    /// from the query by less than `cell_size` on both axes.
    pub fn for_each_neighbor(&self, x: f64, y: f64, mut visit: impl FnMut(usize)) {
        let (cx, cy) = self.cell_of(x, y);
        for dy in -1..=1 {
            for dx in -1..=1 {
                for &i in self.bucket((cx + dx, cy + dy)) {
                    visit(i as usize);
                }
            }
        }
    }

    pub fn neighbors(&self, x: f64, y: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_neighbor(x, y, |i| out.push(i));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_index() {
        let g = GridIndex::build(&[], 10.0);
        assert!(g.neighbors(5.0, 5.0).is_empty());
    }

    #[test]
    fn sparse_layout_for_far_apart_points() {
        let pts = [(0.0, 0.0), (1.0e7, 1.0e7)];
        let g = GridIndex::build(&pts, 1.0);
        assert!(matches!(g.storage, Storage::Sparse(_)));
        assert_eq!(g.neighbors(0.5, 0.5), vec![0]);
        assert_eq!(g.neighbors(1.0e7, 1.0e7 - 0.5), vec![1]);
    }

    proptest! {
        #[test]
        fn finds_everything_within_cell_size(
            pts in proptest::collection::vec((0.0f64..500.0, 0.0f64..500.0), 0..60),
            q in (-50.0f64..550.0, -50.0f64..550.0),
            cell in 1.0f64..80.0,
        ) {
            let g = GridIndex::build(&pts, cell);
            let mut found = g.neighbors(q.0, q.1);
            found.sort_unstable();
            for (i, p) in pts.iter().enumerate() {
                if (p.0 - q.0).abs() < cell && (p.1 - q.1).abs() < cell {
                    prop_assert!(found.binary_search(&i).is_ok());
                }
            }
        }
    }
}
