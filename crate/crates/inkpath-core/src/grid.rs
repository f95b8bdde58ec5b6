//! Grid geometry primitives: cell coordinates, rectangles and the dense
//! per-cell storage used by the world model.

use serde::{Deserialize, Serialize};

/// Dimensions and physical scale of the workspace raster.
///
/// The defaults model a 0.8 x 0.6 m board at 2.5 mm per cell (320 x 240).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub width_cells: u32,
    pub height_cells: u32,
    /// Edge length of one cell in meters.
    pub cell_size: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            width_cells: 320,
            height_cells: 240,
            cell_size: 0.0025,
        }
    }
}

impl GridSpec {
    pub fn new(width_cells: u32, height_cells: u32, cell_size: f64) -> Self {
        let spec = Self {
            width_cells,
            height_cells,
            cell_size,
        };
        spec.validate();
        spec
    }

    pub fn validate(&self) {
        assert!(self.width_cells >= 2, "grid width must be at least 2 cells");
        assert!(self.height_cells >= 2, "grid height must be at least 2 cells");
        assert!(self.cell_size > 0.0, "cell size must be positive");
    }

    /// Cell edge length in millimeters; the unit conversion for slope math.
    pub fn cell_size_mm(&self) -> f64 {
        self.cell_size * 1000.0
    }

    pub fn contains(&self, p: Pos) -> bool {
        p.x >= 0 && p.y >= 0 && (p.x as u32) < self.width_cells && (p.y as u32) < self.height_cells
    }

    pub fn index(&self, p: Pos) -> usize {
        debug_assert!(self.contains(p));
        p.y as usize * self.width_cells as usize + p.x as usize
    }

    pub fn cell_count(&self) -> usize {
        self.width_cells as usize * self.height_cells as usize
    }
}

/// A cell coordinate. Ordering is row-major (y first), which is the
/// tie-breaking order used throughout the planner and policy search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub y: i32,
    pub x: i32,
}

impl Pos {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { y, x }
    }
}

/// Axis-aligned cell rectangle, half-open in both axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub x: i32,
    pub y: i32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn new(x: i32, y: i32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn contains(&self, p: Pos) -> bool {
        p.x >= self.x
            && p.y >= self.y
            && p.x < self.x + self.w as i32
            && p.y < self.y + self.h as i32
    }

    pub fn cells(&self) -> impl Iterator<Item = Pos> + '_ {
        let (x0, y0, w, h) = (self.x, self.y, self.w as i32, self.h as i32);
        (y0..y0 + h).flat_map(move |y| (x0..x0 + w).map(move |x| Pos::new(x, y)))
    }
}

/// Dense row-major grid of per-cell values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    width: u32,
    height: u32,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: u32, height: u32, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }
}

impl<T> Grid<T> {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn in_bounds(&self, p: Pos) -> bool {
        p.x >= 0 && p.y >= 0 && (p.x as u32) < self.width && (p.y as u32) < self.height
    }

    #[inline]
    pub fn get(&self, p: Pos) -> &T {
        &self.data[self.idx(p)]
    }

    #[inline]
    pub fn get_mut(&mut self, p: Pos) -> &mut T {
        let i = self.idx(p);
        &mut self.data[i]
    }

    #[inline]
    fn idx(&self, p: Pos) -> usize {
        debug_assert!(self.in_bounds(p), "out of bounds: {p:?}");
        p.y as usize * self.width as usize + p.x as usize
    }

    pub fn iter(&self) -> impl Iterator<Item = (Pos, &T)> {
        let w = self.width as i32;
        self.data.iter().enumerate().map(move |(i, v)| {
            (
                Pos::new(i as i32 % w, i as i32 / w),
                v,
            )
        })
    }

    pub fn raw(&self) -> &[T] {
        &self.data
    }

    pub fn raw_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

/// Compact bitmask over grid cells; used for occupancy/path masks in the
/// policy search hot loop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellMask {
    width: u32,
    height: u32,
    bits: Vec<u64>,
}

impl CellMask {
    pub fn empty(width: u32, height: u32) -> Self {
        let n = (width as usize * height as usize).div_ceil(64);
        Self {
            width,
            height,
            bits: vec![0; n],
        }
    }

    #[inline]
    pub fn in_bounds(&self, p: Pos) -> bool {
        p.x >= 0 && p.y >= 0 && (p.x as u32) < self.width && (p.y as u32) < self.height
    }

    #[inline]
    pub fn set(&mut self, p: Pos) {
        debug_assert!(self.in_bounds(p));
        let i = p.y as usize * self.width as usize + p.x as usize;
        self.bits[i / 64] |= 1 << (i % 64);
    }

    #[inline]
    pub fn get(&self, p: Pos) -> bool {
        if !self.in_bounds(p) {
            return false;
        }
        let i = p.y as usize * self.width as usize + p.x as usize;
        self.bits[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn set_rect(&mut self, r: Rect) {
        for p in r.cells() {
            if self.in_bounds(p) {
                self.set(p);
            }
        }
    }

    /// Marks every cell within Chebyshev distance `radius` of `p`.
    pub fn set_dilated(&mut self, p: Pos, radius: i32) {
        for y in p.y - radius..=p.y + radius {
            for x in p.x - radius..=p.x + radius {
                let q = Pos::new(x, y);
                if self.in_bounds(q) {
                    self.set(q);
                }
            }
        }
    }

    pub fn any_set<I: IntoIterator<Item = Pos>>(&self, cells: I) -> bool {
        cells.into_iter().any(|p| self.get(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_reproduces_workspace_dimensions() {
        let spec = GridSpec::default();
        assert_eq!(spec.width_cells as f64 * spec.cell_size, 0.8);
        assert_eq!(spec.height_cells as f64 * spec.cell_size, 0.6);
        assert_eq!(spec.cell_size_mm(), 2.5);
    }

    #[test]
    #[should_panic]
    fn degenerate_spec_rejected() {
        GridSpec::new(1, 240, 0.0025);
    }

    #[test]
    fn pos_ordering_is_row_major() {
        assert!(Pos::new(5, 0) < Pos::new(0, 1));
        assert!(Pos::new(0, 1) < Pos::new(1, 1));
    }

    #[test]
    fn rect_cells_cover_area() {
        let r = Rect::new(2, 3, 4, 2);
        let cells: Vec<_> = r.cells().collect();
        assert_eq!(cells.len(), 8);
        assert!(r.contains(Pos::new(2, 3)));
        assert!(r.contains(Pos::new(5, 4)));
        assert!(!r.contains(Pos::new(6, 4)));
        assert!(!r.contains(Pos::new(2, 5)));
    }

    #[test]
    fn mask_set_get_roundtrip() {
        let mut m = CellMask::empty(70, 3);
        m.set(Pos::new(69, 2));
        m.set(Pos::new(0, 0));
        assert!(m.get(Pos::new(69, 2)));
        assert!(m.get(Pos::new(0, 0)));
        assert!(!m.get(Pos::new(1, 0)));
        assert!(!m.get(Pos::new(-1, 0)));
    }
}
