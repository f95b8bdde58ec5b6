//! Movable objects: obstacles and ramps, their discretized poses and the
//! rasterization of rotated rectangular footprints onto the cell grid.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::grid::Pos;

/// Stable identifier of an object within a scenario.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct ObjectId(pub u32);

/// Obstacle body shape. Affects the default footprint aspect only; both
/// shapes rasterize to rectangles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObstacleShape {
    Cuboid,
    TriangularPrism,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ObjectKind {
    /// Solid block; cells under it are never traversable.
    Obstacle { shape: ObstacleShape, height_mm: f64 },
    /// Bridge: a flat deck reached by sloped approaches on the two ends of
    /// the footprint's depth axis.
    Ramp { deck_height_mm: f64, slope_cells: u32 },
}

impl ObjectKind {
    pub fn is_ramp(&self) -> bool {
        matches!(self, ObjectKind::Ramp { .. })
    }
}

/// Footprint dimensions in cells at rotation bin 0: `width` along x,
/// `depth` along y. Ramp approaches sit at the two depth-axis ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Footprint {
    pub width: u32,
    pub depth: u32,
}

impl Footprint {
    pub fn new(width: u32, depth: u32) -> Self {
        assert!(width >= 1 && depth >= 1);
        Self { width, depth }
    }

    pub fn area(&self) -> u32 {
        self.width * self.depth
    }
}

/// Discrete pose: anchor cell plus one of `k` rotation bins
/// (bin `b` means a rotation of `b * 360/k` degrees).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub x: i32,
    pub y: i32,
    pub theta_bin: u8,
}

impl Pose {
    pub const fn new(x: i32, y: i32, theta_bin: u8) -> Self {
        Self { x, y, theta_bin }
    }

    pub fn pos(&self) -> Pos {
        Pos::new(self.x, self.y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectInstance {
    pub id: ObjectId,
    pub kind: ObjectKind,
    pub footprint: Footprint,
    pub pose: Pose,
    /// Render-only tint; carries no semantics.
    pub color: [u8; 3],
}

/// One rasterized cell of a rotated footprint: offset from the anchor plus
/// the cell's index along the footprint's local depth axis (used for ramp
/// height profiles).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FootprintCell {
    pub dx: i32,
    pub dy: i32,
    pub local_j: u32,
}

/// Rasterization of one (footprint, rotation) pair, shared via cache.
#[derive(Debug, PartialEq)]
pub struct RotatedFootprint {
    pub cells: Vec<FootprintCell>,
    /// Anchor-relative cells of the two approach feet: the ground cells just
    /// beyond each depth-axis end, used as portal nodes by the planner.
    pub feet: [(i32, i32); 2],
    /// Anchor-relative bounds of `cells`: (min dx, min dy, max dx, max dy).
    pub bbox: (i32, i32, i32, i32),
}

/// The covered-cell inequality at anchor-relative offset (dx, dy); the
/// single source of truth shared by the rasterizer and the analytic
/// membership test.
pub fn footprint_covers(fp: Footprint, theta_bin: u8, k: u8, dx: i32, dy: i32) -> bool {
    let (cos_t, sin_t) = rotation_table(theta_bin, k);
    let (cx, cy) = rect_center(fp);
    let ux = dx as f64 * cos_t + dy as f64 * sin_t - cx;
    let uy = -(dx as f64) * sin_t + dy as f64 * cos_t - cy;
    ux.abs() < fp.width as f64 / 2.0 && uy.abs() < fp.depth as f64 / 2.0
}

/// (cos, sin) of `bin * 360/k` degrees. For the default k = 8 the values
/// come from an exact constant table so rasterization is bit-reproducible
/// across platforms; other k fall back to libm.
pub fn rotation_table(theta_bin: u8, k: u8) -> (f64, f64) {
    assert!(k >= 1 && theta_bin < k, "rotation bin out of range");
    if k == 8 {
        const C: f64 = std::f64::consts::FRAC_1_SQRT_2;
        const COS: [f64; 8] = [1.0, C, 0.0, -C, -1.0, -C, 0.0, C];
        const SIN: [f64; 8] = [0.0, C, 1.0, C, 0.0, -C, -1.0, -C];
        (COS[theta_bin as usize], SIN[theta_bin as usize])
    } else if k == 4 {
        const COS: [f64; 4] = [1.0, 0.0, -1.0, 0.0];
        const SIN: [f64; 4] = [0.0, 1.0, 0.0, -1.0];
        (COS[theta_bin as usize], SIN[theta_bin as usize])
    } else {
        let theta = theta_bin as f64 * std::f64::consts::TAU / k as f64;
        (theta.cos(), theta.sin())
    }
}

/// Local rectangle center relative to the anchor cell center. Even spans
/// put the anchor half a cell off-center so that bin 0 covers exactly
/// `width x depth` cells with the anchor inside.
fn rect_center(fp: Footprint) -> (f64, f64) {
    let cx = (fp.width as i32 - 1 - fp.width as i32 / 2) as f64 - (fp.width as f64 - 1.0) / 2.0;
    let cy = (fp.depth as i32 - 1 - fp.depth as i32 / 2) as f64 - (fp.depth as f64 - 1.0) / 2.0;
    (cx, cy)
}

fn rasterize(fp: Footprint, theta_bin: u8, k: u8) -> RotatedFootprint {
    let (cos_t, sin_t) = rotation_table(theta_bin, k);
    let (cx, cy) = rect_center(fp);
    let hw = fp.width as f64 / 2.0;
    let hd = fp.depth as f64 / 2.0;

    let reach = ((hw + 1.0).powi(2) + (hd + 1.0).powi(2)).sqrt().ceil() as i32;
    let mut cells = Vec::with_capacity(fp.area() as usize + 8);
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            if footprint_covers(fp, theta_bin, k, dx, dy) {
                // Inverse-rotate the cell center into the footprint frame
                // for the depth index.
                let uy = -(dx as f64) * sin_t + dy as f64 * cos_t - cy;
                let local_j = (uy + hd).floor().clamp(0.0, fp.depth as f64 - 1.0) as u32;
                cells.push(FootprintCell { dx, dy, local_j });
            }
        }
    }
    debug_assert!(!cells.is_empty());
    let bbox = cells.iter().fold(
        (i32::MAX, i32::MAX, i32::MIN, i32::MIN),
        |(x0, y0, x1, y1), c| (x0.min(c.dx), y0.min(c.dy), x1.max(c.dx), y1.max(c.dy)),
    );

    let foot_of = |sign: f64| -> (i32, i32) {
        // Step outward along the local depth axis until off the footprint.
        for extra in 0..4 {
            let t = hd + 0.5 + extra as f64;
            let lx = cx;
            let ly = cy + sign * t;
            let wx = (lx * cos_t - ly * sin_t).round() as i32;
            let wy = (lx * sin_t + ly * cos_t).round() as i32;
            if !cells.iter().any(|c| c.dx == wx && c.dy == wy) {
                return (wx, wy);
            }
        }
        unreachable!("foot search failed");
    };
    let feet = [foot_of(-1.0), foot_of(1.0)];

    RotatedFootprint { cells, feet, bbox }
}

type CacheKey = (Footprint, u8, u8);

fn footprint_cache() -> &'static RwLock<HashMap<CacheKey, Arc<RotatedFootprint>>> {
    static CACHE: std::sync::OnceLock<RwLock<HashMap<CacheKey, Arc<RotatedFootprint>>>> =
        std::sync::OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

/// Cached rasterization of `fp` rotated by `theta_bin` out of `k` bins.
pub fn rotated_footprint(fp: Footprint, theta_bin: u8, k: u8) -> Arc<RotatedFootprint> {
    let key = (fp, theta_bin, k);
    if let Some(hit) = footprint_cache().read().unwrap().get(&key) {
        return Arc::clone(hit);
    }
    let computed = Arc::new(rasterize(fp, theta_bin, k));
    let mut cache = footprint_cache().write().unwrap();
    Arc::clone(cache.entry(key).or_insert(computed))
}

impl ObjectInstance {
    /// Cells covered at the current pose, as absolute positions.
    pub fn covered_cells(&self, k: u8) -> Vec<Pos> {
        let raster = rotated_footprint(self.footprint, self.pose.theta_bin, k);
        raster
            .cells
            .iter()
            .map(|c| Pos::new(self.pose.x + c.dx, self.pose.y + c.dy))
            .collect()
    }

    pub fn raster(&self, k: u8) -> Arc<RotatedFootprint> {
        rotated_footprint(self.footprint, self.pose.theta_bin, k)
    }

    /// Surface height contributed at local depth index `j`, in mm above the
    /// reference ground under the object. Obstacles are a constant block;
    /// ramps rise over `slope_cells`, hold the deck, then descend.
    pub fn profile_height_mm(&self, local_j: u32) -> f64 {
        match self.kind {
            ObjectKind::Obstacle { height_mm, .. } => height_mm,
            ObjectKind::Ramp {
                deck_height_mm,
                slope_cells,
            } => {
                let d = self.footprint.depth;
                debug_assert!(2 * slope_cells < d, "ramp has no deck");
                if local_j < slope_cells {
                    deck_height_mm * (local_j + 1) as f64 / slope_cells as f64
                } else if local_j >= d - slope_cells {
                    deck_height_mm * (d - local_j) as f64 / slope_cells as f64
                } else {
                    deck_height_mm
                }
            }
        }
    }

    /// Whether local depth index `j` is part of a ramp's flat deck.
    pub fn is_deck_cell(&self, local_j: u32) -> bool {
        match self.kind {
            ObjectKind::Obstacle { .. } => false,
            ObjectKind::Ramp { slope_cells, .. } => {
                local_j >= slope_cells && local_j < self.footprint.depth - slope_cells
            }
        }
    }

    /// The two approach-foot cells (absolute), the planner's portal nodes.
    pub fn feet(&self, k: u8) -> [Pos; 2] {
        let raster = self.raster(k);
        raster
            .feet
            .map(|(dx, dy)| Pos::new(self.pose.x + dx, self.pose.y + dy))
    }
}

/// Default obstacle: a 20 mm tall block.
pub fn default_obstacle(id: ObjectId, shape: ObstacleShape, pose: Pose, color: [u8; 3]) -> ObjectInstance {
    let footprint = match shape {
        ObstacleShape::Cuboid => Footprint::new(10, 10),
        ObstacleShape::TriangularPrism => Footprint::new(8, 16),
    };
    ObjectInstance {
        id,
        kind: ObjectKind::Obstacle {
            shape,
            height_mm: 20.0,
        },
        footprint,
        pose,
        color,
    }
}

/// Default ramp: 8 x 24 cells, 10 mm deck reached over 4 approach cells
/// (2.5 mm per cell, one cell unit per step at the default grid scale).
pub fn default_ramp(id: ObjectId, pose: Pose, color: [u8; 3]) -> ObjectInstance {
    ObjectInstance {
        id,
        kind: ObjectKind::Ramp {
            deck_height_mm: 10.0,
            slope_cells: 4,
        },
        footprint: Footprint::new(8, 24),
        pose,
        color,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin0_rasterization_is_exact_rectangle() {
        let fp = Footprint::new(2, 4);
        let r = rotated_footprint(fp, 0, 8);
        assert_eq!(r.cells.len(), 8);
        // Anchor at (5,5): cells x in {4,5}, y in {3..=6}.
        let cells: Vec<(i32, i32)> = r.cells.iter().map(|c| (5 + c.dx, 5 + c.dy)).collect();
        for x in 4..=5 {
            for y in 3..=6 {
                assert!(cells.contains(&(x, y)), "missing ({x},{y})");
            }
        }
    }

    #[test]
    fn quarter_turn_swaps_axes() {
        let fp = Footprint::new(2, 6);
        let r0 = rotated_footprint(fp, 0, 8);
        let r2 = rotated_footprint(fp, 2, 8);
        assert_eq!(r0.cells.len(), 12);
        assert_eq!(r2.cells.len(), 12);
        let xs: Vec<i32> = r2.cells.iter().map(|c| c.dx).collect();
        let ys: Vec<i32> = r2.cells.iter().map(|c| c.dy).collect();
        assert_eq!(xs.iter().max().unwrap() - xs.iter().min().unwrap(), 5);
        assert_eq!(ys.iter().max().unwrap() - ys.iter().min().unwrap(), 1);
    }

    #[test]
    fn diagonal_rasterization_is_solid() {
        // Convexity: per row, covered cells form one contiguous run.
        let fp = Footprint::new(8, 24);
        let r = rotated_footprint(fp, 1, 8);
        let mut rows: std::collections::HashMap<i32, Vec<i32>> = std::collections::HashMap::new();
        for c in &r.cells {
            rows.entry(c.dy).or_default().push(c.dx);
        }
        for (_, mut xs) in rows {
            xs.sort_unstable();
            for w in xs.windows(2) {
                assert_eq!(w[1] - w[0], 1, "hole in rotated footprint row");
            }
        }
    }

    #[test]
    fn ramp_profile_matches_linear_approach() {
        let ramp = ObjectInstance {
            id: ObjectId(0),
            kind: ObjectKind::Ramp {
                deck_height_mm: 20.0,
                slope_cells: 2,
            },
            footprint: Footprint::new(6, 8),
            pose: Pose::new(10, 10, 0),
            color: [0; 3],
        };
        assert_eq!(ramp.profile_height_mm(0), 10.0);
        assert_eq!(ramp.profile_height_mm(1), 20.0);
        assert_eq!(ramp.profile_height_mm(3), 20.0);
        assert!(ramp.is_deck_cell(3));
        assert!(!ramp.is_deck_cell(1));
        assert_eq!(ramp.profile_height_mm(6), 20.0);
        assert_eq!(ramp.profile_height_mm(7), 10.0);
    }

    #[test]
    fn feet_lie_outside_but_adjacent_for_all_rotations() {
        let fp = Footprint::new(8, 24);
        for bin in 0..8 {
            let r = rotated_footprint(fp, bin, 8);
            for (fx, fy) in r.feet {
                assert!(
                    !r.cells.iter().any(|c| c.dx == fx && c.dy == fy),
                    "foot on footprint at bin {bin}"
                );
                let adjacent = r
                    .cells
                    .iter()
                    .any(|c| (c.dx - fx).abs() <= 1 && (c.dy - fy).abs() <= 1);
                assert!(adjacent, "foot detached at bin {bin}");
            }
            assert_ne!(r.feet[0], r.feet[1]);
        }
    }

    #[test]
    fn rotation_cache_returns_shared_raster() {
        let fp = Footprint::new(10, 10);
        let a = rotated_footprint(fp, 3, 8);
        let b = rotated_footprint(fp, 3, 8);
        assert!(Arc::ptr_eq(&a, &b));
    }
}
