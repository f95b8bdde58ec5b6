//! World state: heightmap terrain, electrodes, forbidden zones, movable
//! objects and drawn traces, plus the legality and effects of pick-and-place
//! actions.
//!
//! Scenarios are immutable snapshots; every operation returns a new value.
//! The static terrain is shared behind an `Arc`, so cloning a scenario costs
//! only the object and trace lists. This keeps hypothetical-action search in
//! the policy cheap.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{CellMask, Grid, GridSpec, Pos, Rect};
use crate::object::{ObjectId, ObjectInstance, ObjectKind, Pose};
use crate::task::TaskKind;

/// Which electrode pair a trace belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CircuitLabel {
    A,
    B,
}

impl CircuitLabel {
    pub const BOTH: [CircuitLabel; 2] = [CircuitLabel::A, CircuitLabel::B];
}

impl std::fmt::Display for CircuitLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CircuitLabel::A => write!(f, "A"),
            CircuitLabel::B => write!(f, "B"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ElectrodeId {
    RobotA,
    RobotB,
    SourceA,
    SourceB,
}

impl ElectrodeId {
    pub fn pair(&self) -> CircuitLabel {
        match self {
            ElectrodeId::RobotA | ElectrodeId::SourceA => CircuitLabel::A,
            ElectrodeId::RobotB | ElectrodeId::SourceB => CircuitLabel::B,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Electrode {
    pub id: ElectrodeId,
    pub cell: Pos,
}

/// Vertical layer a surface point or trace lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    Ground,
    Elevated,
}

/// Assembled view of one world cell; storage is columnar internally.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub base_height_mm: f64,
    pub forbidden: bool,
    pub occupied_by: Option<ObjectId>,
    pub trace_ground: Option<CircuitLabel>,
    pub trace_elevated: Option<CircuitLabel>,
}

/// Static per-episode ground data: terrain heights and forbidden zones.
#[derive(Clone, Debug, PartialEq)]
pub struct Terrain {
    pub grid: GridSpec,
    pub base_height_mm: Grid<f64>,
    pub forbidden: Grid<bool>,
}

impl Terrain {
    pub fn flat(grid: GridSpec) -> Self {
        Self {
            base_height_mm: Grid::filled(grid.width_cells, grid.height_cells, 0.0),
            forbidden: Grid::filled(grid.width_cells, grid.height_cells, false),
            grid,
        }
    }
}

/// One committed circuit trace: the drawn cells with the level each was
/// drawn at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub label: CircuitLabel,
    pub cells: Vec<(Pos, Level)>,
}

/// The agent's entire action: a pick pose and a place pose.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PickPlaceAction {
    pub pick: Pose,
    pub place: Pose,
}

impl PickPlaceAction {
    /// Lexicographic key used for deterministic tie-breaking in the policy.
    pub fn tie_key(&self) -> (i32, i32, i32, i32, u8) {
        (
            self.pick.y,
            self.pick.x,
            self.place.y,
            self.place.x,
            self.place.theta_bin,
        )
    }
}

/// Shared lazy cache of derived connectivity; transparent to equality and
/// debug output since it carries no state of its own.
#[derive(Clone, Default)]
struct CompsCache(Arc<std::sync::OnceLock<Arc<Vec<u32>>>>);

impl CompsCache {
    fn invalidate(&mut self) {
        self.0 = Arc::new(std::sync::OnceLock::new());
    }

    fn get_or_init<F: FnOnce() -> Arc<Vec<u32>>>(&self, f: F) -> Arc<Vec<u32>> {
        Arc::clone(self.0.get_or_init(f))
    }
}

impl PartialEq for CompsCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl std::fmt::Debug for CompsCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("CompsCache")
    }
}

/// Shared lazy cache of relaxed distance fields keyed by anchor cell;
/// equality-transparent like [`CompsCache`].
#[derive(Clone, Default)]
struct FieldCache(Arc<std::sync::Mutex<std::collections::HashMap<Pos, Arc<Vec<f64>>>>>);

impl FieldCache {
    fn invalidate(&mut self) {
        self.0 = Arc::new(std::sync::Mutex::new(std::collections::HashMap::new()));
    }

    fn get_or_init<F: FnOnce() -> Vec<f64>>(&self, anchor: Pos, f: F) -> Arc<Vec<f64>> {
        let mut map = self.0.lock().unwrap();
        Arc::clone(map.entry(anchor).or_insert_with(|| Arc::new(f())))
    }
}

impl PartialEq for FieldCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl std::fmt::Debug for FieldCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("FieldCache")
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorldError {
    #[error("pose out of bounds")]
    OutOfBounds,
    #[error("illegal overlap: {0}")]
    IllegalOverlap(&'static str),
    #[error("no object under pick cell")]
    NothingToPick,
    #[error("step budget exhausted")]
    BudgetExhausted,
}

/// Full world snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub grid: GridSpec,
    pub terrain: Arc<Terrain>,
    pub objects: Vec<ObjectInstance>,
    pub traces: Vec<Trace>,
    /// Ground-level trace occupancy, kept alongside `traces` for fast
    /// legality tests.
    trace_ground_mask: Arc<CellMask>,
    trace_elevated_mask: Arc<CellMask>,
    /// Forbidden-zone rectangles (terminal margin strips excluded), derived
    /// from the terrain whenever it changes.
    zones: Arc<Vec<Rect>>,
    /// Lazily computed ground components over terrain and traces alone
    /// (objects ignored, so the cache stays valid while they move and is
    /// merged-or-equal versus any true ground connectivity). Shared across
    /// clones; replaced whenever terrain or traces change.
    ground_comps: CompsCache,
    relaxed_fields: FieldCache,
    pub electrodes: [Electrode; 4],
    pub waste_zone: Rect,
    pub task: TaskKind,
    pub seed: u64,
    pub step_budget: u32,
    pub steps_remaining: u32,
    pub slope_min_mm: f64,
    pub slope_max_mm: f64,
    pub rotation_bins: u8,
}

/// Default lateral inset of electrode columns from the board edge.
pub const ELECTRODE_EDGE_OFFSET: i32 = 4;

/// Electrode layout: robot terminals on the left edge band, source terminals
/// on the right. Inverting swaps the two source rows so the straight A and B
/// routes cross. Rows land on multiples of the default action stride.
pub fn default_electrodes(grid: &GridSpec, inverted: bool) -> [Electrode; 4] {
    let left = ELECTRODE_EDGE_OFFSET;
    let right = grid.width_cells as i32 - 1 - ELECTRODE_EDGE_OFFSET;
    let row_a = grid.height_cells as i32 / 3;
    let row_b = 2 * grid.height_cells as i32 / 3;
    let (src_a_row, src_b_row) = if inverted { (row_b, row_a) } else { (row_a, row_b) };
    [
        Electrode {
            id: ElectrodeId::RobotA,
            cell: Pos::new(left, row_a),
        },
        Electrode {
            id: ElectrodeId::RobotB,
            cell: Pos::new(left, row_b),
        },
        Electrode {
            id: ElectrodeId::SourceA,
            cell: Pos::new(right, src_a_row),
        },
        Electrode {
            id: ElectrodeId::SourceB,
            cell: Pos::new(right, src_b_row),
        },
    ]
}

impl Scenario {
    /// A bare flat board with no objects, zones or traces.
    pub fn empty(grid: GridSpec, task: TaskKind, seed: u64, inverted: bool) -> Self {
        grid.validate();
        Self {
            terrain: Arc::new(Terrain::flat(grid)),
            objects: Vec::new(),
            traces: Vec::new(),
            trace_ground_mask: Arc::new(CellMask::empty(grid.width_cells, grid.height_cells)),
            trace_elevated_mask: Arc::new(CellMask::empty(grid.width_cells, grid.height_cells)),
            zones: Arc::new(Vec::new()),
            ground_comps: CompsCache::default(),
            relaxed_fields: FieldCache::default(),
            electrodes: default_electrodes(&grid, inverted),
            waste_zone: Rect::new(8, 8, 40, 40),
            task,
            seed,
            step_budget: 0,
            steps_remaining: 0,
            slope_min_mm: 1.0,
            slope_max_mm: 6.0,
            rotation_bins: 8,
            grid,
        }
    }

    pub fn slope(&self) -> crate::planner::SlopeParams {
        crate::planner::SlopeParams::new(self.slope_min_mm, self.slope_max_mm)
    }

    pub fn electrode(&self, id: ElectrodeId) -> &Electrode {
        self.electrodes.iter().find(|e| e.id == id).unwrap()
    }

    /// (robot, source) terminal cells of a circuit.
    pub fn circuit_endpoints(&self, label: CircuitLabel) -> (Pos, Pos) {
        match label {
            CircuitLabel::A => (
                self.electrode(ElectrodeId::RobotA).cell,
                self.electrode(ElectrodeId::SourceA).cell,
            ),
            CircuitLabel::B => (
                self.electrode(ElectrodeId::RobotB).cell,
                self.electrode(ElectrodeId::SourceB).cell,
            ),
        }
    }

    pub fn is_electrode_cell(&self, p: Pos) -> bool {
        self.electrodes.iter().any(|e| e.cell == p)
    }

    pub fn object(&self, id: ObjectId) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn object_at(&self, p: Pos) -> Option<&ObjectInstance> {
        if !self.grid.contains(p) {
            return None;
        }
        self.objects
            .iter()
            .find(|o| covers(o, p, self.rotation_bins))
    }

    pub fn trace(&self, label: CircuitLabel) -> Option<&Trace> {
        self.traces.iter().find(|t| t.label == label)
    }

    pub fn trace_ground_at(&self, p: Pos) -> bool {
        self.trace_ground_mask.get(p)
    }

    pub fn trace_elevated_at(&self, p: Pos) -> bool {
        self.trace_elevated_mask.get(p)
    }

    /// Assembles the view of one cell. O(objects + trace cells); bulk
    /// consumers should walk the columnar fields instead.
    pub fn cell(&self, p: Pos) -> Cell {
        let label_at = |level: Level| -> Option<CircuitLabel> {
            self.traces.iter().find_map(|t| {
                t.cells
                    .iter()
                    .find(|(c, l)| *c == p && *l == level)
                    .map(|_| t.label)
            })
        };
        Cell {
            base_height_mm: *self.terrain.base_height_mm.get(p),
            forbidden: *self.terrain.forbidden.get(p),
            occupied_by: self.object_at(p).map(|o| o.id),
            trace_ground: label_at(Level::Ground),
            trace_elevated: label_at(Level::Elevated),
        }
    }

    pub fn mark_forbidden(&mut self, zone: Rect) {
        let terrain = Arc::make_mut(&mut self.terrain);
        for p in zone.cells() {
            if self.grid.contains(p) {
                *terrain.forbidden.get_mut(p) = true;
            }
        }
        self.recompute_zones();
        self.ground_comps.invalidate();
        self.relaxed_fields.invalidate();
    }

    pub fn forbidden_cells(&self) -> Vec<Pos> {
        self.terrain
            .forbidden
            .iter()
            .filter(|(_, f)| **f)
            .map(|(p, _)| p)
            .collect()
    }

    /// Forbidden-zone bounding rectangles; the terminal margin strips along
    /// the left/right edges are mounting area, not zones.
    pub fn zone_rects(&self) -> &[Rect] {
        &self.zones
    }

    pub(crate) fn recompute_zones(&mut self) {
        let w = self.grid.width_cells as i32;
        let mut rects: Vec<Rect> = Vec::new();
        for (p, forbidden) in self.terrain.forbidden.iter() {
            if !*forbidden || p.x < ELECTRODE_EDGE_OFFSET || p.x >= w - ELECTRODE_EDGE_OFFSET {
                continue;
            }
            if let Some(r) = rects.iter_mut().find(|r| {
                p.x >= r.x - 1
                    && p.x <= r.x + r.w as i32
                    && p.y >= r.y - 1
                    && p.y <= r.y + r.h as i32
            }) {
                let x0 = r.x.min(p.x);
                let y0 = r.y.min(p.y);
                let x1 = (r.x + r.w as i32).max(p.x + 1);
                let y1 = (r.y + r.h as i32).max(p.y + 1);
                *r = Rect::new(x0, y0, (x1 - x0) as u32, (y1 - y0) as u32);
            } else {
                rects.push(Rect::new(p.x, p.y, 1, 1));
            }
        }
        self.zones = Arc::new(rects);
    }

    /// Whether some ramp's approach feet flank the zone (a crossing exists
    /// geometrically).
    pub fn zone_is_straddled(&self, zone: Rect) -> bool {
        self.objects.iter().any(|o| {
            if !o.kind.is_ramp() {
                return false;
            }
            let feet = o.feet(self.rotation_bins);
            (feet[0].x < zone.x && feet[1].x >= zone.x + zone.w as i32)
                || (feet[1].x < zone.x && feet[0].x >= zone.x + zone.w as i32)
        })
    }

    /// Checks placement legality of `object` at its pose.
    ///
    /// Overlap rules: nothing may cover an electrode or another object;
    /// obstacles may cover forbidden ground but never traces; only a ramp's
    /// deck may span forbidden ground or an existing ground trace, its
    /// approaches must rest on clean ground.
    pub fn check_stamp(&self, object: &ObjectInstance) -> Result<(), WorldError> {
        assert!(
            object.pose.theta_bin < self.rotation_bins,
            "rotation bin out of range"
        );
        let raster = object.raster(self.rotation_bins);
        for fc in &raster.cells {
            let p = Pos::new(object.pose.x + fc.dx, object.pose.y + fc.dy);
            if !self.grid.contains(p) {
                return Err(WorldError::OutOfBounds);
            }
            if self.is_electrode_cell(p) {
                return Err(WorldError::IllegalOverlap("object over electrode"));
            }
            if self
                .objects
                .iter()
                .any(|o| o.id != object.id && covers(o, p, self.rotation_bins))
            {
                return Err(WorldError::IllegalOverlap("object over object"));
            }
            let ground_trace = self.trace_ground_mask.get(p);
            let elevated_trace = self.trace_elevated_mask.get(p);
            match object.kind {
                ObjectKind::Obstacle { .. } => {
                    if ground_trace || elevated_trace {
                        return Err(WorldError::IllegalOverlap("obstacle over trace"));
                    }
                }
                ObjectKind::Ramp { .. } => {
                    if elevated_trace {
                        return Err(WorldError::IllegalOverlap("ramp over elevated trace"));
                    }
                    if !object.is_deck_cell(fc.local_j)
                        && (*self.terrain.forbidden.get(p) || ground_trace)
                    {
                        return Err(WorldError::IllegalOverlap(
                            "ramp approach over forbidden zone or trace",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Adds `object` to the world.
    pub fn stamp_object(&self, object: ObjectInstance) -> Result<Scenario, WorldError> {
        assert!(
            self.object(object.id).is_none(),
            "object id already present"
        );
        self.check_stamp(&object)?;
        let mut next = self.clone();
        next.objects.push(object);
        Ok(next)
    }

    /// Re-poses an object without consuming budget (generator and search
    /// internals; episode play goes through `apply_action`). Object order
    /// is preserved: the list stays canonically sorted by id.
    pub fn with_object_pose(&self, id: ObjectId, pose: Pose) -> Result<Scenario, WorldError> {
        let mut next = self.clone();
        let idx = next
            .objects
            .iter()
            .position(|o| o.id == id)
            .expect("unknown object id");
        let mut moved = next.objects[idx].clone();
        moved.pose = pose;
        next.check_stamp(&moved)?;
        next.objects[idx] = moved;
        Ok(next)
    }

    /// Picks the object under `action.pick` and re-stamps it at
    /// `action.place`, consuming one step of budget. A ramp that carries a
    /// drawn trace on its surface is pinned and cannot be picked.
    pub fn apply_action(&self, action: &PickPlaceAction) -> Result<Scenario, WorldError> {
        if self.steps_remaining == 0 {
            return Err(WorldError::BudgetExhausted);
        }
        if !self.grid.contains(action.pick.pos()) || !self.grid.contains(action.place.pos()) {
            return Err(WorldError::OutOfBounds);
        }
        let object = self
            .object_at(action.pick.pos())
            .ok_or(WorldError::NothingToPick)?;
        let id = object.id;
        let carries_trace = object
            .raster(self.rotation_bins)
            .cells
            .iter()
            .any(|fc| {
                self.trace_elevated_mask
                    .get(Pos::new(object.pose.x + fc.dx, object.pose.y + fc.dy))
            });
        if carries_trace {
            return Err(WorldError::IllegalOverlap("object carries a drawn trace"));
        }

        let mut next = self.with_object_pose(id, action.place)?;
        next.steps_remaining -= 1;
        Ok(next)
    }

    /// Writes a planned path as a drawn trace. Each path cell receives the
    /// trace at the level it currently presents in the effective surface.
    pub fn commit_trace(
        &self,
        label: CircuitLabel,
        path: &crate::planner::Path3D,
    ) -> Result<Scenario, WorldError> {
        let surface = self.effective_surface();
        let mut cells = Vec::with_capacity(path.cells.len());
        for pc in &path.cells {
            let p = pc.pos();
            if !self.grid.contains(p) {
                return Err(WorldError::OutOfBounds);
            }
            let level = surface.cells.get(p).level;
            let already = match level {
                Level::Ground => self.trace_ground_mask.get(p),
                Level::Elevated => self.trace_elevated_mask.get(p),
            };
            if already {
                return Err(WorldError::IllegalOverlap("trace over trace at same level"));
            }
            cells.push((p, level));
        }
        let mut next = self.clone();
        let ground = Arc::make_mut(&mut next.trace_ground_mask);
        for (p, level) in &cells {
            if *level == Level::Ground {
                ground.set(*p);
            }
        }
        let elevated = Arc::make_mut(&mut next.trace_elevated_mask);
        for (p, level) in &cells {
            if *level == Level::Elevated {
                elevated.set(*p);
            }
        }
        next.traces.push(Trace { label, cells });
        // A new trace only adds blockers, so the cached relaxed fields stay
        // valid lower bounds; only the component split must be redone.
        next.ground_comps.invalidate();
        Ok(next)
    }

    /// Number of cells covered by any object footprint.
    pub fn occupied_cell_count(&self) -> usize {
        self.objects
            .iter()
            .map(|o| o.raster(self.rotation_bins).cells.len())
            .sum()
    }

    /// Ramps as portal entries for the double-layer planner.
    pub fn ramp_portals(&self) -> Vec<crate::planner::RampPortal> {
        self.objects
            .iter()
            .filter(|o| o.kind.is_ramp())
            .map(|o| crate::planner::RampPortal {
                cells: o.covered_cells(self.rotation_bins),
                feet: o.feet(self.rotation_bins),
            })
            .collect()
    }

    /// Cells of the other pair's electrodes, which a circuit may never touch
    /// (contact would short against the foreign terminal).
    pub fn foreign_electrode_cells(&self, label: CircuitLabel) -> Vec<Pos> {
        self.electrodes
            .iter()
            .filter(|e| e.id.pair() != label)
            .map(|e| e.cell)
            .collect()
    }

    pub fn foreign_electrode_mask(&self, label: CircuitLabel) -> CellMask {
        let mut mask = CellMask::empty(self.grid.width_cells, self.grid.height_cells);
        for e in &self.electrodes {
            if e.id.pair() != label {
                mask.set(e.cell);
            }
        }
        mask
    }

    /// Ground connectivity over terrain and traces alone, shared across
    /// clones. Objects are ignored, so this is merged-or-equal versus the
    /// true ramp-masked ground: legs it rules out are truly severed, legs it
    /// keeps get settled by search.
    pub fn ground_comps(&self) -> Arc<Vec<u32>> {
        self.ground_comps.get_or_init(|| {
            let bare = self.bare_surface();
            Arc::new(crate::planner::ground_components(&bare, self.slope(), None))
        })
    }

    /// Relaxed shortest-path distances from `anchor` on the objects-free
    /// board (terrain and committed traces only); an admissible heuristic
    /// for any search over the true, more-blocked ground. Cached per anchor
    /// and shared across clones until terrain or traces change.
    pub fn relaxed_field(&self, anchor: Pos) -> Arc<Vec<f64>> {
        self.relaxed_fields.get_or_init(anchor, || {
            let bare = self.bare_surface();
            crate::planner::relaxed_distance_field(&bare, anchor, self.slope())
        })
    }

    /// The board with terrain and traces but no objects.
    fn bare_surface(&self) -> SurfaceMap {
        let w = self.grid.width_cells;
        let h = self.grid.height_cells;
        let mut cells = Grid::filled(
            w,
            h,
            SurfaceCell {
                height_mm: 0.0,
                traversable: true,
                level: Level::Ground,
                electrode: None,
            },
        );
        let heights = self.terrain.base_height_mm.raw();
        let forbidden = self.terrain.forbidden.raw();
        for (i, sc) in cells.raw_mut().iter_mut().enumerate() {
            sc.height_mm = heights[i];
            sc.traversable = !forbidden[i];
        }
        for y in 0..h as i32 {
            for x in 0..w as i32 {
                let p = Pos::new(x, y);
                if self.trace_ground_mask.get(p) {
                    cells.get_mut(p).traversable = false;
                }
            }
        }
        SurfaceMap {
            grid: self.grid,
            cells,
        }
    }

    /// Plans one circuit on the current world via the double-layer planner.
    pub fn plan_circuit(&self, label: CircuitLabel) -> Option<crate::planner::Path3D> {
        self.plan_circuit_on(&self.effective_surface(), label)
    }

    /// Plans several circuits on one shared surface build.
    pub fn plan_circuits(&self, labels: &[CircuitLabel]) -> Vec<Option<crate::planner::Path3D>> {
        let surface = self.effective_surface();
        labels
            .iter()
            .map(|&l| self.plan_circuit_on(&surface, l))
            .collect()
    }

    /// Same, but on a caller-supplied surface (the policy evaluates patched
    /// surfaces without rebuilding scenarios).
    pub fn plan_circuit_on(
        &self,
        surface: &SurfaceMap,
        label: CircuitLabel,
    ) -> Option<crate::planner::Path3D> {
        let comps = self.ground_comps();
        let (start, goal) = self.circuit_endpoints(label);
        let field = self.relaxed_field(goal);
        crate::planner::plan_circuit_hinted(
            surface,
            start,
            goal,
            self.slope(),
            &self.ramp_portals(),
            &self.foreign_electrode_cells(label),
            crate::planner::Connectivity::Precomputed(&comps),
            Some(&field),
        )
    }

    /// Planning on a surface whose connectivity differs from this
    /// scenario's (bridging probes open trace cells hypothetically).
    pub(crate) fn plan_circuit_unhinted(
        &self,
        surface: &SurfaceMap,
        label: CircuitLabel,
    ) -> Option<crate::planner::Path3D> {
        let (start, goal) = self.circuit_endpoints(label);
        crate::planner::plan_circuit_hinted(
            surface,
            start,
            goal,
            self.slope(),
            &self.ramp_portals(),
            &self.foreign_electrode_cells(label),
            crate::planner::Connectivity::Analyze,
            None,
        )
    }

    /// Per-cell drawing surface: height, traversability and level.
    ///
    /// Obstacles block their cells. Forbidden ground and ground-level traces
    /// are not drawable, but a ramp covering them presents its own elevated
    /// surface instead. A surface cell already carrying a trace at its level
    /// is blocked (a second pass would short-circuit).
    pub fn effective_surface(&self) -> SurfaceMap {
        let w = self.grid.width_cells;
        let h = self.grid.height_cells;
        let mut cells = Grid::filled(
            w,
            h,
            SurfaceCell {
                height_mm: 0.0,
                traversable: true,
                level: Level::Ground,
                electrode: None,
            },
        );
        let heights = self.terrain.base_height_mm.raw();
        let forbidden = self.terrain.forbidden.raw();
        for (i, sc) in cells.raw_mut().iter_mut().enumerate() {
            sc.height_mm = heights[i];
            sc.traversable = !forbidden[i];
        }
        for y in 0..h as i32 {
            for x in 0..w as i32 {
                let p = Pos::new(x, y);
                if self.trace_ground_mask.get(p) {
                    cells.get_mut(p).traversable = false;
                }
            }
        }
        for e in &self.electrodes {
            cells.get_mut(e.cell).electrode = Some(e.id);
        }
        for object in &self.objects {
            patch_surface_with_object(&mut cells, self, object);
        }
        SurfaceMap {
            grid: self.grid,
            cells,
        }
    }
}

/// Applies one object's footprint onto a surface grid. Shared with the
/// policy's incremental candidate evaluation.
pub(crate) fn patch_surface_with_object(
    cells: &mut Grid<SurfaceCell>,
    scenario: &Scenario,
    object: &ObjectInstance,
) {
    let raster = object.raster(scenario.rotation_bins);
    match object.kind {
        ObjectKind::Obstacle { height_mm, .. } => {
            for fc in &raster.cells {
                let p = Pos::new(object.pose.x + fc.dx, object.pose.y + fc.dy);
                let sc = cells.get_mut(p);
                sc.height_mm = *scenario.terrain.base_height_mm.get(p) + height_mm;
                sc.traversable = false;
                sc.level = Level::Ground;
            }
        }
        ObjectKind::Ramp { .. } => {
            // The deck clears whatever terrain lies beneath the footprint.
            let mut ref_ground: f64 = 0.0;
            for fc in &raster.cells {
                let p = Pos::new(object.pose.x + fc.dx, object.pose.y + fc.dy);
                ref_ground = ref_ground.max(*scenario.terrain.base_height_mm.get(p));
            }
            for fc in &raster.cells {
                let p = Pos::new(object.pose.x + fc.dx, object.pose.y + fc.dy);
                let sc = cells.get_mut(p);
                sc.height_mm = ref_ground + object.profile_height_mm(fc.local_j);
                sc.level = Level::Elevated;
                sc.traversable = !scenario.trace_elevated_mask.get(p);
            }
        }
    }
}

/// Analytic footprint membership: the same inequality the rasterizer
/// evaluates, so it agrees with `covered_cells` exactly.
pub fn covers(object: &ObjectInstance, p: Pos, k: u8) -> bool {
    let raster = object.raster(k);
    let dx = p.x - object.pose.x;
    let dy = p.y - object.pose.y;
    let (x0, y0, x1, y1) = raster.bbox;
    if dx < x0 || dx > x1 || dy < y0 || dy > y1 {
        return false;
    }
    crate::object::footprint_covers(object.footprint, object.pose.theta_bin, k, dx, dy)
}

/// One cell of the effective drawing surface.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceCell {
    pub height_mm: f64,
    pub traversable: bool,
    pub level: Level,
    pub electrode: Option<ElectrodeId>,
}

/// The planner's view of the world: a single drawing surface per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceMap {
    pub grid: GridSpec,
    pub cells: Grid<SurfaceCell>,
}

impl SurfaceMap {
    /// Uniform flat surface, fully traversable; test helper.
    pub fn flat(width: u32, height: u32) -> Self {
        let grid = GridSpec::new(width, height, 0.0025);
        Self {
            cells: Grid::filled(
                width,
                height,
                SurfaceCell {
                    height_mm: 0.0,
                    traversable: true,
                    level: Level::Ground,
                    electrode: None,
                },
            ),
            grid,
        }
    }

    pub fn width(&self) -> u32 {
        self.grid.width_cells
    }

    pub fn height(&self) -> u32 {
        self.grid.height_cells
    }

    #[inline]
    pub fn height_mm(&self, p: Pos) -> f64 {
        self.cells.get(p).height_mm
    }

    #[inline]
    pub fn traversable(&self, p: Pos) -> bool {
        self.grid.contains(p) && self.cells.get(p).traversable
    }

    pub fn block(&mut self, p: Pos) {
        self.cells.get_mut(p).traversable = false;
    }

    pub fn set_height(&mut self, p: Pos, mm: f64) {
        self.cells.get_mut(p).height_mm = mm;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::object::{default_obstacle, default_ramp, Footprint, ObstacleShape};

    fn test_scenario(w: u32, h: u32) -> Scenario {
        let mut s = Scenario::empty(
            GridSpec::new(w, h, 0.0025),
            TaskKind::RemoveObstacle,
            0,
            false,
        );
        s.step_budget = 4;
        s.steps_remaining = 4;
        s
    }

    fn small_obstacle(id: u32, x: i32, y: i32, theta: u8) -> ObjectInstance {
        let mut o = default_obstacle(
            ObjectId(id),
            ObstacleShape::Cuboid,
            Pose::new(x, y, theta),
            [200, 40, 40],
        );
        o.footprint = Footprint::new(2, 4);
        o
    }

    #[test]
    fn stamp_marks_footprint_occupied() {
        // A 2x4 obstacle anchored at (5,5) covers 8 cells: x in {4,5},
        // y in {3..=6}.
        let s = test_scenario(40, 40);
        let s2 = s.stamp_object(small_obstacle(0, 5, 5, 0)).unwrap();
        assert_eq!(s2.occupied_cell_count(), 8);
        assert_eq!(
            s2.object_at(Pos::new(4, 3)).map(|o| o.id),
            Some(ObjectId(0))
        );
        assert!(s2.object_at(Pos::new(6, 3)).is_none());
    }

    #[test]
    fn analytic_covers_agrees_with_raster() {
        let s = test_scenario(60, 60);
        for theta in 0..8 {
            let o = default_obstacle(
                ObjectId(9),
                ObstacleShape::TriangularPrism,
                Pose::new(30, 30, theta),
                [0; 3],
            );
            let covered: std::collections::HashSet<Pos> =
                o.covered_cells(8).into_iter().collect();
            for y in 10..50 {
                for x in 10..50 {
                    let p = Pos::new(x, y);
                    assert_eq!(covers(&o, p, s.rotation_bins), covered.contains(&p));
                }
            }
        }
    }

    #[test]
    fn stamp_out_of_bounds_rejected() {
        let s = test_scenario(40, 40);
        let err = s.stamp_object(small_obstacle(0, 0, 0, 0)).unwrap_err();
        assert_eq!(err, WorldError::OutOfBounds);
    }

    #[test]
    fn stamp_over_electrode_rejected() {
        let s = test_scenario(40, 40);
        let e = s.electrode(ElectrodeId::RobotA).cell;
        let err = s.stamp_object(small_obstacle(0, e.x, e.y, 0)).unwrap_err();
        assert!(matches!(err, WorldError::IllegalOverlap(_)));
    }

    #[test]
    fn stamp_over_object_rejected() {
        let s = test_scenario(40, 40);
        let s = s.stamp_object(small_obstacle(0, 20, 20, 0)).unwrap();
        let err = s.stamp_object(small_obstacle(1, 21, 21, 3)).unwrap_err();
        assert_eq!(err, WorldError::IllegalOverlap("object over object"));
    }

    #[test]
    fn ramp_deck_heights_over_forbidden_strip() {
        let mut s = test_scenario(30, 30);
        s.mark_forbidden(Rect::new(0, 13, 30, 4));
        let mut ramp = default_ramp(ObjectId(0), Pose::new(15, 15, 0), [90, 90, 90]);
        ramp.kind = ObjectKind::Ramp {
            deck_height_mm: 20.0,
            slope_cells: 2,
        };
        ramp.footprint = Footprint::new(6, 8);
        // Footprint rows y in 11..=18; deck rows 13..=16 cover the strip.
        let s2 = s.stamp_object(ramp).unwrap();
        let surf = s2.effective_surface();
        assert_eq!(surf.height_mm(Pos::new(15, 11)), 10.0);
        assert_eq!(surf.height_mm(Pos::new(15, 12)), 20.0);
        assert_eq!(surf.height_mm(Pos::new(15, 14)), 20.0);
        assert_eq!(surf.height_mm(Pos::new(15, 17)), 20.0);
        assert_eq!(surf.height_mm(Pos::new(15, 18)), 10.0);
        assert!(surf.traversable(Pos::new(15, 14)));
        // Strip cells outside the deck corridor stay blocked.
        assert!(!surf.traversable(Pos::new(2, 14)));
    }

    #[test]
    fn ramp_approach_may_not_rest_on_forbidden() {
        let mut s = test_scenario(30, 30);
        s.mark_forbidden(Rect::new(0, 0, 30, 30));
        let mut ramp = default_ramp(ObjectId(0), Pose::new(15, 15, 0), [90, 90, 90]);
        ramp.footprint = Footprint::new(6, 8);
        ramp.kind = ObjectKind::Ramp {
            deck_height_mm: 20.0,
            slope_cells: 2,
        };
        let err = s.stamp_object(ramp).unwrap_err();
        assert!(matches!(err, WorldError::IllegalOverlap(_)));
    }

    #[test]
    fn apply_action_moves_object_and_decrements_budget() {
        let s = test_scenario(30, 30);
        let s = s.stamp_object(small_obstacle(0, 5, 5, 0)).unwrap();
        let action = PickPlaceAction {
            pick: Pose::new(5, 5, 0),
            place: Pose::new(20, 20, 2),
        };
        let s2 = s.apply_action(&action).unwrap();
        assert_eq!(s2.steps_remaining, 3);
        assert_eq!(s2.occupied_cell_count(), 8);
        assert!(s2.object_at(Pos::new(5, 5)).is_none());
        assert_eq!(s2.object(ObjectId(0)).unwrap().pose, Pose::new(20, 20, 2));
    }

    #[test]
    fn apply_action_on_empty_cell_is_nothing_to_pick() {
        let s = test_scenario(30, 30);
        let action = PickPlaceAction {
            pick: Pose::new(5, 5, 0),
            place: Pose::new(20, 20, 0),
        };
        assert_eq!(
            s.apply_action(&action).unwrap_err(),
            WorldError::NothingToPick
        );
    }

    #[test]
    fn apply_action_budget_exhausted() {
        let mut s = test_scenario(30, 30)
            .stamp_object(small_obstacle(0, 5, 5, 0))
            .unwrap();
        s.steps_remaining = 0;
        let action = PickPlaceAction {
            pick: Pose::new(5, 5, 0),
            place: Pose::new(20, 20, 0),
        };
        assert_eq!(
            s.apply_action(&action).unwrap_err(),
            WorldError::BudgetExhausted
        );
    }

    #[test]
    fn illegal_place_leaves_original_untouched() {
        let s = test_scenario(30, 30)
            .stamp_object(small_obstacle(0, 5, 5, 0))
            .unwrap()
            .stamp_object(small_obstacle(1, 20, 20, 0))
            .unwrap();
        let action = PickPlaceAction {
            pick: Pose::new(5, 5, 0),
            place: Pose::new(20, 20, 0),
        };
        assert!(s.apply_action(&action).is_err());
        assert_eq!(s.object(ObjectId(0)).unwrap().pose, Pose::new(5, 5, 0));
        assert_eq!(s.steps_remaining, 4);
    }

    #[test]
    fn inverse_action_restores_occupancy() {
        let s = test_scenario(30, 30);
        let s = s.stamp_object(small_obstacle(0, 5, 5, 1)).unwrap();
        let signature = |s: &Scenario| -> Vec<Pos> {
            let mut v = s.objects[0].covered_cells(8);
            v.sort();
            v
        };
        let before = signature(&s);
        let fwd = PickPlaceAction {
            pick: Pose::new(5, 5, 1),
            place: Pose::new(18, 12, 5),
        };
        let s2 = s.apply_action(&fwd).unwrap();
        let back = PickPlaceAction {
            pick: Pose::new(18, 12, 5),
            place: Pose::new(5, 5, 1),
        };
        let s3 = s2.apply_action(&back).unwrap();
        assert_eq!(before, signature(&s3));
    }

    #[test]
    fn occupied_cells_covered_by_exactly_one_footprint() {
        let s = test_scenario(40, 40)
            .stamp_object(small_obstacle(0, 5, 5, 0))
            .unwrap()
            .stamp_object(small_obstacle(1, 20, 20, 3))
            .unwrap();
        let mut seen = std::collections::HashSet::new();
        for o in &s.objects {
            for p in o.covered_cells(s.rotation_bins) {
                assert!(seen.insert(p), "cell {p:?} covered twice");
            }
        }
        assert_eq!(seen.len(), s.occupied_cell_count());
    }

    #[test]
    fn effective_surface_is_pure() {
        let mut s = test_scenario(30, 30);
        s.mark_forbidden(Rect::new(10, 0, 4, 30));
        let s = s.stamp_object(small_obstacle(0, 20, 20, 1)).unwrap();
        assert_eq!(s.effective_surface(), s.effective_surface());
    }

    #[test]
    fn ground_trace_blocks_ground_but_deck_above_is_open() {
        let s = test_scenario(40, 40);
        let path = crate::planner::Path3D {
            cells: (5..35)
                .map(|x| crate::planner::PathCell {
                    x,
                    y: 20,
                    height_mm: 0.0,
                })
                .collect(),
            cost: 29.0,
        };
        let s = s.commit_trace(CircuitLabel::A, &path).unwrap();
        let surf = s.effective_surface();
        assert!(!surf.traversable(Pos::new(10, 20)));
        // A ramp whose deck spans the trace re-opens the corridor above it.
        let ramp = default_ramp(ObjectId(0), Pose::new(20, 20, 0), [90, 90, 90]);
        let s2 = s.stamp_object(ramp).unwrap();
        let surf2 = s2.effective_surface();
        assert!(surf2.traversable(Pos::new(20, 20)));
        assert_eq!(surf2.cells.get(Pos::new(20, 20)).level, Level::Elevated);
        // Nothing drawn on the ramp yet, so it can still be moved.
        let action = PickPlaceAction {
            pick: Pose::new(20, 20, 0),
            place: Pose::new(20, 20, 0),
        };
        assert!(s2.apply_action(&action).is_ok());
    }

    #[test]
    fn ramp_carrying_trace_is_pinned() {
        let s = test_scenario(40, 40);
        let ramp = default_ramp(ObjectId(0), Pose::new(20, 20, 0), [90, 90, 90]);
        let s = s.stamp_object(ramp).unwrap();
        // Draw a short trace across the deck.
        let surf = s.effective_surface();
        let cells: Vec<_> = (18..=22)
            .map(|x| crate::planner::PathCell {
                x,
                y: 20,
                height_mm: surf.height_mm(Pos::new(x, 20)),
            })
            .collect();
        let s = s
            .commit_trace(
                CircuitLabel::B,
                &crate::planner::Path3D { cells, cost: 4.0 },
            )
            .unwrap();
        let action = PickPlaceAction {
            pick: Pose::new(20, 20, 0),
            place: Pose::new(30, 30, 0),
        };
        let err = s.apply_action(&action).unwrap_err();
        assert_eq!(err, WorldError::IllegalOverlap("object carries a drawn trace"));
    }

    #[test]
    fn obstacle_may_not_be_placed_on_trace() {
        let s = test_scenario(40, 40);
        let path = crate::planner::Path3D {
            cells: vec![crate::planner::PathCell {
                x: 20,
                y: 20,
                height_mm: 0.0,
            }],
            cost: 0.0,
        };
        let s = s.commit_trace(CircuitLabel::A, &path).unwrap();
        let err = s.stamp_object(small_obstacle(0, 20, 20, 0)).unwrap_err();
        assert!(matches!(err, WorldError::IllegalOverlap(_)));
    }

    #[test]
    fn cell_view_reports_trace_and_occupancy() {
        let s = test_scenario(40, 40);
        let path = crate::planner::Path3D {
            cells: vec![crate::planner::PathCell {
                x: 30,
                y: 30,
                height_mm: 0.0,
            }],
            cost: 0.0,
        };
        let s = s.commit_trace(CircuitLabel::A, &path).unwrap();
        let s = s.stamp_object(small_obstacle(0, 10, 10, 0)).unwrap();
        let c = s.cell(Pos::new(30, 30));
        assert_eq!(c.trace_ground, Some(CircuitLabel::A));
        assert_eq!(c.trace_elevated, None);
        let c2 = s.cell(Pos::new(10, 10));
        assert_eq!(c2.occupied_by, Some(ObjectId(0)));
    }
}
