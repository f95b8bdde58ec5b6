//! Circuit path planning over the effective surface: slope-gated 8-connected
//! A* (layer 2) underneath a portal search across ramp approach feet
//! (layer 1).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{CellMask, Pos};
use crate::scenario::SurfaceMap;

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("cells are not 8-neighbors")]
    NotAdjacent,
}

/// Slope gate thresholds in mm per orthogonal cell step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeParams {
    pub min_mm: f64,
    pub max_mm: f64,
}

impl SlopeParams {
    pub fn new(min_mm: f64, max_mm: f64) -> Self {
        assert!(min_mm <= max_mm, "slope_min must not exceed slope_max");
        Self { min_mm, max_mm }
    }
}

impl Default for SlopeParams {
    fn default() -> Self {
        Self {
            min_mm: 1.0,
            max_mm: 6.0,
        }
    }
}

/// Classification of a height difference between adjacent cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlopeClass {
    /// Below the minimum: treated as the same level.
    Flat,
    /// Between the thresholds: climbable.
    Slope,
    /// Above the maximum: a cliff, impassable.
    Blocked,
}

/// Applies the min/max slope rule to a height difference.
pub fn slope_gate(from_mm: f64, to_mm: f64, slope_min_mm: f64, slope_max_mm: f64) -> SlopeClass {
    debug_assert!(slope_min_mm <= slope_max_mm);
    let dh = (to_mm - from_mm).abs();
    if dh < slope_min_mm {
        SlopeClass::Flat
    } else if dh <= slope_max_mm {
        SlopeClass::Slope
    } else {
        SlopeClass::Blocked
    }
}

/// One waypoint of a planned route.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathCell {
    pub x: i32,
    pub y: i32,
    pub height_mm: f64,
}

impl PathCell {
    pub fn pos(&self) -> Pos {
        Pos::new(self.x, self.y)
    }
}

/// A planned circuit route with its accumulated cost in cell units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Path3D {
    pub cells: Vec<PathCell>,
    pub cost: f64,
}

/// Cost of one 8-neighbor step: the 3D Euclidean length of the segment in
/// cell units. Height differences below `slope_min_mm` are costed as flat.
pub fn step_cost(
    from: (Pos, f64),
    to: (Pos, f64),
    slope_min_mm: f64,
    cell_size_mm: f64,
) -> Result<f64, PlanError> {
    let dx = (to.0.x - from.0.x).abs();
    let dy = (to.0.y - from.0.y).abs();
    if dx > 1 || dy > 1 || (dx == 0 && dy == 0) {
        return Err(PlanError::NotAdjacent);
    }
    let dh = (to.1 - from.1).abs();
    let dz = if dh < slope_min_mm { 0.0 } else { dh / cell_size_mm };
    Ok(((dx + dy) as f64 + dz * dz).sqrt())
}

/// Straight-line 3D distance in cell units; an admissible bound on the
/// remaining cost whenever height deltas are not below the flat-snap
/// threshold.
pub fn heuristic_3d(a: (Pos, f64), b: (Pos, f64), cell_size_mm: f64) -> f64 {
    let dx = (a.0.x - b.0.x) as f64;
    let dy = (a.0.y - b.0.y) as f64;
    let dz = (a.1 - b.1) / cell_size_mm;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// 2D octile distance: the flat-grid geodesic cost under 8-connectivity.
pub fn octile(a: Pos, b: Pos) -> f64 {
    let dx = (a.x - b.x).abs() as f64;
    let dy = (a.y - b.y).abs() as f64;
    dx.max(dy) + (SQRT_2 - 1.0) * dx.min(dy)
}

#[derive(Clone, Copy, Debug)]
struct OpenEntry {
    f: f64,
    h: f64,
    y: i32,
    x: i32,
    g: f64,
    idx: u32,
}

impl PartialEq for OpenEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for OpenEntry {}

impl Ord for OpenEntry {
    // BinaryHeap is a max-heap; reverse so the smallest (f, h, y, x) pops
    // first. The (y, x) component makes expansion order fully deterministic.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.h.total_cmp(&self.h))
            .then_with(|| other.y.cmp(&self.y))
            .then_with(|| other.x.cmp(&self.x))
    }
}

impl PartialOrd for OpenEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const DIRS: [(i32, i32); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
];

// Search buffers are reused across calls via epoch stamping; clearing a
// full-board float array per call would dominate short plans.
struct Scratch {
    epoch: u32,
    g: Vec<f64>,
    parent: Vec<u32>,
    g_epoch: Vec<u32>,
    closed_epoch: Vec<u32>,
}

impl Scratch {
    fn begin(&mut self, n: usize) {
        if self.g.len() < n {
            self.g.resize(n, f64::INFINITY);
            self.parent.resize(n, u32::MAX);
            self.g_epoch.resize(n, 0);
            self.closed_epoch.resize(n, 0);
        }
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.g_epoch.fill(0);
            self.closed_epoch.fill(0);
            self.epoch = 1;
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Scratch> = const {
        std::cell::RefCell::new(Scratch {
            epoch: 0,
            g: Vec::new(),
            parent: Vec::new(),
            g_epoch: Vec::new(),
            closed_epoch: Vec::new(),
        })
    };
}

/// Minimum-cost slope-gated path over the surface, or `None` when
/// disconnected. 8-connectivity without corner cutting: a diagonal move is
/// legal only if both flanking orthogonal cells are passable. Diagonal steps
/// admit height differences up to `slope_max * sqrt(2)` (same gradient over
/// a longer run).
pub fn grid_astar(
    surface: &SurfaceMap,
    start: Pos,
    goal: Pos,
    slope: SlopeParams,
) -> Option<Path3D> {
    astar_masked(surface, start, goal, slope, None, None)
}

pub(crate) fn astar_masked(
    surface: &SurfaceMap,
    start: Pos,
    goal: Pos,
    slope: SlopeParams,
    blocked: Option<&CellMask>,
    allowed: Option<&CellMask>,
) -> Option<Path3D> {
    astar_multi(surface, start, &[goal], slope, blocked, allowed)
        .into_iter()
        .next()
        .flatten()
}

/// One A* sweep from `start` resolving the optimal path to every target.
/// The heuristic is the octile distance to the nearest unresolved target,
/// which stays consistent, so each target's path is optimal when it pops.
/// Flattened passability of every cell under the given masks; the search
/// kernels test neighbors against this instead of re-deriving per probe.
fn passability(
    surface: &SurfaceMap,
    blocked: Option<&CellMask>,
    allowed: Option<&CellMask>,
) -> Vec<bool> {
    let w = surface.width() as i32;
    let h = surface.height() as i32;
    let cells = surface.cells.raw();
    let mut pass = vec![false; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            if !cells[i].traversable {
                continue;
            }
            let p = Pos::new(x, y);
            if let Some(m) = blocked {
                if m.get(p) {
                    continue;
                }
            }
            if let Some(m) = allowed {
                if !m.get(p) {
                    continue;
                }
            }
            pass[i] = true;
        }
    }
    pass
}

pub(crate) fn astar_multi(
    surface: &SurfaceMap,
    start: Pos,
    targets: &[Pos],
    slope: SlopeParams,
    blocked: Option<&CellMask>,
    allowed: Option<&CellMask>,
) -> Vec<Option<Path3D>> {
    let pass = passability(surface, blocked, allowed);
    astar_over(surface, start, targets, slope, &pass, None)
}

/// The A* kernel over a prebuilt passability buffer.
///
/// `field` optionally supplies relaxed shortest-path distances from some
/// anchor on an objects-free version of the board; `|field[n] - field[t]|`
/// is then an admissible, consistent bound that steers the search around
/// walls far better than the octile metric alone.
fn astar_over(
    surface: &SurfaceMap,
    start: Pos,
    targets: &[Pos],
    slope: SlopeParams,
    pass: &[bool],
    field: Option<&[f64]>,
) -> Vec<Option<Path3D>> {
    let w = surface.width() as i32;
    let h = surface.height() as i32;
    let n = (w * h) as usize;
    let cells = surface.cells.raw();
    let cell_mm = surface.grid.cell_size_mm();

    let passable = |x: i32, y: i32| -> bool {
        x >= 0 && y >= 0 && x < w && y < h && pass[(y * w + x) as usize]
    };

    let mut results: Vec<Option<Path3D>> = vec![None; targets.len()];
    if !passable(start.x, start.y) {
        return results;
    }
    // Pending targets; unreachable or repeated ones resolve as the search
    // settles them or exhausts the component.
    let mut pending: Vec<(usize, Pos, u32, f64)> = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        if *t == start {
            results[i] = Some(Path3D {
                cells: vec![PathCell {
                    x: start.x,
                    y: start.y,
                    height_mm: surface.height_mm(start),
                }],
                cost: 0.0,
            });
        } else if passable(t.x, t.y) {
            let tf = field
                .map(|f| f[(t.y * w + t.x) as usize])
                .filter(|v| v.is_finite())
                .unwrap_or(f64::NAN);
            pending.push((i, *t, (t.y * w + t.x) as u32, tf));
        }
    }
    if pending.is_empty() {
        return results;
    }
    let heur = |p: Pos, pidx: usize, pending: &[(usize, Pos, u32, f64)]| -> f64 {
        let mut best = f64::INFINITY;
        for (_, t, _, tf) in pending {
            let mut h = octile(p, *t);
            if let Some(f) = field {
                let fp = f[pidx];
                if fp.is_finite() && tf.is_finite() {
                    h = h.max((fp - tf).abs());
                }
            }
            if h < best {
                best = h;
            }
        }
        best
    };

    SCRATCH.with(|scratch| {
        let mut s = scratch.borrow_mut();
        s.begin(n);
        let epoch = s.epoch;
        let Scratch {
            g,
            parent,
            g_epoch,
            closed_epoch,
            ..
        } = &mut *s;

        let mut open = BinaryHeap::with_capacity(1024);
        let start_idx = (start.y * w + start.x) as u32;
        g[start_idx as usize] = 0.0;
        g_epoch[start_idx as usize] = epoch;
        let h0 = heur(start, start_idx as usize, &pending);
        open.push(OpenEntry {
            f: h0,
            h: h0,
            y: start.y,
            x: start.x,
            g: 0.0,
            idx: start_idx,
        });

        while let Some(entry) = open.pop() {
            let idx = entry.idx as usize;
            if closed_epoch[idx] == epoch {
                continue;
            }
            if entry.g > g[idx] {
                continue; // stale
            }
            closed_epoch[idx] = epoch;
            if let Some(pos) = pending.iter().position(|(_, _, ti, _)| *ti == entry.idx) {
                let (ri, _, _, _) = pending.swap_remove(pos);
                results[ri] = Some(reconstruct(
                    surface, parent, g_epoch, epoch, start_idx, entry.idx, g[idx],
                ));
                if pending.is_empty() {
                    return;
                }
            }
            let (cx, cy) = (entry.x, entry.y);
            let from_h = cells[idx].height_mm;
            for (dx, dy) in DIRS {
                let (nx, ny) = (cx + dx, cy + dy);
                if !passable(nx, ny) {
                    continue;
                }
                let diagonal = dx != 0 && dy != 0;
                if diagonal && (!passable(cx + dx, cy) || !passable(cx, cy + dy)) {
                    continue; // corner cut
                }
                let nidx = (ny * w + nx) as usize;
                if closed_epoch[nidx] == epoch {
                    continue;
                }
                let to_h = cells[nidx].height_mm;
                let dh = (to_h - from_h).abs();
                let factor = if diagonal { SQRT_2 } else { 1.0 };
                let dz = if dh < slope.min_mm {
                    0.0
                } else if dh <= slope.max_mm * factor {
                    dh / cell_mm
                } else {
                    continue; // cliff
                };
                let base = if diagonal { 2.0 } else { 1.0 };
                let cost = (base + dz * dz).sqrt();
                let ng = entry.g + cost;
                if g_epoch[nidx] != epoch || ng < g[nidx] {
                    g[nidx] = ng;
                    g_epoch[nidx] = epoch;
                    parent[nidx] = entry.idx;
                    let np = Pos::new(nx, ny);
                    let nh = heur(np, nidx, &pending);
                    open.push(OpenEntry {
                        f: ng + nh,
                        h: nh,
                        y: ny,
                        x: nx,
                        g: ng,
                        idx: nidx as u32,
                    });
                }
            }
        }
    });
    results
}

/// Shortest-path distances from `anchor` to every cell of the surface
/// (Dijkstra, no heuristic). Unreachable cells hold infinity.
pub fn relaxed_distance_field(surface: &SurfaceMap, anchor: Pos, slope: SlopeParams) -> Vec<f64> {
    let w = surface.width() as i32;
    let h = surface.height() as i32;
    let n = (w * h) as usize;
    let cells = surface.cells.raw();
    let cell_mm = surface.grid.cell_size_mm();
    let pass: Vec<bool> = cells.iter().map(|c| c.traversable).collect();
    let passable =
        |x: i32, y: i32| -> bool { x >= 0 && y >= 0 && x < w && y < h && pass[(y * w + x) as usize] };

    let mut dist = vec![f64::INFINITY; n];
    if !passable(anchor.x, anchor.y) {
        return dist;
    }
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::with_capacity(4096);
    let start_idx = (anchor.y * w + anchor.x) as u32;
    dist[start_idx as usize] = 0.0;
    open.push(OpenEntry {
        f: 0.0,
        h: 0.0,
        y: anchor.y,
        x: anchor.x,
        g: 0.0,
        idx: start_idx,
    });
    while let Some(entry) = open.pop() {
        let idx = entry.idx as usize;
        if closed[idx] {
            continue;
        }
        if entry.g > dist[idx] {
            continue;
        }
        closed[idx] = true;
        let (cx, cy) = (entry.x, entry.y);
        let from_h = cells[idx].height_mm;
        for (dx, dy) in DIRS {
            let (nx, ny) = (cx + dx, cy + dy);
            if !passable(nx, ny) {
                continue;
            }
            let diagonal = dx != 0 && dy != 0;
            if diagonal && (!passable(cx + dx, cy) || !passable(cx, cy + dy)) {
                continue;
            }
            let nidx = (ny * w + nx) as usize;
            if closed[nidx] {
                continue;
            }
            let to_h = cells[nidx].height_mm;
            let dh = (to_h - from_h).abs();
            let factor = if diagonal { SQRT_2 } else { 1.0 };
            let dz = if dh < slope.min_mm {
                0.0
            } else if dh <= slope.max_mm * factor {
                dh / cell_mm
            } else {
                continue;
            };
            let base = if diagonal { 2.0 } else { 1.0 };
            let cost = (base + dz * dz).sqrt();
            let ng = entry.g + cost;
            if ng < dist[nidx] {
                dist[nidx] = ng;
                open.push(OpenEntry {
                    f: ng,
                    h: 0.0,
                    y: ny,
                    x: nx,
                    g: ng,
                    idx: nidx as u32,
                });
            }
        }
    }
    dist
}

fn reconstruct(
    surface: &SurfaceMap,
    parent: &[u32],
    g_epoch: &[u32],
    epoch: u32,
    start_idx: u32,
    goal_idx: u32,
    cost: f64,
) -> Path3D {
    let w = surface.width() as i32;
    let mut cells = Vec::new();
    let mut cur = goal_idx;
    loop {
        debug_assert_eq!(g_epoch[cur as usize], epoch);
        let x = cur as i32 % w;
        let y = cur as i32 / w;
        cells.push(PathCell {
            x,
            y,
            height_mm: surface.height_mm(Pos::new(x, y)),
        });
        if cur == start_idx {
            break;
        }
        cur = parent[cur as usize];
    }
    cells.reverse();
    Path3D { cells, cost }
}

/// Connected components of the surface under the same edge legality the
/// planner uses (slope gates and corner rules). Cells in `blocked` are
/// excluded. Returns one component id per cell (0 = unreachable/blocked).
pub fn ground_components(
    surface: &SurfaceMap,
    slope: SlopeParams,
    blocked: Option<&CellMask>,
) -> Vec<u32> {
    let pass = passability(surface, blocked, None);
    ground_components_over(surface, slope, &pass)
}

pub(crate) fn ground_components_over(
    surface: &SurfaceMap,
    slope: SlopeParams,
    pass: &[bool],
) -> Vec<u32> {
    let w = surface.width() as i32;
    let h = surface.height() as i32;
    let n = (w * h) as usize;
    let cells = surface.cells.raw();
    let passable = |x: i32, y: i32| -> bool {
        x >= 0 && y >= 0 && x < w && y < h && pass[(y * w + x) as usize]
    };
    let mut comp = vec![0u32; n];
    let mut next = 0u32;
    let mut queue = std::collections::VecDeque::new();
    for start in 0..n {
        if comp[start] != 0 {
            continue;
        }
        let (sx, sy) = (start as i32 % w, start as i32 / w);
        if !passable(sx, sy) {
            continue;
        }
        next += 1;
        comp[start] = next;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            let (cx, cy) = (idx as i32 % w, idx as i32 / w);
            let from_h = cells[idx].height_mm;
            for (dx, dy) in DIRS {
                let (nx, ny) = (cx + dx, cy + dy);
                if !passable(nx, ny) {
                    continue;
                }
                let diagonal = dx != 0 && dy != 0;
                if diagonal && (!passable(cx + dx, cy) || !passable(cx, cy + dy)) {
                    continue;
                }
                let nidx = (ny * w + nx) as usize;
                if comp[nidx] != 0 {
                    continue;
                }
                let dh = (cells[nidx].height_mm - from_h).abs();
                let factor = if diagonal { SQRT_2 } else { 1.0 };
                if dh >= slope.min_mm && dh > slope.max_mm * factor {
                    continue;
                }
                comp[nidx] = next;
                queue.push_back(nidx);
            }
        }
    }
    comp
}

/// A ramp as seen by the portal layer: its covered cells and the two
/// approach-foot cells circuits use to enter and leave the deck.
#[derive(Clone, Debug)]
pub struct RampPortal {
    pub cells: Vec<Pos>,
    pub feet: [Pos; 2],
}

/// The layer-1 search graph: start, goal and every ramp approach foot,
/// with 3D straight-line lower bounds on the candidate edges.
#[derive(Clone, Debug)]
pub struct PortalGraph {
    pub nodes: Vec<Pos>,
    /// (node index, node index, lower-bound distance); same-ramp foot pairs
    /// resolve across the deck, all other pairs resolve over open ground.
    pub edges: Vec<(usize, usize, f64)>,
}

/// Indices: 0 = start, 1 = goal, then feet in ramp order (two per ramp).
pub fn build_portal_graph(
    surface: &SurfaceMap,
    start: Pos,
    goal: Pos,
    ramps: &[RampPortal],
) -> PortalGraph {
    let cell_mm = surface.grid.cell_size_mm();
    let mut nodes = vec![start, goal];
    for ramp in ramps {
        nodes.extend_from_slice(&ramp.feet);
    }
    let height_of = |p: Pos| -> f64 {
        if surface.grid.contains(p) {
            surface.height_mm(p)
        } else {
            0.0
        }
    };
    let mut edges = Vec::new();
    for i in 0..nodes.len() {
        for j in i + 1..nodes.len() {
            let lb = heuristic_3d(
                (nodes[i], height_of(nodes[i])),
                (nodes[j], height_of(nodes[j])),
                cell_mm,
            );
            edges.push((i, j, lb));
        }
    }
    PortalGraph { nodes, edges }
}

/// Connectivity knowledge handed to the portal planner. A precomputed or
/// assumed-connected hint may merge components that are really separate
/// (costing only search time); it must never split cells that are
/// connected.
pub enum Connectivity<'a> {
    /// Run the component pre-pass here.
    Analyze,
    /// Skip the pre-pass; appropriate when the caller knows nothing severs
    /// the board (no committed traces, zones bridged).
    AssumeConnected,
    /// Components from [`ground_components`] over the same ground mask (or
    /// a coarser merge of it).
    Precomputed(&'a [u32]),
}

/// Double-layer circuit planning.
///
/// Layer 1 searches over start, goal and ramp approach feet; layer 2
/// resolves each leg with grid A*. Ground legs may not touch any ramp cell,
/// so decks are entered and left only via their feet; the returned route is
/// optimal within that decomposition and its cost is the sum of the
/// resolved segment costs.
pub fn plan_circuit(
    surface: &SurfaceMap,
    start: Pos,
    goal: Pos,
    slope: SlopeParams,
    ramps: &[RampPortal],
    blocked_cells: &[Pos],
) -> Option<Path3D> {
    plan_circuit_hinted(
        surface,
        start,
        goal,
        slope,
        ramps,
        blocked_cells,
        Connectivity::Analyze,
        None,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn plan_circuit_hinted(
    surface: &SurfaceMap,
    start: Pos,
    goal: Pos,
    slope: SlopeParams,
    ramps: &[RampPortal],
    blocked_cells: &[Pos],
    connectivity: Connectivity<'_>,
    field: Option<&[f64]>,
) -> Option<Path3D> {
    if ramps.is_empty() {
        let mut pass: Vec<bool> = surface.cells.raw().iter().map(|c| c.traversable).collect();
        let wu = surface.width() as usize;
        for &p in blocked_cells {
            if surface.grid.contains(p) {
                pass[p.y as usize * wu + p.x as usize] = false;
            }
        }
        return astar_over(surface, start, &[goal], slope, &pass, field)
            .into_iter()
            .next()
            .flatten();
    }

    // One shared ground passability buffer: the surface minus every ramp
    // cell (decks are entered only via their feet) and the extra blocked
    // cells.
    let n_cells = surface.grid.cell_count();
    let wu = surface.width() as usize;
    let mut pass_ground: Vec<bool> = surface
        .cells
        .raw()
        .iter()
        .map(|c| c.traversable)
        .collect();
    let clear = |pass: &mut Vec<bool>, p: Pos| {
        if p.x >= 0 && p.y >= 0 && (p.x as u32) < surface.width() && (p.y as u32) < surface.height()
        {
            pass[p.y as usize * wu + p.x as usize] = false;
        }
    };
    for ramp in ramps {
        for &p in &ramp.cells {
            clear(&mut pass_ground, p);
        }
    }
    for &p in blocked_cells {
        clear(&mut pass_ground, p);
    }

    let graph = build_portal_graph(surface, start, goal, ramps);
    let n = graph.nodes.len();
    let feet: Vec<Pos> = graph.nodes[2..].to_vec();

    // Connectivity pre-pass: legs between different components can never
    // resolve, and pruning them keeps the A* sweeps inside their bands
    // instead of flooding a component per unreachable target.
    let computed;
    let comp: &[u32] = match connectivity {
        Connectivity::Analyze => {
            computed = ground_components_over(surface, slope, &pass_ground);
            &computed
        }
        Connectivity::AssumeConnected => &[],
        Connectivity::Precomputed(c) => c,
    };
    let w = surface.width() as i32;
    let comp_of = |p: Pos| -> u32 {
        if comp.is_empty() {
            return 1; // assume one component
        }
        if p.x < 0 || p.y < 0 || p.x >= w || p.y as u32 >= surface.height() {
            0
        } else {
            comp[(p.y * w + p.x) as usize]
        }
    };
    let comp_start = comp_of(start);
    let comp_goal = comp_of(goal);
    if comp_start == 0 || comp_goal == 0 {
        return None;
    }

    // Phase 1: the direct ground route alone; with components in hand a
    // severed board costs nothing here.
    let direct = if comp_start == comp_goal {
        astar_over(surface, start, &[goal], slope, &pass_ground, field)
            .into_iter()
            .next()
            .flatten()
    } else {
        None
    };

    // Phase 2: if no ramp's straight-line bound can beat the direct route,
    // no portal appears on the optimum and the feet never get resolved.
    if let Some(ref d) = direct {
        let beatable = (0..ramps.len()).any(|r| {
            let (fa, fb) = (2 + 2 * r, 3 + 2 * r);
            let lb = (edge_lb(&graph, 0, fa) + edge_lb(&graph, fa, fb) + edge_lb(&graph, fb, 1))
                .min(edge_lb(&graph, 0, fb) + edge_lb(&graph, fb, fa) + edge_lb(&graph, fa, 1));
            lb < d.cost - 1e-12
        });
        if !beatable {
            return direct;
        }
    }

    // Phase 3: resolve the portal legs, filtered by component.
    let mut resolved: Vec<Vec<Option<Path3D>>> = vec![vec![None; n]; n];
    resolved[0][1] = direct;
    let start_targets: Vec<Pos> = feet
        .iter()
        .copied()
        .filter(|f| comp_of(*f) == comp_start)
        .collect();
    let from_start = astar_over(surface, start, &start_targets, slope, &pass_ground, field);
    {
        let mut si = 0;
        for (fi, &f) in feet.iter().enumerate() {
            if comp_of(f) == comp_start {
                resolved[0][2 + fi] = from_start[si].clone();
                si += 1;
            }
        }
    }
    // Ground legs into the goal, one sweep from the goal side (costs are
    // symmetric; the found path is reversed).
    let goal_targets: Vec<Pos> = feet
        .iter()
        .copied()
        .filter(|f| comp_of(*f) == comp_goal)
        .collect();
    let from_goal = astar_over(surface, goal, &goal_targets, slope, &pass_ground, field);
    {
        let mut gi = 0;
        for (fi, &f) in feet.iter().enumerate() {
            if comp_of(f) == comp_goal {
                resolved[2 + fi][1] = from_goal[gi].as_ref().map(reverse_path);
                gi += 1;
            }
        }
    }
    // Crossing legs over each deck, searched inside a sparse buffer that
    // admits only the ramp's cells and its feet.
    let mut pass_cross = vec![false; n_cells];
    for (r, ramp) in ramps.iter().enumerate() {
        let (fa, fb) = (2 + 2 * r, 3 + 2 * r);
        let mut touched = Vec::with_capacity(ramp.cells.len() + 2);
        for &p in ramp.cells.iter().chain(ramp.feet.iter()) {
            if surface.grid.contains(p)
                && surface.cells.get(p).traversable
                && !blocked_cells.contains(&p)
            {
                pass_cross[p.y as usize * wu + p.x as usize] = true;
                touched.push(p);
            }
        }
        if !touched.is_empty() {
            let seg = astar_over(
                surface,
                graph.nodes[fa],
                &[graph.nodes[fb]],
                slope,
                &pass_cross,
                None,
            )
            .into_iter()
            .next()
            .flatten();
            resolved[fb][fa] = seg.as_ref().map(reverse_path);
            resolved[fa][fb] = seg;
        }
        for p in touched {
            pass_cross[p.y as usize * wu + p.x as usize] = false;
        }
    }
    // Foot-to-foot ground legs between different ramps (multi-ramp routes).
    if ramps.len() > 1 {
        for (fi, &foot) in feet.iter().enumerate() {
            let pairs: Vec<(usize, Pos)> = feet
                .iter()
                .enumerate()
                .filter(|(fj, f)| *fj / 2 != fi / 2 && comp_of(**f) == comp_of(foot))
                .map(|(fj, f)| (fj, *f))
                .collect();
            if pairs.is_empty() || comp_of(foot) == 0 {
                continue;
            }
            let targets: Vec<Pos> = pairs.iter().map(|(_, p)| *p).collect();
            let legs = astar_over(surface, foot, &targets, slope, &pass_ground, field);
            for ((fj, _), leg) in pairs.into_iter().zip(legs) {
                resolved[2 + fi][2 + fj] = leg;
            }
        }
    }

    // Layer-1 Dijkstra over the resolved directed edges (the graph is tiny).
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut done = vec![false; n];
    dist[0] = 0.0;
    loop {
        let mut best = usize::MAX;
        for i in 0..n {
            if !done[i] && dist[i].is_finite() && (best == usize::MAX || dist[i] < dist[best]) {
                best = i;
            }
        }
        if best == usize::MAX || best == 1 {
            break;
        }
        done[best] = true;
        for j in 0..n {
            if j == best || done[j] {
                continue;
            }
            if let Some(ref seg) = resolved[best][j] {
                let nd = dist[best] + seg.cost;
                if nd < dist[j] {
                    dist[j] = nd;
                    prev[j] = best;
                }
            }
        }
    }
    if !dist[1].is_finite() {
        return None;
    }

    // Concatenate the grid segments along the layer-1 route.
    let mut order = vec![1usize];
    while *order.last().unwrap() != 0 {
        order.push(prev[*order.last().unwrap()]);
    }
    order.reverse();
    let mut cells: Vec<PathCell> = Vec::new();
    let mut cost = 0.0;
    for pair in order.windows(2) {
        let seg = resolved[pair[0]][pair[1]].as_ref().unwrap();
        cost += seg.cost;
        if cells.is_empty() {
            cells = seg.cells.clone();
        } else {
            cells.extend_from_slice(&seg.cells[1..]);
        }
    }
    Some(Path3D { cells, cost })
}

fn reverse_path(path: &Path3D) -> Path3D {
    let mut cells = path.cells.clone();
    cells.reverse();
    Path3D {
        cells,
        cost: path.cost,
    }
}

fn edge_lb(graph: &PortalGraph, a: usize, b: usize) -> f64 {
    let (lo, hi) = (a.min(b), a.max(b));
    graph
        .edges
        .iter()
        .find(|(i, j, _)| *i == lo && *j == hi)
        .map(|(_, _, lb)| *lb)
        .unwrap_or(f64::INFINITY)
}

/// Checks every structural invariant of a returned path against the surface
/// it was planned on; used by tests and the acceptance suite.
pub fn validate_path(
    surface: &SurfaceMap,
    slope: SlopeParams,
    path: &Path3D,
) -> Result<(), String> {
    if path.cells.is_empty() {
        return Err("empty path".into());
    }
    let cell_mm = surface.grid.cell_size_mm();
    let mut sum = 0.0;
    for (i, pc) in path.cells.iter().enumerate() {
        let p = pc.pos();
        if !surface.traversable(p) {
            return Err(format!("cell {p:?} not traversable"));
        }
        if (surface.height_mm(p) - pc.height_mm).abs() > 1e-12 {
            return Err(format!("cell {p:?} height mismatch"));
        }
        if i == 0 {
            continue;
        }
        let prev = &path.cells[i - 1];
        let dx = (pc.x - prev.x).abs();
        let dy = (pc.y - prev.y).abs();
        if dx > 1 || dy > 1 || (dx == 0 && dy == 0) {
            return Err(format!("cells {i} and {} not adjacent", i - 1));
        }
        let factor = if dx == 1 && dy == 1 { SQRT_2 } else { 1.0 };
        let dh = (pc.height_mm - prev.height_mm).abs();
        if dh > slope.max_mm * factor + 1e-12 {
            return Err(format!("slope violation at step {i}"));
        }
        sum += step_cost(
            (prev.pos(), prev.height_mm),
            (pc.pos(), pc.height_mm),
            slope.min_mm,
            cell_mm,
        )
        .map_err(|e| e.to_string())?;
    }
    if (sum - path.cost).abs() > 1e-9 {
        return Err(format!("cost mismatch: sum {sum} vs {}", path.cost));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_gate_classes() {
        assert_eq!(slope_gate(0.0, 0.0, 1.0, 6.0), SlopeClass::Flat);
        assert_eq!(slope_gate(0.0, 5.0, 1.0, 6.0), SlopeClass::Slope);
        assert_eq!(slope_gate(0.0, 20.0, 1.0, 6.0), SlopeClass::Blocked);
        assert_eq!(slope_gate(20.0, 0.0, 1.0, 6.0), SlopeClass::Blocked);
        assert_eq!(slope_gate(0.0, 6.0, 1.0, 6.0), SlopeClass::Slope);
    }

    #[test]
    fn step_cost_examples() {
        let a = (Pos::new(0, 0), 0.0);
        let orth = (Pos::new(1, 0), 0.0);
        let diag = (Pos::new(1, 1), 0.0);
        assert_eq!(step_cost(a, orth, 0.0, 2.5).unwrap(), 1.0);
        assert!((step_cost(a, diag, 0.0, 2.5).unwrap() - SQRT_2).abs() < 1e-12);
        // Climbing one cell unit on an orthogonal step.
        let up = (Pos::new(1, 0), 2.5);
        assert!((step_cost(a, up, 0.0, 2.5).unwrap() - SQRT_2).abs() < 1e-12);
        // Sub-threshold climbs cost as flat.
        let small = (Pos::new(1, 0), 0.5);
        assert_eq!(step_cost(a, small, 1.0, 2.5).unwrap(), 1.0);
        assert_eq!(
            step_cost(a, (Pos::new(3, 0), 0.0), 0.0, 2.5).unwrap_err(),
            PlanError::NotAdjacent
        );
    }

    #[test]
    fn heuristic_examples() {
        let cell = 2.5;
        assert_eq!(
            heuristic_3d((Pos::new(0, 0), 0.0), (Pos::new(0, 0), 0.0), cell),
            0.0
        );
        assert_eq!(
            heuristic_3d((Pos::new(0, 0), 0.0), (Pos::new(3, 4), 0.0), cell),
            5.0
        );
        assert_eq!(
            heuristic_3d((Pos::new(0, 0), 0.0), (Pos::new(0, 0), 2.5), cell),
            1.0
        );
    }

    #[test]
    fn astar_straight_and_diagonal_on_flat_grid() {
        let s = SurfaceMap::flat(10, 10);
        let p = grid_astar(&s, Pos::new(0, 0), Pos::new(0, 9), SlopeParams::default()).unwrap();
        assert!((p.cost - 9.0).abs() < 1e-12);
        assert_eq!(p.cells.len(), 10);
        let d = grid_astar(&s, Pos::new(0, 0), Pos::new(9, 9), SlopeParams::default()).unwrap();
        assert!((d.cost - 9.0 * SQRT_2).abs() < 1e-9);
        validate_path(&s, SlopeParams::default(), &d).unwrap();
    }

    #[test]
    fn astar_routes_around_wall_with_gap() {
        let mut s = SurfaceMap::flat(20, 20);
        for y in 0..19 {
            s.block(Pos::new(10, y));
        }
        let p = grid_astar(&s, Pos::new(0, 0), Pos::new(19, 0), SlopeParams::default()).unwrap();
        validate_path(&s, SlopeParams::default(), &p).unwrap();
        assert!(p.cost > 19.0);
        // Fully sealed: no path.
        s.block(Pos::new(10, 19));
        assert!(grid_astar(&s, Pos::new(0, 0), Pos::new(19, 0), SlopeParams::default()).is_none());
    }

    #[test]
    fn no_corner_cutting() {
        let mut s = SurfaceMap::flat(3, 3);
        s.block(Pos::new(1, 0));
        s.block(Pos::new(0, 1));
        // The diagonal from (0,0) to (1,1) would squeeze between two blocks.
        assert!(grid_astar(&s, Pos::new(0, 0), Pos::new(2, 2), SlopeParams::default()).is_none());
    }

    #[test]
    fn cliff_blocks_but_gentle_slope_passes() {
        let mut s = SurfaceMap::flat(5, 2);
        s.set_height(Pos::new(2, 0), 20.0);
        s.set_height(Pos::new(2, 1), 20.0);
        assert!(grid_astar(&s, Pos::new(0, 0), Pos::new(4, 0), SlopeParams::default()).is_none());
        let mut s2 = SurfaceMap::flat(5, 2);
        for (x, h) in [(1, 2.5), (2, 5.0), (3, 2.5)] {
            s2.set_height(Pos::new(x, 0), h);
            s2.set_height(Pos::new(x, 1), h);
        }
        let p = grid_astar(&s2, Pos::new(0, 0), Pos::new(4, 0), SlopeParams::default()).unwrap();
        validate_path(&s2, SlopeParams::default(), &p).unwrap();
        assert!(p.cost > 4.0);
    }

    #[test]
    fn determinism_identical_paths() {
        let mut s = SurfaceMap::flat(30, 30);
        for i in 0..30 {
            s.block(Pos::new((i * 7) % 30, (i * 11) % 30));
        }
        let a = grid_astar(&s, Pos::new(0, 0), Pos::new(29, 17), SlopeParams::default());
        let b = grid_astar(&s, Pos::new(0, 0), Pos::new(29, 17), SlopeParams::default());
        assert_eq!(a, b);
    }

    #[test]
    fn portal_graph_has_two_feet_per_ramp() {
        let s = SurfaceMap::flat(40, 40);
        let ramps = vec![RampPortal {
            cells: vec![Pos::new(20, 20)],
            feet: [Pos::new(20, 18), Pos::new(20, 22)],
        }];
        let g = build_portal_graph(&s, Pos::new(0, 0), Pos::new(39, 39), &ramps);
        assert_eq!(g.nodes.len(), 4);
        assert_eq!(g.edges.len(), 6);
    }

    #[test]
    fn plan_circuit_without_ramps_equals_grid_astar() {
        let mut s = SurfaceMap::flat(25, 25);
        for y in 5..20 {
            s.block(Pos::new(12, y));
        }
        let a = grid_astar(&s, Pos::new(2, 12), Pos::new(22, 12), SlopeParams::default()).unwrap();
        let b = plan_circuit(
            &s,
            Pos::new(2, 12),
            Pos::new(22, 12),
            SlopeParams::default(),
            &[],
            &[],
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn octile_matches_examples() {
        assert_eq!(octile(Pos::new(0, 0), Pos::new(10, 0)), 10.0);
        assert!((octile(Pos::new(0, 0), Pos::new(3, 3)) - 3.0 * SQRT_2).abs() < 1e-12);
        let d = octile(Pos::new(0, 0), Pos::new(311, 40));
        assert!((d - (311.0 + 40.0 * (SQRT_2 - 1.0))).abs() < 1e-9);
    }
}
