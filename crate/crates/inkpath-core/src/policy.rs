//! Action selection: discretized candidate enumeration, the planner-scored
//! oracle policy that generates demonstrations, and evaluation harnesses.
//!
//! The oracle scores a candidate action by hypothetically applying it,
//! completing the remaining budget with a deterministic scripted policy
//! (park offenders, bridge zones, bridge the committed trace for the second
//! circuit), finishing the episode and reading the total reward. The
//! returned action is the argmax over all enumerated candidates with
//! lexicographic tie-breaking.
//!
//! Scoring exploits two exact shortcuts so full-board argmax stays cheap:
//! placements that touch nothing reward-relevant share the value of parking
//! the same object (verified against the completed rollout's traces), and
//! non-bridging placements inside the relevant region can never beat
//! parking, so they are bounded and only evaluated when the bound could win.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Mutex;

use thiserror::Error;

use crate::grid::{CellMask, Pos};
use crate::object::{ObjectId, ObjectInstance, Pose};
use crate::reward::{passes_filter, RewardBreakdown, RewardParams};
use crate::scenario::{CircuitLabel, PickPlaceAction, Scenario};
use crate::task::{
    bridge_trace, bridge_zone, forbidden_zone_rects, generate_with, Episode, EpisodeResult,
    GenError, GenOptions, Phase, TaskKind,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("no legal action available")]
    NoLegalAction,
}

/// Discretization of the candidate pick/place space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActionGrid {
    /// Cell step between candidate positions.
    pub stride: u32,
    pub rotation_bins: u8,
}

impl Default for ActionGrid {
    fn default() -> Self {
        Self {
            stride: 8,
            rotation_bins: 8,
        }
    }
}

impl ActionGrid {
    pub fn with_stride(stride: u32) -> Self {
        Self {
            stride,
            ..Self::default()
        }
    }
}

/// Placement legality against precomputed masks; mirrors
/// `Scenario::check_stamp` with the moving object excluded.
struct PlacementChecker {
    w: i32,
    h: i32,
    electrode_or_object: CellMask,
    any_trace: CellMask,
    elevated_trace: CellMask,
    approach_block: CellMask,
}

impl PlacementChecker {
    fn new(scenario: &Scenario, moving: ObjectId) -> Self {
        let (w, h) = (scenario.grid.width_cells, scenario.grid.height_cells);
        let mut electrode_or_object = CellMask::empty(w, h);
        for e in &scenario.electrodes {
            electrode_or_object.set(e.cell);
        }
        for o in &scenario.objects {
            if o.id == moving {
                continue;
            }
            for p in o.covered_cells(scenario.rotation_bins) {
                electrode_or_object.set(p);
            }
        }
        let mut any_trace = CellMask::empty(w, h);
        let mut elevated_trace = CellMask::empty(w, h);
        let mut approach_block = CellMask::empty(w, h);
        for y in 0..h as i32 {
            for x in 0..w as i32 {
                let p = Pos::new(x, y);
                let ground = scenario.trace_ground_at(p);
                let elevated = scenario.trace_elevated_at(p);
                if ground || elevated {
                    any_trace.set(p);
                }
                if elevated {
                    elevated_trace.set(p);
                }
                if ground || *scenario.terrain.forbidden.get(p) {
                    approach_block.set(p);
                }
            }
        }
        Self {
            w: w as i32,
            h: h as i32,
            electrode_or_object,
            any_trace,
            elevated_trace,
            approach_block,
        }
    }

    fn legal(&self, object: &ObjectInstance, k: u8) -> bool {
        let raster = object.raster(k);
        let (x0, y0, x1, y1) = raster.bbox;
        let (px, py) = (object.pose.x, object.pose.y);
        if px + x0 < 0 || py + y0 < 0 || px + x1 >= self.w || py + y1 >= self.h {
            return false;
        }
        let is_ramp = object.kind.is_ramp();
        for fc in &raster.cells {
            let p = Pos::new(px + fc.dx, py + fc.dy);
            if self.electrode_or_object.get(p) {
                return false;
            }
            if is_ramp {
                if self.elevated_trace.get(p) {
                    return false;
                }
                if !object.is_deck_cell(fc.local_j) && self.approach_block.get(p) {
                    return false;
                }
            } else if self.any_trace.get(p) {
                return false;
            }
        }
        true
    }
}

/// The pick cell used for an object's candidates: the first stride-aligned
/// covered cell in (y, x) order, or the first covered cell if the footprint
/// misses the stride lattice.
pub fn pick_cell(object: &ObjectInstance, stride: u32, k: u8) -> Pos {
    let mut cells = object.covered_cells(k);
    cells.sort();
    cells
        .iter()
        .copied()
        .find(|p| p.x % stride as i32 == 0 && p.y % stride as i32 == 0)
        .unwrap_or(cells[0])
}

/// All candidate actions: one pick per (unpinned) object, crossed with every
/// stride-aligned, legally stampable place pose. Ordered by the policy tie
/// key.
pub fn enumerate_actions(scenario: &Scenario, grid: &ActionGrid) -> Vec<PickPlaceAction> {
    assert_eq!(
        grid.rotation_bins, scenario.rotation_bins,
        "action grid and scenario rotation bins must agree"
    );
    let k = scenario.rotation_bins;
    let mut objects: Vec<&ObjectInstance> = scenario
        .objects
        .iter()
        .filter(|o| !object_pinned(scenario, o))
        .collect();
    let picks: HashMap<ObjectId, Pos> = objects
        .iter()
        .map(|o| (o.id, pick_cell(o, grid.stride, k)))
        .collect();
    objects.sort_by_key(|o| (picks[&o.id], o.id));

    let mut actions = Vec::new();
    for object in objects {
        let pick = picks[&object.id];
        let checker = PlacementChecker::new(scenario, object.id);
        let mut probe = (*object).clone();
        for y in (0..scenario.grid.height_cells as i32).step_by(grid.stride as usize) {
            for x in (0..scenario.grid.width_cells as i32).step_by(grid.stride as usize) {
                for theta in 0..grid.rotation_bins {
                    probe.pose = Pose::new(x, y, theta);
                    if checker.legal(&probe, k) {
                        actions.push(PickPlaceAction {
                            pick: Pose::new(pick.x, pick.y, object.pose.theta_bin),
                            place: probe.pose,
                        });
                    }
                }
            }
        }
    }
    actions
}

/// An object carrying a drawn trace cannot be picked.
fn object_pinned(scenario: &Scenario, object: &ObjectInstance) -> bool {
    object.raster(scenario.rotation_bins).cells.iter().any(|fc| {
        scenario.trace_elevated_at(Pos::new(object.pose.x + fc.dx, object.pose.y + fc.dy))
    })
}

/// Planner-reward oracle policy.
#[derive(Clone, Debug)]
pub struct Oracle {
    /// Number of top candidates re-ranked with full recursive lookahead.
    /// 1 means scripted-rollout scoring only (the default).
    pub beam: usize,
    /// Worker threads for candidate scoring and evaluation; `None` runs
    /// sequentially. Results are identical for any worker count.
    pub workers: Option<usize>,
    pub reward_params: RewardParams,
}

impl Oracle {
    pub fn for_task(kind: TaskKind) -> Self {
        Self {
            beam: 1,
            workers: None,
            reward_params: kind.reward_params(),
        }
    }

    /// Argmax action under scripted-rollout scoring; see module docs.
    pub fn select(
        &self,
        episode: &Episode,
        grid: &ActionGrid,
    ) -> Result<PickPlaceAction, PolicyError> {
        assert_eq!(episode.phase, Phase::Rearranging);
        let candidates = enumerate_actions(&episode.scenario, grid);
        if candidates.is_empty() {
            return Err(PolicyError::NoLegalAction);
        }
        let scorer = StepScorer::new(episode, grid, &self.reward_params);
        let (mut best_idx, _) = scorer.argmax(&candidates, self.workers);

        if self.beam > 1 {
            // Re-rank the scripted top candidates with true recursive
            // lookahead (each candidate continued by this same policy).
            let mut scored: Vec<(usize, f64)> = candidates
                .iter()
                .enumerate()
                .map(|(i, c)| (i, scorer.value_of(c)))
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let mut best: Option<(f64, usize)> = None;
            for &(i, _) in scored.iter().take(self.beam) {
                let v = self.lookahead_value(episode, grid, &candidates[i]);
                let better = match best {
                    Some((bv, bi)) => v > bv + 1e-12 || ((v - bv).abs() <= 1e-12 && i < bi),
                    None => true,
                };
                if better {
                    best = Some((v, i));
                }
            }
            if let Some((_, i)) = best {
                best_idx = i;
            }
        }
        Ok(candidates[best_idx])
    }

    fn lookahead_value(
        &self,
        episode: &Episode,
        grid: &ActionGrid,
        action: &PickPlaceAction,
    ) -> f64 {
        let mut ep = match episode.step(action) {
            Ok(e) => e,
            Err(_) => return f64::NEG_INFINITY,
        };
        while ep.phase == Phase::Rearranging {
            match self.select(&ep, grid) {
                Ok(a) => match ep.step(&a) {
                    Ok(next) => ep = next,
                    Err(_) => break,
                },
                Err(_) => break,
            }
        }
        let ep = Episode {
            phase: Phase::Drawing,
            ..ep
        };
        ep.finish(&self.reward_params).breakdown.total
    }

    /// Direct scripted-rollout value of one candidate (no shortcuts); the
    /// reference the fast scoring path must agree with.
    pub fn evaluate_candidate(
        &self,
        episode: &Episode,
        grid: &ActionGrid,
        action: &PickPlaceAction,
    ) -> f64 {
        let scorer = StepScorer::new(episode, grid, &self.reward_params);
        scorer.value_of(action)
    }

    /// Rolls one full episode, returning the result and the per-step
    /// (scenario-before, action) pairs.
    pub fn run_episode(
        &self,
        scenario: Scenario,
        grid: &ActionGrid,
    ) -> (EpisodeResult, Vec<(Scenario, PickPlaceAction)>) {
        let params = self.reward_params;
        let mut ep = Episode::new(scenario);
        let mut steps = Vec::new();
        while ep.phase == Phase::Rearranging {
            let Ok(action) = self.select(&ep, grid) else {
                break;
            };
            let before = ep.scenario.clone();
            match ep.step(&action) {
                Ok(next) => {
                    steps.push((before, action));
                    ep = next;
                }
                Err(_) => break,
            }
        }
        let ep = Episode {
            phase: Phase::Drawing,
            ..ep
        };
        (ep.finish(&params), steps)
    }
}

static ROLLOUT_COUNT: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
static SCRIPT_PLAN_NANOS: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
static SCRIPT_BRIDGE_NANOS: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
static SCRIPT_PROBE_NANOS: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
static ROLLOUT_NANOS: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);

/// Candidate classification for scoring.
enum Score {
    Exact(f64),
    /// Upper bound: the candidate cannot beat parking its object.
    Bounded(f64),
}

struct StepScorer<'a> {
    episode: &'a Episode,
    grid: &'a ActionGrid,
    params: &'a RewardParams,
    active: CellMask,
    /// Per object: value of parking it, plus a guard mask of everything the
    /// canonical rollout touched (final traces and scripted placements).
    canonical: HashMap<ObjectId, (f64, CellMask)>,
    /// Per ramp: the two ground sides a trace-crossing must join, when a
    /// committed trace separates the second circuit's terminals.
    crossing_sides: HashMap<ObjectId, Option<crate::task::CrossingSides>>,
    memo: Mutex<HashMap<u64, f64>>,
    zones: Vec<crate::grid::Rect>,
}

impl<'a> StepScorer<'a> {
    fn new(episode: &'a Episode, grid: &'a ActionGrid, params: &'a RewardParams) -> Self {
        let scenario = &episode.scenario;
        let zones = forbidden_zone_rects(scenario);
        let mut scorer = Self {
            episode,
            grid,
            params,
            active: active_mask(scenario),
            canonical: HashMap::new(),
            crossing_sides: HashMap::new(),
            memo: Mutex::new(HashMap::new()),
            zones,
        };
        let trace_committed = scenario.trace(CircuitLabel::A).is_some();
        for object in &scenario.objects {
            if object_pinned(scenario, object) {
                continue;
            }
            let entry = scorer.canonical_park(object);
            scorer.canonical.insert(object.id, entry);
            if object.kind.is_ramp() && trace_committed {
                scorer.crossing_sides.insert(
                    object.id,
                    crate::task::CrossingSides::for_circuit(
                        scenario,
                        Some(object.id),
                        CircuitLabel::B,
                    ),
                );
            }
        }
        scorer
    }

    /// Value of parking `object` at the first free slot, along with the
    /// guard mask of cells the completed rollout depends on.
    fn canonical_park(&self, object: &ObjectInstance) -> (f64, CellMask) {
        let scenario = &self.episode.scenario;
        let pick = pick_cell(object, self.grid.stride, scenario.rotation_bins);
        let park = park_action(scenario, object, pick);
        let action = park.unwrap_or(PickPlaceAction {
            pick: Pose::new(pick.x, pick.y, object.pose.theta_bin),
            place: object.pose,
        });
        self.rollout_traced(&action)
    }

    /// Rollout that also reports which cells the completion touched: final
    /// trace cells plus every footprint the script placed.
    fn rollout_traced(&self, action: &PickPlaceAction) -> (f64, CellMask) {
        let scenario = &self.episode.scenario;
        let mut guard = CellMask::empty(scenario.grid.width_cells, scenario.grid.height_cells);
        let Ok(mut ep) = self.episode.step(action) else {
            return (f64::NEG_INFINITY, guard);
        };
        while ep.phase == Phase::Rearranging {
            let Some(a) = script_action(&ep, self.grid, &self.zones) else {
                break;
            };
            let Ok(next) = ep.step(&a) else { break };
            if let Some(moved) = next.scenario.object_at(a.place.pos()) {
                for p in moved.covered_cells(next.scenario.rotation_bins) {
                    if guard.in_bounds(p) {
                        guard.set(p);
                    }
                }
            }
            ep = next;
        }
        let ep = Episode {
            phase: Phase::Drawing,
            ..ep
        };
        let result = ep.finish(self.params);
        for trace in &result.final_scenario.traces {
            for (p, _) in &trace.cells {
                guard.set(*p);
            }
        }
        (result.breakdown.total, guard)
    }

    /// Full scripted-rollout value of a candidate, memoized by successor
    /// state digest.
    fn value_of(&self, action: &PickPlaceAction) -> f64 {
        let Ok(ep) = self.episode.step(action) else {
            return f64::NEG_INFINITY;
        };
        self.rollout(ep)
    }

    fn rollout(&self, ep: Episode) -> f64 {
        if ep.phase != Phase::Rearranging {
            return ep.finish(self.params).breakdown.total;
        }
        let key = state_digest(&ep, &self.active);
        if let Some(v) = self.memo.lock().unwrap().get(&key) {
            return *v;
        }
        let value = match script_action(&ep, self.grid, &self.zones) {
            Some(a) => match ep.step(&a) {
                Ok(next) => self.rollout(next),
                Err(_) => finish_now(ep, self.params),
            },
            None => finish_now(ep, self.params),
        };
        self.memo.lock().unwrap().insert(key, value);
        value
    }

    fn classify(&self, action: &PickPlaceAction) -> Score {
        let scenario = &self.episode.scenario;
        let k = scenario.rotation_bins;
        let object = scenario
            .object_at(action.pick.pos())
            .expect("candidate pick cell covers an object");
        let (park_value, guard) = &self.canonical[&object.id];

        let raster = crate::object::rotated_footprint(object.footprint, action.place.theta_bin, k);
        let mut touches_active = false;
        let mut touches_guard = false;
        for fc in &raster.cells {
            let p = Pos::new(action.place.x + fc.dx, action.place.y + fc.dy);
            touches_active |= self.active.get(p);
            touches_guard |= guard.get(p);
            if touches_active && touches_guard {
                break;
            }
        }

        if !touches_active && !touches_guard {
            // Inert: provably equivalent to parking the object.
            return Score::Exact(*park_value);
        }

        if object.kind.is_ramp() {
            // A ramp whose deck lands on forbidden ground or a drawn trace
            // can open a crossing; placements whose feet actually join the
            // two sides must be scored for real. Decks that touch a zone or
            // trace without straddling it open nothing and stay bounded.
            let mut deck_on_zone = false;
            let mut deck_on_trace = false;
            for fc in &raster.cells {
                let p = Pos::new(action.place.x + fc.dx, action.place.y + fc.dy);
                if !object.is_deck_cell(fc.local_j) || !scenario.grid.contains(p) {
                    continue;
                }
                deck_on_zone |= *scenario.terrain.forbidden.get(p);
                deck_on_trace |= scenario.trace_ground_at(p);
            }
            if deck_on_zone || deck_on_trace {
                let feet = raster
                    .feet
                    .map(|(dx, dy)| Pos::new(action.place.x + dx, action.place.y + dy));
                let straddles_zone = deck_on_zone
                    && self.zones.iter().any(|z| {
                        (feet[0].x < z.x && feet[1].x >= z.x + z.w as i32)
                            || (feet[1].x < z.x && feet[0].x >= z.x + z.w as i32)
                    });
                let joins_trace_sides = deck_on_trace
                    && matches!(
                        self.crossing_sides.get(&object.id),
                        Some(Some(sides)) if sides.feet_join(&feet)
                    );
                if straddles_zone || joins_trace_sides {
                    ROLLOUT_COUNT.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    let t = std::time::Instant::now();
                    let v = self.value_of(action);
                    ROLLOUT_NANOS.fetch_add(
                        t.elapsed().as_nanos() as u64,
                        std::sync::atomic::Ordering::Relaxed,
                    );
                    return Score::Exact(v);
                }
            }
        }
        // Anything else only removes traversability or rearranges clutter;
        // it cannot beat parking the same object.
        Score::Bounded(*park_value)
    }

    /// Argmax over candidates in tie order. Bounded candidates are resolved
    /// lazily only when their bound could still win.
    fn argmax(&self, candidates: &[PickPlaceAction], workers: Option<usize>) -> (usize, f64) {
        let t_classify = std::time::Instant::now();
        let scores: Vec<Score> = match workers {
            Some(n) if n > 1 => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .expect("worker pool");
                pool.install(|| {
                    use rayon::prelude::*;
                    candidates.par_iter().map(|c| self.classify(c)).collect()
                })
            }
            _ => candidates.iter().map(|c| self.classify(c)).collect(),
        };

        let classify_elapsed = t_classify.elapsed().as_secs_f64();
        let mut best_idx = 0usize;
        let mut best_val = f64::NEG_INFINITY;
        let mut lazy = 0usize;
        for (i, score) in scores.iter().enumerate() {
            let v = match score {
                Score::Exact(v) => *v,
                Score::Bounded(bound) => {
                    if *bound > best_val {
                        lazy += 1;
                        self.value_of(&candidates[i])
                    } else {
                        continue;
                    }
                }
            };
            if v > best_val {
                best_val = v;
                best_idx = i;
            }
        }
        if std::env::var_os("INKPATH_SCORE_STATS").is_some() {
            let exact = scores
                .iter()
                .filter(|s| matches!(s, Score::Exact(_)))
                .count();
            eprintln!(
                "score-stats: candidates={} exact={} lazy={} memo={} classify={:.2}s",
                candidates.len(),
                exact,
                lazy,
                self.memo.lock().unwrap().len(),
                classify_elapsed
            );
            eprintln!(
                "  rollouts={} rollout_time={:.2}s script: plans={:.2}s bridge={:.2}s probes={:.2}s",
                ROLLOUT_COUNT.swap(0, std::sync::atomic::Ordering::Relaxed),
                ROLLOUT_NANOS.swap(0, std::sync::atomic::Ordering::Relaxed) as f64 / 1e9,
                SCRIPT_PLAN_NANOS.swap(0, std::sync::atomic::Ordering::Relaxed) as f64 / 1e9,
                SCRIPT_BRIDGE_NANOS.swap(0, std::sync::atomic::Ordering::Relaxed) as f64 / 1e9,
                SCRIPT_PROBE_NANOS.swap(0, std::sync::atomic::Ordering::Relaxed) as f64 / 1e9
            );
        }
        (best_idx, best_val)
    }
}

fn finish_now(ep: Episode, params: &RewardParams) -> f64 {
    let forced = Episode {
        phase: Phase::Drawing,
        ..ep
    };
    forced.finish(params).breakdown.total
}

/// Conservative mask of everything reward-relevant this step: zones, traces
/// and current optimal routes (dilated), electrode surroundings and the
/// clutter itself. Placements fully outside it cannot change any plan.
fn active_mask(scenario: &Scenario) -> CellMask {
    let (w, h) = (scenario.grid.width_cells, scenario.grid.height_cells);
    let mut mask = CellMask::empty(w, h);
    for p in scenario.forbidden_cells() {
        mask.set_dilated(p, 26);
    }
    for trace in &scenario.traces {
        for (p, _) in &trace.cells {
            mask.set_dilated(*p, 24);
        }
    }
    for e in &scenario.electrodes {
        mask.set_dilated(e.cell, 8);
    }
    for o in &scenario.objects {
        for p in o.covered_cells(scenario.rotation_bins) {
            mask.set_dilated(p, 14);
        }
    }
    let labels: &[CircuitLabel] = if scenario.task.params().inverted {
        &CircuitLabel::BOTH
    } else {
        &[CircuitLabel::A]
    };
    for &label in labels {
        if let Some(path) = scenario.plan_circuit(label) {
            for pc in &path.cells {
                mask.set_dilated(pc.pos(), 20);
            }
        }
        // The straight corridor matters even while a detour is current.
        let (a, b) = scenario.circuit_endpoints(label);
        let steps = (b.x - a.x).abs().max((b.y - a.y).abs()).max(1);
        for t in 0..=steps {
            let x = a.x + (b.x - a.x) * t / steps;
            let y = a.y + (b.y - a.y) * t / steps;
            mask.set_dilated(Pos::new(x, y), 20);
        }
    }
    mask
}

/// Deterministic parking spots: the waste-zone quadrants first, then a
/// sweep along the top and left margins.
fn park_slots(scenario: &Scenario) -> Vec<Pos> {
    let waste = scenario.waste_zone;
    let (w, h) = (
        scenario.grid.width_cells as i32,
        scenario.grid.height_cells as i32,
    );
    let qx = waste.w as i32 / 4;
    let qy = waste.h as i32 / 4;
    let mut slots = vec![
        Pos::new(waste.x + qx, waste.y + qy),
        Pos::new(waste.x + 3 * qx, waste.y + qy),
        Pos::new(waste.x + qx, waste.y + 3 * qy),
        Pos::new(waste.x + 3 * qx, waste.y + 3 * qy),
    ];
    let mut x = 56;
    while x < w - 24 {
        slots.push(Pos::new(x, 16));
        x += 24;
    }
    let mut y = 64;
    while y < h - 16 {
        slots.push(Pos::new(16, y));
        y += 24;
    }
    slots
}

fn park_action(
    scenario: &Scenario,
    object: &ObjectInstance,
    pick: Pos,
) -> Option<PickPlaceAction> {
    for slot in park_slots(scenario) {
        let pose = Pose::new(slot.x, slot.y, object.pose.theta_bin);
        if scenario.with_object_pose(object.id, pose).is_ok() {
            return Some(PickPlaceAction {
                pick: Pose::new(pick.x, pick.y, object.pose.theta_bin),
                place: pose,
            });
        }
    }
    None
}

/// The deterministic completion policy used to roll candidate evaluations
/// forward: bridge the committed trace for circuit B when needed, bridge
/// unbridged zones, park the worst offender, otherwise relocate in place.
fn script_action(
    ep: &Episode,
    grid: &ActionGrid,
    zones: &[crate::grid::Rect],
) -> Option<PickPlaceAction> {
    let scenario = &ep.scenario;
    let k = scenario.rotation_bins;
    let inverted = ep.inverted();
    let free_ramps: Vec<&ObjectInstance> = scenario
        .objects
        .iter()
        .filter(|o| o.kind.is_ramp() && !object_pinned(scenario, o))
        .collect();

    // Each active circuit is planned once here and the results reused by
    // every rule below.
    let labels: &[CircuitLabel] = if inverted {
        &CircuitLabel::BOTH
    } else {
        &[CircuitLabel::A]
    };
    let t = std::time::Instant::now();
    let planned = scenario.plan_circuits(labels);
    SCRIPT_PLAN_NANOS.fetch_add(t.elapsed().as_nanos() as u64, std::sync::atomic::Ordering::Relaxed);
    let plans: Vec<(CircuitLabel, Option<crate::planner::Path3D>)> =
        labels.iter().copied().zip(planned).collect();
    let plan_of = |l: CircuitLabel| plans.iter().find(|(pl, _)| *pl == l).map(|(_, p)| p);

    // Second circuit blocked behind the committed trace: bring a ramp over.
    if inverted
        && scenario.trace(CircuitLabel::A).is_some()
        && plan_of(CircuitLabel::B) == Some(&None)
    {
        for ramp in &free_ramps {
            if let Some((bridged, _)) = bridge_trace(scenario, ramp.id, CircuitLabel::B, 8) {
                let pose = bridged.object(ramp.id).unwrap().pose;
                return Some(PickPlaceAction {
                    pick: pick_pose(ramp, grid, k),
                    place: pose,
                });
            }
        }
    }

    // Unbridged zones on single-circuit tasks get the matching ramp. With
    // inverted electrodes the single ramp is reserved for crossing the
    // committed trace, so zones are detoured instead.
    if !inverted {
        let current = plan_of(CircuitLabel::A).cloned().flatten();
        for (zi, zone) in zones.iter().enumerate() {
            if scenario.zone_is_straddled(*zone) {
                continue;
            }
            let Some(ramp) = free_ramps.get(zi.min(free_ramps.len().saturating_sub(1))) else {
                break;
            };
            let t = std::time::Instant::now();
            let br = bridge_zone(scenario, ramp.id, *zone, CircuitLabel::A, 8);
            SCRIPT_BRIDGE_NANOS.fetch_add(t.elapsed().as_nanos() as u64, std::sync::atomic::Ordering::Relaxed);
            if let Some((bridged, path)) = br
            {
                let improves = match &current {
                    Some(p) => path.cost < p.cost - 1e-9,
                    None => true,
                };
                if improves {
                    let pose = bridged.object(ramp.id).unwrap().pose;
                    return Some(PickPlaceAction {
                        pick: pick_pose(ramp, grid, k),
                        place: pose,
                    });
                }
            }
        }
    }

    // Park the object whose removal shortens the active circuits most.
    const NO_PATH: f64 = 1e6;
    let total_cost = |s: &Scenario| -> f64 {
        s.plan_circuits(labels)
            .into_iter()
            .map(|p| p.map(|p| p.cost).unwrap_or(NO_PATH))
            .sum()
    };
    let mut path_mask = CellMask::empty(scenario.grid.width_cells, scenario.grid.height_cells);
    let mut any_no_path = false;
    let mut base_cost = 0.0;
    for (_, plan) in &plans {
        match plan {
            Some(p) => {
                base_cost += p.cost;
                for pc in &p.cells {
                    path_mask.set_dilated(pc.pos(), 2);
                }
            }
            None => {
                base_cost += NO_PATH;
                any_no_path = true;
            }
        }
    }
    let t_probe = std::time::Instant::now();
    let mut best: Option<(f64, ObjectId)> = None;
    for object in &scenario.objects {
        if object_pinned(scenario, object) {
            continue;
        }
        let near_path = object.covered_cells(k).into_iter().any(|p| path_mask.get(p));
        if !near_path && !any_no_path {
            continue;
        }
        let mut probe = scenario.clone();
        probe.objects.retain(|o| o.id != object.id);
        let improvement = base_cost - total_cost(&probe);
        if improvement > 1e-9 {
            let better = match best {
                Some((bi, bid)) => {
                    improvement > bi + 1e-12 || ((improvement - bi).abs() <= 1e-12 && object.id < bid)
                }
                None => true,
            };
            if better {
                best = Some((improvement, object.id));
            }
        }
    }
    SCRIPT_PROBE_NANOS.fetch_add(t_probe.elapsed().as_nanos() as u64, std::sync::atomic::Ordering::Relaxed);
    if let Some((_, offender_id)) = best {
        let offender = scenario.object(offender_id).unwrap();
        let pick = pick_cell(offender, grid.stride, k);
        if let Some(action) = park_action(scenario, offender, pick) {
            return Some(action);
        }
    }

    // Nothing useful left: no-regret relocation of the first free object.
    scenario
        .objects
        .iter()
        .filter(|o| !object_pinned(scenario, o))
        .min_by_key(|o| o.id)
        .map(|o| PickPlaceAction {
            pick: pick_pose(o, grid, k),
            place: o.pose,
        })
}

fn pick_pose(object: &ObjectInstance, grid: &ActionGrid, k: u8) -> Pose {
    let cell = pick_cell(object, grid.stride, k);
    Pose::new(cell.x, cell.y, object.pose.theta_bin)
}

/// Digest of an episode state for rollout memoization. Objects fully
/// outside the active mask collapse to an "away" marker: where exactly an
/// off-route object was parked cannot change the completion's reward.
fn state_digest(ep: &Episode, active: &CellMask) -> u64 {
    let mut hasher = DefaultHasher::new();
    ep.scenario.steps_remaining.hash(&mut hasher);
    (ep.phase == Phase::Rearranging).hash(&mut hasher);
    for trace in &ep.scenario.traces {
        trace.label.hash(&mut hasher);
        for (p, lvl) in &trace.cells {
            p.hash(&mut hasher);
            lvl.hash(&mut hasher);
        }
    }
    let mut objects: Vec<&ObjectInstance> = ep.scenario.objects.iter().collect();
    objects.sort_by_key(|o| o.id);
    for o in objects {
        o.id.hash(&mut hasher);
        let in_active = o
            .covered_cells(ep.scenario.rotation_bins)
            .into_iter()
            .any(|p| active.get(p));
        if in_active {
            o.pose.hash(&mut hasher);
        } else {
            0xAAu8.hash(&mut hasher);
        }
    }
    hasher.finish()
}

/// Built-in baseline policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Oracle,
    /// Relocates the first object in place each step; the do-nothing
    /// baseline.
    Noop,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Oracle => "oracle",
            PolicyKind::Noop => "noop",
        }
    }

    pub fn from_name(s: &str) -> Option<PolicyKind> {
        match s {
            "oracle" => Some(PolicyKind::Oracle),
            "noop" => Some(PolicyKind::Noop),
            _ => None,
        }
    }
}

pub fn noop_action(scenario: &Scenario) -> Option<PickPlaceAction> {
    scenario
        .objects
        .iter()
        .filter(|o| !object_pinned(scenario, o))
        .min_by_key(|o| o.id)
        .map(|o| PickPlaceAction {
            pick: o.pose,
            place: o.pose,
        })
}

#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub seed: u64,
    pub total: f64,
    pub breakdown: RewardBreakdown,
    pub actions: Vec<PickPlaceAction>,
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub task: TaskKind,
    pub policy: PolicyKind,
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub records: Vec<EvalRecord>,
}

/// Runs `n_tests` seeded episodes (seeds `base_seed..base_seed+n`) under a
/// policy and summarizes the rewards. Episodes are independent; with
/// `workers > 1` they run in parallel with bit-identical results.
pub fn evaluate(
    kind: TaskKind,
    policy: PolicyKind,
    n_tests: usize,
    base_seed: u64,
    grid: &ActionGrid,
    oracle: &Oracle,
    gen: &GenOptions,
) -> Result<EvalSummary, GenError> {
    assert!(n_tests >= 1);
    let run_one = |i: usize| -> Result<EvalRecord, GenError> {
        let seed = base_seed + i as u64;
        let scenario = generate_with(kind, seed, gen)?;
        let result = match policy {
            PolicyKind::Oracle => oracle.run_episode(scenario, grid).0,
            PolicyKind::Noop => {
                let mut ep = Episode::new(scenario);
                while ep.phase == Phase::Rearranging {
                    let Some(action) = noop_action(&ep.scenario) else {
                        break;
                    };
                    match ep.step(&action) {
                        Ok(next) => ep = next,
                        Err(_) => break,
                    }
                }
                let ep = Episode {
                    phase: Phase::Drawing,
                    ..ep
                };
                ep.finish(&kind.reward_params())
            }
        };
        Ok(EvalRecord {
            seed,
            total: result.breakdown.total,
            breakdown: result.breakdown,
            actions: result.actions_taken,
        })
    };

    let records: Result<Vec<EvalRecord>, GenError> = match oracle.workers {
        Some(n) if n > 1 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .expect("worker pool");
            pool.install(|| {
                use rayon::prelude::*;
                (0..n_tests).into_par_iter().map(run_one).collect()
            })
        }
        _ => (0..n_tests).map(run_one).collect(),
    };
    let records = records?;
    let totals: Vec<f64> = records.iter().map(|r| r.total).collect();
    let mean = totals.iter().sum::<f64>() / totals.len() as f64;
    let min = totals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = totals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(EvalSummary {
        task: kind,
        policy,
        n: n_tests,
        mean,
        min,
        max,
        records,
    })
}

/// One recorded expert step: the world before the action and the action
/// taken. The observation is recovered deterministically from the scenario.
#[derive(Clone, Debug)]
pub struct DemoStep {
    pub step_index: u32,
    pub scenario_before: Scenario,
    pub action: PickPlaceAction,
}

#[derive(Clone, Debug)]
pub struct DemoEpisode {
    pub seed: u64,
    pub steps: Vec<DemoStep>,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct DemoSet {
    pub task: TaskKind,
    /// Episodes rolled, before filtering.
    pub rolled: usize,
    pub episodes: Vec<DemoEpisode>,
}

/// Rolls `n` oracle episodes and keeps those whose total reward meets the
/// filter threshold in `oracle.reward_params`.
pub fn collect_demonstrations(
    kind: TaskKind,
    n: usize,
    base_seed: u64,
    grid: &ActionGrid,
    oracle: &Oracle,
    gen: &GenOptions,
) -> Result<DemoSet, GenError> {
    let mut episodes = Vec::new();
    for i in 0..n {
        let seed = base_seed + i as u64;
        let scenario = generate_with(kind, seed, gen)?;
        let (result, steps) = oracle.run_episode(scenario, grid);
        if passes_filter(result.breakdown.total, &oracle.reward_params) {
            episodes.push(DemoEpisode {
                seed,
                steps: steps
                    .into_iter()
                    .enumerate()
                    .map(|(j, (scenario_before, action))| DemoStep {
                        step_index: j as u32,
                        scenario_before,
                        action,
                    })
                    .collect(),
                total: result.breakdown.total,
            });
        }
    }
    Ok(DemoSet {
        task: kind,
        rolled: n,
        episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::generate;

    #[test]
    fn enumerate_empty_scenario_is_empty() {
        let s = Scenario::empty(
            crate::grid::GridSpec::default(),
            TaskKind::RemoveObstacle,
            0,
            false,
        );
        assert!(enumerate_actions(&s, &ActionGrid::default()).is_empty());
    }

    #[test]
    fn enumerate_has_pick_on_each_object_and_is_tie_ordered() {
        let s = generate(TaskKind::RemoveObstacles, 5).unwrap();
        let grid = ActionGrid::default();
        let actions = enumerate_actions(&s, &grid);
        assert!(!actions.is_empty());
        for o in &s.objects {
            let pick = pick_cell(o, grid.stride, s.rotation_bins);
            assert!(
                actions.iter().any(|a| a.pick.pos() == pick),
                "object {:?} has no candidates",
                o.id
            );
            assert!(crate::scenario::covers(o, pick, s.rotation_bins));
        }
        for w in actions.windows(2) {
            assert!(w[0].tie_key() <= w[1].tie_key());
        }
    }

    #[test]
    fn checker_matches_check_stamp() {
        let s = generate(TaskKind::RemoveObstaclePlusBridge, 9).unwrap();
        let k = s.rotation_bins;
        for object in &s.objects {
            let checker = PlacementChecker::new(&s, object.id);
            let mut probe = object.clone();
            let mut seed = 0x243F_6A88u64;
            for _ in 0..400 {
                seed = seed
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                let x = ((seed >> 33) % s.grid.width_cells as u64) as i32;
                let y = ((seed >> 17) % s.grid.height_cells as u64) as i32;
                let theta = ((seed >> 7) % k as u64) as u8;
                probe.pose = Pose::new(x, y, theta);
                let fast = checker.legal(&probe, k);
                let slow = s.with_object_pose(object.id, probe.pose).is_ok();
                assert_eq!(fast, slow, "mismatch at {:?}", probe.pose);
            }
        }
    }

    #[test]
    fn fast_scores_match_direct_rollouts() {
        // The collapsed/bounded scoring must agree with direct evaluation.
        for (kind, seed) in [
            (TaskKind::RemoveObstacle, 3u64),
            (TaskKind::BridgeForbiddenZone, 4),
            (TaskKind::AllInOne, 5),
        ] {
            let scenario = generate(kind, seed).unwrap();
            let ep = Episode::new(scenario);
            let grid = ActionGrid::with_stride(16);
            let oracle = Oracle::for_task(kind);
            let candidates = enumerate_actions(&ep.scenario, &grid);
            let scorer = StepScorer::new(&ep, &grid, &oracle.reward_params);
            let (_, best_val) = scorer.argmax(&candidates, None);
            let mut step = (candidates.len() / 61).max(1);
            if step % 2 == 0 {
                step += 1;
            }
            for (i, c) in candidates.iter().enumerate() {
                if i % step != 0 {
                    continue;
                }
                let direct = oracle.evaluate_candidate(&ep, &grid, c);
                assert!(
                    direct <= best_val + 1e-9,
                    "{kind:?}: candidate {i} beats argmax: {direct} > {best_val}"
                );
                match scorer.classify(c) {
                    Score::Exact(v) => assert!(
                        (v - direct).abs() < 1e-9,
                        "{kind:?}: exact score drift at {i}: {v} vs {direct}"
                    ),
                    Score::Bounded(b) => assert!(
                        direct <= b + 1e-9,
                        "{kind:?}: bound violated at {i}: {direct} > {b}"
                    ),
                }
            }
        }
    }

    #[test]
    fn oracle_solves_remove_obstacle_exactly() {
        let scenario = generate(TaskKind::RemoveObstacle, 17).unwrap();
        let oracle = Oracle::for_task(TaskKind::RemoveObstacle);
        let (result, steps) = oracle.run_episode(scenario, &ActionGrid::default());
        assert_eq!(steps.len(), 1);
        assert!(
            (result.breakdown.total - 1.0).abs() < 1e-9,
            "reward {}",
            result.breakdown.total
        );
    }

    #[test]
    fn oracle_never_loses_to_noop() {
        let kind = TaskKind::RemoveObstacle;
        let grid = ActionGrid::default();
        let oracle = Oracle::for_task(kind);
        let mut strict_wins = 0;
        for seed in 40..46 {
            let o = evaluate(
                kind,
                PolicyKind::Oracle,
                1,
                seed,
                &grid,
                &oracle,
                &GenOptions::default(),
            )
            .unwrap();
            let n = evaluate(
                kind,
                PolicyKind::Noop,
                1,
                seed,
                &grid,
                &oracle,
                &GenOptions::default(),
            )
            .unwrap();
            assert!(o.mean >= n.mean - 1e-12, "seed {seed}");
            if o.mean > n.mean + 1e-9 {
                strict_wins += 1;
            }
        }
        assert!(strict_wins >= 1, "no obstructed scenario in the sample");
    }

    #[test]
    fn worker_count_does_not_change_selection() {
        let scenario = generate(TaskKind::BridgeForbiddenZone, 8).unwrap();
        let ep = Episode::new(scenario);
        let grid = ActionGrid::with_stride(16);
        let mut oracle = Oracle::for_task(TaskKind::BridgeForbiddenZone);
        let sequential = oracle.select(&ep, &grid).unwrap();
        oracle.workers = Some(3);
        let parallel = oracle.select(&ep, &grid).unwrap();
        assert_eq!(sequential, parallel);
    }

    #[test]
    fn select_is_deterministic() {
        let scenario = generate(TaskKind::AllInOne, 21).unwrap();
        let ep = Episode::new(scenario);
        let grid = ActionGrid::default();
        let oracle = Oracle::for_task(TaskKind::AllInOne);
        let a = oracle.select(&ep, &grid).unwrap();
        let b = oracle.select(&ep, &grid).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn demonstration_filter_keeps_only_passing_episodes() {
        let kind = TaskKind::RemoveObstacle;
        let grid = ActionGrid::default();
        let mut oracle = Oracle::for_task(kind);
        let demos =
            collect_demonstrations(kind, 3, 100, &grid, &oracle, &GenOptions::default()).unwrap();
        assert_eq!(demos.rolled, 3);
        assert_eq!(demos.episodes.len(), 3);
        for ep in &demos.episodes {
            assert!(ep.total >= 0.9);
            assert_eq!(ep.steps.len(), 1);
        }
        // An unattainable threshold keeps nothing.
        oracle.reward_params.filter_threshold = 1.01;
        let none =
            collect_demonstrations(kind, 2, 100, &grid, &oracle, &GenOptions::default()).unwrap();
        assert!(none.episodes.is_empty());
    }
}
