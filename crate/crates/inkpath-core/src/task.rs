//! The seven task families, the seeded scenario generator and the episode
//! engine with the early-connection rule for inverted electrodes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridSpec, Pos, Rect};
use crate::object::{default_obstacle, default_ramp, ObjectId, ObjectInstance, ObstacleShape, Pose};
use crate::planner::Path3D;
use crate::reward::{mincost, total_reward, RewardBreakdown, RewardParams};
use crate::scenario::{CircuitLabel, PickPlaceAction, Scenario, WorldError};

/// Identifier of the seeded generator algorithm, recorded in scenario files
/// so layouts remain portable.
pub const RNG_ALGORITHM: &str = "chacha8";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "remove-obstacle")]
    RemoveObstacle,
    #[serde(rename = "remove-obstacles")]
    RemoveObstacles,
    #[serde(rename = "bridge-forbidden-zone")]
    BridgeForbiddenZone,
    #[serde(rename = "bridge-forbidden-zones")]
    BridgeForbiddenZones,
    #[serde(rename = "draw-above-circuit")]
    DrawAboveCircuit,
    #[serde(rename = "remove-obstacle+bridge-forbidden-zone")]
    RemoveObstaclePlusBridge,
    #[serde(rename = "all-in-one")]
    AllInOne,
}

/// Task roster parameters: counts of movable objects and zones plus the
/// electrode configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskParams {
    pub obstacles: u32,
    pub zones: u32,
    pub ramps: u32,
    /// Extra obstacles placed as distractors (count toward the budget).
    pub distractors: u32,
    pub inverted: bool,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::RemoveObstacle,
        TaskKind::RemoveObstacles,
        TaskKind::BridgeForbiddenZone,
        TaskKind::BridgeForbiddenZones,
        TaskKind::DrawAboveCircuit,
        TaskKind::RemoveObstaclePlusBridge,
        TaskKind::AllInOne,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::RemoveObstacle => "remove-obstacle",
            TaskKind::RemoveObstacles => "remove-obstacles",
            TaskKind::BridgeForbiddenZone => "bridge-forbidden-zone",
            TaskKind::BridgeForbiddenZones => "bridge-forbidden-zones",
            TaskKind::DrawAboveCircuit => "draw-above-circuit",
            TaskKind::RemoveObstaclePlusBridge => "remove-obstacle+bridge-forbidden-zone",
            TaskKind::AllInOne => "all-in-one",
        }
    }

    pub fn from_name(s: &str) -> Option<TaskKind> {
        TaskKind::ALL.iter().copied().find(|k| k.name() == s)
    }

    pub fn params(&self) -> TaskParams {
        let (obstacles, zones, ramps, distractors, inverted) = match self {
            TaskKind::RemoveObstacle => (1, 0, 0, 0, false),
            TaskKind::RemoveObstacles => (3, 0, 0, 0, false),
            TaskKind::BridgeForbiddenZone => (0, 1, 1, 0, false),
            TaskKind::BridgeForbiddenZones => (0, 1, 1, 1, false),
            TaskKind::DrawAboveCircuit => (0, 0, 1, 0, true),
            TaskKind::RemoveObstaclePlusBridge => (2, 1, 1, 0, false),
            TaskKind::AllInOne => (2, 1, 1, 0, true),
        };
        TaskParams {
            obstacles,
            zones,
            ramps,
            distractors,
            inverted,
        }
    }

    /// Inverted tasks draw both circuits and weight them evenly; the others
    /// draw circuit A alone.
    pub fn reward_params(&self) -> RewardParams {
        if self.params().inverted {
            RewardParams::default()
        } else {
            RewardParams::single_circuit()
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::from_name(s).ok_or_else(|| format!("unknown task '{s}'"))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("could not generate a solvable {kind} scenario for seed {seed} within {attempts} attempts")]
pub struct GenError {
    pub kind: &'static str,
    pub seed: u64,
    pub attempts: u32,
}

/// Generator knobs beyond the task roster.
#[derive(Clone, Copy, Debug, Default)]
pub struct GenOptions {
    /// Overrides the forbidden-zone count on zone-bearing tasks (each zone
    /// receives its own ramp).
    pub zone_count: Option<u32>,
}

const OUTER_ATTEMPTS: u32 = 64;
const PLACE_ATTEMPTS: u32 = 192;

/// Deterministic scenario generation for `(kind, seed)`.
pub fn generate(kind: TaskKind, seed: u64) -> Result<Scenario, GenError> {
    generate_with(kind, seed, &GenOptions::default())
}

pub fn generate_with(
    kind: TaskKind,
    seed: u64,
    options: &GenOptions,
) -> Result<Scenario, GenError> {
    let mut params = kind.params();
    if let Some(zc) = options.zone_count {
        if params.zones > 0 {
            params.zones = zc;
            params.ramps = zc;
        }
    }
    let salt = (TaskKind::ALL.iter().position(|k| *k == kind).unwrap() as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);

    for _ in 0..OUTER_ATTEMPTS {
        if let Some(scenario) = try_generate(kind, seed, &params, &mut rng) {
            return Ok(scenario);
        }
    }
    Err(GenError {
        kind: kind.name(),
        seed,
        attempts: OUTER_ATTEMPTS,
    })
}

fn try_generate(
    kind: TaskKind,
    seed: u64,
    params: &TaskParams,
    rng: &mut ChaCha8Rng,
) -> Option<Scenario> {
    let grid = GridSpec::default();
    let w = grid.width_cells as i32;
    let h = grid.height_cells as i32;
    let mut scenario = Scenario::empty(grid, kind, seed, params.inverted);

    // The edge strips outside the electrode columns mount the terminal
    // bars; no ink can be drawn there. This also means a drawn circuit
    // reaching both terminals genuinely separates the two board halves.
    let margin = crate::scenario::ELECTRODE_EDGE_OFFSET as u32;
    scenario.mark_forbidden(Rect::new(0, 0, margin, grid.height_cells));
    scenario.mark_forbidden(Rect::new(w - margin as i32, 0, margin, grid.height_cells));

    // Forbidden zones: vertical strips in the middle band, spanning part or
    // all of the crossing dimension. Inverted tasks cap the span so circuit A
    // can detour around on the ground.
    let mut zone_rects: Vec<Rect> = Vec::new();
    for _ in 0..params.zones {
        let mut placed = false;
        for _ in 0..PLACE_ATTEMPTS {
            let thickness = 2 * rng.gen_range(2..=4i32);
            let span_pct = if params.inverted {
                rng.gen_range(40..=50i32)
            } else {
                rng.gen_range(40..=100i32)
            };
            let cx = rng.gen_range(3 * w / 8..=5 * w / 8);
            let cy = h / 2 + rng.gen_range(-(h / 12)..=h / 12);
            let span = (h * span_pct / 100).max(4);
            let x0 = cx - thickness / 2;
            let y0 = (cy - span / 2).clamp(0, h - span);
            let rect = Rect::new(x0, y0, thickness as u32, span as u32);
            if zone_rects
                .iter()
                .all(|z| (z.x - x0).abs() >= 48 && (z.x - x0).abs() >= z.w as i32 + thickness)
            {
                zone_rects.push(rect);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    for z in &zone_rects {
        scenario.mark_forbidden(*z);
    }

    let mut next_id = 0u32;

    // Ramps first. They start away from zones and the waste area; for the
    // one-step draw-above task the initial pose must also leave circuit A a
    // geodesic route, because A is drawn before the only action.
    for _ in 0..params.ramps {
        let color = [
            rng.gen_range(60..=220u32) as u8,
            rng.gen_range(60..=220u32) as u8,
            rng.gen_range(60..=220u32) as u8,
        ];
        let mut placed = false;
        for _ in 0..PLACE_ATTEMPTS {
            let x = rng.gen_range(w / 5..=4 * w / 5);
            let y = rng.gen_range(h / 8..=7 * h / 8);
            let theta = rng.gen_range(0..scenario.rotation_bins);
            let ramp = default_ramp(ObjectId(next_id), Pose::new(x, y, theta), color);
            if !placement_ok(&scenario, &ramp, &zone_rects) {
                continue;
            }
            let candidate = scenario.stamp_object(ramp).ok()?;
            if kind == TaskKind::DrawAboveCircuit {
                let mc = mincost(&candidate, CircuitLabel::A);
                match candidate.plan_circuit(CircuitLabel::A) {
                    Some(p) if (p.cost - mc).abs() <= 1e-9 => {}
                    _ => continue,
                }
            }
            scenario = candidate;
            next_id += 1;
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }

    // Obstacles. The first `params.obstacles` block a circuit's straight
    // route (the point of the removal tasks); distractors land anywhere in
    // the central band.
    for i in 0..params.obstacles + params.distractors {
        let shape = if rng.gen_range(0..2u32) == 0 {
            ObstacleShape::Cuboid
        } else {
            ObstacleShape::TriangularPrism
        };
        let color = [
            rng.gen_range(60..=220u32) as u8,
            rng.gen_range(60..=220u32) as u8,
            rng.gen_range(60..=220u32) as u8,
        ];
        let blocking = i < params.obstacles;
        let label = if params.inverted && i % 2 == 1 {
            CircuitLabel::B
        } else {
            CircuitLabel::A
        };
        let (ra, sa) = scenario.circuit_endpoints(label);
        let mut placed = false;
        for _ in 0..PLACE_ATTEMPTS {
            let x = rng.gen_range(w / 5..=4 * w / 5);
            let y = if blocking {
                let y_line = ra.y + (sa.y - ra.y) * (x - ra.x) / (sa.x - ra.x).max(1);
                (y_line + rng.gen_range(-10..=10)).clamp(12, h - 12)
            } else {
                rng.gen_range(h / 10..=9 * h / 10)
            };
            let theta = rng.gen_range(0..scenario.rotation_bins);
            let obstacle =
                default_obstacle(ObjectId(next_id), shape, Pose::new(x, y, theta), color);
            if !placement_ok(&scenario, &obstacle, &zone_rects) {
                continue;
            }
            scenario = scenario.stamp_object(obstacle).ok()?;
            next_id += 1;
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }

    scenario.step_budget = scenario.objects.len() as u32;
    scenario.steps_remaining = scenario.step_budget;

    if oracle_lite_solvable(&scenario, &zone_rects) {
        Some(scenario)
    } else {
        None
    }
}

/// Initial placement rules common to all objects: stamp-legal, off every
/// zone and clear of the waste area.
fn placement_ok(scenario: &Scenario, object: &ObjectInstance, zones: &[Rect]) -> bool {
    if scenario.check_stamp(object).is_err() {
        return false;
    }
    let cells = object.covered_cells(scenario.rotation_bins);
    let waste = scenario.waste_zone;
    cells.iter().all(|p| {
        !waste.contains(*p) && zones.iter().all(|z| !z.contains(*p))
    })
}

/// Solvability probe: with all obstacles lifted off the board and every zone
/// bridged (or, for inverted tasks, circuit A committed and bridged for B),
/// both required circuits must plan.
fn oracle_lite_solvable(scenario: &Scenario, zones: &[Rect]) -> bool {
    let mut probe = scenario.clone();
    probe.objects.retain(|o| o.kind.is_ramp());
    let inverted = scenario.task.params().inverted;

    if !inverted {
        let ramp_ids: Vec<ObjectId> = probe.objects.iter().map(|o| o.id).collect();
        for (zone, ramp_id) in zones.iter().zip(ramp_ids) {
            match bridge_zone(&probe, ramp_id, *zone, CircuitLabel::A, 24) {
                Some((bridged, _)) => probe = bridged,
                None => return false,
            }
        }
        probe.plan_circuit(CircuitLabel::A).is_some()
    } else {
        let a = match probe.plan_circuit(CircuitLabel::A) {
            Some(p) => p,
            None => return false,
        };
        let probe = match probe.commit_trace(CircuitLabel::A, &a) {
            Ok(s) => s,
            Err(_) => return false,
        };
        let ramp_id = match probe.objects.iter().find(|o| o.kind.is_ramp()) {
            Some(r) => r.id,
            None => return false,
        };
        bridge_trace(&probe, ramp_id, CircuitLabel::B, 8).is_some()
    }
}

/// Offsets 0, -1, 1, -2, 2, ... out to `limit`.
pub(crate) fn spread(limit: i32) -> impl Iterator<Item = i32> {
    (0..=2 * limit).map(|i| {
        let step = (i + 1) / 2;
        if i % 2 == 1 {
            -step
        } else {
            step
        }
    })
}

/// Searches for a ramp pose whose deck spans `zone` near the straight route
/// of `label`, verifying with a plan. Returns the repositioned scenario and
/// the plan found.
pub(crate) fn bridge_zone(
    scenario: &Scenario,
    ramp_id: ObjectId,
    zone: Rect,
    label: CircuitLabel,
    max_plans: usize,
) -> Option<(Scenario, Path3D)> {
    let (robot, source) = scenario.circuit_endpoints(label);
    let zc = zone.x + zone.w as i32 / 2;
    let y_star = robot.y
        + ((source.y - robot.y) as i64 * (zc - robot.x) as i64
            / (source.x - robot.x).max(1) as i64) as i32;
    let mut plans = 0usize;
    let mut best: Option<(f64, Scenario, Path3D)> = None;
    for dy in spread(24) {
        for dx in spread(8) {
            let pose = Pose::new(zc + dx, y_star + dy, 2);
            let candidate = match scenario.with_object_pose(ramp_id, pose) {
                Ok(s) => s,
                Err(_) => continue,
            };
            let ramp = candidate.object(ramp_id).unwrap();
            let feet = ramp.feet(candidate.rotation_bins);
            let straddles = (feet[0].x < zone.x && feet[1].x >= zone.x + zone.w as i32)
                || (feet[1].x < zone.x && feet[0].x >= zone.x + zone.w as i32);
            if !straddles {
                continue;
            }
            if let Some(path) = candidate.plan_circuit(label) {
                let better = match &best {
                    Some((c, _, _)) => path.cost < *c - 1e-12,
                    None => true,
                };
                if better {
                    best = Some((path.cost, candidate, path));
                }
            }
            plans += 1;
            if plans >= max_plans {
                if let Some((_, s, p)) = best {
                    return Some((s, p));
                }
                return None;
            }
        }
    }
    best.map(|(_, s, p)| (s, p))
}

/// Searches for a ramp pose bridging circuit A's committed trace so that
/// `label` (circuit B) can cross above it. The crossing target comes from a
/// phantom plan (circuit B routed as if the trace were crossable, so zone
/// detours are already reflected); candidates spiral around it with deck
/// axes ordered by how squarely they cross the local trace direction, and
/// feet must land in the two components the trace separates.
pub(crate) fn bridge_trace(
    scenario: &Scenario,
    ramp_id: ObjectId,
    label: CircuitLabel,
    max_plans: usize,
) -> Option<(Scenario, Path3D)> {
    let trace = scenario.trace(CircuitLabel::A)?;
    let ground_cells: Vec<Pos> = trace
        .cells
        .iter()
        .filter(|(_, lvl)| *lvl == crate::scenario::Level::Ground)
        .map(|(p, _)| *p)
        .collect();
    if ground_cells.is_empty() {
        return None;
    }
    let (robot, source) = scenario.circuit_endpoints(label);

    // Where would the circuit cross if the trace were no obstacle? The
    // surface is patched, so connectivity is re-analyzed rather than taken
    // from the scenario's cache.
    let phantom_cross = {
        let mut surface = scenario.effective_surface();
        for &p in &ground_cells {
            let sc = surface.cells.get_mut(p);
            if sc.level == crate::scenario::Level::Ground {
                sc.traversable = true;
            }
        }
        scenario
            .plan_circuit_unhinted(&surface, label)
            .and_then(|path| {
                path.cells
                    .iter()
                    .map(|pc| pc.pos())
                    .find(|p| scenario.trace_ground_at(*p))
            })
    };
    let (star_idx, t_star) = match phantom_cross
        .and_then(|p| ground_cells.iter().position(|c| *c == p).map(|i| (i, p)))
    {
        Some(hit) => hit,
        None => ground_cells
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let da = crate::planner::octile(robot, **a) + crate::planner::octile(**a, source);
                let db = crate::planner::octile(robot, **b) + crate::planner::octile(**b, source);
                da.total_cmp(&db).then_with(|| a.cmp(b))
            })
            .map(|(i, p)| (i, *p))?,
    };

    // The trace splits the ground into the two sides the feet must join.
    let sides = CrossingSides::for_circuit(scenario, Some(ramp_id), label);

    // Local trace direction, for ordering candidate deck axes.
    let before = ground_cells[star_idx.saturating_sub(3)];
    let after = ground_cells[(star_idx + 3).min(ground_cells.len() - 1)];
    let dir = ((after.x - before.x) as f64, (after.y - before.y) as f64);
    let norm = (dir.0 * dir.0 + dir.1 * dir.1).sqrt().max(1e-9);
    let dir = (dir.0 / norm, dir.1 / norm);

    let k = scenario.rotation_bins;
    let mut thetas: Vec<u8> = (0..k).collect();
    thetas.sort_by(|a, b| {
        let score = |t: &u8| {
            let (c, s) = crate::object::rotation_table(*t, k);
            // Deck axis is the rotated local depth axis.
            let axis = (-s, c);
            (axis.0 * dir.1 - axis.1 * dir.0).abs()
        };
        score(b).total_cmp(&score(a)).then_with(|| a.cmp(b))
    });

    let mut plans = 0usize;
    let mut best: Option<(f64, Scenario, Path3D)> = None;
    for theta in thetas {
        for dy in spread(6) {
            for dx in spread(6) {
                let pose = Pose::new(t_star.x + dx, t_star.y + dy, theta);
                let candidate = match scenario.with_object_pose(ramp_id, pose) {
                    Ok(s) => s,
                    Err(_) => continue,
                };
                let ramp = candidate.object(ramp_id).unwrap();
                let covered = ramp
                    .covered_cells(k)
                    .into_iter()
                    .filter(|p| candidate.trace_ground_at(*p))
                    .count();
                if covered < 3 {
                    continue;
                }
                if let Some(ref sides) = sides {
                    if !sides.feet_join(&ramp.feet(k)) {
                        continue;
                    }
                }
                if let Some(path) = candidate.plan_circuit(label) {
                    let better = match &best {
                        Some((c, _, _)) => path.cost < *c - 1e-12,
                        None => true,
                    };
                    if better {
                        best = Some((path.cost, candidate, path));
                    }
                }
                plans += 1;
                if plans >= max_plans {
                    return best.map(|(_, s, p)| (s, p));
                }
            }
        }
    }
    best.map(|(_, s, p)| (s, p))
}

/// The two ground components a circuit's endpoints fall into when they are
/// separated (by a committed trace or an unbridged zone). A bridging ramp's
/// feet must join exactly these two sides; anything else cannot open a
/// crossing and is filtered before planning.
pub(crate) struct CrossingSides {
    comp: Vec<u32>,
    width: i32,
    side_robot: u32,
    side_source: u32,
}

impl CrossingSides {
    /// Components of the ground walkable for `label`, with every ramp cell
    /// excluded (ground legs never touch decks) and `moving_ramp`'s current
    /// cells freed (it is about to move). Returns `None` when the endpoints
    /// are already connected or either terminal is unusable.
    pub(crate) fn for_circuit(
        scenario: &Scenario,
        moving_ramp: Option<ObjectId>,
        label: CircuitLabel,
    ) -> Option<CrossingSides> {
        let mut base = scenario.clone();
        if let Some(id) = moving_ramp {
            base.objects.retain(|o| o.id != id);
        }
        let surface = base.effective_surface();
        let mut blocked = base.foreign_electrode_mask(label);
        for portal in base.ramp_portals() {
            for p in portal.cells {
                if blocked.in_bounds(p) {
                    blocked.set(p);
                }
            }
        }
        let comp = crate::planner::ground_components(&surface, base.slope(), Some(&blocked));
        let w = base.grid.width_cells as i32;
        let (robot, source) = base.circuit_endpoints(label);
        let side_robot = comp[(robot.y * w + robot.x) as usize];
        let side_source = comp[(source.y * w + source.x) as usize];
        if side_robot == 0 || side_source == 0 || side_robot == side_source {
            return None;
        }
        Some(CrossingSides {
            comp,
            width: w,
            side_robot,
            side_source,
        })
    }

    fn side_of(&self, p: Pos) -> u32 {
        if p.x < 0 || p.y < 0 || p.x >= self.width {
            return 0;
        }
        let idx = (p.y * self.width + p.x) as usize;
        self.comp.get(idx).copied().unwrap_or(0)
    }

    pub(crate) fn feet_join(&self, feet: &[Pos; 2]) -> bool {
        let a = self.side_of(feet[0]);
        let b = self.side_of(feet[1]);
        (a == self.side_robot && b == self.side_source)
            || (a == self.side_source && b == self.side_robot)
    }
}

/// Bounding rectangles of the forbidden zones; the terminal margin strips
/// along the left and right edges are not zones.
pub fn forbidden_zone_rects(scenario: &Scenario) -> Vec<Rect> {
    scenario.zone_rects().to_vec()
}

/// Episode progress.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Rearranging,
    Drawing,
    Done,
}

/// A running episode: the evolving scenario plus executed actions and any
/// circuits already drawn.
#[derive(Clone, Debug)]
pub struct Episode {
    pub scenario: Scenario,
    pub actions_taken: Vec<PickPlaceAction>,
    pub traces_drawn: Vec<(CircuitLabel, Path3D)>,
    pub phase: Phase,
}

impl Episode {
    pub fn new(scenario: Scenario) -> Episode {
        let phase = if scenario.steps_remaining == 0 {
            Phase::Drawing
        } else {
            Phase::Rearranging
        };
        let mut ep = Episode {
            scenario,
            actions_taken: Vec::new(),
            traces_drawn: Vec::new(),
            phase,
        };
        ep.maybe_commit_early();
        ep
    }

    pub fn inverted(&self) -> bool {
        self.scenario.task.params().inverted
    }

    /// With inverted electrodes, circuit A is connected one step before the
    /// budget runs out (at episode start when the budget is 1).
    fn maybe_commit_early(&mut self) {
        if self.phase == Phase::Rearranging
            && self.inverted()
            && self.scenario.steps_remaining == 1
            && self.scenario.trace(CircuitLabel::A).is_none()
        {
            if let Some(path) = self.scenario.plan_circuit(CircuitLabel::A) {
                self.scenario = self
                    .scenario
                    .commit_trace(CircuitLabel::A, &path)
                    .expect("early commit writes onto a fresh surface");
                self.traces_drawn.push((CircuitLabel::A, path));
            }
        }
    }

    /// Applies a rearrangement action. Errors leave the episode unchanged.
    pub fn step(&self, action: &PickPlaceAction) -> Result<Episode, WorldError> {
        assert_eq!(self.phase, Phase::Rearranging, "step after rearranging ended");
        let scenario = self.scenario.apply_action(action)?;
        let mut next = Episode {
            scenario,
            actions_taken: {
                let mut v = self.actions_taken.clone();
                v.push(*action);
                v
            },
            traces_drawn: self.traces_drawn.clone(),
            phase: self.phase,
        };
        next.maybe_commit_early();
        if next.scenario.steps_remaining == 0 {
            next.phase = Phase::Drawing;
        }
        Ok(next)
    }

    /// Plans and draws every remaining circuit on the final surface and
    /// scores the episode. Pure: calling it twice yields identical results.
    pub fn finish(&self, params: &RewardParams) -> EpisodeResult {
        let mut scenario = self.scenario.clone();
        let mut traces = self.traces_drawn.clone();
        let labels: &[CircuitLabel] = if self.inverted() {
            &CircuitLabel::BOTH
        } else {
            &[CircuitLabel::A]
        };
        for &label in labels {
            if traces.iter().any(|(l, _)| *l == label) {
                continue;
            }
            if let Some(path) = scenario.plan_circuit(label) {
                scenario = scenario
                    .commit_trace(label, &path)
                    .expect("planner routes avoid existing traces");
                traces.push((label, path));
            }
        }
        let cost_of = |label: CircuitLabel| -> Option<f64> {
            traces
                .iter()
                .find(|(l, _)| *l == label)
                .map(|(_, p)| p.cost)
        };
        let breakdown = total_reward(
            cost_of(CircuitLabel::A),
            mincost(&scenario, CircuitLabel::A),
            cost_of(CircuitLabel::B),
            mincost(&scenario, CircuitLabel::B),
            params,
        );
        EpisodeResult {
            final_scenario: scenario,
            actions_taken: self.actions_taken.clone(),
            traces,
            breakdown,
            phase: Phase::Done,
        }
    }
}

/// Outcome of a finished episode.
#[derive(Clone, Debug)]
pub struct EpisodeResult {
    pub final_scenario: Scenario,
    pub actions_taken: Vec<PickPlaceAction>,
    pub traces: Vec<(CircuitLabel, Path3D)>,
    pub breakdown: RewardBreakdown,
    pub phase: Phase,
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_names_round_trip() {
        for k in TaskKind::ALL {
            assert_eq!(TaskKind::from_name(k.name()), Some(k));
        }
        assert_eq!(
            TaskKind::RemoveObstaclePlusBridge.name(),
            "remove-obstacle+bridge-forbidden-zone"
        );
        assert!(TaskKind::from_name("no-such-task").is_none());
    }

    #[test]
    fn roster_matches_table() {
        let p = TaskKind::RemoveObstacles.params();
        assert_eq!((p.obstacles, p.zones, p.inverted), (3, 0, false));
        let p = TaskKind::AllInOne.params();
        assert_eq!((p.obstacles, p.zones, p.inverted), (2, 1, true));
        assert_eq!(p.ramps, 1);
        let p = TaskKind::DrawAboveCircuit.params();
        assert_eq!((p.obstacles, p.zones, p.ramps, p.inverted), (0, 0, 1, true));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(TaskKind::RemoveObstacle, 42).unwrap();
        let b = generate(TaskKind::RemoveObstacle, 42).unwrap();
        assert_eq!(a, b);
        let c = generate(TaskKind::RemoveObstacle, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generated_counts_match_roster() {
        for (kind, seed) in [
            (TaskKind::RemoveObstacles, 7u64),
            (TaskKind::AllInOne, 11),
            (TaskKind::BridgeForbiddenZone, 3),
        ] {
            let s = generate(kind, seed).unwrap();
            let p = kind.params();
            let ramps = s.objects.iter().filter(|o| o.kind.is_ramp()).count() as u32;
            let obstacles = s.objects.len() as u32 - ramps;
            assert_eq!(ramps, p.ramps, "{kind:?}");
            assert_eq!(obstacles, p.obstacles + p.distractors, "{kind:?}");
            assert_eq!(s.step_budget, s.objects.len() as u32);
            let zones = forbidden_zone_rects(&s).len() as u32;
            assert_eq!(zones, p.zones, "{kind:?}");
            let (ra, sa) = s.circuit_endpoints(CircuitLabel::A);
            if p.inverted {
                assert_ne!(ra.y, sa.y);
            } else {
                assert_eq!(ra.y, sa.y);
            }
        }
    }

    #[test]
    fn zone_count_override() {
        let s = generate_with(
            TaskKind::BridgeForbiddenZones,
            5,
            &GenOptions {
                zone_count: Some(2),
            },
        )
        .unwrap();
        assert_eq!(forbidden_zone_rects(&s).len(), 2);
        assert_eq!(
            s.objects.iter().filter(|o| o.kind.is_ramp()).count(),
            2
        );
    }

    #[test]
    fn draw_above_commits_a_at_start() {
        let s = generate(TaskKind::DrawAboveCircuit, 1).unwrap();
        assert_eq!(s.step_budget, 1);
        let ep = Episode::new(s);
        assert_eq!(ep.phase, Phase::Rearranging);
        assert_eq!(ep.traces_drawn.len(), 1);
        assert_eq!(ep.traces_drawn[0].0, CircuitLabel::A);
        // A starts on a clean geodesic.
        let mc = mincost(&ep.scenario, CircuitLabel::A);
        assert!((ep.traces_drawn[0].1.cost - mc).abs() <= 1e-9);
    }

    #[test]
    fn non_inverted_episode_draws_nothing_early() {
        let s = generate(TaskKind::RemoveObstacle, 2).unwrap();
        let ep = Episode::new(s);
        assert!(ep.traces_drawn.is_empty());
        // One legal action: relocate the obstacle in place.
        let obj = &ep.scenario.objects[0];
        let action = PickPlaceAction {
            pick: obj.pose,
            place: obj.pose,
        };
        let ep2 = ep.step(&action).unwrap();
        assert_eq!(ep2.phase, Phase::Drawing);
        assert!(ep2.traces_drawn.is_empty());
        let r = ep2.finish(&TaskKind::RemoveObstacle.reward_params());
        assert!(r.breakdown.total > 0.0);
        // finish is idempotent.
        let r2 = ep2.finish(&TaskKind::RemoveObstacle.reward_params());
        assert_eq!(r.breakdown, r2.breakdown);
    }

    #[test]
    fn error_step_leaves_episode_usable() {
        let s = generate(TaskKind::RemoveObstacle, 3).unwrap();
        let ep = Episode::new(s);
        let bad = PickPlaceAction {
            pick: Pose::new(1, 1, 0),
            place: Pose::new(100, 100, 0),
        };
        assert_eq!(ep.step(&bad).unwrap_err(), WorldError::NothingToPick);
        assert_eq!(ep.actions_taken.len(), 0);
        assert_eq!(ep.scenario.steps_remaining, ep.scenario.step_budget);
    }

    #[test]
    fn spread_order() {
        let v: Vec<i32> = spread(2).collect();
        assert_eq!(v, vec![0, -1, 1, -2, 2]);
    }
}
