//! Deterministic, headless simulator and planner for conductive-ink circuit
//! drawing on a heightmap workspace.
//!
//! Agents rearrange obstacles and bridge-like ramps with discretized
//! pick-and-place actions, then a slope-gated double-layer A* planner routes
//! circuits between electrode pairs; rewards follow an exponential
//! path-cost curve and a search-based oracle policy generates and filters
//! demonstrations.

pub mod grid;
pub mod io;
pub mod object;
pub mod observe;
pub mod planner;
pub mod policy;
pub mod render;
pub mod reward;
pub mod scenario;
pub mod task;

pub use grid::{CellMask, Grid, GridSpec, Pos, Rect};
pub use object::{Footprint, ObjectId, ObjectInstance, ObjectKind, ObstacleShape, Pose};
pub use planner::{
    grid_astar, heuristic_3d, octile, plan_circuit, slope_gate, step_cost, Path3D, PathCell,
    PlanError, RampPortal, SlopeClass, SlopeParams,
};
pub use reward::{
    mincost, passes_filter, reward_one_circuit, total_reward, RewardBreakdown, RewardError,
    RewardParams,
};
pub use scenario::{
    Cell, CircuitLabel, Electrode, ElectrodeId, Level, PickPlaceAction, Scenario, SurfaceCell,
    SurfaceMap, Trace, WorldError,
};
pub use task::{
    generate, generate_with, Episode, EpisodeResult, GenError, GenOptions, Phase, TaskKind,
    TaskParams,
};
