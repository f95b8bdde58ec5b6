use inkpath_core::policy::{evaluate, ActionGrid, Oracle, PolicyKind};
use inkpath_core::task::{GenOptions, TaskKind};

fn main() {
    let grid = ActionGrid::default();
    for kind in TaskKind::ALL {
        let oracle = Oracle::for_task(kind);
        let t0 = std::time::Instant::now();
        let s = evaluate(kind, PolicyKind::Oracle, 3, 1000, &grid, &oracle, &GenOptions::default()).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!("{:<42} mean={:.4} min={:.4} {:.2}s/ep", kind.name(), s.mean, s.min, dt / 3.0);
    }
}
