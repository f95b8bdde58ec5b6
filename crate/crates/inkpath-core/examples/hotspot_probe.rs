use inkpath_core::policy::{enumerate_actions, ActionGrid, Oracle};
use inkpath_core::task::{generate, Episode, TaskKind};

fn main() {
    for (kind, seed) in [
        (TaskKind::BridgeForbiddenZones, 1000u64),
        (TaskKind::RemoveObstaclePlusBridge, 1000),
        (TaskKind::AllInOne, 1000),
        (TaskKind::BridgeForbiddenZone, 1000),
    ] {
        let scenario = generate(kind, seed).unwrap();
        let mut ep = Episode::new(scenario);
        let grid = ActionGrid::default();
        let oracle = Oracle::for_task(kind);
        let mut step = 0;
        while ep.phase == inkpath_core::task::Phase::Rearranging {
            let n_cand = enumerate_actions(&ep.scenario, &grid).len();
            let t0 = std::time::Instant::now();
            let action = oracle.select(&ep, &grid).unwrap();
            let dt = t0.elapsed().as_secs_f64();
            println!(
                "{:<40} step {} cands={} select={:.2}s",
                kind.name(), step, n_cand, dt
            );
            ep = ep.step(&action).unwrap();
            step += 1;
        }
    }
}
