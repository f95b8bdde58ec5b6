use inkpath_core::policy::{enumerate_actions, ActionGrid, Oracle};
use inkpath_core::scenario::CircuitLabel;
use inkpath_core::task::{generate, Episode, Phase, TaskKind};

fn main() {
    let scenario = generate(TaskKind::BridgeForbiddenZones, 1000).unwrap();
    let ep = Episode::new(scenario);
    let grid = ActionGrid::default();
    let oracle = Oracle::for_task(TaskKind::BridgeForbiddenZones);
    let action = oracle.select(&ep, &grid).unwrap();
    println!("chosen: {action:?}");

    // Successor state after the bridging action.
    let ep2 = ep.step(&action).unwrap();
    assert_eq!(ep2.phase, Phase::Rearranging);

    let t0 = std::time::Instant::now();
    for _ in 0..50 {
        std::hint::black_box(ep2.scenario.plan_circuits(&[CircuitLabel::A]));
    }
    println!("plan_circuits(A) bridged: {:.3}ms", t0.elapsed().as_secs_f64() * 20.0);

    let t0 = std::time::Instant::now();
    for _ in 0..50 {
        std::hint::black_box(ep2.finish(&oracle.reward_params));
    }
    println!("finish from state1: {:.3}ms", t0.elapsed().as_secs_f64() * 20.0);

    let t0 = std::time::Instant::now();
    for _ in 0..50 {
        std::hint::black_box(ep.step(&action).unwrap());
    }
    println!("episode.step: {:.3}ms", t0.elapsed().as_secs_f64() * 20.0);

    // Candidate list timing for enumerate itself.
    let t0 = std::time::Instant::now();
    let c = enumerate_actions(&ep.scenario, &grid);
    println!("enumerate {} cands: {:.3}ms", c.len(), t0.elapsed().as_secs_f64() * 1000.0);
}
