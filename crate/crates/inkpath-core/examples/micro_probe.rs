use inkpath_core::scenario::CircuitLabel;
use inkpath_core::task::{generate, Episode, TaskKind};

fn main() {
    let scenario = generate(TaskKind::BridgeForbiddenZones, 1000).unwrap();
    let ep = Episode::new(scenario.clone());

    // Raw planning cost on the initial (unbridged) board.
    let t0 = std::time::Instant::now();
    for _ in 0..100 {
        std::hint::black_box(scenario.plan_circuit(CircuitLabel::A));
    }
    println!("plan A unbridged: {:.3}ms", t0.elapsed().as_secs_f64() * 10.0);

    let t0 = std::time::Instant::now();
    for _ in 0..100 {
        std::hint::black_box(scenario.effective_surface());
    }
    println!("effective_surface: {:.3}ms", t0.elapsed().as_secs_f64() * 10.0);

    // A bridged successor: apply the oracle's chosen first action.
    let grid = inkpath_core::policy::ActionGrid::default();
    let oracle = inkpath_core::policy::Oracle::for_task(TaskKind::BridgeForbiddenZones);
    let action = oracle.select(&ep, &grid).unwrap();
    let ep2 = ep.step(&action).unwrap();
    let t0 = std::time::Instant::now();
    for _ in 0..100 {
        std::hint::black_box(ep2.scenario.plan_circuit(CircuitLabel::A));
    }
    println!("plan A bridged: {:.3}ms", t0.elapsed().as_secs_f64() * 10.0);

    // Full candidate evaluation cost.
    let t0 = std::time::Instant::now();
    for _ in 0..20 {
        std::hint::black_box(oracle.evaluate_candidate(&ep, &grid, &action));
    }
    println!("evaluate_candidate(bridge): {:.3}ms", t0.elapsed().as_secs_f64() * 50.0);

    let t0 = std::time::Instant::now();
    for _ in 0..20 {
        std::hint::black_box(ep2.finish(&oracle.reward_params));
    }
    println!("finish(bridged): {:.3}ms", t0.elapsed().as_secs_f64() * 50.0);
}
