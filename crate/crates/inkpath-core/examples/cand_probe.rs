use inkpath_core::policy::{enumerate_actions, ActionGrid, Oracle};
use inkpath_core::task::{generate, Episode, Phase, TaskKind};

fn main() {
    let scenario = generate(TaskKind::AllInOne, 5).unwrap();
    let ep = Episode::new(scenario);
    let grid = ActionGrid::with_stride(16);
    let oracle = Oracle::for_task(TaskKind::AllInOne);
    let candidates = enumerate_actions(&ep.scenario, &grid);
    let c = &candidates[505];
    println!("candidate 505: {c:?}  direct={}", oracle.evaluate_candidate(&ep, &grid, c));

    // Continue the episode with the oracle after applying 505 and report
    // the final breakdown (close to what the scripted rollout sees).
    let mut e = ep.step(c).unwrap();
    while e.phase == Phase::Rearranging {
        let a = oracle.select(&e, &grid).unwrap();
        println!("  next action: {a:?}");
        e = e.step(&a).unwrap();
        println!("  traces now: {}", e.scenario.traces.len());
    }
    let r = e.finish(&oracle.reward_params);
    println!("  final: {:?}", r.breakdown);
    for (l, p) in &r.traces {
        println!("  circuit {l}: cost {:.3}", p.cost);
    }
    // Where is the ramp at the end?
    for o in &r.final_scenario.objects {
        println!("  object {:?} ramp={} at {:?}", o.id, o.kind.is_ramp(), o.pose);
    }
}
