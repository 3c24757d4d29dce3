use atomic_routing::design::{design_loop, verify_design, DesignConfig};
use atomic_routing::game::path_cost;
use atomic_routing::scenario::Scenario;
use atomic_routing::sensitivity::{path_to_target, tracking_objective};
use atomic_routing::smooth_eq::HomotopySchedule;

fn config(lambda: f64, iters: usize) -> DesignConfig {
    DesignConfig {
        alpha: 0.005,
        lambda,
        delta: 0.1,
        epsilon: 0.01,
        rho: 0.5,
        max_outer_iters: iters,
        ..DesignConfig::default()
    }
}

#[test]
fn small_grid_reaches_desired_paths() {
    let built = Scenario::TwoPlayer3x3.build(0.1, 0.5).unwrap();
    let target = path_to_target(&built.game, &built.desired_links()).unwrap();
    let objective = tracking_objective(&built.game, target.clone()).unwrap();
    let out = design_loop(&built.game, &objective, &config(0.01, 20)).unwrap();
    assert!(out.converged);
    let first = out.trace.first().unwrap().psi_bar;
    let last = out.trace.last().unwrap().psi_bar;
    assert!(first > 1.0 && last < 1e-6, "{first} -> {last}");

    let designed = built.game.with_costs(out.costs(&built.game).unwrap()).unwrap();
    let check = verify_design(&designed, &objective, &target, &HomotopySchedule::default()).unwrap();
    assert!(check.path_match && check.nash_gap <= 1e-2);
    let x = &check.reference.solution.x;
    for (i, (want, old)) in built.desired_links().iter().zip(built.straight_links()).enumerate() {
        assert!(path_cost(&designed, x, i, want).unwrap() < path_cost(&designed, x, i, &old).unwrap());
    }
}

#[test]
fn heavy_smoothing_leaves_residual_error() {
    let built = Scenario::TwoPlayer3x3.build(0.1, 0.5).unwrap();
    let target = path_to_target(&built.game, &built.desired_links()).unwrap();
    let objective = tracking_objective(&built.game, target).unwrap();
    let sharp = design_loop(&built.game, &objective, &config(0.01, 20)).unwrap();
    let blurred = design_loop(&built.game, &objective, &config(1.0, 20)).unwrap();
    let floor = sharp.trace.last().unwrap().psi_bar;
    assert!(blurred.trace.records.iter().all(|r| r.psi_bar > floor));
}

#[test]
fn iteration_cap_bounds_trace() {
    let built = Scenario::FourPlayer5x5.build(0.1, 0.5).unwrap();
    let target = path_to_target(&built.game, &built.desired_links()).unwrap();
    let objective = tracking_objective(&built.game, target).unwrap();
    let out = design_loop(&built.game, &objective, &config(0.01, 2)).unwrap();
    assert_eq!(out.trace.len(), 2);
    assert!(!out.converged);
    assert!(out.trace.last().unwrap().psi_bar < out.trace.first().unwrap().psi_bar);
}
