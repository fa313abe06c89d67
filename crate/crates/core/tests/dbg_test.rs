use junction_core::conic::*;
use junction_core::dynamics::*;
use junction_core::model::*;
use junction_core::rmpc::*;
use junction_core::tubes::*;

#[test]
fn dbg_free_step() {
    let params = VehicleParams::default();
    let dynamics = discretize(&params, 2.0);
    let geometry = build_grid(150.0, 10.0, 4.0, 2.0).unwrap();
    let gains = design_gains(&dynamics, [0.5, 0.5], [0.6, 0.6]).unwrap();
    let tubes = design_tubes(&gains, &DisturbanceBounds::zero(), 1e-3);
    let cfg = ControllerConfig {
        params,
        coeffs: Default::default(),
        dynamics,
        geometry,
        weights: AugmentedWeights { time: 2500.0, ..Default::default() },
        horizon: 15,
        time_gap: 1.0,
        terminal_speed: Some(10.0),
        gains,
        tubes,
        retry: RetryPolicy::default(),
        solver: SolverSettings::default(),
        nominal_only: false,
    };
    let x0 = SpatialState { energy: 60000.0, time: 0.0 };
    let entry: Vec<SpatialState> =
        (0..83).map(|i| SpatialState { energy: 60000.0, time: 0.2 * i as f64 }).collect();
    let ctrl = Controller::new(cfg, x0, &entry);
    let (prog, _, _) = ctrl.build_program(&StepContext::free(), 0.1);
    let sol = prog.solve(&ctrl.cfg.solver);
    eprintln!("status {:?} iters {} kkt {:e} obj {}", sol.status, sol.iterations, sol.kkt_residual, sol.objective);
}
