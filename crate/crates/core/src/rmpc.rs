//! Lower-level tube-based robust model predictive controller.
//!
//! Each vehicle re-solves a receding-horizon conic program over its own
//! spatial grid with tightened constraint sets, anchored at the observer
//! state. Merging-zone coupling against the relevant preceding vehicles
//! enters as squared-hinge penalties while the zone is beyond the horizon
//! and as hard ordering constraints once it is inside; rear-end coupling is
//! a per-index time-gap constraint against the lane predecessor's committed
//! nominal times. Infeasible solves retry with a geometrically shrinking
//! speed floor.

use alloc::vec::Vec;

use crate::conic::{ConicProgram, LinExpr, SolveStatus, SolverSettings};
use crate::dynamics::{
    energy_of, speed_of, DiscreteDynamics, IntersectionGeometry, NominalInput, PlanInput,
    SpatialState,
};
use crate::model::{split_wheel_force, PowertrainCoeffs, VehicleParams};
use crate::scheduler::{add_stage_structure, add_terminal_window, declare_grid, Relation};
use crate::tubes::{feedback_control, observer_update, GainPair, TubeSet};

#[derive(Clone, Debug, PartialEq)]
pub enum RmpcError {
    /// Every speed-floor retry failed; the scenario cannot continue.
    Exhausted { attempts: usize, last: SolveStatus },
}

impl core::fmt::Display for RmpcError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            RmpcError::Exhausted { attempts, last } => {
                write!(f, "speed-floor fallback exhausted after {attempts} attempts ({last:?})")
            }
        }
    }
}

impl core::error::Error for RmpcError {}

/// Objective weights and merging-zone shaping parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentedWeights {
    /// Energy weight W1.
    pub energy: f64,
    /// Time weight W2.
    pub time: f64,
    /// Lateral hinge weight W3.
    pub lateral_hinge: f64,
    /// Opposite hinge weight W4.
    pub opposite_hinge: f64,
    /// Terminal slack weight W5.
    pub terminal_slack: f64,
    /// Lateral anticipation gap (s).
    pub lateral_gap: f64,
    /// Opposite anticipation gap (s).
    pub opposite_gap: f64,
}

impl Default for AugmentedWeights {
    fn default() -> Self {
        AugmentedWeights {
            energy: 1.0,
            time: 2500.0,
            lateral_hinge: 1e3,
            opposite_hinge: 1e3,
            terminal_slack: 1e2,
            lateral_gap: 0.4,
            opposite_gap: 0.4,
        }
    }
}

/// Retry policy of the speed-floor fallback.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    /// Multiplier applied to v_min per retry, in (0, 1).
    pub shrink: f64,
    /// Retries after the nominal attempt.
    pub max_retries: usize,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { shrink: 0.5, max_retries: 8 }
    }
}

/// One published nominal window: states at grid indices base..=base+N.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanWindow {
    pub base: usize,
    pub states: Vec<SpatialState>,
}

impl PlanWindow {
    pub fn end_index(&self) -> usize {
        self.base + self.states.len() - 1
    }

    pub fn state_at(&self, index: usize) -> Option<SpatialState> {
        index.checked_sub(self.base).and_then(|o| self.states.get(o)).copied()
    }
}

/// Read-only view of another vehicle's committed information.
#[derive(Clone, Copy, Debug)]
pub struct NeighborView<'a> {
    /// Committed nominal times over grid indices 0..=covered.
    pub committed_times: &'a [f64],
    /// Committed nominal energies over the same range.
    pub committed_energies: &'a [f64],
    /// Largest grid index any published window has reached.
    pub covered: usize,
    /// The vehicle's current grid index aligned to the reader's clock.
    pub current_index: usize,
    /// Combined-tube time half-width of that vehicle.
    pub time_margin: f64,
}

/// Largest index whose committed time does not exceed `own_time`; 0 when
/// the other vehicle's records start later than `own_time`.
pub fn align_predecessor(own_time: f64, times: &[f64]) -> usize {
    let mut k = 0;
    for (i, &t) in times.iter().enumerate() {
        if t <= own_time {
            k = i;
        } else {
            break;
        }
    }
    k
}

/// Worst-case slope of the energy state used by the conservative tail:
/// full braking against rolling and peak drag.
pub fn min_energy_slope(p: &VehicleParams) -> f64 {
    p.wheel_force_min() - p.rolling_force() - p.drag_coeff * p.v_max * p.v_max
}

/// Conservative (slowest) arrival-time estimate `steps_beyond` indices past
/// a window end: the vehicle decelerates at the worst energy slope, clamped
/// at the speed floor.
pub fn conservative_tail_time(
    end_time: f64,
    end_energy: f64,
    steps_beyond: usize,
    p: &VehicleParams,
    ds: f64,
) -> f64 {
    let slope = min_energy_slope(p);
    let mut t = end_time;
    for beta in 1..=steps_beyond {
        let energy = end_energy + beta as f64 * slope * ds;
        let v = if energy <= energy_of(p.v_min, p.mass) {
            p.v_min
        } else {
            speed_of(energy, p.mass).unwrap_or(p.v_min).max(p.v_min)
        };
        t += ds / v;
    }
    t
}

/// Constant-speed extrapolation past a window end, used by the soft
/// anticipation terms.
pub fn constant_speed_tail_time(
    end_time: f64,
    end_energy: f64,
    steps_beyond: usize,
    p: &VehicleParams,
    ds: f64,
) -> f64 {
    let v = speed_of(end_energy.max(0.0), p.mass).unwrap_or(p.v_min).max(p.v_min);
    end_time + steps_beyond as f64 * ds / v
}

impl<'a> NeighborView<'a> {
    /// Committed time at `index`, extended by the conservative tail.
    pub fn time_at_conservative(&self, index: usize, p: &VehicleParams, ds: f64) -> f64 {
        if index <= self.covered {
            self.committed_times[index]
        } else {
            conservative_tail_time(
                self.committed_times[self.covered],
                self.committed_energies[self.covered],
                index - self.covered,
                p,
                ds,
            )
        }
    }

    /// Committed time at `index`, extended at constant end speed.
    pub fn time_at_constant_speed(&self, index: usize, p: &VehicleParams, ds: f64) -> f64 {
        if index <= self.covered {
            self.committed_times[index]
        } else {
            constant_speed_tail_time(
                self.committed_times[self.covered],
                self.committed_energies[self.covered],
                index - self.covered,
                p,
                ds,
            )
        }
    }
}

/// Inputs of one receding-horizon solve.
pub struct StepContext<'a> {
    /// Same-lane predecessor, if any.
    pub lane_predecessor: Option<NeighborView<'a>>,
    /// Latest preceding conflicting vehicle per crossing lane, with the
    /// relation class (perpendicular or opposite).
    pub mz_targets: Vec<(NeighborView<'a>, Relation)>,
}

impl StepContext<'_> {
    pub fn free() -> Self {
        StepContext { lane_predecessor: None, mz_targets: Vec::new() }
    }
}

/// Static controller configuration.
#[derive(Clone, Debug)]
pub struct ControllerConfig {
    pub params: VehicleParams,
    pub coeffs: PowertrainCoeffs,
    pub dynamics: DiscreteDynamics,
    pub geometry: IntersectionGeometry,
    pub weights: AugmentedWeights,
    /// Prediction horizon N_p (shrinks near the grid end).
    pub horizon: usize,
    /// Untightened rear-end gap (s).
    pub time_gap: f64,
    pub terminal_speed: Option<f64>,
    pub gains: GainPair,
    pub tubes: TubeSet,
    pub retry: RetryPolicy,
    pub solver: SolverSettings,
    /// Disables tightening and feedback: the nominal baseline controller.
    pub nominal_only: bool,
}

impl ControllerConfig {
    fn tightened_energy_window(&self, v_min: f64) -> (f64, f64) {
        let s = if self.nominal_only { 0.0 } else { self.tubes.combined.half[0] };
        (energy_of(v_min, self.params.mass) + s, self.params.energy_max() - s)
    }

    fn tightened_force_window(&self) -> (f64, f64) {
        let k = if self.nominal_only {
            0.0
        } else {
            crate::math::abs(self.gains.feedback_gain[0]) * self.tubes.tracking.half[0]
        };
        (self.params.wheel_force_min() + k, self.params.wheel_force_max() - k)
    }

    fn own_time_margin(&self) -> f64 {
        if self.nominal_only {
            0.0
        } else {
            self.tubes.combined.half[1]
        }
    }
}

/// Structural summary of one built program, used by tests and diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProgramInfo {
    pub horizon: usize,
    pub rear_end_rows: usize,
    pub lateral_hinges: usize,
    pub opposite_hinges: usize,
    /// Horizon offsets (j with the constraint at grid index k+j) of hard
    /// lateral constraints.
    pub hard_lateral_at: Vec<usize>,
    pub hard_opposite_at: Vec<usize>,
    pub terminal_window: bool,
}

/// What `step` applied and published.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// Total wheel force after feedback and clamping (N).
    pub wheel_force: f64,
    /// Motor share of the wheel force (N).
    pub motor_force: f64,
    /// Friction-brake share (N, <= 0).
    pub brake_force: f64,
    /// Applied pace (s/m).
    pub pace: f64,
    /// Nominal window to publish.
    pub window: PlanWindow,
    pub solve_status: SolveStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub objective: f64,
    /// Speed-floor retries that were needed (0 = none).
    pub fallback_level: usize,
    /// Relative pace-relaxation residual over the solved window.
    pub tightness: f64,
    /// Whether the solved window demands friction braking anywhere.
    pub friction_saturated: bool,
}

/// Relative tightness of the pace relaxation over a plan:
/// `max_k |zeta_k * v_k - 1|`.
pub fn tightness_residual(states: &[SpatialState], inputs: &[PlanInput], mass: f64) -> f64 {
    let mut r = 0.0f64;
    for (k, u) in inputs.iter().enumerate() {
        if let Ok(v) = speed_of(states[k].energy, mass) {
            r = r.max(crate::math::abs(u.pace * v - 1.0));
        }
    }
    r
}

/// One per-vehicle controller instance.
pub struct Controller {
    pub cfg: ControllerConfig,
    /// Current grid index k.
    pub grid_index: usize,
    /// Observer state x_hat(k).
    pub observer: SpatialState,
    /// Most recent nominal window (base = previous k after a step).
    pub last_window: PlanWindow,
}

impl Controller {
    /// Starts a controller at grid index 0 with `x_hat(0) = y(0)` and the
    /// entry plan's first window as the initial nominal.
    pub fn new(cfg: ControllerConfig, first_measurement: SpatialState, entry_states: &[SpatialState]) -> Self {
        let len = cfg.horizon.min(entry_states.len() - 1);
        let window = PlanWindow { base: 0, states: entry_states[..=len].to_vec() };
        Controller { cfg, grid_index: 0, observer: first_measurement, last_window: window }
    }

    /// The previous window's prediction for grid index `k`, used for the
    /// tracking-error audit.
    pub fn predicted_state(&self, k: usize) -> Option<SpatialState> {
        self.last_window.state_at(k)
    }

    /// Builds the horizon program at the current state. Exposed for tests;
    /// `step` drives it.
    pub fn build_program(
        &self,
        ctx: &StepContext<'_>,
        v_min: f64,
    ) -> (ConicProgram, crate::scheduler::GridVars, ProgramInfo) {
        build_horizon_program(&self.cfg, self.grid_index, self.observer, ctx, v_min)
    }

    /// Solves the horizon problem, applies feedback and clamping, updates
    /// the observer with the current measurement, and advances the index.
    ///
    /// The speed-floor fallback retries infeasible solves with
    /// `v_min <- shrink * v_min` up to the retry cap; the configured floor
    /// is restored for subsequent steps automatically.
    pub fn step(
        &mut self,
        ctx: &StepContext<'_>,
        measurement: SpatialState,
    ) -> Result<StepOutcome, RmpcError> {
        debug_assert!(self.grid_index < self.cfg.geometry.total_steps());
        let mut v_min = self.cfg.params.v_min;
        let mut last = SolveStatus::Infeasible;
        let mut outcome = None;
        for level in 0..=self.cfg.retry.max_retries {
            let (prog, vars, _info) = self.build_program(ctx, v_min);
            let sol = prog.solve(&self.cfg.solver);
            if sol.status == SolveStatus::Optimal {
                outcome = Some((sol, vars, level));
                break;
            }
            last = sol.status;
            v_min *= self.cfg.retry.shrink;
        }
        let (sol, vars, fallback_level) = outcome.ok_or(RmpcError::Exhausted {
            attempts: self.cfg.retry.max_retries + 1,
            last,
        })?;

        let h = vars.force.len();
        let states: Vec<SpatialState> = (0..=h)
            .map(|j| SpatialState {
                energy: sol.value(vars.energy[j]),
                time: sol.value(vars.time[j]),
            })
            .collect();
        let inputs: Vec<PlanInput> = (0..h)
            .map(|j| PlanInput {
                wheel_force: sol.value(vars.force[j]),
                pace: sol.value(vars.pace[j]),
            })
            .collect();

        let tightness = tightness_residual(&states, &inputs, self.cfg.params.mass);
        let motor_floor = self.cfg.params.motor_force_min();
        let friction_saturated = inputs.iter().any(|u| u.wheel_force < motor_floor - 1e-9);

        // Ancillary feedback around the first nominal input; the program is
        // anchored at the observer state, so the correction vanishes there
        // and acts only through the published-window audit trail.
        let nominal = inputs[0].to_nominal(&self.cfg.params);
        let fed = if self.cfg.nominal_only {
            nominal
        } else {
            feedback_control(&self.cfg.gains, nominal, self.observer, states[0])
        };
        let wheel_force = (fed.net_force + self.cfg.params.rolling_force())
            .clamp(self.cfg.params.wheel_force_min(), self.cfg.params.wheel_force_max());
        let (motor_force, brake_force) =
            split_wheel_force(&self.cfg.params, wheel_force).expect("clamped into window");
        let applied = NominalInput {
            net_force: wheel_force - self.cfg.params.rolling_force(),
            pace: fed.pace,
        };

        // Observer advance with the current measurement, then move on.
        self.observer = if self.cfg.nominal_only {
            // The nominal baseline trusts the raw measurement and propagates it.
            crate::dynamics::propagate(&self.cfg.dynamics, measurement, applied, 0.0)
        } else {
            observer_update(&self.cfg.gains, &self.cfg.dynamics, self.observer, applied, measurement)
        };
        let window = PlanWindow { base: self.grid_index, states };
        self.last_window = window.clone();
        self.grid_index += 1;

        Ok(StepOutcome {
            wheel_force,
            motor_force,
            brake_force,
            pace: applied.pace,
            window,
            solve_status: sol.status,
            iterations: sol.iterations,
            kkt_residual: sol.kkt_residual,
            objective: sol.objective,
            fallback_level,
            tightness,
            friction_saturated,
        })
    }
}

/// Assembles the horizon program: stage structure over the shrunk horizon,
/// rear-end rows, merging-zone hinges or hard rows per target, and the
/// terminal window once the horizon reaches the grid end.
fn build_horizon_program(
    cfg: &ControllerConfig,
    k: usize,
    anchor: SpatialState,
    ctx: &StepContext<'_>,
    v_min: f64,
) -> (ConicProgram, crate::scheduler::GridVars, ProgramInfo) {
    let g = &cfg.geometry;
    let p = &cfg.params;
    let ds = cfg.dynamics.step;
    let total = g.total_steps();
    let a1 = g.merge_entry_index();
    let mz_exit = g.merge_exit_index();
    let body = g.body_steps;
    let merge = g.merge_steps;
    let h = cfg.horizon.min(total - k);

    let mut prog = ConicProgram::new();
    let vars = declare_grid(&mut prog, h, p);
    let mut info = ProgramInfo { horizon: h, ..ProgramInfo::default() };

    prog.add_eq(LinExpr::var(vars.energy[0]), anchor.energy);
    prog.add_eq(LinExpr::var(vars.time[0]), anchor.time);

    add_stage_structure(
        &mut prog,
        &vars,
        p,
        &cfg.coeffs,
        &cfg.dynamics,
        cfg.weights.energy,
        cfg.weights.time,
        cfg.tightened_energy_window(v_min),
        cfg.tightened_force_window(),
        1.0 / v_min,
    );

    let own_margin = cfg.own_time_margin();

    if let Some(pred) = &ctx.lane_predecessor {
        let gap = cfg.time_gap + own_margin + pred_margin(cfg, pred);
        for j in 0..h {
            let q = k + j + 1;
            if q + body > total {
                break;
            }
            let bound = pred.time_at_conservative(q + body, p, ds) + gap;
            prog.add_ineq_ge(LinExpr::var(vars.time[j + 1]), bound);
            info.rear_end_rows += 1;
        }
    }

    for (view, rel) in &ctx.mz_targets {
        let margin = own_margin + pred_margin(cfg, view);
        match rel {
            Relation::Perpendicular => {
                if k + h < a1 {
                    // Anticipation applies while the other vehicle has a
                    // comparable remaining distance.
                    if view.current_index.saturating_sub(k) <= merge + body {
                        let t_hat = view.time_at_constant_speed(k + merge + body, p, ds);
                        prog.add_hinge_square(
                            LinExpr::var(vars.time[h]).plus_const(-t_hat),
                            cfg.weights.lateral_gap,
                            cfg.weights.lateral_hinge,
                        );
                        info.lateral_hinges += 1;
                    }
                } else if k < a1 {
                    // Enter only after the target has fully left the zone.
                    let t_hat = view.time_at_conservative(total, p, ds);
                    prog.add_ineq_ge(LinExpr::var(vars.time[a1 - k]), t_hat + margin);
                    info.hard_lateral_at.push(a1 - k);
                }
            }
            Relation::Opposite => {
                if k + h < a1 {
                    let t_hat = view.time_at_constant_speed(k + h, p, ds);
                    prog.add_hinge_square(
                        LinExpr::var(vars.time[h]).plus_const(-t_hat),
                        cfg.weights.opposite_gap,
                        cfg.weights.opposite_hinge,
                    );
                    info.opposite_hinges += 1;
                } else if k < mz_exit {
                    // Exit ordering at the merging-zone exit; staged at the
                    // horizon end while the exit index is beyond it.
                    let q = mz_exit.min(k + h);
                    let t_hat = view.time_at_conservative(q, p, ds);
                    prog.add_ineq_ge(
                        LinExpr::var(vars.time[q - k]),
                        t_hat + margin + 1e-6,
                    );
                    info.hard_opposite_at.push(q - k);
                }
            }
            Relation::Same => unreachable!("lane predecessor handled separately"),
        }
    }

    if k + h == total {
        if let Some(v_f) = cfg.terminal_speed {
            add_terminal_window(
                &mut prog,
                vars.energy[h],
                p.mass,
                v_f,
                cfg.weights.terminal_slack,
            );
            info.terminal_window = true;
        }
    }

    (prog, vars, info)
}

fn pred_margin(cfg: &ControllerConfig, view: &NeighborView<'_>) -> f64 {
    if cfg.nominal_only {
        0.0
    } else {
        view.time_margin
    }
}
