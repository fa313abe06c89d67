//! Upper-level crossing-order scheduler.
//!
//! Every vehicle entering the control zone solves a solo full-grid optimal
//! control problem (no lateral constraints) for its ideal merging-zone entry
//! and exit times, then inserts itself into the crossing order by comparing
//! against the last vehicle of the previous order: entry times when the two
//! could collide laterally, exit times otherwise. Only the tail pair can
//! swap, so the update is local and same-lane FIFO is preserved.

use alloc::vec;
use alloc::vec::Vec;

use crate::conic::{ConicProgram, LinExpr, SolveStatus, SolverSettings, Var};
use crate::dynamics::{energy_of, DiscreteDynamics, IntersectionGeometry, PlanInput, SpatialState};
use crate::model::{PowertrainCoeffs, VehicleParams};

#[derive(Clone, Debug, PartialEq)]
pub enum SchedulerError {
    /// The solo problem admits no solution under the current speed floor.
    Infeasible,
    /// The solver gave up without a certificate.
    SolverFailure(SolveStatus),
}

impl core::fmt::Display for SchedulerError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SchedulerError::Infeasible => write!(f, "entry problem infeasible"),
            SchedulerError::SolverFailure(s) => write!(f, "entry problem solve failed: {s:?}"),
        }
    }
}

impl core::error::Error for SchedulerError {}

/// Compass heading of a lane; one lane per heading.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Direction {
    North,
    South,
    East,
    West,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::North,
        Direction::South,
        Direction::East,
        Direction::West,
    ];

    fn axis(self) -> u8 {
        match self {
            Direction::North | Direction::South => 0,
            Direction::East | Direction::West => 1,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Direction::North => 0,
            Direction::South => 1,
            Direction::East => 2,
            Direction::West => 3,
        }
    }
}

/// How two vehicles can interact inside the intersection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    /// Same heading, same lane: rear-end coupling.
    Same,
    /// Perpendicular headings: paths cross inside the merging zone.
    Perpendicular,
    /// Opposite headings: no physical conflict, ordering only.
    Opposite,
}

pub fn relation(a: Direction, b: Direction) -> Relation {
    if a == b {
        Relation::Same
    } else if a.axis() != b.axis() {
        Relation::Perpendicular
    } else {
        Relation::Opposite
    }
}

/// True iff the two headings can collide laterally in the merging zone.
pub fn lateral_conflict(a: Direction, b: Direction) -> bool {
    relation(a, b) == Relation::Perpendicular
}

/// One control-zone arrival.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArrivalRecord {
    /// Arrival index (order of entry into the control zone).
    pub id: usize,
    pub direction: Direction,
    /// Entry time at the control zone (s).
    pub arrival_time: f64,
    /// Entry speed (m/s), strictly inside the speed window.
    pub arrival_speed: f64,
}

/// Solo optimal plan over the full grid plus its merging-zone timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct EntryPlan {
    /// Nominal states at grid indices 0..=total_steps.
    pub states: Vec<SpatialState>,
    /// Inputs at grid indices 0..total_steps.
    pub inputs: Vec<PlanInput>,
    /// Ideal merging-zone entry time, t at the approach count.
    pub mz_entry_time: f64,
    /// Ideal exit time, t at the last grid index (body fully past).
    pub exit_time: f64,
}

/// Crossing order: a permutation of the arrivals so far.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CrossingOrder {
    pub sequence: Vec<usize>,
}

impl CrossingOrder {
    pub fn empty() -> Self {
        CrossingOrder { sequence: Vec::new() }
    }

    pub fn last(&self) -> Option<usize> {
        self.sequence.last().copied()
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.sequence.iter().position(|&v| v == id)
    }
}

/// Inserts the new arrival per the tail-pair rule: compare entry times when
/// there is lateral collision potential with the last vehicle, exit times
/// otherwise; ties keep first-in-first-out.
pub fn update_order(
    prev: &CrossingOrder,
    new_id: usize,
    new_plan: &EntryPlan,
    last_plan: Option<&EntryPlan>,
    conflict: bool,
) -> CrossingOrder {
    let mut sequence = prev.sequence.clone();
    let swap = match last_plan {
        None => false,
        Some(last) => {
            if conflict {
                new_plan.mz_entry_time < last.mz_entry_time
            } else {
                new_plan.exit_time < last.exit_time
            }
        }
    };
    if swap {
        let last = sequence.pop().expect("swap requires a previous vehicle");
        sequence.push(new_id);
        sequence.push(last);
    } else {
        sequence.push(new_id);
    }
    CrossingOrder { sequence }
}

/// Recipients of the order update: the displaced vehicle when a swap took
/// place, plus the next arrival either way.
pub fn notify_set(prev: &CrossingOrder, new: &CrossingOrder, new_id: usize) -> Vec<usize> {
    let next_arrival = new_id + 1;
    let mut appended = prev.sequence.clone();
    appended.push(new_id);
    if new.sequence == appended {
        vec![next_arrival]
    } else {
        vec![prev.last().expect("a swap implies a previous vehicle"), next_arrival]
    }
}

/// Static data of one solo entry problem.
pub struct EntryProblem<'a> {
    pub params: &'a VehicleParams,
    pub coeffs: &'a PowertrainCoeffs,
    pub dynamics: &'a DiscreteDynamics,
    pub geometry: &'a IntersectionGeometry,
    /// Energy weight W1.
    pub energy_weight: f64,
    /// Time weight W2.
    pub time_weight: f64,
    /// Terminal-speed window center, if imposed.
    pub terminal_speed: Option<f64>,
    /// Terminal slack weight W5.
    pub terminal_weight: f64,
    /// Rear-end time gap (s), untightened at this level.
    pub time_gap: f64,
    /// Speed floor, possibly shrunk by the feasibility fallback.
    pub v_min: f64,
    pub solver: SolverSettings,
}

/// Decision-variable handles of one trajectory program, stage by stage.
pub struct GridVars {
    pub energy: Vec<Var>,
    pub time: Vec<Var>,
    pub force: Vec<Var>,
    pub pace: Vec<Var>,
}

pub(crate) fn declare_grid(prog: &mut ConicProgram, steps: usize, p: &VehicleParams) -> GridVars {
    let mut vars = GridVars {
        energy: Vec::with_capacity(steps + 1),
        time: Vec::with_capacity(steps + 1),
        force: Vec::with_capacity(steps),
        pace: Vec::with_capacity(steps),
    };
    let e_hint = p.energy_max();
    let f_hint = p.wheel_force_min().abs().max(p.wheel_force_max());
    for k in 0..=steps {
        let e = prog.add_named_var("energy");
        prog.set_scale_hint(e, e_hint);
        vars.energy.push(e);
        let t = prog.add_named_var("time");
        prog.set_scale_hint(t, 30.0);
        vars.time.push(t);
        if k < steps {
            let f = prog.add_named_var("force");
            prog.set_scale_hint(f, f_hint);
            vars.force.push(f);
            let z = prog.add_named_var("pace");
            prog.set_scale_hint(z, 0.1);
            vars.pace.push(z);
        }
    }
    vars
}

/// Adds the per-stage structure shared by both optimization levels:
/// dynamics equalities, energy/force windows, the pace window, the pace
/// relaxation cells, and the weighted stage costs.
///
/// The pace is kept inside [1/v_max, 1/v_min]: the ceiling is what makes a
/// blocked vehicle crawl physically (and what the shrinking-floor fallback
/// relaxes) instead of inflating its clock at cruising energy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn add_stage_structure(
    prog: &mut ConicProgram,
    vars: &GridVars,
    p: &VehicleParams,
    c: &PowertrainCoeffs,
    d: &DiscreteDynamics,
    energy_weight: f64,
    time_weight: f64,
    energy_window: (f64, f64),
    force_window: (f64, f64),
    pace_ceiling: f64,
) {
    let steps = vars.force.len();
    let fr = p.rolling_force();
    let ds = d.step;
    let q2 = energy_weight * ds * c.b2;
    let q1 = energy_weight * ds * c.b1;
    let q0 = energy_weight * ds * c.b0;
    for k in 0..steps {
        // E(k+1) = a11 E(k) + b11 (F(k) - F_r).
        prog.add_eq(
            LinExpr::var(vars.energy[k + 1])
                .plus_term(vars.energy[k], -d.a11)
                .plus_term(vars.force[k], -d.b11),
            -d.b11 * fr,
        );
        // t(k+1) = t(k) + ds * pace(k).
        prog.add_eq(
            LinExpr::var(vars.time[k + 1])
                .plus_term(vars.time[k], -1.0)
                .plus_term(vars.pace[k], -ds),
            0.0,
        );
        // Windows; the state at k = 0 is pinned by the initial condition.
        prog.add_ineq_ge(LinExpr::var(vars.energy[k + 1]), energy_window.0);
        prog.add_ineq_le(LinExpr::var(vars.energy[k + 1]), energy_window.1);
        prog.add_ineq_ge(LinExpr::var(vars.force[k]), force_window.0);
        prog.add_ineq_le(LinExpr::var(vars.force[k]), force_window.1);
        prog.add_ineq_ge(LinExpr::var(vars.pace[k]), 1.0 / p.v_max);
        prog.add_ineq_le(LinExpr::var(vars.pace[k]), pace_ceiling);

        prog.add_pace_relaxation(vars.energy[k], vars.pace[k], p.mass);
        prog.add_quadratic_epigraph(vars.force[k], q2, q1, q0).expect("b2 > 0");
        prog.add_objective_term(vars.pace[k], time_weight * ds);
    }
}

/// Adds the terminal-speed window with slack, returning the slack variable.
pub(crate) fn add_terminal_window(
    prog: &mut ConicProgram,
    terminal_energy_var: Var,
    mass: f64,
    v_f: f64,
    weight: f64,
) -> Var {
    let target = energy_of(v_f, mass);
    let gamma = prog.add_named_var("terminal_slack");
    prog.set_scale_hint(gamma, target.max(1.0));
    prog.add_ineq_ge(LinExpr::var(gamma), 0.0);
    prog.add_ineq_ge(LinExpr::var(terminal_energy_var).plus_term(gamma, 1.0), target);
    prog.add_ineq_le(LinExpr::var(terminal_energy_var).plus_term(gamma, -1.0), target);
    prog.add_objective_term(gamma, weight);
    gamma
}

/// Solves the solo full-grid problem of one arrival.
///
/// Rear-end constraints are taken against the same-lane predecessor's
/// published entry plan, sampled at body-length-shifted indices.
pub fn solve_entry_ocp(
    prob: &EntryProblem<'_>,
    arrival: &ArrivalRecord,
    lane_predecessor: Option<&EntryPlan>,
) -> Result<EntryPlan, SchedulerError> {
    let g = prob.geometry;
    let p = prob.params;
    let steps = g.total_steps();
    let mut prog = ConicProgram::new();
    let vars = declare_grid(&mut prog, steps, p);

    prog.add_eq(LinExpr::var(vars.energy[0]), energy_of(arrival.arrival_speed, p.mass));
    prog.add_eq(LinExpr::var(vars.time[0]), arrival.arrival_time);

    let energy_window = (energy_of(prob.v_min, p.mass), p.energy_max());
    let force_window = (p.wheel_force_min(), p.wheel_force_max());
    add_stage_structure(
        &mut prog,
        &vars,
        p,
        prob.coeffs,
        prob.dynamics,
        prob.energy_weight,
        prob.time_weight,
        energy_window,
        force_window,
        1.0 / prob.v_min,
    );

    if let Some(pred) = lane_predecessor {
        let shift = g.body_steps;
        for k in 0..=(steps - shift) {
            let bound = pred.states[k + shift].time + prob.time_gap;
            prog.add_ineq_ge(LinExpr::var(vars.time[k]), bound);
        }
    }

    if let Some(v_f) = prob.terminal_speed {
        add_terminal_window(&mut prog, vars.energy[steps], p.mass, v_f, prob.terminal_weight);
    }

    let sol = prog.solve(&prob.solver);
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => return Err(SchedulerError::Infeasible),
        other => return Err(SchedulerError::SolverFailure(other)),
    }

    let states: Vec<SpatialState> = (0..=steps)
        .map(|k| SpatialState {
            energy: sol.value(vars.energy[k]),
            time: sol.value(vars.time[k]),
        })
        .collect();
    let inputs: Vec<PlanInput> = (0..steps)
        .map(|k| PlanInput {
            wheel_force: sol.value(vars.force[k]),
            pace: sol.value(vars.pace[k]),
        })
        .collect();
    Ok(EntryPlan {
        mz_entry_time: states[g.merge_entry_index()].time,
        exit_time: states[steps].time,
        states,
        inputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{build_grid, discretize, speed_of};
    use approx::assert_relative_eq;

    fn setup() -> (VehicleParams, PowertrainCoeffs, DiscreteDynamics, IntersectionGeometry) {
        let p = VehicleParams::default();
        let c = PowertrainCoeffs::default();
        let d = discretize(&p, 2.0);
        let g = build_grid(150.0, 10.0, 4.0, 2.0).unwrap();
        (p, c, d, g)
    }

    fn problem<'a>(
        p: &'a VehicleParams,
        c: &'a PowertrainCoeffs,
        d: &'a DiscreteDynamics,
        g: &'a IntersectionGeometry,
        w1: f64,
        w2: f64,
    ) -> EntryProblem<'a> {
        EntryProblem {
            params: p,
            coeffs: c,
            dynamics: d,
            geometry: g,
            energy_weight: w1,
            time_weight: w2,
            terminal_speed: Some(10.0),
            terminal_weight: 100.0,
            time_gap: 1.0,
            v_min: p.v_min,
            solver: SolverSettings::default(),
        }
    }

    #[test]
    fn conflict_classification() {
        use Direction::*;
        assert!(lateral_conflict(North, East));
        assert!(lateral_conflict(West, South));
        assert!(!lateral_conflict(North, South));
        assert!(!lateral_conflict(North, North));
        assert_eq!(relation(East, West), Relation::Opposite);
        assert_eq!(relation(East, East), Relation::Same);
    }

    fn plan_with_times(mz_entry_time: f64, exit_time: f64) -> EntryPlan {
        EntryPlan { states: Vec::new(), inputs: Vec::new(), mz_entry_time, exit_time }
    }

    #[test]
    fn order_update_rules() {
        let prev = CrossingOrder { sequence: vec![0, 1] };
        let last = plan_with_times(10.0, 11.0);

        // Lateral potential: earlier entry time slots in before the tail.
        let new = plan_with_times(9.5, 12.5);
        let swapped = update_order(&prev, 2, &new, Some(&last), true);
        assert_eq!(swapped.sequence, vec![0, 2, 1]);

        // No conflict: later exit appends.
        let new = plan_with_times(9.5, 12.0);
        let kept = update_order(&prev, 2, &new, Some(&last), false);
        assert_eq!(kept.sequence, vec![0, 1, 2]);

        // Exact tie keeps arrival order.
        let new = plan_with_times(10.0, 11.0);
        let tie = update_order(&prev, 2, &new, Some(&last), true);
        assert_eq!(tie.sequence, vec![0, 1, 2]);

        // First arrival.
        let first = update_order(&CrossingOrder::empty(), 0, &new, None, false);
        assert_eq!(first.sequence, vec![0]);
    }

    #[test]
    fn notify_rules() {
        let prev = CrossingOrder { sequence: vec![0, 1] };
        let appended = CrossingOrder { sequence: vec![0, 1, 2] };
        let swapped = CrossingOrder { sequence: vec![0, 2, 1] };
        assert_eq!(notify_set(&prev, &appended, 2), vec![3]);
        assert_eq!(notify_set(&prev, &swapped, 2), vec![1, 3]);
        assert_eq!(
            notify_set(&CrossingOrder::empty(), &CrossingOrder { sequence: vec![0] }, 0),
            vec![1]
        );
    }

    #[test]
    fn time_dominant_exit_bounded_by_top_speed() {
        let (p, c, d, g) = setup();
        let prob = problem(&p, &c, &d, &g, 1.0, 5000.0);
        let arr = ArrivalRecord {
            id: 0,
            direction: Direction::North,
            arrival_time: 0.0,
            arrival_speed: 10.0,
        };
        let plan = solve_entry_ocp(&prob, &arr, None).unwrap();
        // 164 m at v_max = 15 m/s is the unreachable floor.
        assert!(plan.exit_time >= 164.0 / 15.0, "exit {}", plan.exit_time);
        assert!(plan.exit_time < 14.0, "time-dominant exit should be near the floor");
        assert!(plan.mz_entry_time < plan.exit_time);
    }

    #[test]
    fn energy_weight_slows_the_plan() {
        let (p, c, d, g) = setup();
        let arr = ArrivalRecord {
            id: 0,
            direction: Direction::North,
            arrival_time: 0.0,
            arrival_speed: 10.0,
        };
        let fast = solve_entry_ocp(&problem(&p, &c, &d, &g, 1.0, 5000.0), &arr, None).unwrap();
        let slow = solve_entry_ocp(&problem(&p, &c, &d, &g, 1.0, 200.0), &arr, None).unwrap();
        assert!(
            slow.exit_time > fast.exit_time + 0.05,
            "energy-dominant exit {} vs time-dominant {}",
            slow.exit_time,
            fast.exit_time
        );
    }

    #[test]
    fn follower_keeps_the_gap_everywhere() {
        let (p, c, d, g) = setup();
        let prob = problem(&p, &c, &d, &g, 1.0, 2000.0);
        let leader = solve_entry_ocp(
            &prob,
            &ArrivalRecord {
                id: 0,
                direction: Direction::North,
                arrival_time: 0.0,
                arrival_speed: 10.0,
            },
            None,
        )
        .unwrap();
        let follower = solve_entry_ocp(
            &prob,
            &ArrivalRecord {
                id: 1,
                direction: Direction::North,
                arrival_time: leader.states[g.body_steps].time + 1.0 + 0.1,
                arrival_speed: 10.0,
            },
            Some(&leader),
        )
        .unwrap();
        let shift = g.body_steps;
        for k in 0..=(g.total_steps() - shift) {
            let gap = follower.states[k].time - leader.states[k + shift].time;
            assert!(gap >= 1.0 - 1e-6, "gap {gap} at k={k}");
        }
    }

    #[test]
    fn entry_plans_are_tight() {
        let (p, c, d, g) = setup();
        for (w1, w2) in [(1.0, 5000.0), (1.0, 500.0), (1.0, 50.0)] {
            let prob = problem(&p, &c, &d, &g, w1, w2);
            let arr = ArrivalRecord {
                id: 0,
                direction: Direction::East,
                arrival_time: 0.0,
                arrival_speed: 12.0,
            };
            let plan = solve_entry_ocp(&prob, &arr, None).unwrap();
            let mut residual = 0.0f64;
            for k in 0..g.total_steps() {
                let v = speed_of(plan.states[k].energy, p.mass).unwrap();
                residual = residual.max((plan.inputs[k].pace * v - 1.0).abs());
            }
            assert!(residual <= 1e-4, "tightness residual {residual} at weights ({w1},{w2})");
        }
    }

    /// Terminal window: the plan ends at the requested exit speed.
    #[test]
    fn terminal_speed_is_respected() {
        let (p, c, d, g) = setup();
        let prob = problem(&p, &c, &d, &g, 1.0, 2000.0);
        let arr = ArrivalRecord {
            id: 0,
            direction: Direction::South,
            arrival_time: 0.0,
            arrival_speed: 14.0,
        };
        let plan = solve_entry_ocp(&prob, &arr, None).unwrap();
        let v_end = speed_of(plan.states[g.total_steps()].energy, p.mass).unwrap();
        assert_relative_eq!(v_end, 10.0, max_relative = 1e-3);
    }
}
