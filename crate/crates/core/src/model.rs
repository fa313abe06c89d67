//! Vehicle parameters, electric powertrain model, and energy accounting.
//!
//! The battery power of each vehicle is modeled as a quadratic in the
//! traction force scaled by speed, `P = (b2*F^2 + b1*F + b0) * v`. The
//! coefficients are fitted to motor-map samples under the convexity margin
//! `b1 + 2*b2*F_w_min > 0`, which is what makes the relaxed time dynamics
//! tight at the optimum downstream.

use alloc::vec::Vec;

use crate::math;

/// Standard gravity used for the rolling-resistance force.
pub const GRAVITY: f64 = 9.81;

/// Margin used to realize strict inequalities in the powertrain fit.
/// The constraint `b1 + 2*b2*F_w_min > 0` (and positivity of each
/// coefficient) is imposed as `>= FIT_MARGIN`.
pub const FIT_MARGIN: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    /// A physical-parameter invariant failed; names the first violation.
    InvalidParams(&'static str),
    /// The fitting design matrix is rank-deficient.
    DegenerateFit,
    /// A wheel-force demand outside the feasible window.
    OutOfWindow { force: f64, min: f64, max: f64 },
}

impl core::fmt::Display for ModelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModelError::InvalidParams(what) => write!(f, "invalid vehicle parameters: {what}"),
            ModelError::DegenerateFit => write!(f, "degenerate motor-map fit (rank-deficient samples)"),
            ModelError::OutOfWindow { force, min, max } => {
                write!(f, "wheel force {force} N outside window [{min}, {max}] N")
            }
        }
    }
}

impl core::error::Error for ModelError {}

/// Physical and actuator parameters of one vehicle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VehicleParams {
    /// Mass (kg).
    pub mass: f64,
    /// Body length (m).
    pub body_length: f64,
    /// Wheel radius (m).
    pub wheel_radius: f64,
    /// Fixed transmission gear ratio.
    pub gear_ratio: f64,
    /// Rolling resistance coefficient.
    pub rolling_coeff: f64,
    /// Air drag resistance coefficient (N s^2 / m^2).
    pub drag_coeff: f64,
    /// Motor torque limit while generating (N m, <= 0).
    pub motor_torque_min: f64,
    /// Motor torque limit while motoring (N m, >= 0).
    pub motor_torque_max: f64,
    /// Peak deceleration during emergency braking (m/s^2, < 0).
    pub accel_min: f64,
    /// Minimum allowed speed (m/s, > 0); keeps the pace variable finite.
    pub v_min: f64,
    /// Maximum allowed speed (m/s).
    pub v_max: f64,
}

impl Default for VehicleParams {
    /// Compact-EV defaults used throughout the test fleet.
    fn default() -> Self {
        VehicleParams {
            mass: 1200.0,
            body_length: 4.0,
            wheel_radius: 0.3,
            gear_ratio: 3.5,
            rolling_coeff: 0.01,
            drag_coeff: 0.47,
            motor_torque_min: -250.0,
            motor_torque_max: 250.0,
            accel_min: -6.5,
            v_min: 0.1,
            v_max: 15.0,
        }
    }
}

impl VehicleParams {
    /// Rolling resistance force `f_r * m * g` (N).
    pub fn rolling_force(&self) -> f64 {
        self.rolling_coeff * self.mass * GRAVITY
    }

    /// Lower traction-force limit of the electric drive `(g_r/r_w) * T_min` (N).
    pub fn motor_force_min(&self) -> f64 {
        self.gear_ratio / self.wheel_radius * self.motor_torque_min
    }

    /// Upper traction-force limit of the electric drive `(g_r/r_w) * T_max` (N).
    pub fn motor_force_max(&self) -> f64 {
        self.gear_ratio / self.wheel_radius * self.motor_torque_max
    }

    /// Lower total wheel-force limit `m * a_min` (N); friction brakes included.
    pub fn wheel_force_min(&self) -> f64 {
        self.mass * self.accel_min
    }

    /// Upper total wheel-force limit (N); the motor alone drives.
    pub fn wheel_force_max(&self) -> f64 {
        self.motor_force_max()
    }

    /// Kinetic energy at `v_min` (J).
    pub fn energy_min(&self) -> f64 {
        0.5 * self.mass * self.v_min * self.v_min
    }

    /// Kinetic energy at `v_max` (J).
    pub fn energy_max(&self) -> f64 {
        0.5 * self.mass * self.v_max * self.v_max
    }
}

/// Returns the parameters unchanged iff every invariant holds.
pub fn validate_params(p: VehicleParams) -> Result<VehicleParams, ModelError> {
    if !(p.mass > 0.0) {
        return Err(ModelError::InvalidParams("mass must be positive"));
    }
    if !(p.body_length > 0.0) {
        return Err(ModelError::InvalidParams("body length must be positive"));
    }
    if !(p.wheel_radius > 0.0) {
        return Err(ModelError::InvalidParams("wheel radius must be positive"));
    }
    if !(p.gear_ratio > 0.0) {
        return Err(ModelError::InvalidParams("gear ratio must be positive"));
    }
    if !(p.rolling_coeff >= 0.0) {
        return Err(ModelError::InvalidParams("rolling coefficient must be nonnegative"));
    }
    if !(p.drag_coeff >= 0.0) {
        return Err(ModelError::InvalidParams("drag coefficient must be nonnegative"));
    }
    if !(p.accel_min < 0.0) {
        return Err(ModelError::InvalidParams("minimum acceleration must be negative"));
    }
    if !(p.motor_torque_min <= 0.0 && p.motor_torque_max >= 0.0) {
        return Err(ModelError::InvalidParams("motor torque window must contain zero"));
    }
    if !(p.v_min > 0.0 && p.v_max > p.v_min) {
        return Err(ModelError::InvalidParams("speed window must satisfy 0 < v_min < v_max"));
    }
    if !(p.wheel_force_min() < p.wheel_force_max()) {
        return Err(ModelError::InvalidParams("wheel-force window is empty"));
    }
    Ok(p)
}

/// Fitted quadratic battery power coefficients:
/// `P_b(F, v) = (b2*F^2 + b1*F + b0) * v`.
///
/// Units by dimensional analysis of the power model: `b0` in W s/m (= N),
/// `b1` dimensionless, `b2` in 1/N.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowertrainCoeffs {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
}

impl Default for PowertrainCoeffs {
    fn default() -> Self {
        PowertrainCoeffs { b0: 300.0, b1: 1.05, b2: 5e-5 }
    }
}

impl PowertrainCoeffs {
    /// The convexity margin `b1 + 2*b2*F_w_min` that must stay positive.
    pub fn convexity_margin(&self, wheel_force_min: f64) -> f64 {
        self.b1 + 2.0 * self.b2 * wheel_force_min
    }
}

/// One measured motor-map point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotorSample {
    /// Traction force at the wheels (N).
    pub wheel_force: f64,
    /// Vehicle speed (m/s).
    pub speed: f64,
    /// Measured battery power (W).
    pub power: f64,
}

/// Battery power `P_b = b2*F^2*v + b1*F*v + b0*v` (W).
pub fn battery_power(c: &PowertrainCoeffs, force: f64, speed: f64) -> f64 {
    (c.b2 * force * force + c.b1 * force + c.b0) * speed
}

/// Stage cost of one grid interval, `(b2*F^2 + b1*F + b0) * ds` (J).
///
/// Trip-level energy sums this over stages with the post-split motor force,
/// so friction braking is never credited as regeneration.
pub fn stage_energy_cost(c: &PowertrainCoeffs, motor_force: f64, ds: f64) -> f64 {
    (c.b2 * motor_force * motor_force + c.b1 * motor_force + c.b0) * ds
}

/// Splits a total wheel-force demand into (motor force, friction-brake force).
///
/// The motor supplies the demand alone whenever it can; once regeneration
/// saturates at the motor floor, friction brakes make up the difference.
pub fn split_wheel_force(p: &VehicleParams, wheel_force: f64) -> Result<(f64, f64), ModelError> {
    let lo = p.wheel_force_min();
    let hi = p.wheel_force_max();
    if wheel_force < lo - 1e-9 || wheel_force > hi + 1e-9 {
        return Err(ModelError::OutOfWindow { force: wheel_force, min: lo, max: hi });
    }
    let floor = p.motor_force_min();
    if wheel_force >= floor {
        Ok((wheel_force, 0.0))
    } else {
        Ok((floor, wheel_force - floor))
    }
}

/// Least-squares fit of the power model to motor-map samples subject to
/// `b1 + 2*b2*F_w_min >= FIT_MARGIN` and `b0, b1, b2 >= FIT_MARGIN`.
///
/// Solved exactly by enumerating active sets of the four linear constraints
/// on the 3-variable normal equations; the unconstrained optimum is accepted
/// when it is already feasible.
pub fn fit_powertrain(
    samples: &[MotorSample],
    wheel_force_min: f64,
) -> Result<PowertrainCoeffs, ModelError> {
    if samples.len() < 3 {
        return Err(ModelError::DegenerateFit);
    }

    // Design matrix rows [v, F*v, F^2*v] for (b0, b1, b2); column-scale to
    // keep the squared system well conditioned.
    let mut col_scale = [0.0f64; 3];
    for s in samples {
        let row = [s.speed, s.wheel_force * s.speed, s.wheel_force * s.wheel_force * s.speed];
        for (sc, r) in col_scale.iter_mut().zip(row) {
            *sc = sc.max(math::abs(r));
        }
    }
    for sc in col_scale.iter_mut() {
        if *sc == 0.0 {
            *sc = 1.0;
        }
    }

    // Normal equations in scaled coordinates bs_j = b_j * col_scale[j].
    let mut normal = [[0.0f64; 3]; 3];
    let mut rhs = [0.0f64; 3];
    for s in samples {
        let row = [
            s.speed / col_scale[0],
            s.wheel_force * s.speed / col_scale[1],
            s.wheel_force * s.wheel_force * s.speed / col_scale[2],
        ];
        for i in 0..3 {
            rhs[i] += row[i] * s.power;
            for j in 0..3 {
                normal[i][j] += row[i] * row[j];
            }
        }
    }

    let max_diag = normal[0][0].max(normal[1][1]).max(normal[2][2]);
    if rank3(&normal) < 3 || max_diag <= 0.0 {
        return Err(ModelError::DegenerateFit);
    }

    // Constraints C * bs >= d in scaled coordinates.
    let cons: [[f64; 3]; 4] = [
        [1.0 / col_scale[0], 0.0, 0.0],
        [0.0, 1.0 / col_scale[1], 0.0],
        [0.0, 0.0, 1.0 / col_scale[2]],
        [0.0, 1.0 / col_scale[1], 2.0 * wheel_force_min / col_scale[2]],
    ];
    let d = [FIT_MARGIN; 4];

    let feas_tol = 1e-9;
    let mut best: Option<[f64; 3]> = None;
    // Smaller active sets first so the unconstrained solution wins when valid.
    for mask in active_set_masks() {
        let act: Vec<usize> = (0..4).filter(|i| mask & (1 << i) != 0).collect();
        if act.len() > 3 {
            continue;
        }
        let na = act.len();
        let dim = 3 + na;
        // Stationarity 2N bs - C_a' lam = 2 rhs with lam >= 0 for active
        // ">=" constraints, plus C_a bs = d_a.
        let mut kkt = [[0.0f64; 6]; 6];
        let mut kb = [0.0f64; 6];
        for i in 0..3 {
            for j in 0..3 {
                kkt[i][j] = 2.0 * normal[i][j];
            }
            kb[i] = 2.0 * rhs[i];
        }
        for (a, &ci) in act.iter().enumerate() {
            for j in 0..3 {
                kkt[j][3 + a] = -cons[ci][j];
                kkt[3 + a][j] = cons[ci][j];
            }
            kb[3 + a] = d[ci];
        }
        let sol = match solve_small(&mut kkt, &mut kb, dim) {
            Some(s) => s,
            None => continue,
        };
        let bs = [sol[0], sol[1], sol[2]];
        // Multiplier sign: with C bs = d active, lambda >= 0 certifies optimality.
        let lam_ok = (0..na).all(|a| sol[3 + a] >= -1e-7 * max_diag.max(1.0));
        let prim_ok = (0..4).all(|ci| {
            let v: f64 = (0..3).map(|j| cons[ci][j] * bs[j]).sum();
            v >= d[ci] - feas_tol
        });
        if lam_ok && prim_ok {
            best = Some(bs);
            break;
        }
    }

    let bs = best.ok_or(ModelError::DegenerateFit)?;
    let out = PowertrainCoeffs {
        b0: bs[0] / col_scale[0],
        b1: bs[1] / col_scale[1],
        b2: bs[2] / col_scale[2],
    };
    debug_assert!(out.convexity_margin(wheel_force_min) > 0.0);
    Ok(out)
}

/// Masks of the 4 fit constraints ordered by active-set size.
fn active_set_masks() -> impl Iterator<Item = u16> {
    let mut masks: Vec<u16> = (0..16).collect();
    masks.sort_by_key(|m| m.count_ones());
    masks.into_iter()
}

fn rank3(m: &[[f64; 3]; 3]) -> usize {
    let mut a = *m;
    let mut rank = 0;
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |acc, &x| acc.max(math::abs(x)))
        .max(1e-300);
    for col in 0..3 {
        let mut piv = rank;
        for r in rank..3 {
            if math::abs(a[r][col]) > math::abs(a[piv][col]) {
                piv = r;
            }
        }
        if math::abs(a[piv][col]) < 1e-10 * scale {
            continue;
        }
        a.swap(rank, piv);
        for r in (rank + 1)..3 {
            let f = a[r][col] / a[rank][col];
            for c in col..3 {
                a[r][c] -= f * a[rank][c];
            }
        }
        rank += 1;
    }
    rank
}

/// Gaussian elimination with partial pivoting for the tiny KKT systems.
fn solve_small(a: &mut [[f64; 6]; 6], b: &mut [f64; 6], n: usize) -> Option<[f64; 6]> {
    let scale = a
        .iter()
        .take(n)
        .flat_map(|r| r.iter().take(n))
        .fold(0.0f64, |acc, &x| acc.max(math::abs(x)))
        .max(1e-300);
    for col in 0..n {
        let mut piv = col;
        for r in col..n {
            if math::abs(a[r][col]) > math::abs(a[piv][col]) {
                piv = r;
            }
        }
        if math::abs(a[piv][col]) < 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in (col + 1)..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 6];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for c in (col + 1)..n {
            acc -= a[col][c] * x[c];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

/// Generates a synthetic motor map on a force/speed grid.
///
/// Drive power is `F*v/eta`, regeneration recovers `F*v*eta`, with a smooth
/// efficiency surface peaking mid-range, plus a drivetrain drag term linear
/// in speed. Useful when no measured map is at hand; the fit of this map
/// satisfies the convexity margin with the default parameters.
pub fn synthetic_motor_map(p: &VehicleParams, n_force: usize, n_speed: usize) -> Vec<MotorSample> {
    let mut out = Vec::with_capacity(n_force * n_speed);
    let f_lo = p.motor_force_min();
    let f_hi = p.motor_force_max();
    let drag_per_speed = 300.0;
    for i in 0..n_force {
        let ft = f_lo + (f_hi - f_lo) * i as f64 / (n_force.max(2) - 1) as f64;
        for j in 0..n_speed {
            let v = p.v_min + (p.v_max - p.v_min) * j as f64 / (n_speed.max(2) - 1) as f64;
            let fr = ft / f_hi.max(1.0);
            let vr = (v - 0.6 * p.v_max) / p.v_max;
            let eta = (0.92 - 0.08 * fr * fr - 0.12 * vr * vr).clamp(0.6, 0.97);
            let mech = ft * v;
            let power = if ft >= 0.0 { mech / eta } else { mech * eta } + drag_per_speed * v;
            out.push(MotorSample { wheel_force: ft, speed: v, power });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn default_params_pass_validation() {
        let p = validate_params(VehicleParams::default()).unwrap();
        assert_relative_eq!(p.rolling_force(), 117.72, max_relative = 1e-12);
        assert_relative_eq!(p.wheel_force_min(), -7800.0);
        assert_relative_eq!(p.motor_force_min(), -2916.666666666667, max_relative = 1e-12);
    }

    #[test]
    fn zero_mass_rejected() {
        let p = VehicleParams { mass: 0.0, ..VehicleParams::default() };
        assert_eq!(validate_params(p), Err(ModelError::InvalidParams("mass must be positive")));
    }

    #[test]
    fn inverted_speed_window_rejected() {
        let p = VehicleParams { v_min: 15.0, v_max: 0.1, ..VehicleParams::default() };
        assert_eq!(
            validate_params(p),
            Err(ModelError::InvalidParams("speed window must satisfy 0 < v_min < v_max"))
        );
    }

    #[test]
    fn battery_power_examples() {
        let c = PowertrainCoeffs::default();
        assert_relative_eq!(battery_power(&c, 1000.0, 10.0), 14000.0, max_relative = 1e-12);
        assert_relative_eq!(battery_power(&c, 0.0, 10.0), 3000.0);
        assert_relative_eq!(battery_power(&c, 1000.0, 0.0), 0.0);
    }

    #[test]
    fn stage_cost_examples() {
        let c = PowertrainCoeffs::default();
        assert_relative_eq!(stage_energy_cost(&c, 1000.0, 2.0), 2800.0, max_relative = 1e-12);
        assert_relative_eq!(stage_energy_cost(&c, 0.0, 2.0), 600.0);
        assert_relative_eq!(stage_energy_cost(&c, 1000.0, 0.0), 0.0);
    }

    #[test]
    fn split_examples() {
        let p = VehicleParams::default();
        let (ft, fb) = split_wheel_force(&p, -5000.0).unwrap();
        assert_relative_eq!(ft, -2916.666666666667, max_relative = 1e-12);
        assert_relative_eq!(fb, -2083.333333333333, max_relative = 1e-12);
        assert_relative_eq!(ft + fb, -5000.0, max_relative = 1e-12);
        assert_eq!(split_wheel_force(&p, 1000.0).unwrap(), (1000.0, 0.0));
        assert!(matches!(
            split_wheel_force(&p, -9000.0),
            Err(ModelError::OutOfWindow { .. })
        ));
    }

    fn grid_samples(c: &PowertrainCoeffs) -> Vec<MotorSample> {
        let mut out = Vec::new();
        for i in 0..12 {
            let f = -7800.0 + 10716.0 * i as f64 / 11.0;
            for j in 0..6 {
                let v = 0.5 + 14.0 * j as f64 / 5.0;
                out.push(MotorSample { wheel_force: f, speed: v, power: battery_power(c, f, v) });
            }
        }
        out
    }

    #[test]
    fn fit_recovers_exact_coefficients() {
        let truth = PowertrainCoeffs { b0: 300.0, b1: 1.05, b2: 5e-5 };
        let fit = fit_powertrain(&grid_samples(&truth), -7800.0).unwrap();
        assert_relative_eq!(fit.b0, truth.b0, max_relative = 1e-6);
        assert_relative_eq!(fit.b1, truth.b1, max_relative = 1e-6);
        assert_relative_eq!(fit.b2, truth.b2, max_relative = 1e-6);
        assert!(fit.convexity_margin(-7800.0) > 0.0);
    }

    #[test]
    fn fit_projects_onto_convexity_boundary() {
        // 1.05 + 2*1e-4*(-7800) = -0.51 < 0: the unconstrained optimum is
        // infeasible and the active-set solution must sit on the margin.
        let truth = PowertrainCoeffs { b0: 300.0, b1: 1.05, b2: 1e-4 };
        let samples = grid_samples(&truth);
        let fit = fit_powertrain(&samples, -7800.0).unwrap();
        assert_relative_eq!(fit.convexity_margin(-7800.0), FIT_MARGIN, epsilon = 1e-9);
        assert!((fit.b1 - truth.b1).abs() > 1e-3, "boundary fit must differ from the generator");

        // KKT oracle, independent of the enumeration order: at the returned
        // point the residual gradient must be a nonnegative multiple of the
        // active constraint normal.
        let mut grad = [0.0f64; 3];
        for s in &samples {
            let row = [s.speed, s.wheel_force * s.speed, s.wheel_force * s.wheel_force * s.speed];
            let pred = fit.b0 * row[0] + fit.b1 * row[1] + fit.b2 * row[2];
            for (g, r) in grad.iter_mut().zip(row) {
                *g += 2.0 * (pred - s.power) * r;
            }
        }
        // grad = lambda * c with c = (0, 1, 2*F_w_min), lambda >= 0; b0 is
        // unconstrained here so its gradient component vanishes.
        assert!(grad[0].abs() < 1e-6 * grad[1].abs().max(1.0));
        let lambda = grad[1];
        assert!(lambda > 0.0, "the objective must grow when moving into the feasible side");
        assert_relative_eq!(grad[2], lambda * 2.0 * -7800.0, max_relative = 1e-6);
    }

    #[test]
    fn fit_rejects_rank_deficient_samples() {
        let s = MotorSample { wheel_force: 100.0, speed: 5.0, power: 1000.0 };
        assert_eq!(fit_powertrain(&[s, s], -7800.0), Err(ModelError::DegenerateFit));
        assert_eq!(fit_powertrain(&[s, s, s], -7800.0), Err(ModelError::DegenerateFit));
    }

    #[test]
    fn synthetic_map_fit_satisfies_margin() {
        let p = VehicleParams::default();
        let map = synthetic_motor_map(&p, 15, 8);
        let fit = fit_powertrain(&map, p.wheel_force_min()).unwrap();
        assert!(fit.convexity_margin(p.wheel_force_min()) > 0.0);
        assert!(fit.b2 > 0.0);
    }

    #[test]
    fn battery_power_is_convex_in_force() {
        // Midpoint value <= average of endpoints for random triples.
        let c = PowertrainCoeffs::default();
        let mut state = 0x2545f4914f6cdd1du64;
        let mut rnd = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let f1 = -7800.0 + 10716.0 * rnd();
            let f2 = -7800.0 + 10716.0 * rnd();
            let v = 15.0 * rnd();
            let mid = battery_power(&c, 0.5 * (f1 + f2), v);
            let avg = 0.5 * (battery_power(&c, f1, v) + battery_power(&c, f2, v));
            assert!(mid <= avg + 1e-9 * avg.abs().max(1.0));
        }
    }
}
