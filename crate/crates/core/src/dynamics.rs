//! Spatial grid and exact discretization of the longitudinal dynamics.
//!
//! Traveled distance is the independent variable, so the trip length is
//! fixed and clock time becomes a state. The state is `x = [E, t]` with
//! kinetic energy `E = m v^2 / 2` (which linearizes air drag) and the input
//! is `u = [F_w - F_r, zeta]` with the pace `zeta >= 1/v`.

use crate::math;
use crate::model::VehicleParams;

#[derive(Clone, Debug, PartialEq)]
pub enum DynamicsError {
    /// A length is not an exact positive multiple of the sampling interval.
    NonCommensurate { which: &'static str },
    /// Grid counts violate the required ordering `a1 > a2 > a3 > 0`.
    BadOrdering,
    /// Kinetic energy below zero has no speed.
    NegativeEnergy,
}

impl core::fmt::Display for DynamicsError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DynamicsError::NonCommensurate { which } => {
                write!(f, "{which} is not an exact positive multiple of the sampling interval")
            }
            DynamicsError::BadOrdering => write!(f, "grid counts must satisfy a1 > a2 > a3 > 0"),
            DynamicsError::NegativeEnergy => write!(f, "negative kinetic energy"),
        }
    }
}

impl core::error::Error for DynamicsError {}

/// Grid geometry of one intersection approach.
///
/// Index 0 is the control-zone entry, `approach_steps` is the merging-zone
/// entry, and `total_steps()` is the point where the vehicle body has fully
/// cleared the merging zone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntersectionGeometry {
    /// Control-zone entry to merging-zone entry (m).
    pub approach_len: f64,
    /// Side length of the square merging zone (m).
    pub merge_side: f64,
    /// Sampling interval (m).
    pub step: f64,
    /// Grid count of the approach segment (a1).
    pub approach_steps: usize,
    /// Grid count of the merging zone (a2).
    pub merge_steps: usize,
    /// Grid count of one vehicle body length (a3).
    pub body_steps: usize,
}

impl IntersectionGeometry {
    /// Total grid count `a = a1 + a2 + a3`.
    pub fn total_steps(&self) -> usize {
        self.approach_steps + self.merge_steps + self.body_steps
    }

    /// Grid index at which the vehicle front enters the merging zone.
    pub fn merge_entry_index(&self) -> usize {
        self.approach_steps
    }

    /// Grid index at which the vehicle front leaves the merging zone.
    pub fn merge_exit_index(&self) -> usize {
        self.approach_steps + self.merge_steps
    }

    /// Trip length `a * step` (m).
    pub fn trip_len(&self) -> f64 {
        self.total_steps() as f64 * self.step
    }
}

fn exact_multiple(len: f64, step: f64, which: &'static str) -> Result<usize, DynamicsError> {
    if !(len > 0.0) || !(step > 0.0) {
        return Err(DynamicsError::NonCommensurate { which });
    }
    let ratio = len / step;
    let k = math::round(ratio);
    if k < 1.0 || math::abs(k * step - len) > 1e-9 * len.max(1.0) {
        return Err(DynamicsError::NonCommensurate { which });
    }
    Ok(k as usize)
}

/// Builds the grid from physical lengths; each must divide evenly by `step`.
pub fn build_grid(
    approach_len: f64,
    merge_side: f64,
    body_length: f64,
    step: f64,
) -> Result<IntersectionGeometry, DynamicsError> {
    let a1 = exact_multiple(approach_len, step, "approach length")?;
    let a2 = exact_multiple(merge_side, step, "merge side")?;
    let a3 = exact_multiple(body_length, step, "body length")?;
    if !(a1 > a2 && a2 > a3 && a3 > 0) {
        return Err(DynamicsError::BadOrdering);
    }
    Ok(IntersectionGeometry {
        approach_len,
        merge_side,
        step,
        approach_steps: a1,
        merge_steps: a2,
        body_steps: a3,
    })
}

/// Per-grid-index state: kinetic energy (J) and clock time (s).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpatialState {
    pub energy: f64,
    pub time: f64,
}

/// Nominal input: net wheel force beyond rolling resistance (N) and pace (s/m).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NominalInput {
    pub net_force: f64,
    pub pace: f64,
}

/// Plan-level input as solved: total wheel force (N) and pace (s/m).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanInput {
    pub wheel_force: f64,
    pub pace: f64,
}

impl PlanInput {
    /// Subtracts rolling resistance to get the state-equation input.
    pub fn to_nominal(self, p: &VehicleParams) -> NominalInput {
        NominalInput { net_force: self.wheel_force - p.rolling_force(), pace: self.pace }
    }
}

/// Exact zero-order-hold discretization of the spatial dynamics over one
/// interval: diagonal `A = diag(a11, 1)`, `B = diag(b11, step)`, `C = I`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscreteDynamics {
    pub a11: f64,
    pub b11: f64,
    pub a22: f64,
    pub b22: f64,
    /// Sampling interval (m), kept for convenience.
    pub step: f64,
}

/// Discretizes `dE/ds = u1 - (2 f_d / m) E` exactly over one interval.
///
/// `a11 = exp(-2 f_d ds / m)` and `b11 = -m (a11 - 1) / (2 f_d)`; a series
/// expansion takes over near zero drag to avoid catastrophic cancellation.
pub fn discretize(p: &VehicleParams, step: f64) -> DiscreteDynamics {
    let x = 2.0 * p.drag_coeff * step / p.mass;
    let (a11, b11) = if math::abs(x) < 1e-12 {
        (1.0 - x, step * (1.0 - 0.5 * x))
    } else {
        let a = math::exp(-x);
        (a, step * (1.0 - a) / x)
    };
    DiscreteDynamics { a11, b11, a22: 1.0, b22: step, step }
}

/// One-step propagation `E' = a11 E + b11 u1 + w_E`, `t' = t + step * zeta`.
pub fn propagate(
    d: &DiscreteDynamics,
    x: SpatialState,
    u: NominalInput,
    w_energy: f64,
) -> SpatialState {
    SpatialState {
        energy: d.a11 * x.energy + d.b11 * u.net_force + w_energy,
        time: d.a22 * x.time + d.b22 * u.pace,
    }
}

/// Speed from kinetic energy, `v = sqrt(2 E / m)`.
pub fn speed_of(energy: f64, mass: f64) -> Result<f64, DynamicsError> {
    if energy < 0.0 {
        return Err(DynamicsError::NegativeEnergy);
    }
    Ok(math::sqrt(2.0 * energy / mass))
}

/// Kinetic energy from speed, `E = m v^2 / 2`.
pub fn energy_of(speed: f64, mass: f64) -> f64 {
    0.5 * mass * speed * speed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VehicleParams;
    use approx::assert_relative_eq;

    #[test]
    fn reference_grid() {
        let g = build_grid(150.0, 10.0, 4.0, 2.0).unwrap();
        assert_eq!(g.approach_steps, 75);
        assert_eq!(g.merge_steps, 5);
        assert_eq!(g.body_steps, 2);
        assert_eq!(g.total_steps(), 82);
        assert_relative_eq!(g.trip_len(), 164.0);
    }

    #[test]
    fn non_commensurate_length() {
        assert!(matches!(
            build_grid(150.0, 10.0, 3.0, 2.0),
            Err(DynamicsError::NonCommensurate { which: "body length" })
        ));
    }

    #[test]
    fn bad_ordering() {
        assert_eq!(build_grid(4.0, 10.0, 2.0, 2.0), Err(DynamicsError::BadOrdering));
    }

    #[test]
    fn discretization_closed_form() {
        let d = discretize(&VehicleParams::default(), 2.0);
        assert_relative_eq!(d.a11, math::exp(-0.47 * 4.0 / 1200.0), max_relative = 1e-15);
        assert_relative_eq!(d.a11, 0.99843456, max_relative = 1e-8);
        assert_relative_eq!(d.b11, 1.9984343, max_relative = 1e-7);
        assert_eq!(d.a22, 1.0);
        assert_eq!(d.b22, 2.0);
    }

    #[test]
    fn zero_drag_limit() {
        let p = VehicleParams { drag_coeff: 0.0, ..VehicleParams::default() };
        let d = discretize(&p, 2.0);
        assert_eq!(d.a11, 1.0);
        assert_eq!(d.b11, 2.0);
        let d0 = discretize(&VehicleParams::default(), 0.0);
        assert_eq!(d0.a11, 1.0);
        assert_eq!(d0.b11, 0.0);
    }

    #[test]
    fn propagate_example() {
        let d = discretize(&VehicleParams::default(), 2.0);
        let x = SpatialState { energy: 60000.0, time: 5.0 };
        let u = NominalInput { net_force: 1000.0, pace: 0.1 };
        let x1 = propagate(&d, x, u, 0.0);
        assert_relative_eq!(x1.energy, 61904.5, max_relative = 1e-5);
        assert_relative_eq!(x1.time, 5.2, max_relative = 1e-12);
        let zero = propagate(&d, SpatialState { energy: 0.0, time: 0.0 },
            NominalInput { net_force: 0.0, pace: 0.0 }, 0.0);
        assert_eq!(zero.energy, 0.0);
    }

    #[test]
    fn conversions() {
        assert_relative_eq!(speed_of(60000.0, 1200.0).unwrap(), 10.0);
        assert_relative_eq!(speed_of(6.0, 1200.0).unwrap(), 0.1);
        assert_eq!(energy_of(0.0, 1200.0), 0.0);
        assert!(speed_of(-1.0, 1200.0).is_err());
        for i in 0..100 {
            let v = 0.1 + 14.9 * i as f64 / 99.0;
            let back = speed_of(energy_of(v, 1200.0), 1200.0).unwrap();
            assert_relative_eq!(back, v, max_relative = 1e-12);
        }
    }

    /// Fixed-step RK4 of the continuous dynamics; independent oracle for the
    /// exact discretization.
    fn rk4_energy(p: &VehicleParams, e0: f64, u1: f64, ds: f64, steps: usize) -> f64 {
        let f = |e: f64| u1 - 2.0 * p.drag_coeff / p.mass * e;
        let h = ds / steps as f64;
        let mut e = e0;
        for _ in 0..steps {
            let k1 = f(e);
            let k2 = f(e + 0.5 * h * k1);
            let k3 = f(e + 0.5 * h * k2);
            let k4 = f(e + h * k3);
            e += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        e
    }

    #[test]
    fn discretization_matches_ode_integration() {
        let p = VehicleParams::default();
        let d = discretize(&p, 2.0);
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut rnd = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..1000 {
            let e0 = 6.0 + 134994.0 * rnd();
            let u1 = -7900.0 + 10800.0 * rnd();
            let exact = propagate(
                &d,
                SpatialState { energy: e0, time: 0.0 },
                NominalInput { net_force: u1, pace: 0.1 },
                0.0,
            )
            .energy;
            let oracle = rk4_energy(&p, e0, u1, 2.0, 256);
            assert_relative_eq!(exact, oracle, max_relative = 1e-9, epsilon = 1e-9);
        }
    }
}
