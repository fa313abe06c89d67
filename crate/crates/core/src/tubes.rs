//! Disturbance sets, observer/feedback gain design, robust invariant tubes,
//! and constraint tightening.
//!
//! Because the spatial dynamics are diagonal, diagonal observer and feedback
//! gains keep both closed loops diagonal; every set here is then an exact
//! axis-aligned box and the invariant tubes come out as closed-form geometric
//! sums. Tubes are computed once per vehicle class, offline, and shared.

use crate::dynamics::{DiscreteDynamics, NominalInput, SpatialState};
use crate::math;

#[derive(Clone, Debug, PartialEq)]
pub enum TubeError {
    /// Minkowski difference would be empty on the named axis.
    EmptyDifference { axis: &'static str },
    /// Requested closed-loop poles are not strictly inside the unit circle.
    UnstablePoles,
    /// A tightened constraint set came out empty.
    TighteningInfeasible { constraint: &'static str },
}

impl core::fmt::Display for TubeError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TubeError::EmptyDifference { axis } => {
                write!(f, "empty Minkowski difference on the {axis} axis")
            }
            TubeError::UnstablePoles => write!(f, "closed-loop poles must lie in (-1, 1)"),
            TubeError::TighteningInfeasible { constraint } => {
                write!(f, "tube larger than the {constraint} constraint set")
            }
        }
    }
}

impl core::error::Error for TubeError {}

/// Axis-aligned box in the (energy, time) plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box2 {
    pub center: [f64; 2],
    pub half: [f64; 2],
}

impl Box2 {
    pub fn zero() -> Self {
        Box2 { center: [0.0; 2], half: [0.0; 2] }
    }

    /// Zero-centered box with the given half-widths.
    pub fn symmetric(half_energy: f64, half_time: f64) -> Self {
        debug_assert!(half_energy >= 0.0 && half_time >= 0.0);
        Box2 { center: [0.0; 2], half: [half_energy, half_time] }
    }

    /// Minkowski sum: centers add, half-widths add.
    pub fn sum(&self, other: &Box2) -> Box2 {
        Box2 {
            center: [self.center[0] + other.center[0], self.center[1] + other.center[1]],
            half: [self.half[0] + other.half[0], self.half[1] + other.half[1]],
        }
    }

    /// Minkowski (erosion) difference; exact for axis-aligned boxes.
    pub fn diff(&self, other: &Box2) -> Result<Box2, TubeError> {
        let he = self.half[0] - other.half[0];
        let ht = self.half[1] - other.half[1];
        if he < 0.0 {
            return Err(TubeError::EmptyDifference { axis: "energy" });
        }
        if ht < 0.0 {
            return Err(TubeError::EmptyDifference { axis: "time" });
        }
        Ok(Box2 {
            center: [self.center[0] - other.center[0], self.center[1] - other.center[1]],
            half: [he, ht],
        })
    }

    /// Image under a diagonal linear map.
    pub fn linmap(&self, diag: [f64; 2]) -> Box2 {
        Box2 {
            center: [diag[0] * self.center[0], diag[1] * self.center[1]],
            half: [math::abs(diag[0]) * self.half[0], math::abs(diag[1]) * self.half[1]],
        }
    }

    pub fn scale(&self, c: f64) -> Box2 {
        debug_assert!(c >= 0.0);
        self.linmap([c, c])
    }

    pub fn contains(&self, point: [f64; 2], tol: f64) -> bool {
        (0..2).all(|i| math::abs(point[i] - self.center[i]) <= self.half[i] + tol)
    }

    pub fn subset_of(&self, other: &Box2, tol: f64) -> bool {
        (0..2).all(|i| {
            let lo = self.center[i] - self.half[i];
            let hi = self.center[i] + self.half[i];
            lo >= other.center[i] - other.half[i] - tol
                && hi <= other.center[i] + other.half[i] + tol
        })
    }
}

/// Bounds of the process and measurement disturbances in state units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisturbanceBounds {
    /// Process noise bound on the energy state (J); the time row carries none.
    pub process_energy: f64,
    /// Measurement noise bound on energy (J).
    pub meas_energy: f64,
    /// Measurement noise bound on time (s).
    pub meas_time: f64,
}

impl DisturbanceBounds {
    /// Converts speed-unit bounds to energy units via `E = m v^2 / 2`
    /// applied to the bound itself.
    pub fn from_speed_bounds(mass: f64, process_v: f64, meas_v: f64, meas_t: f64) -> Self {
        DisturbanceBounds {
            process_energy: 0.5 * mass * process_v * process_v,
            meas_energy: 0.5 * mass * meas_v * meas_v,
            meas_time: meas_t,
        }
    }

    /// Process-noise set: energy only.
    pub fn process_box(&self) -> Box2 {
        Box2::symmetric(self.process_energy, 0.0)
    }

    /// Measurement-noise set.
    pub fn meas_box(&self) -> Box2 {
        Box2::symmetric(self.meas_energy, self.meas_time)
    }

    pub fn zero() -> Self {
        DisturbanceBounds { process_energy: 0.0, meas_energy: 0.0, meas_time: 0.0 }
    }
}

/// Diagonal observer and feedback gains with their closed-loop matrices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GainPair {
    /// Observer gain diag(L_c).
    pub observer_gain: [f64; 2],
    /// Feedback gain diag(K).
    pub feedback_gain: [f64; 2],
    /// Observer loop A - L_c C (diagonal entries = observer poles).
    pub observer_loop: [f64; 2],
    /// Control loop A + B K (diagonal entries = feedback poles).
    pub feedback_loop: [f64; 2],
}

/// Pole placement on the diagonal system: `L_c = diag(a11-l1, a22-l2)`,
/// `K = diag((f1-a11)/b11, (f2-a22)/b22)`.
pub fn design_gains(
    d: &DiscreteDynamics,
    observer_poles: [f64; 2],
    feedback_poles: [f64; 2],
) -> Result<GainPair, TubeError> {
    for pole in observer_poles.iter().chain(feedback_poles.iter()) {
        if !(math::abs(*pole) < 1.0) {
            return Err(TubeError::UnstablePoles);
        }
    }
    if d.b11 == 0.0 || d.b22 == 0.0 {
        return Err(TubeError::UnstablePoles);
    }
    Ok(GainPair {
        observer_gain: [d.a11 - observer_poles[0], d.a22 - observer_poles[1]],
        feedback_gain: [
            (feedback_poles[0] - d.a11) / d.b11,
            (feedback_poles[1] - d.a22) / d.b22,
        ],
        observer_loop: observer_poles,
        feedback_loop: feedback_poles,
    })
}

/// Estimation-error disturbance set `W (+) L_c V`.
///
/// The error recursion is driven by `w - L_c v`; for symmetric boxes the
/// worst case is the reflected sum, so Minkowski addition is used.
pub fn estimation_disturbance_set(g: &GainPair, b: &DisturbanceBounds) -> Box2 {
    b.process_box().sum(&b.meas_box().linmap(g.observer_gain))
}

/// Tracking-error disturbance set `L_c S~ (+) L_c V` (C = I).
pub fn tracking_disturbance_set(
    g: &GainPair,
    estimation_tube: &Box2,
    b: &DisturbanceBounds,
) -> Box2 {
    estimation_tube.linmap(g.observer_gain).sum(&b.meas_box().linmap(g.observer_gain))
}

/// Truncated-sum robust invariant box for a diagonal stable loop: smallest
/// n with `A^n D (subset) mu D`, `mu <= mu_target`, then
/// `S = (1-mu)^{-1} sum_{j<n} |A|^j D` per axis.
///
/// Returns the box and the truncation pair (n, mu); `A S (+) D (subset) S`
/// holds by construction and is asserted numerically.
pub fn invariant_box(a_diag: [f64; 2], delta: &Box2, mu_target: f64) -> (Box2, usize, f64) {
    debug_assert!(mu_target > 0.0 && mu_target < 1.0);
    debug_assert!(delta.center == [0.0; 2], "invariant tubes take zero-centered sets");
    let rho = a_diag
        .iter()
        .zip(delta.half.iter())
        .filter(|&(_, &h)| h > 0.0)
        .map(|(&a, _)| math::abs(a))
        .fold(0.0f64, f64::max);
    if rho == 0.0 {
        // Either delta = {0} or the loop is deadbeat on all active axes.
        let s = *delta;
        debug_assert!(invariance_holds(a_diag, delta, &s));
        return (s, 1, 0.0);
    }
    let mut n = 1usize;
    let mut pow = rho;
    while pow > mu_target {
        pow *= rho;
        n += 1;
    }
    let mu = pow;
    let mut half = [0.0f64; 2];
    for i in 0..2 {
        let a = math::abs(a_diag[i]);
        let sum = if a == 0.0 {
            delta.half[i]
        } else {
            delta.half[i] * (1.0 - math::powi(a, n as i32)) / (1.0 - a)
        };
        half[i] = sum / (1.0 - mu);
    }
    let s = Box2 { center: [0.0; 2], half };
    debug_assert!(invariance_holds(a_diag, delta, &s));
    (s, n, mu)
}

fn invariance_holds(a_diag: [f64; 2], delta: &Box2, s: &Box2) -> bool {
    s.linmap(a_diag).sum(delta).subset_of(s, 1e-9 * (1.0 + s.half[0].max(s.half[1])))
}

/// Estimation and tracking invariant tubes of one vehicle class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TubeSet {
    /// Estimation tube: contains x - x_hat for all admissible noise.
    pub estimation: Box2,
    /// Tracking tube: contains x_hat - nominal prediction.
    pub tracking: Box2,
    /// Combined tube, estimation (+) tracking.
    pub combined: Box2,
    pub est_n: usize,
    pub est_mu: f64,
    pub trk_n: usize,
    pub trk_mu: f64,
}

/// Full offline tube design for one vehicle class.
pub fn design_tubes(g: &GainPair, b: &DisturbanceBounds, mu_target: f64) -> TubeSet {
    let delta_est = estimation_disturbance_set(g, b);
    let (estimation, est_n, est_mu) = invariant_box(g.observer_loop, &delta_est, mu_target);
    let delta_trk = tracking_disturbance_set(g, &estimation, b);
    let (tracking, trk_n, trk_mu) = invariant_box(g.feedback_loop, &delta_trk, mu_target);
    TubeSet {
        estimation,
        tracking,
        combined: estimation.sum(&tracking),
        est_n,
        est_mu,
        trk_n,
        trk_mu,
    }
}

/// Constraint sets after tube tightening, ready for the nominal controller.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TightenedSets {
    /// Nominal energy window.
    pub energy_min: f64,
    pub energy_max: f64,
    /// Nominal wheel-force window.
    pub force_min: f64,
    pub force_max: f64,
    /// Rear-end gap after inflation by own + predecessor time half-widths.
    pub time_gap: f64,
    /// Margin added to hard merging-zone ordering constraints.
    pub mz_margin: f64,
}

/// Applies the tube tightening to the state and input constraint sets.
///
/// Energy bounds shrink by the vehicle's own combined-tube energy width
/// (the predecessor's uncertainty does not constrain the own energy); the
/// force window shrinks by the feedback image |K| of the tracking tube; gap
/// and ordering constraints inflate by the sum of both vehicles' combined
/// time half-widths, so ordering of the actual trajectories is implied by
/// the nominal ones.
pub fn tighten_sets(
    energy_window: (f64, f64),
    force_window: (f64, f64),
    time_gap: f64,
    gains: &GainPair,
    own: &TubeSet,
    predecessor: Option<&TubeSet>,
) -> Result<TightenedSets, TubeError> {
    let se = own.combined.half[0];
    let energy_min = energy_window.0 + se;
    let energy_max = energy_window.1 - se;
    if energy_min > energy_max {
        return Err(TubeError::TighteningInfeasible { constraint: "energy window" });
    }
    let kf = math::abs(gains.feedback_gain[0]) * own.tracking.half[0];
    let force_min = force_window.0 + kf;
    let force_max = force_window.1 - kf;
    if force_min > force_max {
        return Err(TubeError::TighteningInfeasible { constraint: "force window" });
    }
    let own_t = own.combined.half[1];
    let pred_t = predecessor.map(|p| p.combined.half[1]).unwrap_or(0.0);
    Ok(TightenedSets {
        energy_min,
        energy_max,
        force_min,
        force_max,
        time_gap: time_gap + own_t + pred_t,
        mz_margin: own_t + pred_t,
    })
}

/// Luenberger observer update `x_hat' = A x_hat + B u + L_c (y - x_hat)`.
pub fn observer_update(
    g: &GainPair,
    d: &DiscreteDynamics,
    xhat: SpatialState,
    u: NominalInput,
    y: SpatialState,
) -> SpatialState {
    SpatialState {
        energy: d.a11 * xhat.energy
            + d.b11 * u.net_force
            + g.observer_gain[0] * (y.energy - xhat.energy),
        time: d.a22 * xhat.time + d.b22 * u.pace + g.observer_gain[1] * (y.time - xhat.time),
    }
}

/// Ancillary feedback `u = u_nom + K (x_hat - x_nom)`.
pub fn feedback_control(
    g: &GainPair,
    u_nom: NominalInput,
    xhat: SpatialState,
    x_nom: SpatialState,
) -> NominalInput {
    NominalInput {
        net_force: u_nom.net_force + g.feedback_gain[0] * (xhat.energy - x_nom.energy),
        pace: u_nom.pace + g.feedback_gain[1] * (xhat.time - x_nom.time),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::discretize;
    use crate::model::VehicleParams;
    use approx::assert_relative_eq;

    fn paper_bounds() -> DisturbanceBounds {
        DisturbanceBounds::from_speed_bounds(1200.0, 0.1, 0.1, 0.1)
    }

    fn default_gains() -> GainPair {
        let d = discretize(&VehicleParams::default(), 2.0);
        design_gains(&d, [0.5, 0.5], [0.6, 0.6]).unwrap()
    }

    #[test]
    fn box_algebra_examples() {
        let a = Box2::symmetric(6.0, 0.0);
        let b = Box2::symmetric(3.0, 0.05);
        let s = a.sum(&b);
        assert_eq!(s.half, [9.0, 0.05]);

        let w = Box2::symmetric(10.0, 1.0);
        let v = Box2::symmetric(4.0, 0.2);
        let d = w.diff(&v).unwrap();
        assert_eq!(d.half, [6.0, 0.8]);
        assert!(d.sum(&v).subset_of(&w, 0.0));

        assert!(matches!(
            Box2::symmetric(1.0, 1.0).diff(&Box2::symmetric(2.0, 0.0)),
            Err(TubeError::EmptyDifference { axis: "energy" })
        ));
    }

    #[test]
    fn gain_design_examples() {
        let g = default_gains();
        assert_relative_eq!(g.observer_gain[0], 0.49843456, max_relative = 1e-7);
        assert_relative_eq!(g.observer_gain[1], 0.5);
        assert_relative_eq!(g.feedback_gain[0], -0.19937, max_relative = 1e-4);
        assert_relative_eq!(g.feedback_gain[1], -0.2);
        assert_eq!(g.observer_loop, [0.5, 0.5]);

        let d = discretize(&VehicleParams::default(), 2.0);
        assert_eq!(design_gains(&d, [1.1, 0.5], [0.6, 0.6]), Err(TubeError::UnstablePoles));
    }

    #[test]
    fn estimation_disturbance_example() {
        let g = default_gains();
        let delta = estimation_disturbance_set(&g, &paper_bounds());
        assert_relative_eq!(delta.half[0], 6.0 + 0.49843456 * 6.0, max_relative = 1e-7);
        assert_relative_eq!(delta.half[1], 0.05);

        let zero = estimation_disturbance_set(&g, &DisturbanceBounds::zero());
        assert_eq!(zero, Box2::zero());

        let no_gain = GainPair { observer_gain: [0.0, 0.0], ..g };
        let w_only = estimation_disturbance_set(&no_gain, &paper_bounds());
        assert_eq!(w_only.half, [6.0, 0.0]);
    }

    #[test]
    fn invariant_box_geometric_sums() {
        let (s, n, mu) = invariant_box([0.5, 0.5], &Box2::symmetric(1.0, 1.0), 1e-3);
        assert_eq!(n, 10);
        assert_relative_eq!(mu, 0.5f64.powi(10));
        assert_relative_eq!(s.half[0], 2.0, max_relative = 1e-4);
        assert_relative_eq!(s.half[0], 1.998046875 / (1.0 - mu), max_relative = 1e-12);

        let (z, _, _) = invariant_box([0.5, 0.5], &Box2::zero(), 1e-3);
        assert_eq!(z, Box2::zero());

        let (s2, n2, mu2) = invariant_box([0.5, 0.5], &Box2::symmetric(1.0, 0.0), 0.0625);
        assert_eq!(n2, 4);
        assert_relative_eq!(mu2, 0.0625);
        assert_relative_eq!(s2.half[0], 2.0, max_relative = 1e-12);
        assert_eq!(s2.half[1], 0.0);
    }

    #[test]
    fn default_tubes_are_invariant_and_exact() {
        let g = default_gains();
        let t = design_tubes(&g, &paper_bounds(), 1e-3);
        // Equal diagonal entries make the truncated sum exact: S = D/(1-a).
        assert_relative_eq!(t.estimation.half[1], 0.1, max_relative = 1e-12);
        assert_relative_eq!(t.tracking.half[1], 0.25, max_relative = 1e-12);
        assert_relative_eq!(t.combined.half[1], 0.35, max_relative = 1e-12);
        let delta = estimation_disturbance_set(&g, &paper_bounds());
        assert!(t.estimation.linmap(g.observer_loop).sum(&delta).subset_of(&t.estimation, 1e-9));
    }

    #[test]
    fn tighten_examples() {
        let g = default_gains();
        // Hand-built tubes matching the worked example numbers.
        let own = TubeSet {
            estimation: Box2::zero(),
            tracking: Box2::zero(),
            combined: Box2::symmetric(20.0, 0.1),
            est_n: 1,
            est_mu: 0.0,
            trk_n: 1,
            trk_mu: 0.0,
        };
        let pred = TubeSet { combined: Box2::symmetric(20.0, 0.1), ..own };
        let t = tighten_sets((6.0, 135_000.0), (-7800.0, 2916.67), 1.0, &g, &own, Some(&pred))
            .unwrap();
        assert_relative_eq!(t.energy_min, 26.0);
        assert_relative_eq!(t.energy_max, 134_980.0);
        assert_relative_eq!(t.time_gap, 1.2, max_relative = 1e-12);

        let lead = tighten_sets((6.0, 135_000.0), (-7800.0, 2916.67), 1.0, &g, &own, None).unwrap();
        assert_relative_eq!(lead.time_gap, 1.1, max_relative = 1e-12);

        let fat = TubeSet { combined: Box2::symmetric(1e6, 0.1), ..own };
        assert_eq!(
            tighten_sets((6.0, 135_000.0), (-7800.0, 2916.67), 1.0, &g, &fat, None),
            Err(TubeError::TighteningInfeasible { constraint: "energy window" })
        );
    }

    #[test]
    fn observer_and_feedback_examples() {
        let p = VehicleParams::default();
        let d = discretize(&p, 2.0);
        let g = default_gains();
        let xhat = SpatialState { energy: 60000.0, time: 5.0 };
        let u = NominalInput { net_force: 882.28, pace: 0.1 };
        // Zero innovation: plain propagation.
        let next = observer_update(&g, &d, xhat, u, xhat);
        let plain = crate::dynamics::propagate(&d, xhat, u, 0.0);
        assert_relative_eq!(next.energy, plain.energy);
        assert_relative_eq!(next.time, plain.time);

        // Zero tracking error: feedback passes the nominal input through.
        let fb = feedback_control(&g, u, xhat, xhat);
        assert_eq!(fb, u);

        let off = SpatialState { energy: 60100.0, time: 5.1 };
        let corr = feedback_control(&g, u, off, xhat);
        assert_relative_eq!(corr.net_force - u.net_force, g.feedback_gain[0] * 100.0,
            max_relative = 1e-12);
        assert_relative_eq!(corr.pace - u.pace, -0.2 * 0.1, max_relative = 1e-10);
    }

    /// Extreme-point disturbances never push the errors out of their tubes.
    #[test]
    fn tube_invariance_monte_carlo() {
        let g = default_gains();
        let b = paper_bounds();
        let t = design_tubes(&g, &b, 1e-3);
        let mut state = 0x5deece66d_u64;
        let mut rnd_sign = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            if state & 1 == 0 {
                -1.0
            } else {
                1.0
            }
        };
        let mut xt = [0.0f64, 0.0];
        let mut e = [0.0f64, 0.0];
        let tol = 1e-9;
        for _ in 0..100_000 {
            let w = [b.process_energy * rnd_sign(), 0.0];
            let v = [b.meas_energy * rnd_sign(), b.meas_time * rnd_sign()];
            for i in 0..2 {
                xt[i] = g.observer_loop[i] * xt[i] + w[i] - g.observer_gain[i] * v[i];
            }
            assert!(t.estimation.contains(xt, tol), "estimation error escaped: {xt:?}");
            for i in 0..2 {
                e[i] = g.feedback_loop[i] * e[i] + g.observer_gain[i] * (xt[i] + v[i]);
            }
            assert!(t.tracking.contains(e, tol), "tracking error escaped: {e:?}");
        }
    }

    /// Set-algebra laws on random boxes.
    #[test]
    fn box_algebra_laws() {
        let mut state = 0x12345u64;
        let mut rnd = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..500 {
            let a = Box2 { center: [rnd() - 0.5, rnd() - 0.5], half: [rnd(), rnd()] };
            let b = Box2 { center: [rnd() - 0.5, rnd() - 0.5], half: [rnd(), rnd()] };
            let c = Box2 { center: [rnd() - 0.5, rnd() - 0.5], half: [rnd(), rnd()] };
            // Commutative and associative sums.
            assert_eq!(a.sum(&b), b.sum(&a));
            let left = a.sum(&b).sum(&c);
            let right = a.sum(&b.sum(&c));
            for i in 0..2 {
                assert_relative_eq!(left.center[i], right.center[i], epsilon = 1e-12);
                assert_relative_eq!(left.half[i], right.half[i], epsilon = 1e-12);
            }
            // (W - V) + V is contained in W whenever the difference exists.
            if let Ok(d) = a.diff(&b) {
                assert!(d.sum(&b).subset_of(&a, 1e-12));
            }
            // Diagonal maps distribute over sums.
            let m = [rnd() * 2.0 - 1.0, rnd() * 2.0 - 1.0];
            let lhs = a.sum(&b).linmap(m);
            let rhs = a.linmap(m).sum(&b.linmap(m));
            for i in 0..2 {
                assert_relative_eq!(lhs.center[i], rhs.center[i], epsilon = 1e-12);
                assert_relative_eq!(lhs.half[i], rhs.half[i], epsilon = 1e-12);
            }
        }
    }
}
