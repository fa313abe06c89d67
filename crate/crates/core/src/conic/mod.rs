//! Rotated-cone programs and a self-contained primal-dual interior-point
//! solver.
//!
//! Programs are built from linear equalities/inequalities over affine
//! expressions plus rotated second-order cones `2*u*v >= |z|^2, u,v >= 0`,
//! with a linear objective. Three helpers encode the recurring patterns of
//! the trajectory problems: the hyperbolic pace relaxation, quadratic stage
//! cost epigraphs, and squared hinge penalties.
//!
//! The solver is a homogeneous self-dual embedding with Nesterov-Todd
//! scaling and Mehrotra predictor-corrector steps; the reduced KKT system is
//! solved by a bandwidth-minimized LDL^T factorization, which keeps the
//! per-iteration cost linear in the horizon length for the banded
//! optimal-control programs built here. Solves are deterministic: identical
//! programs produce bit-identical solutions.

mod kkt;
mod solver;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

/// Index of a decision variable.
pub type Var = usize;

#[derive(Clone, Debug, PartialEq)]
pub enum ConicError {
    /// Epigraph of a quadratic needs a positive leading coefficient.
    NonConvex,
    /// An expression referenced a variable that was never declared.
    BadVariable(Var),
}

impl core::fmt::Display for ConicError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ConicError::NonConvex => write!(f, "quadratic epigraph requires q2 > 0"),
            ConicError::BadVariable(v) => write!(f, "undeclared variable index {v}"),
        }
    }
}

impl core::error::Error for ConicError {}

/// Sparse affine expression `sum coeff_i * x_i + constant`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(Var, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn var(v: Var) -> Self {
        LinExpr { terms: vec![(v, 1.0)], constant: 0.0 }
    }

    pub fn constant(c: f64) -> Self {
        LinExpr { terms: Vec::new(), constant: c }
    }

    pub fn term(v: Var, coeff: f64) -> Self {
        LinExpr { terms: vec![(v, coeff)], constant: 0.0 }
    }

    pub fn plus_term(mut self, v: Var, coeff: f64) -> Self {
        self.terms.push((v, coeff));
        self
    }

    pub fn plus_const(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn minus(mut self, other: &LinExpr) -> Self {
        for &(v, c) in &other.terms {
            self.terms.push((v, -c));
        }
        self.constant -= other.constant;
        self
    }

    pub fn plus(mut self, other: &LinExpr) -> Self {
        self.terms.extend(other.terms.iter().copied());
        self.constant += other.constant;
        self
    }

    pub fn scaled(mut self, f: f64) -> Self {
        for t in &mut self.terms {
            t.1 *= f;
        }
        self.constant *= f;
        self
    }

    /// Merges duplicate variables and drops exact zeros; sorted by index.
    fn normalized(&self) -> Vec<(Var, f64)> {
        let mut t = self.terms.clone();
        t.sort_unstable_by_key(|&(v, _)| v);
        let mut out: Vec<(Var, f64)> = Vec::with_capacity(t.len());
        for (v, c) in t {
            match out.last_mut() {
                Some(last) if last.0 == v => last.1 += c,
                _ => out.push((v, c)),
            }
        }
        out.retain(|&(_, c)| c != 0.0);
        out
    }
}

/// One rotated cone `2*u*v >= |z|^2` over affine expressions.
#[derive(Clone, Debug)]
pub struct RotatedCone {
    pub u: LinExpr,
    pub v: LinExpr,
    pub z: Vec<LinExpr>,
}

/// Handles returned by [`ConicProgram::add_pace_relaxation`].
#[derive(Clone, Copy, Debug)]
pub struct PaceCone {
    /// Auxiliary speed-like variable `w` with `w^2 <= 2E/m` and `zeta*w >= 1`.
    pub speed: Var,
    /// Index of the first of the two rotated cones in the program.
    pub first_cone: usize,
}

/// Mutable single-owner builder for one conic program.
#[derive(Clone, Debug, Default)]
pub struct ConicProgram {
    num_vars: usize,
    names: Vec<Option<&'static str>>,
    scale_hints: Vec<f64>,
    eqs: Vec<(LinExpr, f64)>,
    ineqs: Vec<(LinExpr, f64)>,
    cones: Vec<RotatedCone>,
    objective: Vec<(Var, f64)>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self) -> Var {
        self.names.push(None);
        self.scale_hints.push(1.0);
        self.num_vars += 1;
        self.num_vars - 1
    }

    pub fn add_named_var(&mut self, name: &'static str) -> Var {
        self.names.push(Some(name));
        self.scale_hints.push(1.0);
        self.num_vars += 1;
        self.num_vars - 1
    }

    /// Declares the expected magnitude of a variable. Hints seed the
    /// equilibration so states in joules and paces in seconds-per-meter can
    /// coexist in one well-conditioned program.
    pub fn set_scale_hint(&mut self, v: Var, magnitude: f64) {
        if magnitude > 0.0 && magnitude.is_finite() {
            self.scale_hints[v] = magnitude;
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_cones(&self) -> usize {
        self.cones.len()
    }

    pub fn num_ineqs(&self) -> usize {
        self.ineqs.len()
    }

    /// Adds the equality `expr = rhs`.
    pub fn add_eq(&mut self, expr: LinExpr, rhs: f64) {
        self.check(&expr);
        self.eqs.push((expr, rhs));
    }

    /// Adds the inequality `expr <= rhs`.
    pub fn add_ineq_le(&mut self, expr: LinExpr, rhs: f64) {
        self.check(&expr);
        self.ineqs.push((expr, rhs));
    }

    /// Adds the inequality `expr >= rhs`.
    pub fn add_ineq_ge(&mut self, expr: LinExpr, rhs: f64) {
        self.add_ineq_le(expr.scaled(-1.0), -rhs);
    }

    /// Adds the rotated cone `2*u*v >= |z|^2` (with `u, v >= 0` implied).
    pub fn add_rotated_cone(&mut self, u: LinExpr, v: LinExpr, z: Vec<LinExpr>) -> usize {
        self.check(&u);
        self.check(&v);
        for e in &z {
            self.check(e);
        }
        self.cones.push(RotatedCone { u, v, z });
        self.cones.len() - 1
    }

    /// Adds `coeff * x` to the linear objective.
    pub fn add_objective_term(&mut self, v: Var, coeff: f64) {
        self.objective.push((v, coeff));
    }

    /// Encodes `zeta >= 1 / sqrt(2E/m)` exactly for `E > 0` through an
    /// auxiliary speed variable `w`: `w^2 <= 2E/m` and `zeta * w >= 1`,
    /// each a rotated cone.
    pub fn add_pace_relaxation(&mut self, energy: Var, pace: Var, mass: f64) -> PaceCone {
        let w = self.add_named_var("pace_speed");
        // Speed-like magnitude follows from the energy hint.
        let e_hint = self.scale_hints[energy];
        self.set_scale_hint(w, crate::math::sqrt(2.0 * e_hint / mass).max(1.0));
        let first = self.add_rotated_cone(
            LinExpr::var(energy),
            LinExpr::constant(1.0 / mass),
            vec![LinExpr::var(w)],
        );
        // 2 * zeta * w >= (sqrt(2))^2  <=>  zeta * w >= 1.
        self.add_rotated_cone(
            LinExpr::var(pace),
            LinExpr::var(w),
            vec![LinExpr::constant(core::f64::consts::SQRT_2)],
        );
        PaceCone { speed: w, first_cone: first }
    }

    /// Adds an epigraph variable `r >= q2*x^2 + q1*x + q0` (rotated cone)
    /// and enters `r` into the objective with unit coefficient; weights are
    /// folded by pre-scaling the quadratic coefficients.
    pub fn add_quadratic_epigraph(
        &mut self,
        x: Var,
        q2: f64,
        q1: f64,
        q0: f64,
    ) -> Result<Var, ConicError> {
        if !(q2 > 0.0) {
            return Err(ConicError::NonConvex);
        }
        let r = self.add_named_var("epigraph");
        let xh = self.scale_hints[x];
        self.set_scale_hint(r, (q2 * xh * xh + crate::math::abs(q1) * xh + crate::math::abs(q0)).max(1.0));
        // u = r - q1 x - q0, v = 1/(2 q2), z = x: 2uv >= z^2 <=> r >= q(x).
        self.add_rotated_cone(
            LinExpr::var(r).plus_term(x, -q1).plus_const(-q0),
            LinExpr::constant(1.0 / (2.0 * q2)),
            vec![LinExpr::var(x)],
        );
        self.add_objective_term(r, 1.0);
        Ok(r)
    }

    /// Adds `weight * (max(0, cap - margin))^2` to the objective through a
    /// slack `s >= cap - margin, s >= 0` and an epigraph `r >= weight * s^2`.
    /// Returns the epigraph variable (unit objective coefficient).
    pub fn add_hinge_square(&mut self, margin: LinExpr, cap: f64, weight: f64) -> Var {
        let s = self.add_named_var("hinge_slack");
        self.set_scale_hint(s, crate::math::abs(cap).max(0.1));
        // margin + s >= cap and s >= 0.
        self.add_ineq_ge(margin.plus_term(s, 1.0), cap);
        self.add_ineq_ge(LinExpr::var(s), 0.0);
        let r = self.add_named_var("hinge_cost");
        self.set_scale_hint(r, (weight * cap * cap).max(0.1));
        self.add_rotated_cone(
            LinExpr::var(r),
            LinExpr::constant(1.0 / (2.0 * weight)),
            vec![LinExpr::var(s)],
        );
        self.add_objective_term(r, 1.0);
        r
    }

    /// Solves the program; pure with respect to the builder.
    pub fn solve(&self, settings: &SolverSettings) -> Solution {
        solver::solve(self, settings)
    }

    /// Plain-text standard-form listing for debugging.
    ///
    /// Grammar (one entry per line):
    /// ```text
    /// program <num_vars> vars, <eqs> eq, <ineqs> ineq, <cones> rsoc
    /// var x<i> [name]
    /// min: <linear-combination>
    /// eq: <linear-combination> = <rhs>
    /// le: <linear-combination> <= <rhs>
    /// rsoc: 2 (<expr>) (<expr>) >= (<expr>)^2 [+ (<expr>)^2 ...]
    /// ```
    /// where `<linear-combination>` is `c0*x0 + c1*x1 + ... [+ const]` with
    /// coefficients printed in full precision.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "program {} vars, {} eq, {} ineq, {} rsoc",
            self.num_vars,
            self.eqs.len(),
            self.ineqs.len(),
            self.cones.len()
        );
        for (i, name) in self.names.iter().enumerate() {
            match name {
                Some(n) => {
                    let _ = writeln!(out, "var x{i} {n}");
                }
                None => {
                    let _ = writeln!(out, "var x{i}");
                }
            }
        }
        let mut obj = LinExpr::default();
        for &(v, c) in &self.objective {
            obj.terms.push((v, c));
        }
        let _ = writeln!(out, "min: {}", fmt_expr(&obj));
        for (e, rhs) in &self.eqs {
            let _ = writeln!(out, "eq: {} = {rhs}", fmt_expr(e));
        }
        for (e, rhs) in &self.ineqs {
            let _ = writeln!(out, "le: {} <= {rhs}", fmt_expr(e));
        }
        for c in &self.cones {
            let mut z = String::new();
            for (i, e) in c.z.iter().enumerate() {
                if i > 0 {
                    z.push_str(" + ");
                }
                let _ = write!(z, "({})^2", fmt_expr(e));
            }
            let _ = writeln!(out, "rsoc: 2 ({}) ({}) >= {z}", fmt_expr(&c.u), fmt_expr(&c.v));
        }
        out
    }

    fn check(&self, e: &LinExpr) {
        for &(v, _) in &e.terms {
            assert!(v < self.num_vars, "undeclared variable index {v}");
        }
    }

    pub(crate) fn parts(
        &self,
    ) -> (usize, &[(LinExpr, f64)], &[(LinExpr, f64)], &[RotatedCone], &[(Var, f64)]) {
        (self.num_vars, &self.eqs, &self.ineqs, &self.cones, &self.objective)
    }

    pub(crate) fn scale_hints(&self) -> &[f64] {
        &self.scale_hints
    }
}

fn fmt_expr(e: &LinExpr) -> String {
    let mut s = String::new();
    for (i, (v, c)) in e.normalized().iter().enumerate() {
        if i > 0 {
            s.push_str(" + ");
        }
        let _ = write!(s, "{c}*x{v}");
    }
    if e.constant != 0.0 || s.is_empty() {
        if !s.is_empty() {
            s.push_str(" + ");
        }
        let _ = write!(s, "{}", e.constant);
    }
    s
}

/// Solver configuration; the defaults meet the artifact-wide requirement
/// that optimal solutions certify a KKT residual no worse than 1e-7.
#[derive(Clone, Copy, Debug)]
pub struct SolverSettings {
    /// Normalized primal/dual feasibility tolerance.
    pub feas_tol: f64,
    /// Duality-gap tolerance (absolute against objective scale and relative).
    pub gap_tol: f64,
    /// Iteration cap.
    pub max_iter: usize,
    /// Static regularization added to the quasidefinite KKT system.
    pub static_reg: f64,
    /// Fraction of the step to the cone boundary taken each iteration.
    pub step_back: f64,
    /// Ruiz equilibration sweeps.
    pub ruiz_iters: usize,
    /// Iterative-refinement rounds per KKT solve.
    pub refine_rounds: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            feas_tol: 1e-7,
            gap_tol: 1e-7,
            max_iter: 200,
            static_reg: 1e-8,
            step_back: 0.99,
            ruiz_iters: 8,
            refine_rounds: 3,
        }
    }
}

/// Certified outcome of a solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

/// Primal solution plus certification data.
#[derive(Clone, Debug)]
pub struct Solution {
    pub status: SolveStatus,
    pub primal: Vec<f64>,
    pub objective: f64,
    /// Max of normalized primal residual, dual residual, cone violation and
    /// duality gap at the returned point.
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl Solution {
    pub fn value(&self, v: Var) -> f64 {
        self.primal[v]
    }
}
