//! Homogeneous self-dual primal-dual interior-point method with
//! Nesterov-Todd scaling for programs over the nonnegative orthant and
//! second-order cones.
//!
//! Rotated cones `2uv >= |z|^2` are lowered to standard second-order cones
//! through `(u+v, u-v, sqrt(2) z)`. The embedding solves
//!
//! ```text
//! A x = b tau,   G x + s = h tau,   A' y + G' z + c tau = 0,
//! c' x + b' y + h' z + kappa = 0,   s, z in K,  tau, kappa >= 0,
//! ```
//!
//! so optimality, primal infeasibility, and unboundedness all come out as
//! certificates. Each iteration factors one reduced quasidefinite KKT
//! system (see [`super::kkt`]) and performs a Mehrotra predictor-corrector
//! step. Ruiz equilibration is applied once up front; all reported
//! residuals refer to the original problem data.

use alloc::vec;
use alloc::vec::Vec;

use super::kkt::{KktSolver, SparseRow};
use super::{ConicProgram, Solution, SolveStatus, SolverSettings};
use crate::math;

/// Cone block layout over the slack vector: `m_lin` scalar rows followed by
/// second-order cones of the listed dimensions.
struct Layout {
    m_lin: usize,
    soc_dims: Vec<usize>,
    m: usize,
}

impl Layout {
    fn degree(&self) -> usize {
        self.m_lin + self.soc_dims.len()
    }
}

struct StdForm {
    n: usize,
    a_rows: Vec<SparseRow>,
    b: Vec<f64>,
    g_rows: Vec<SparseRow>,
    h: Vec<f64>,
    c: Vec<f64>,
    layout: Layout,
    // Scaling back to original units.
    row_a: Vec<f64>,
    row_g: Vec<f64>,
    col: Vec<f64>,
    cost_scale: f64,
    // Original-data norms for normalized residuals.
    norm_b: f64,
    norm_h: f64,
    norm_c: f64,
}

fn expr_to_row(terms: &[(usize, f64)]) -> SparseRow {
    terms.iter().map(|&(v, c)| (v as u32, c)).collect()
}

fn lower(prog: &ConicProgram) -> StdForm {
    let (n, eqs, ineqs, cones, objective) = prog.parts();

    let mut a_rows: Vec<SparseRow> = Vec::with_capacity(eqs.len());
    let mut b = Vec::with_capacity(eqs.len());
    for (e, rhs) in eqs {
        let t = e.normalized();
        a_rows.push(expr_to_row(&t));
        b.push(rhs - e.constant);
    }

    let mut g_rows: Vec<SparseRow> = Vec::new();
    let mut h = Vec::new();
    for (e, rhs) in ineqs {
        let t = e.normalized();
        g_rows.push(expr_to_row(&t));
        h.push(rhs - e.constant);
    }
    // Guarantee at least one cone row so the embedding is well formed.
    if ineqs.is_empty() && cones.is_empty() {
        g_rows.push(Vec::new());
        h.push(1.0);
    }
    let m_lin = g_rows.len();

    let hints = prog.scale_hints();
    let expr_scale = |e: &super::LinExpr| -> f64 {
        let mut acc = math::abs(e.constant);
        for &(v, c) in &e.terms {
            acc += math::abs(c) * hints[v];
        }
        acc.max(1e-12)
    };

    let mut soc_dims = Vec::with_capacity(cones.len());
    for cone in cones {
        // 2uv >= |z|^2 is invariant under u -> alpha*u, v -> v/alpha; pick
        // alpha balancing the two magnitudes so the lowered rows
        // (u+v, u-v, sqrt(2) z) do not hide the constraint in cancellation.
        let alpha = math::sqrt(expr_scale(&cone.v) / expr_scale(&cone.u));
        let ub = cone.u.clone().scaled(alpha);
        let vb = cone.v.clone().scaled(1.0 / alpha);
        let sum = ub.clone().plus(&vb);
        let diff = ub.minus(&vb);
        for e in [&sum, &diff] {
            let t = e.normalized();
            g_rows.push(expr_to_row(&t).iter().map(|&(v, c)| (v, -c)).collect());
            h.push(e.constant);
        }
        for zx in &cone.z {
            let sq = zx.clone().scaled(core::f64::consts::SQRT_2);
            let t = sq.normalized();
            g_rows.push(expr_to_row(&t).iter().map(|&(v, c)| (v, -c)).collect());
            h.push(sq.constant);
        }
        soc_dims.push(2 + cone.z.len());
    }
    let m = g_rows.len();

    let mut c = vec![0.0; n];
    for &(v, coeff) in objective {
        c[v] += coeff;
    }

    let norm_b = inf_norm(&b);
    let norm_h = inf_norm(&h);
    let norm_c = inf_norm(&c);

    let mut sf = StdForm {
        n,
        a_rows,
        b,
        g_rows,
        h,
        c,
        layout: Layout { m_lin, soc_dims, m },
        row_a: vec![1.0; eqs.len()],
        row_g: vec![1.0; m],
        col: prog.scale_hints().to_vec(),
        cost_scale: 1.0,
        norm_b,
        norm_h,
        norm_c,
    };
    equilibrate(&mut sf);
    sf
}

/// Ruiz equilibration of the stacked constraint matrix. Rows belonging to
/// one second-order cone share a single scale so the cone is preserved.
fn equilibrate(sf: &mut StdForm) {
    for _ in 0..8 {
        // Row sweep.
        for (r, row) in sf.a_rows.iter().enumerate() {
            let norm = row.iter().fold(0.0f64, |acc, &(cidx, v)| {
                acc.max(math::abs(v * sf.row_a[r] * sf.col[cidx as usize]))
            });
            if norm > 0.0 {
                sf.row_a[r] /= math::sqrt(norm);
            }
        }
        for i in 0..sf.layout.m_lin {
            let norm = sf.g_rows[i].iter().fold(0.0f64, |acc, &(cidx, v)| {
                acc.max(math::abs(v * sf.row_g[i] * sf.col[cidx as usize]))
            });
            if norm > 0.0 {
                sf.row_g[i] /= math::sqrt(norm);
            }
        }
        let mut gi = sf.layout.m_lin;
        for &dim in &sf.layout.soc_dims {
            let mut norm = 0.0f64;
            for r in gi..gi + dim {
                for &(cidx, v) in &sf.g_rows[r] {
                    norm = norm.max(math::abs(v * sf.row_g[r] * sf.col[cidx as usize]));
                }
            }
            if norm > 0.0 {
                let f = 1.0 / math::sqrt(norm);
                for r in gi..gi + dim {
                    sf.row_g[r] *= f;
                }
            }
            gi += dim;
        }
        // Column sweep.
        let mut col_norm = vec![0.0f64; sf.n];
        for (r, row) in sf.a_rows.iter().enumerate() {
            for &(cidx, v) in row {
                let j = cidx as usize;
                col_norm[j] = col_norm[j].max(math::abs(v * sf.row_a[r] * sf.col[j]));
            }
        }
        for (r, row) in sf.g_rows.iter().enumerate() {
            for &(cidx, v) in row {
                let j = cidx as usize;
                col_norm[j] = col_norm[j].max(math::abs(v * sf.row_g[r] * sf.col[j]));
            }
        }
        for j in 0..sf.n {
            if col_norm[j] > 0.0 {
                sf.col[j] /= math::sqrt(col_norm[j]);
            }
        }
    }
    // Bake the scales into the data.
    for (r, row) in sf.a_rows.iter_mut().enumerate() {
        for e in row.iter_mut() {
            e.1 *= sf.row_a[r] * sf.col[e.0 as usize];
        }
        sf.b[r] *= sf.row_a[r];
    }
    for (r, row) in sf.g_rows.iter_mut().enumerate() {
        for e in row.iter_mut() {
            e.1 *= sf.row_g[r] * sf.col[e.0 as usize];
        }
        sf.h[r] *= sf.row_g[r];
    }
    for j in 0..sf.n {
        sf.c[j] *= sf.col[j];
    }
    // One uniform right-hand-side scale (a units change of all variables)
    // so the unit initialization starts at O(1) distance from feasibility.
    let rhs_scale = 1.0 / inf_norm(&sf.b).max(inf_norm(&sf.h)).max(1.0);
    for (r, v) in sf.b.iter_mut().enumerate() {
        *v *= rhs_scale;
        sf.row_a[r] *= rhs_scale;
    }
    for (r, v) in sf.h.iter_mut().enumerate() {
        *v *= rhs_scale;
        sf.row_g[r] *= rhs_scale;
    }
    for j in 0..sf.n {
        sf.col[j] /= rhs_scale;
    }
    let cmax = inf_norm(&sf.c);
    sf.cost_scale = rhs_scale / cmax.max(1.0);
    for v in sf.c.iter_mut() {
        *v *= sf.cost_scale / rhs_scale;
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |acc, &x| acc.max(math::abs(x)))
}

fn mat_vec(rows: &[SparseRow], x: &[f64], out: &mut [f64]) {
    for (r, row) in rows.iter().enumerate() {
        let mut acc = 0.0;
        for &(c, v) in row {
            acc += v * x[c as usize];
        }
        out[r] = acc;
    }
}

fn mat_t_vec_acc(rows: &[SparseRow], y: &[f64], out: &mut [f64]) {
    for (r, row) in rows.iter().enumerate() {
        let yr = y[r];
        if yr != 0.0 {
            for &(c, v) in row {
                out[c as usize] += v * yr;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Nesterov-Todd scaling
// ---------------------------------------------------------------------------

struct SocScaling {
    eta: f64,
    vbar: Vec<f64>,
    /// Scaled point lambda = W z = W^{-1} s.
    lambda: Vec<f64>,
    /// Dense W^{-2} block for KKT assembly.
    wi2: Vec<f64>,
}

struct Scaling {
    lin_w2: Vec<f64>,
    lin_lambda: Vec<f64>,
    soc: Vec<SocScaling>,
}

fn jmul(x: &[f64], out: &mut [f64]) {
    out[0] = x[0];
    for i in 1..x.len() {
        out[i] = -x[i];
    }
}

fn compute_scaling(layout: &Layout, s: &[f64], z: &[f64]) -> Scaling {
    let ml = layout.m_lin;
    let mut lin_w2 = Vec::with_capacity(ml);
    let mut lin_lambda = Vec::with_capacity(ml);
    for i in 0..ml {
        lin_w2.push(s[i] / z[i]);
        lin_lambda.push(math::sqrt(s[i] * z[i]));
    }
    let mut soc = Vec::with_capacity(layout.soc_dims.len());
    let mut off = ml;
    for &d in &layout.soc_dims {
        let sb = &s[off..off + d];
        let zb = &z[off..off + d];
        let a = math::sqrt(soc_residual(sb).max(1e-300));
        let bz = math::sqrt(soc_residual(zb).max(1e-300));
        let mut sn = vec![0.0; d];
        let mut zn = vec![0.0; d];
        for i in 0..d {
            sn[i] = sb[i] / a;
            zn[i] = zb[i] / bz;
        }
        let gamma = math::sqrt((1.0 + dot(&sn, &zn)) / 2.0);
        // Scaling point wbar = (sn + J zn) / (2 gamma), wbar' J wbar = 1.
        let mut vbar = vec![0.0; d];
        vbar[0] = (sn[0] + zn[0]) / (2.0 * gamma);
        for i in 1..d {
            vbar[i] = (sn[i] - zn[i]) / (2.0 * gamma);
        }
        let eta = math::sqrt(a / bz);
        let mut sc = SocScaling { eta, vbar, lambda: vec![0.0; d], wi2: vec![0.0; d * d] };
        let mut lambda = vec![0.0; d];
        apply_w(&sc, zb, &mut lambda);
        sc.lambda = lambda;
        // W^{-2} = eta^{-2} (2 (J wbar)(J wbar)' - J).
        let mut jv = vec![0.0; d];
        jmul(&sc.vbar, &mut jv);
        let ei2 = 1.0 / (eta * eta);
        for r in 0..d {
            for cidx in 0..d {
                let mut val = 2.0 * jv[r] * jv[cidx];
                if r == cidx {
                    val -= if r == 0 { 1.0 } else { -1.0 };
                }
                sc.wi2[r * d + cidx] = ei2 * val;
            }
        }
        soc.push(sc);
        off += d;
    }
    Scaling { lin_w2, lin_lambda, soc }
}

/// `x0^2 - |x1|^2` of one second-order cone point.
fn soc_residual(x: &[f64]) -> f64 {
    let mut acc = x[0] * x[0];
    for &v in &x[1..] {
        acc -= v * v;
    }
    acc
}

/// `W x` with `W = eta [[w0, w1'], [w1, I + w1 w1'/(1+w0)]]`.
fn apply_w(sc: &SocScaling, x: &[f64], out: &mut [f64]) {
    let d = x.len();
    let w = &sc.vbar;
    let mut w1x1 = 0.0;
    for i in 1..d {
        w1x1 += w[i] * x[i];
    }
    out[0] = sc.eta * (w[0] * x[0] + w1x1);
    let f = x[0] + w1x1 / (1.0 + w[0]);
    for i in 1..d {
        out[i] = sc.eta * (x[i] + f * w[i]);
    }
}

/// `W^{-1} x`; same structure with the reflected point `J wbar`.
fn apply_w_inv(sc: &SocScaling, x: &[f64], out: &mut [f64]) {
    let d = x.len();
    let w = &sc.vbar;
    let mut w1x1 = 0.0;
    for i in 1..d {
        w1x1 += w[i] * x[i];
    }
    out[0] = (w[0] * x[0] - w1x1) / sc.eta;
    let f = -x[0] + w1x1 / (1.0 + w[0]);
    for i in 1..d {
        out[i] = (x[i] + f * w[i]) / sc.eta;
    }
}

/// Jordan product `a o b` of one SOC block.
fn jordan(a: &[f64], b: &[f64], out: &mut [f64]) {
    out[0] = dot(a, b);
    for i in 1..a.len() {
        out[i] = a[0] * b[i] + b[0] * a[i];
    }
}

/// Solves `lambda o u = d` for one SOC block.
fn jordan_solve(lambda: &[f64], d: &[f64], out: &mut [f64]) {
    let dim = lambda.len();
    let mut det = lambda[0] * lambda[0];
    for &v in &lambda[1..] {
        det -= v * v;
    }
    let det = if math::abs(det) < 1e-300 { 1e-300 } else { det };
    let mut l1d1 = 0.0;
    for i in 1..dim {
        l1d1 += lambda[i] * d[i];
    }
    let u0 = (lambda[0] * d[0] - l1d1) / det;
    out[0] = u0;
    for i in 1..dim {
        out[i] = (d[i] - u0 * lambda[i]) / lambda[0];
    }
}

/// Largest step `alpha` keeping `x + alpha dx` in the cone (per block).
fn step_to_boundary_lin(x: &[f64], dx: &[f64]) -> f64 {
    let mut alpha = f64::INFINITY;
    for i in 0..x.len() {
        if dx[i] < 0.0 {
            alpha = alpha.min(-x[i] / dx[i]);
        }
    }
    alpha
}

fn step_to_boundary_soc(x: &[f64], dx: &[f64]) -> f64 {
    let d = x.len();
    let mut a2 = dx[0] * dx[0];
    let mut b = x[0] * dx[0];
    let mut c = x[0] * x[0];
    for i in 1..d {
        a2 -= dx[i] * dx[i];
        b -= x[i] * dx[i];
        c -= x[i] * x[i];
    }
    // Roots of a2 t^2 + 2 b t + c = 0 with c > 0 at the interior point.
    let mut best = f64::INFINITY;
    if math::abs(a2) < 1e-300 {
        if b < 0.0 {
            best = -c / (2.0 * b);
        }
    } else {
        let disc = b * b - a2 * c;
        if disc >= 0.0 {
            let r = math::sqrt(disc);
            let q = if b >= 0.0 { -(b + r) } else { -(b - r) };
            for root in [q / a2, if q != 0.0 { c / q } else { f64::INFINITY }] {
                if root > 1e-14 && root < best {
                    best = root;
                }
            }
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Main loop
// ---------------------------------------------------------------------------

struct Iterate {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    tau: f64,
    kappa: f64,
}

pub(super) fn solve(prog: &ConicProgram, settings: &SolverSettings) -> Solution {
    let sf = lower(prog);
    let n = sf.n;
    let p = sf.a_rows.len();
    let m = sf.layout.m;
    let deg = sf.layout.degree();

    if n == 0 {
        return Solution {
            status: SolveStatus::Optimal,
            primal: Vec::new(),
            objective: 0.0,
            kkt_residual: 0.0,
            iterations: 0,
        };
    }

    // Symbolic pattern of H = G' W^-2 G in the variable block.
    let mut pattern: Vec<(u32, u32)> = Vec::new();
    {
        let mut push_block = |rows: &[SparseRow]| {
            let mut support: Vec<u32> = Vec::new();
            for row in rows {
                for &(cidx, _) in row {
                    support.push(cidx);
                }
            }
            support.sort_unstable();
            support.dedup();
            for (ai, &i) in support.iter().enumerate() {
                for &j in &support[..=ai] {
                    pattern.push((i, j));
                }
            }
        };
        for i in 0..sf.layout.m_lin {
            push_block(core::slice::from_ref(&sf.g_rows[i]));
        }
        let mut off = sf.layout.m_lin;
        for &d in &sf.layout.soc_dims {
            push_block(&sf.g_rows[off..off + d]);
            off += d;
        }
        pattern.sort_unstable();
        pattern.dedup();
    }

    let mut kkt = KktSolver::new(n, &sf.a_rows, &pattern, settings.static_reg);

    let mut it = Iterate {
        x: vec![0.0; n],
        y: vec![0.0; p],
        z: vec![0.0; m],
        s: vec![0.0; m],
        tau: 1.0,
        kappa: 1.0,
    };
    let mut ws = Workspace::new(n, p, m);
    initialize(&mut kkt, &sf, settings, &mut it, &mut ws);
    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0;

    // Norms of the equilibrated data; residuals are measured against these,
    // in scaled units, where the hint mechanism makes magnitudes uniform.
    let nb_s = 1.0 + inf_norm(&sf.b);
    let nh_s = 1.0 + inf_norm(&sf.h);
    let nc_s = 1.0 + inf_norm(&sf.c);
    let mut last_metric = f64::INFINITY;

    for iter in 0..settings.max_iter {
        iterations = iter;
        let tau = it.tau;
        let rx = &mut ws.rx;
        rx.iter_mut().for_each(|v| *v = 0.0);
        mat_t_vec_acc(&sf.a_rows, &it.y, rx);
        mat_t_vec_acc(&sf.g_rows, &it.z, rx);
        for j in 0..n {
            rx[j] += sf.c[j] * it.tau;
        }
        mat_vec(&sf.a_rows, &it.x, &mut ws.ry);
        for r in 0..p {
            ws.ry[r] -= sf.b[r] * it.tau;
        }
        mat_vec(&sf.g_rows, &it.x, &mut ws.rz);
        for r in 0..m {
            ws.rz[r] += it.s[r] - sf.h[r] * it.tau;
        }
        let ctx = dot(&sf.c, &it.x);
        let bty = dot(&sf.b, &it.y);
        let htz = dot(&sf.h, &it.z);
        let rtau = ctx + bty + htz + it.kappa;

        let eqres = inf_norm(&ws.ry) / (tau * nb_s);
        let coneres = inf_norm(&ws.rz) / (tau * nh_s);
        let dualres = inf_norm(rx) / (tau * nc_s);
        // Duality gap measured on the equilibrated problem, where the
        // objective is O(1) by construction.
        let pobj_s = ctx / tau;
        let dobj_s = -(bty + htz) / tau;
        let gap_abs = dot(&it.s, &it.z) / (tau * tau);
        let relgap = math::abs(pobj_s - dobj_s) / pobj_s.abs().max(dobj_s.abs()).max(1.0);
        let gap_ok =
            gap_abs <= settings.gap_tol * pobj_s.abs().max(1.0) || relgap <= settings.gap_tol;
        last_metric = eqres.max(coneres).max(dualres).max(relgap.min(gap_abs));

        if eqres <= settings.feas_tol
            && coneres <= settings.feas_tol
            && dualres <= settings.feas_tol
            && gap_ok
        {
            status = SolveStatus::Optimal;
            break;
        }

        // Infeasibility certificates (checked on scaled data; sound by weak
        // duality since z stays in the cone throughout).
        let ct = bty + htz;
        if ct < -1e-12 {
            let mut cert = 0.0f64;
            for j in 0..n {
                cert = cert.max(math::abs(rx[j] - sf.c[j] * it.tau));
            }
            let scale = (-ct).max(inf_norm(&it.y) + inf_norm(&it.z));
            if cert <= 1e-8 * scale {
                status = SolveStatus::Infeasible;
                break;
            }
        }
        if ctx < -1e-12 {
            let mut cert = 0.0f64;
            for r in 0..p {
                cert = cert.max(math::abs(ws.ry[r] + sf.b[r] * it.tau));
            }
            for r in 0..m {
                cert = cert.max(math::abs(ws.rz[r] + sf.h[r] * it.tau));
            }
            let scale = (-ctx).max(inf_norm(&it.x) + inf_norm(&it.s));
            if cert <= 1e-8 * scale {
                status = SolveStatus::Unbounded;
                break;
            }
        }

        let mu = (dot(&it.s, &it.z) + it.tau * it.kappa) / (deg + 1) as f64;

        // Scaling and KKT factorization.
        let sc = compute_scaling(&sf.layout, &it.s, &it.z);
        assemble_kkt(&mut kkt, &sf, &sc);
        kkt.factor();

        // Constant-column solve K w = (-c, b, h).
        for j in 0..n {
            ws.b3x[j] = -sf.c[j];
        }
        ws.b3y.copy_from_slice(&sf.b);
        ws.b3z.copy_from_slice(&sf.h);
        solve_reduced(&mut kkt, &sf, &sc, &ws.b3x, &ws.b3y, &ws.b3z, settings, &mut ws.sol_w);

        let g_w = dot(&sf.c, &ws.sol_w.x) + dot(&sf.b, &ws.sol_w.y) + dot(&sf.h, &ws.sol_w.z);
        let denom_tau = g_w - it.kappa / it.tau;
        if math::abs(denom_tau) < 1e-300 {
            break;
        }

        // Affine (predictor) direction: full residual decrement, target
        // complementarity -lambda o lambda and -tau kappa.
        neg_lambda_sq(&sf.layout, &sc, &mut ws.ds);
        let dkt_aff = -it.tau * it.kappa;
        compute_direction(
            &sf, &sc, &mut kkt, settings, &mut ws, -1.0, dkt_aff, denom_tau, it.tau, it.kappa,
            rtau,
        );
        let alpha_aff = max_step(&sf.layout, &it, &ws.dir).min(1.0);
        let sigma = {
            let v = 1.0 - alpha_aff;
            (v * v * v).clamp(1e-8, 0.999)
        };

        // Corrector: Mehrotra second-order term in scaled space.
        correction_term(&sf.layout, &sc, &ws.dir, &mut ws.corr);
        let musig = sigma * mu;
        build_combined_ds(&sf.layout, &sc, musig, &ws.corr, &mut ws.ds);
        let dkt = musig - it.tau * it.kappa - ws.dir.tau * ws.dir.kappa;
        compute_direction(
            &sf, &sc, &mut kkt, settings, &mut ws, sigma - 1.0, dkt, denom_tau, it.tau,
            it.kappa, rtau,
        );

        let mut alpha = (settings.step_back * max_step(&sf.layout, &it, &ws.dir)).min(1.0);

        // Tentative complementarity after the step; a blocked step or a mu
        // blow-up signals a direction corrupted by extreme scaling, and a
        // plain centering step is substituted.
        let mu_after = |ws: &Workspace, alpha: f64| {
            let mut acc = (it.tau + alpha * ws.dir.tau) * (it.kappa + alpha * ws.dir.kappa);
            for r in 0..m {
                acc += (it.s[r] + alpha * ws.dir.s[r]) * (it.z[r] + alpha * ws.dir.z[r]);
            }
            acc / (deg + 1) as f64
        };
        if alpha < 0.05 * alpha_aff.max(1e-4) || mu_after(&ws, alpha) > 10.0 * mu + 1e-14 {
            let sigma_c = sigma.max(0.8);
            let musig_c = sigma_c * mu;
            let zero_corr = vec![0.0; m];
            build_combined_ds(&sf.layout, &sc, musig_c, &zero_corr, &mut ws.ds);
            let dkt_c = musig_c - it.tau * it.kappa;
            compute_direction(
                &sf, &sc, &mut kkt, settings, &mut ws, sigma_c - 1.0, dkt_c, denom_tau,
                it.tau, it.kappa, rtau,
            );
            alpha = (settings.step_back * max_step(&sf.layout, &it, &ws.dir)).min(1.0);
            while alpha > 1e-10 && mu_after(&ws, alpha) > 10.0 * mu + 1e-14 {
                alpha *= 0.5;
            }
        }
        #[cfg(all(test, feature = "std"))]
        if std::env::var("CONIC_DEBUG").is_ok() {
            std::eprintln!(
                "it {iter:3} mu={mu:9.2e} aff={alpha_aff:8.2e} sig={sigma:8.2e} a={alpha:8.2e} \
                 eq={eqres:8.2e} cone={coneres:8.2e} dual={dualres:8.2e} gap={relgap:8.2e} \
                 tau={:8.2e} kap={:8.2e}",
                it.tau, it.kappa
            );
        }
        if alpha < 1e-10 {
            break;
        }
        for j in 0..n {
            it.x[j] += alpha * ws.dir.x[j];
        }
        for r in 0..p {
            it.y[r] += alpha * ws.dir.y[r];
        }
        for r in 0..m {
            it.z[r] += alpha * ws.dir.z[r];
            it.s[r] += alpha * ws.dir.s[r];
        }
        it.tau += alpha * ws.dir.tau;
        it.kappa += alpha * ws.dir.kappa;
    }

    extract(prog, &sf, &it, status, iterations, last_metric)
}

struct Direction {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    tau: f64,
    kappa: f64,
}

/// Least-squares initialization: with `W = I`, solve for the minimum-norm
/// primal slack (`A x = b, G x + s = h`) and dual point
/// (`A' y + G' z + c = 0`), then shift both into the cone interior. This
/// starts the iterate at the data's own scale, which matters when slack
/// magnitudes differ by orders across rows.
fn initialize(
    kkt: &mut KktSolver,
    sf: &StdForm,
    settings: &SolverSettings,
    it: &mut Iterate,
    ws: &mut Workspace,
) {
    let n = sf.n;
    let p = sf.a_rows.len();
    let m = sf.layout.m;
    let identity = identity_scaling(&sf.layout);
    assemble_kkt(kkt, sf, &identity);
    kkt.factor();

    // Primal: K (x, y, z) = (0, b, h) gives x minimizing |Gx + s - h| with
    // A x = b; the slack follows as s = h - G x = -z of this solve.
    let zeros = vec![0.0; n];
    let mut sol = ReducedSol { x: vec![0.0; n], y: vec![0.0; p], z: vec![0.0; m] };
    solve_reduced(kkt, sf, &identity, &zeros, &sf.b, &sf.h, settings, &mut sol);
    it.x.copy_from_slice(&sol.x);
    let mut s0 = vec![0.0; m];
    mat_vec(&sf.g_rows, &sol.x, &mut s0);
    for r in 0..m {
        s0[r] = sf.h[r] - s0[r];
    }
    shift_into_cone(&sf.layout, &mut s0);
    it.s.copy_from_slice(&s0);

    // Dual: K (x, y, z) = (-c, 0, 0) gives the minimum-norm multipliers.
    let mut negc = vec![0.0; n];
    for j in 0..n {
        negc[j] = -sf.c[j];
    }
    let zb = vec![0.0; m];
    let zy = vec![0.0; p];
    solve_reduced(kkt, sf, &identity, &negc, &zy, &zb, settings, &mut sol);
    it.y.copy_from_slice(&sol.y);
    let mut z0 = sol.z.clone();
    shift_into_cone(&sf.layout, &mut z0);
    it.z.copy_from_slice(&z0);
}

fn identity_scaling(layout: &Layout) -> Scaling {
    let mut sc = Scaling {
        lin_w2: vec![1.0; layout.m_lin],
        lin_lambda: vec![1.0; layout.m_lin],
        soc: Vec::with_capacity(layout.soc_dims.len()),
    };
    for &d in &layout.soc_dims {
        let mut vbar = vec![0.0; d];
        vbar[0] = 1.0;
        let mut lambda = vec![0.0; d];
        lambda[0] = 1.0;
        let mut wi2 = vec![0.0; d * d];
        for r in 0..d {
            wi2[r * d + r] = 1.0;
        }
        sc.soc.push(SocScaling { eta: 1.0, vbar, lambda, wi2 });
    }
    sc
}

/// Shifts a point to the cone interior: `v + (1 + alpha) e` where `alpha`
/// is the largest violation across blocks, or no shift if already interior
/// with margin.
fn shift_into_cone(layout: &Layout, v: &mut [f64]) {
    let mut alpha = f64::NEG_INFINITY;
    for i in 0..layout.m_lin {
        alpha = alpha.max(-v[i]);
    }
    let mut off = layout.m_lin;
    for &d in &layout.soc_dims {
        let mut nrm = 0.0;
        for i in 1..d {
            nrm += v[off + i] * v[off + i];
        }
        alpha = alpha.max(math::sqrt(nrm) - v[off]);
        off += d;
    }
    // Margin relative to the point's own magnitude, so a badly hinted
    // program still starts at a sane scale.
    let scale = v.iter().fold(0.0f64, |a, &x| a.max(math::abs(x))).max(1e-3);
    if alpha >= -1e-9 * scale {
        let shift = alpha + 0.1 * (scale + alpha.max(0.0));
        for i in 0..layout.m_lin {
            v[i] += shift;
        }
        let mut off = layout.m_lin;
        for &d in &layout.soc_dims {
            v[off] += shift;
            off += d;
        }
    }
}

struct ReducedSol {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
}

struct Workspace {
    rx: Vec<f64>,
    ry: Vec<f64>,
    rz: Vec<f64>,
    d1: Vec<f64>,
    ds: Vec<f64>,
    corr: Vec<f64>,
    gamma: Vec<f64>,
    bz: Vec<f64>,
    b3x: Vec<f64>,
    b3y: Vec<f64>,
    b3z: Vec<f64>,
    sol_w: ReducedSol,
    sol_u: ReducedSol,
    dir: Direction,
    kkt_rhs: Vec<f64>,
    kkt_out: Vec<f64>,
    kkt_work: Vec<f64>,
    tmp_m: Vec<f64>,
    tmp_m2: Vec<f64>,
    tmp_n: Vec<f64>,
}

impl Workspace {
    fn new(n: usize, p: usize, m: usize) -> Self {
        Workspace {
            rx: vec![0.0; n],
            ry: vec![0.0; p],
            rz: vec![0.0; m],
            d1: vec![0.0; n],
            ds: vec![0.0; m],
            corr: vec![0.0; m],
            gamma: vec![0.0; m],
            bz: vec![0.0; m],
            b3x: vec![0.0; n],
            b3y: vec![0.0; p],
            b3z: vec![0.0; m],
            sol_w: ReducedSol { x: vec![0.0; n], y: vec![0.0; p], z: vec![0.0; m] },
            sol_u: ReducedSol { x: vec![0.0; n], y: vec![0.0; p], z: vec![0.0; m] },
            dir: Direction {
                x: vec![0.0; n],
                y: vec![0.0; p],
                z: vec![0.0; m],
                s: vec![0.0; m],
                tau: 0.0,
                kappa: 0.0,
            },
            kkt_rhs: vec![0.0; n + p],
            kkt_out: vec![0.0; n + p],
            kkt_work: vec![0.0; n + p],
            tmp_m: vec![0.0; m],
            tmp_m2: vec![0.0; m],
            tmp_n: vec![0.0; n],
        }
    }
}

fn neg_lambda_sq(layout: &Layout, sc: &Scaling, ds: &mut [f64]) {
    for i in 0..layout.m_lin {
        ds[i] = -sc.lin_lambda[i] * sc.lin_lambda[i];
    }
    let mut off = layout.m_lin;
    for (ci, &d) in layout.soc_dims.iter().enumerate() {
        let lam = &sc.soc[ci].lambda;
        let mut sq = vec![0.0; d];
        jordan(lam, lam, &mut sq);
        for i in 0..d {
            ds[off + i] = -sq[i];
        }
        off += d;
    }
}

/// `(W^{-T} ds_aff) o (W dz_aff)` per block.
fn correction_term(layout: &Layout, sc: &Scaling, dir: &Direction, corr: &mut [f64]) {
    for i in 0..layout.m_lin {
        let wi = math::sqrt(sc.lin_w2[i]);
        corr[i] = (dir.s[i] / wi) * (wi * dir.z[i]);
    }
    let mut off = layout.m_lin;
    for (ci, &d) in layout.soc_dims.iter().enumerate() {
        let soc = &sc.soc[ci];
        let mut ws_inv = vec![0.0; d];
        let mut wz = vec![0.0; d];
        apply_w_inv(soc, &dir.s[off..off + d], &mut ws_inv);
        apply_w(soc, &dir.z[off..off + d], &mut wz);
        let mut prod = vec![0.0; d];
        jordan(&ws_inv, &wz, &mut prod);
        corr[off..off + d].copy_from_slice(&prod);
        off += d;
    }
}

fn build_combined_ds(layout: &Layout, sc: &Scaling, musig: f64, corr: &[f64], ds: &mut [f64]) {
    for i in 0..layout.m_lin {
        ds[i] = musig - sc.lin_lambda[i] * sc.lin_lambda[i] - corr[i];
    }
    let mut off = layout.m_lin;
    for (ci, &d) in layout.soc_dims.iter().enumerate() {
        let lam = &sc.soc[ci].lambda;
        let mut sq = vec![0.0; d];
        jordan(lam, lam, &mut sq);
        ds[off] = musig - sq[0] - corr[off];
        for i in 1..d {
            ds[off + i] = -sq[i] - corr[off + i];
        }
        off += d;
    }
}

/// Solves one Newton system given the residual factor `rfac` (applied to the
/// stored residuals rx, ry, rz, rtau: -1 for the predictor, -(1-sigma) for
/// the corrector) and the complementarity targets in `ws.ds` / `dkt`. The
/// direction lands in `ws.dir`.
#[allow(clippy::too_many_arguments)]
fn compute_direction(
    sf: &StdForm,
    sc: &Scaling,
    kkt: &mut KktSolver,
    settings: &SolverSettings,
    ws: &mut Workspace,
    rfac: f64,
    dkt: f64,
    denom_tau: f64,
    tau: f64,
    kappa: f64,
    rtau: f64,
) {
    let n = sf.n;
    let p = sf.a_rows.len();
    let m = sf.layout.m;

    // gamma = lambda \ ds per block.
    for i in 0..sf.layout.m_lin {
        ws.gamma[i] = ws.ds[i] / sc.lin_lambda[i];
    }
    let mut off = sf.layout.m_lin;
    for (ci, &d) in sf.layout.soc_dims.iter().enumerate() {
        let mut out = vec![0.0; d];
        jordan_solve(&sc.soc[ci].lambda, &ws.ds[off..off + d], &mut out);
        ws.gamma[off..off + d].copy_from_slice(&out);
        off += d;
    }
    // bz = rfac*rz - W gamma.
    apply_w_blocks(&sf.layout, sc, &ws.gamma, &mut ws.tmp_m);
    for r in 0..m {
        ws.bz[r] = rfac * ws.rz[r] - ws.tmp_m[r];
    }
    for j in 0..n {
        ws.d1[j] = rfac * ws.rx[j];
    }
    for r in 0..p {
        ws.b3y[r] = rfac * ws.ry[r];
    }
    // Reuse b3y as the equality rhs; bz holds the cone rhs.
    let (d1, b3y, bz) = (ws.d1.clone(), ws.b3y.clone(), ws.bz.clone());
    solve_reduced(kkt, sf, sc, &d1, &b3y, &bz, settings, &mut ws.sol_u);

    let g_u = dot(&sf.c, &ws.sol_u.x) + dot(&sf.b, &ws.sol_u.y) + dot(&sf.h, &ws.sol_u.z);
    let dtau = (rfac * rtau - dkt / tau - g_u) / denom_tau;

    for j in 0..n {
        ws.dir.x[j] = ws.sol_u.x[j] + dtau * ws.sol_w.x[j];
    }
    for r in 0..p {
        ws.dir.y[r] = ws.sol_u.y[r] + dtau * ws.sol_w.y[r];
    }
    for r in 0..m {
        ws.dir.z[r] = ws.sol_u.z[r] + dtau * ws.sol_w.z[r];
    }
    // Recover ds from the linear equation G dx + ds - h dtau = rfac*rz so
    // primal cone feasibility is not contaminated by the scaling, whose
    // condition number blows up as mu -> 0.
    mat_vec(&sf.g_rows, &ws.dir.x, &mut ws.tmp_m);
    for r in 0..m {
        ws.dir.s[r] = rfac * ws.rz[r] + dtau * sf.h[r] - ws.tmp_m[r];
    }
    ws.dir.tau = dtau;
    ws.dir.kappa = (dkt - kappa * dtau) / tau;
}

fn apply_w_blocks(layout: &Layout, sc: &Scaling, x: &[f64], out: &mut [f64]) {
    for i in 0..layout.m_lin {
        out[i] = math::sqrt(sc.lin_w2[i]) * x[i];
    }
    let mut off = layout.m_lin;
    for (ci, &d) in layout.soc_dims.iter().enumerate() {
        let mut o = vec![0.0; d];
        apply_w(&sc.soc[ci], &x[off..off + d], &mut o);
        out[off..off + d].copy_from_slice(&o);
        off += d;
    }
}

fn apply_w_inv2_blocks(layout: &Layout, sc: &Scaling, x: &[f64], out: &mut [f64]) {
    for i in 0..layout.m_lin {
        out[i] = x[i] / sc.lin_w2[i];
    }
    let mut off = layout.m_lin;
    for (ci, &d) in layout.soc_dims.iter().enumerate() {
        let soc = &sc.soc[ci];
        for r in 0..d {
            let mut acc = 0.0;
            for cidx in 0..d {
                acc += soc.wi2[r * d + cidx] * x[off + cidx];
            }
            out[off + r] = acc;
        }
        off += d;
    }
}

fn assemble_kkt(kkt: &mut KktSolver, sf: &StdForm, sc: &Scaling) {
    kkt.begin();
    // Linear rows: coeff = z/s = 1/w2.
    for i in 0..sf.layout.m_lin {
        let coeff = 1.0 / sc.lin_w2[i];
        let row = &sf.g_rows[i];
        for (ai, &(ci, vi)) in row.iter().enumerate() {
            for &(cj, vj) in &row[..=ai] {
                kkt.add_h(ci, cj, coeff * vi * vj);
            }
        }
    }
    // SOC blocks: H += G_B' W^{-2} G_B via small dense local products.
    let mut off = sf.layout.m_lin;
    for (ci, &d) in sf.layout.soc_dims.iter().enumerate() {
        let soc = &sc.soc[ci];
        let rows = &sf.g_rows[off..off + d];
        let mut support: Vec<u32> = Vec::new();
        for row in rows {
            for &(c, _) in row {
                support.push(c);
            }
        }
        support.sort_unstable();
        support.dedup();
        let nc = support.len();
        if nc == 0 {
            off += d;
            continue;
        }
        // gloc[r][k]: coefficient of support[k] in row r.
        let mut gloc = vec![0.0f64; d * nc];
        for (r, row) in rows.iter().enumerate() {
            for &(c, v) in row {
                let k = support.binary_search(&c).unwrap();
                gloc[r * nc + k] = v;
            }
        }
        // t = W^{-2} gloc (d x nc), hloc = gloc' t (nc x nc).
        let mut t = vec![0.0f64; d * nc];
        for r in 0..d {
            for k in 0..nc {
                let mut acc = 0.0;
                for q in 0..d {
                    acc += soc.wi2[r * d + q] * gloc[q * nc + k];
                }
                t[r * nc + k] = acc;
            }
        }
        for a in 0..nc {
            for bcol in 0..=a {
                let mut acc = 0.0;
                for r in 0..d {
                    acc += gloc[r * nc + a] * t[r * nc + bcol];
                }
                kkt.add_h(support[a], support[bcol], acc);
            }
        }
        off += d;
    }
}

/// One pass of the reduced solve: `[H A'; A 0] (dx, dy) = (bx + G' W^{-2}
/// bz, by)` through the banded factorization, then `dz = W^{-2} (G dx - bz)`.
fn reduced_pass(
    kkt: &KktSolver,
    sf: &StdForm,
    sc: &Scaling,
    bx: &[f64],
    by: &[f64],
    bz: &[f64],
    sol: &mut ReducedSol,
) {
    let n = sf.n;
    let m = sf.layout.m;
    let mut wi2bz = vec![0.0; m];
    apply_w_inv2_blocks(&sf.layout, sc, bz, &mut wi2bz);
    let mut rhs = vec![0.0; n + sf.a_rows.len()];
    rhs[..n].copy_from_slice(bx);
    mat_t_vec_acc(&sf.g_rows, &wi2bz, &mut rhs[..n]);
    rhs[n..].copy_from_slice(by);

    let mut out = vec![0.0; rhs.len()];
    let mut work = vec![0.0; rhs.len()];
    kkt.solve(&rhs, &mut out, &mut work);

    sol.x.copy_from_slice(&out[..n]);
    sol.y.copy_from_slice(&out[n..]);
    let mut gx = vec![0.0; m];
    mat_vec(&sf.g_rows, &sol.x, &mut gx);
    for r in 0..m {
        gx[r] -= bz[r];
    }
    apply_w_inv2_blocks(&sf.layout, sc, &gx, &mut sol.z);
}

/// Solves the 3-block system
/// `A' dy + G' dz = bx, A dx = by, G dx - W^2 dz = bz`
/// with iterative refinement against the full operator, which also corrects
/// the error introduced by recovering dz through W^{-2}.
#[allow(clippy::too_many_arguments)]
fn solve_reduced(
    kkt: &mut KktSolver,
    sf: &StdForm,
    sc: &Scaling,
    bx: &[f64],
    by: &[f64],
    bz: &[f64],
    settings: &SolverSettings,
    sol: &mut ReducedSol,
) {
    let n = sf.n;
    let p = sf.a_rows.len();
    let m = sf.layout.m;
    reduced_pass(kkt, sf, sc, bx, by, bz, sol);

    let scale = inf_norm(bx).max(inf_norm(by)).max(inf_norm(bz)).max(1.0);
    let mut corr = ReducedSol { x: vec![0.0; n], y: vec![0.0; p], z: vec![0.0; m] };
    for _ in 0..settings.refine_rounds {
        // Full residuals.
        let mut r1 = vec![0.0; n];
        mat_t_vec_acc(&sf.a_rows, &sol.y, &mut r1);
        mat_t_vec_acc(&sf.g_rows, &sol.z, &mut r1);
        for j in 0..n {
            r1[j] = bx[j] - r1[j];
        }
        let mut r2 = vec![0.0; p];
        mat_vec(&sf.a_rows, &sol.x, &mut r2);
        for r in 0..p {
            r2[r] = by[r] - r2[r];
        }
        let mut r3 = vec![0.0; m];
        mat_vec(&sf.g_rows, &sol.x, &mut r3);
        let mut wz = vec![0.0; m];
        let mut w2z = vec![0.0; m];
        apply_w_blocks(&sf.layout, sc, &sol.z, &mut wz);
        apply_w_blocks(&sf.layout, sc, &wz, &mut w2z);
        for r in 0..m {
            r3[r] = bz[r] - (r3[r] - w2z[r]);
        }
        let rnorm = inf_norm(&r1).max(inf_norm(&r2)).max(inf_norm(&r3));
        if rnorm <= 1e-14 * scale {
            break;
        }
        reduced_pass(kkt, sf, sc, &r1, &r2, &r3, &mut corr);
        for j in 0..n {
            sol.x[j] += corr.x[j];
        }
        for r in 0..p {
            sol.y[r] += corr.y[r];
        }
        for r in 0..m {
            sol.z[r] += corr.z[r];
        }
    }
}

fn max_step(layout: &Layout, it: &Iterate, dir: &Direction) -> f64 {
    let ml = layout.m_lin;
    let mut alpha = step_to_boundary_lin(&it.s[..ml], &dir.s[..ml])
        .min(step_to_boundary_lin(&it.z[..ml], &dir.z[..ml]));
    let mut off = ml;
    for &d in &layout.soc_dims {
        alpha = alpha
            .min(step_to_boundary_soc(&it.s[off..off + d], &dir.s[off..off + d]))
            .min(step_to_boundary_soc(&it.z[off..off + d], &dir.z[off..off + d]));
        off += d;
    }
    if dir.tau < 0.0 {
        alpha = alpha.min(-it.tau / dir.tau);
    }
    if dir.kappa < 0.0 {
        alpha = alpha.min(-it.kappa / dir.kappa);
    }
    alpha
}

/// Unscales the iterate and packages the result. The reported KKT residual
/// is the termination metric of the final iterate, measured on the
/// equilibrated problem.
fn extract(
    prog: &ConicProgram,
    sf: &StdForm,
    it: &Iterate,
    status: SolveStatus,
    iterations: usize,
    metric: f64,
) -> Solution {
    let n = sf.n;
    let tau = it.tau.max(1e-300);
    let mut primal = vec![0.0; n];
    for j in 0..n {
        primal[j] = sf.col[j] * it.x[j] / tau;
    }

    let (_, _, _, _, objective) = prog.parts();
    let mut objective_val = 0.0;
    for &(v, coeff) in objective {
        objective_val += coeff * primal[v];
    }

    let kkt_residual =
        if status == SolveStatus::Infeasible || status == SolveStatus::Unbounded {
            f64::NAN
        } else {
            metric
        };
    Solution { status, primal, objective: objective_val, kkt_residual, iterations }
}
