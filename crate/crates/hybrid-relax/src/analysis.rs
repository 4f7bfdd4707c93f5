//! Quotient-space metrics, Jacobians of the relaxed fields, the variational
//! (sensitivity) recursion, and convergence/sensitivity sweeps.
//!
//! The glued state space identifies each relaxed guard point with its reset
//! image, so distances between hybrid points may shortcut through an edge:
//!
//! ```text
//! d(p, q) = min( ‖x_p − x_q‖  [same mode],
//!                inf_w ‖x_p − w‖ + ‖R̄_e^ε(w) − x_q‖  [w on the relaxed guard of e] )
//! ```
//!
//! evaluated in both directions and over every connecting edge. This one-hop
//! evaluation is an upper bound on the full shortest-curve metric (multi-hop
//! chains are not searched). The inner minimization is convex (a sum of norms
//! of affine functions over a polytope) and is solved by a smoothed projected
//! Newton iteration to 1e-10.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::execution::{
    flow_chart_discrete, simulate_augmented, simulate_augmented_reference, simulate_filippov,
    Sample, Scheme, Termination, Trajectory,
};
use crate::geometry::Region;
use crate::model::{HybridSystem, InputSignal};
use crate::relaxation::{augmented_mode_field, RelaxationParams, RelaxedSystem};
use crate::{HybridError, Matrix, Result, Vector};

/// A point of the glued state space: mode plus chart state (auxiliary
/// coordinates appended when the mode carries them).
#[derive(Debug, Clone, PartialEq)]
pub struct HybridPoint {
    pub mode: usize,
    pub x: Vector,
}

/// Interpret a chart state: points past a strip, inside a pulled-back target
/// domain, stand for their reset image in the target mode.
pub fn interpret_chart_point(rs: &RelaxedSystem, j: usize, state: &Vector) -> HybridPoint {
    let n = rs.system().state_dim;
    let x = state.rows(0, n).into_owned();
    let z = state.rows(n, state.len() - n).into_owned();
    match rs.geo.membership_aug(rs.eps(), j, &x, Some(&z)) {
        Region::Projected(e) => {
            let (ix, iz) = rs.geo.apply_reset(rs.eps(), e, &x, &z).expect("projected region implies applicable reset");
            let target = rs.geo.edge_geometry(e).target;
            let mut out = Vector::zeros(n + iz.len());
            out.rows_mut(0, n).copy_from(&ix);
            out.rows_mut(n, iz.len()).copy_from(&iz);
            HybridPoint { mode: target, x: out }
        }
        _ => HybridPoint { mode: j, x: state.clone() },
    }
}

// ---------------------------------------------------------------------------
// One-hop quotient distance
// ---------------------------------------------------------------------------

/// Convex subproblem of one hop: minimize ‖c1 + M1 s‖ + ‖c2 + M2 s‖ over
/// {s : C s ≤ d}.
struct HopProblem {
    c1: Vector,
    m1: Matrix,
    c2: Vector,
    m2: Matrix,
    cons_c: Matrix,
    cons_d: Vector,
}

impl HopProblem {
    fn dim(&self) -> usize {
        self.m1.ncols()
    }

    fn value(&self, s: &Vector) -> f64 {
        (&self.c1 + &self.m1 * s).norm() + (&self.c2 + &self.m2 * s).norm()
    }

    fn feasible(&self, s: &Vector) -> bool {
        let r = &self.cons_c * s - &self.cons_d;
        r.iter().all(|&v| v <= 1e-10)
    }

    /// Exact Euclidean projection onto the constraint polyhedron by
    /// active-set enumeration (dimensions ≤ 4, a handful of constraints).
    fn project(&self, y: &Vector) -> Option<Vector> {
        if self.feasible(y) {
            return Some(y.clone());
        }
        let m = self.cons_c.nrows();
        let dim = self.dim();
        let mut best: Option<(f64, Vector)> = None;
        let consider = |cand: Vector, best: &mut Option<(f64, Vector)>| {
            if self.feasible(&cand) {
                let d = (&cand - y).norm_squared();
                if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                    *best = Some((d, cand));
                }
            }
        };
        // All active sets up to the full dimension.
        let idx: Vec<usize> = (0..m).collect();
        for k in 1..=dim.min(m) {
            for combo in combinations(&idx, k) {
                let mut a = Matrix::zeros(k, dim);
                let mut b = Vector::zeros(k);
                for (r, &i) in combo.iter().enumerate() {
                    a.row_mut(r).copy_from(&self.cons_c.row(i));
                    b[r] = self.cons_d[i];
                }
                // Projection onto {a s = b}: s = y − aᵀ(a aᵀ)⁻¹(a y − b).
                let gram = &a * a.transpose();
                let Some(chol) = nalgebra::Cholesky::new(gram) else { continue };
                let lambda = chol.solve(&(&a * y - b));
                consider(y - a.transpose() * lambda, &mut best);
            }
        }
        best.map(|(_, s)| s)
    }

    /// Smoothed value/gradient/Hessian: each ‖r‖ becomes √(‖r‖² + μ²).
    fn smoothed(&self, s: &Vector, mu: f64) -> (f64, Vector, Matrix) {
        let dim = self.dim();
        let mut val = 0.0;
        let mut grad = Vector::zeros(dim);
        let mut hess = Matrix::zeros(dim, dim);
        for (c, m) in [(&self.c1, &self.m1), (&self.c2, &self.m2)] {
            let r = c + m * s;
            let rho = (r.norm_squared() + mu * mu).sqrt();
            val += rho;
            let mt_r = m.transpose() * &r;
            grad += &mt_r / rho;
            hess += m.transpose() * m / rho - (&mt_r * mt_r.transpose()) / (rho * rho * rho);
        }
        (val, grad, hess)
    }

    /// Projected smoothed-Newton descent with μ-continuation.
    fn solve(&self, starts: &[Vector]) -> f64 {
        let dim = self.dim();
        let mut best = f64::INFINITY;
        for start in starts {
            let Some(mut s) = self.project(start) else { continue };
            for &mu in &[1e-2, 1e-4, 1e-6, 1e-9, 1e-12, 1e-15] {
                for _ in 0..120 {
                    let (val, grad, mut hess) = self.smoothed(&s, mu);
                    for i in 0..dim {
                        hess[(i, i)] += 1e-13;
                    }
                    let Some(step) = hess.lu().solve(&(-&grad)) else { break };
                    let mut alpha = 1.0;
                    let mut moved = false;
                    for _ in 0..40 {
                        let cand = &s + &step * alpha;
                        if let Some(proj) = self.project(&cand) {
                            let (cv, _, _) = self.smoothed(&proj, mu);
                            if cv < val - 1e-18 {
                                s = proj;
                                moved = true;
                                break;
                            }
                        }
                        alpha *= 0.5;
                    }
                    if !moved || step.norm() * alpha <= 1e-14 * (1.0 + s.norm()) {
                        break;
                    }
                }
            }
            best = best.min(self.value(&s));
        }
        best
    }
}

fn combinations(idx: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let m = idx.len();
    if k == 0 || k > m {
        return out;
    }
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.iter().map(|&i| idx[i]).collect());
        let mut i = k as isize - 1;
        while i >= 0 && cur[i as usize] == i as usize + m - k {
            i -= 1;
        }
        if i < 0 {
            return out;
        }
        let i = i as usize;
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// Orthonormal basis of the hyperplane orthogonal to the unit vector `g`,
/// by Gram-Schmidt over the coordinate directions.
fn tangent_basis(g: &Vector) -> Matrix {
    let n = g.len();
    let mut cols: Vec<Vector> = Vec::with_capacity(n - 1);
    for i in 0..n {
        if cols.len() == n - 1 {
            break;
        }
        let mut v = Vector::zeros(n);
        v[i] = 1.0;
        v -= g * g[i];
        for c in &cols {
            let d = c.dot(&v);
            v -= c * d;
        }
        let norm = v.norm();
        if norm > 1e-8 {
            cols.push(v / norm);
        }
    }
    let mut basis = Matrix::zeros(n, n - 1);
    for (j, c) in cols.iter().enumerate() {
        basis.set_column(j, c);
    }
    basis
}

/// One-hop leg through edge `e` from a point in the source mode to a point in
/// the target mode: infimum over relaxed-guard points of leg1 + leg2.
fn hop_distance(rs: &RelaxedSystem, e: usize, from: &HybridPoint, to: &HybridPoint) -> f64 {
    let n = rs.system().state_dim;
    let geo = rs.geo.edge_geometry(e);
    let edge = &rs.system().edges[e];
    let eps = rs.eps();
    let p_from = from.x.len() - n;
    let p_to = to.x.len() - n;
    let p_edge = geo.aux_dim();
    debug_assert_eq!(p_from, rs.geo.mode_aux_dim(from.mode));

    let x_from = from.x.rows(0, n).into_owned();
    let z_from = from.x.rows(n, p_from).into_owned();
    let x_to = to.x.rows(0, n).into_owned();
    let z_to = to.x.rows(n, p_to).into_owned();

    // Anchor on the relaxed-guard plane and tangent coordinates.
    let mode = &rs.system().modes[geo.source];
    let facet = mode.polytope.facet_vertices(&edge.guard_normal, edge.guard_offset, 1e-9);
    if facet.is_empty() {
        return f64::INFINITY;
    }
    let mut w0 = Vector::zeros(n);
    for v in &facet {
        w0 += v;
    }
    w0 /= facet.len() as f64;
    w0 += &edge.guard_normal * eps; // lift onto g = ε
    let basis = tangent_basis(&edge.guard_normal);

    let dim = (n - 1) + p_from;
    // leg1: (x_from; z_from) − (w0 + B s_w; s_z)
    let mut m1 = Matrix::zeros(n + p_from, dim);
    m1.view_mut((0, 0), (n, n - 1)).copy_from(&(-&basis));
    for i in 0..p_from {
        m1[(n + i, n - 1 + i)] = -1.0;
    }
    let mut c1 = Vector::zeros(n + p_from);
    c1.rows_mut(0, n).copy_from(&(&x_from - &w0));
    c1.rows_mut(n, p_from).copy_from(&z_from);

    // leg2: (image(w, s_z); 0) − (x_to; z_to); the auxiliary slot enters the
    // image only through the edge's own null basis.
    let mut m2 = Matrix::zeros(n + p_to, dim);
    m2.view_mut((0, 0), (n, n - 1)).copy_from(&(&geo.a_bar * &basis));
    if p_edge > 0 && p_edge == p_from {
        m2.view_mut((0, n - 1), (n, p_edge)).copy_from(&geo.null_basis);
    }
    let mut c2 = Vector::zeros(n + p_to);
    c2.rows_mut(0, n).copy_from(&(geo.bar_reset(eps, &w0) - &x_to));
    c2.rows_mut(n, p_to).copy_from(&(-&z_to));

    // Constraints: the plane projection of w stays in the guard facet, and
    // the auxiliary slot stays inside its compactness box.
    let hs = &mode.polytope;
    let rows = hs.normals.nrows();
    let mut cons_c = Matrix::zeros(rows + 2 * p_from, dim);
    let mut cons_d = Vector::zeros(rows + 2 * p_from);
    let w0_proj = &w0 - &edge.guard_normal * eps;
    for i in 0..rows {
        let hrow = hs.normals.row(i).transpose();
        let hb = basis.transpose() * &hrow;
        for j in 0..n - 1 {
            cons_c[(i, j)] = hb[j];
        }
        cons_d[i] = hs.offsets[i] - hrow.dot(&w0_proj) + 1e-9;
    }
    if p_from > 0 {
        let bound = rs
            .geo
            .mode_aux_edge(from.mode)
            .map(|ae| rs.geo.edge_geometry(ae).z_bound(eps))
            .unwrap_or(0.0);
        for i in 0..p_from {
            cons_c[(rows + 2 * i, n - 1 + i)] = 1.0;
            cons_d[rows + 2 * i] = bound;
            cons_c[(rows + 2 * i + 1, n - 1 + i)] = -1.0;
            cons_d[rows + 2 * i + 1] = bound;
        }
    }

    let problem = HopProblem { c1, m1, c2, m2, cons_c, cons_d };

    // Starts: tangent coordinates of the source point, the least-squares
    // pull-back of the target point, and the facet anchor.
    let mut starts = Vec::new();
    let mut s_from = Vector::zeros(dim);
    s_from.rows_mut(0, n - 1).copy_from(&(basis.transpose() * (&x_from - &w0)));
    for i in 0..p_from {
        s_from[n - 1 + i] = z_from[i];
    }
    starts.push(s_from);
    let lsq = {
        let gram = problem.m2.transpose() * &problem.m2
            + Matrix::identity(dim, dim) * 1e-12;
        gram.lu().solve(&(-(problem.m2.transpose() * &problem.c2)))
    };
    if let Some(s) = lsq {
        starts.push(s);
    }
    starts.push(Vector::zeros(dim));

    problem.solve(&starts)
}

/// One-hop quotient distance between two hybrid points. Same-mode pairs use
/// the chart Euclidean distance as the incumbent; every edge connecting the
/// two modes (in either direction) may shorten it. Returns +∞ when the modes
/// are distinct and not adjacent.
pub fn quotient_distance(rs: &RelaxedSystem, p: &HybridPoint, q: &HybridPoint) -> f64 {
    let mut best = if p.mode == q.mode && p.x.len() == q.x.len() {
        (&p.x - &q.x).norm()
    } else {
        f64::INFINITY
    };
    if best == 0.0 {
        return 0.0;
    }
    let n = rs.system().state_dim;
    for (from, to) in [(p, q), (q, p)] {
        for edge in rs.system().neighborhood(from.mode) {
            if edge.target != to.mode {
                continue;
            }
            // Leg 1 alone is at least the distance to the relaxed-guard
            // plane, which prunes most evaluations.
            let g = edge.relaxed_guard_value(rs.eps(), &from.x.rows(0, n).into_owned());
            if g.abs() >= best {
                continue;
            }
            best = best.min(hop_distance(rs, edge.id, from, to));
        }
    }
    best
}

/// Sup-over-time quotient distance between two trajectories covering the same
/// horizon, aligned by linear interpolation on the union time grid.
pub fn trajectory_distance(rs: &RelaxedSystem, a: &Trajectory, b: &Trajectory) -> Result<f64> {
    let scale = a.end_time().abs().max(1.0);
    if (a.start_time() - b.start_time()).abs() > 1e-9 * scale
        || (a.end_time() - b.end_time()).abs() > 1e-9 * scale
    {
        return Err(HybridError::HorizonMismatch(a.end_time(), b.end_time()));
    }
    let mut grid: Vec<f64> = a
        .samples
        .iter()
        .chain(b.samples.iter())
        .map(|s| s.t)
        .collect();
    grid.sort_by(|x, y| x.partial_cmp(y).unwrap());
    grid.dedup_by(|x, y| (*x - *y).abs() <= 1e-15 * scale);

    let mut sup: f64 = 0.0;
    for &t in &grid {
        let (ma, xa) = a.eval_chart(t);
        let (mb, xb) = b.eval_chart(t);
        let pa = interpret_chart_point(rs, ma, &xa);
        let pb = interpret_chart_point(rs, mb, &xb);
        sup = sup.max(quotient_distance(rs, &pa, &pb));
    }
    Ok(sup)
}

// ---------------------------------------------------------------------------
// Jacobians of the relaxed fields
// ---------------------------------------------------------------------------

fn base_jacobian(system: &HybridSystem, j: usize, x: &Vector, u: &Vector) -> Result<Matrix> {
    let mode = system.mode(j)?;
    if let Some(jac) = mode.field.jacobian_x(x, u) {
        return Ok(jac);
    }
    // Central finite differences with step 1e-6·(1 + |x_i|).
    let n = x.len();
    let mut jac = Matrix::zeros(n, n);
    for col in 0..n {
        let step = 1e-6 * (1.0 + x[col].abs());
        let mut xp = x.clone();
        xp[col] += step;
        let mut xm = x.clone();
        xm[col] -= step;
        let d = (system.eval_field(j, &xp, u)? - system.eval_field(j, &xm, u)?) / (2.0 * step);
        jac.set_column(col, &d);
    }
    Ok(jac)
}

/// Jacobian of the (augmented) relaxed mode field at a chart state: the base
/// field's Jacobian in the interior, the chain-rule blend inside strips and
/// pulled-back regions.
pub fn field_jacobian(rs: &RelaxedSystem, j: usize, state: &Vector, u: &Vector) -> Result<Matrix> {
    let n = rs.system().state_dim;
    let p = rs.geo.mode_aux_dim(j);
    if state.len() != n + p {
        return Err(HybridError::Dimension { context: "chart state", expected: n + p, got: state.len() });
    }
    let x = state.rows(0, n).into_owned();
    let z = state.rows(n, p).into_owned();
    let embed = |jac: &Matrix| {
        let mut out = Matrix::zeros(n + p, n + p);
        out.view_mut((0, 0), (n, n)).copy_from(jac);
        out
    };
    match rs.geo.membership_aug(rs.eps(), j, &x, Some(&z)) {
        Region::Interior => Ok(embed(&base_jacobian(rs.system(), j, &x, u)?)),
        Region::Strip(e) | Region::Projected(e) => {
            let geo = rs.geo.edge_geometry(e);
            let edge = &rs.system().edges[e];
            let eps = rs.eps();
            let phi = rs.phi_edge(e, &x);
            let dphi = rs.params.transition.phi_prime(edge.guard_value(&x) / eps) / eps;
            let f_src = rs.system().eval_field(j, &x, u)?;
            let j_src = base_jacobian(rs.system(), j, &x, u)?;
            if Some(e) == rs.geo.mode_aux_edge(j) {
                // Augmented blend over (x, z).
                let image = geo.tilde_reset(eps, &x, &z)?;
                let f_tgt = rs.system().eval_field(geo.target, &image, u)?;
                let j_tgt = base_jacobian(rs.system(), geo.target, &image, u)?;
                let transported = &geo.a_tilde_pinv * &f_tgt;
                let mut f_src_aug = Vector::zeros(n + p);
                f_src_aug.rows_mut(0, n).copy_from(&f_src);
                let mut grad_phi = Vector::zeros(n + p);
                grad_phi.rows_mut(0, n).copy_from(&(&edge.guard_normal * dphi));
                let mut jac = embed(&j_src) * (1.0 - phi);
                jac += &geo.a_tilde_pinv * j_tgt * &geo.a_tilde * phi;
                jac += (transported - f_src_aug) * grad_phi.transpose();
                Ok(jac)
            } else {
                let image = geo.bar_reset(eps, &x);
                let f_tgt = rs.system().eval_field(geo.target, &image, u)?;
                let j_tgt = base_jacobian(rs.system(), geo.target, &image, u)?;
                let transported = geo.solve_a_bar(&f_tgt)?;
                let mut inner = Matrix::zeros(n, n);
                for col in 0..n {
                    let rhs: Vector = (&j_tgt * &geo.a_bar).column(col).into();
                    inner.set_column(col, &geo.solve_a_bar(&rhs)?);
                }
                let jac_x = j_src * (1.0 - phi)
                    + inner * phi
                    + (&transported - &f_src) * (&edge.guard_normal * dphi).transpose();
                Ok(embed(&jac_x))
            }
        }
        Region::Outside => Err(HybridError::OutsideDomain { mode: j, t: f64::NAN }),
    }
}

/// Central-difference Jacobian of the augmented relaxed mode field; the
/// independent check for [`field_jacobian`].
pub fn field_jacobian_fd(rs: &RelaxedSystem, j: usize, state: &Vector, u: &Vector) -> Result<Matrix> {
    let dim = state.len();
    let mut jac = Matrix::zeros(dim, dim);
    for col in 0..dim {
        let step = 1e-6 * (1.0 + state[col].abs());
        let mut xp = state.clone();
        xp[col] += step;
        let mut xm = state.clone();
        xm[col] -= step;
        let d = (augmented_mode_field(rs, j, &xp, u)? - augmented_mode_field(rs, j, &xm, u)?)
            / (2.0 * step);
        jac.set_column(col, &d);
    }
    Ok(jac)
}

/// Exact Jacobian of one step of the scheme (derivative of the one-step map,
/// input frozen).
pub fn step_jacobian(
    rs: &RelaxedSystem,
    scheme: Scheme,
    j: usize,
    state: &Vector,
    u: &Vector,
    h: f64,
) -> Result<Matrix> {
    let dim = state.len();
    let eye = Matrix::identity(dim, dim);
    match scheme {
        Scheme::Euler => Ok(&eye + field_jacobian(rs, j, state, u)? * h),
        Scheme::Rk4 => {
            let f = |y: &Vector| augmented_mode_field(rs, j, y, u);
            let jac = |y: &Vector| field_jacobian(rs, j, y, u);
            let k1 = f(state)?;
            let x2 = state + &k1 * (h / 2.0);
            let k2 = f(&x2)?;
            let x3 = state + &k2 * (h / 2.0);
            let k3 = f(&x3)?;
            let x4 = state + &k3 * h;
            let kj1 = jac(state)?;
            let kj2 = jac(&x2)? * (&eye + &kj1 * (h / 2.0));
            let kj3 = jac(&x3)? * (&eye + &kj2 * (h / 2.0));
            let kj4 = jac(&x4)? * (&eye + &kj3 * h);
            Ok(&eye + (kj1 + kj2 * 2.0 + kj3 * 2.0 + kj4) * (h / 6.0))
        }
    }
}

/// First-order sensitivity along a nominal discrete trajectory.
#[derive(Debug, Clone)]
pub struct VariationalFlow {
    /// (t, Dx) pairs aligned with the nominal samples.
    pub samples: Vec<(f64, Vector)>,
}

impl VariationalFlow {
    /// The approximation x̂ = x⁰ + Dx as a trajectory over the nominal's
    /// times, modes and region tags.
    pub fn approximation(&self, nominal: &Trajectory) -> Trajectory {
        let samples = nominal
            .samples
            .iter()
            .zip(self.samples.iter())
            .map(|(s, (t, dx))| {
                debug_assert!((s.t - t).abs() <= 1e-12 * (1.0 + t.abs()));
                Sample { t: s.t, mode: s.mode, x: &s.x + dx, region: s.region }
            })
            .collect();
        Trajectory {
            samples,
            events: Vec::new(),
            termination: nominal.termination,
            state_dim: nominal.state_dim,
        }
    }
}

/// Propagate an initial perturbation through the linearized one-step
/// recursion about a single-chart nominal trajectory (uniform step, no reset
/// events).
pub fn variational_flow(
    rs: &RelaxedSystem,
    scheme: Scheme,
    nominal: &Trajectory,
    dx0: &Vector,
    input: &InputSignal,
) -> Result<VariationalFlow> {
    if let Some(ev) = nominal.events.first() {
        return Err(HybridError::UnsupportedChart { t: ev.t });
    }
    if nominal.samples.len() < 2 {
        return Err(HybridError::InvalidParameter("nominal trajectory has no steps".into()));
    }
    let dim = nominal.samples[0].x.len();
    let mut dx = if dx0.len() == dim {
        dx0.clone()
    } else if dx0.len() == rs.system().state_dim {
        let mut padded = Vector::zeros(dim);
        padded.rows_mut(0, dx0.len()).copy_from(dx0);
        padded
    } else {
        return Err(HybridError::Dimension { context: "perturbation", expected: dim, got: dx0.len() });
    };
    let h = nominal.samples[1].t - nominal.samples[0].t;
    for w in nominal.samples.windows(2) {
        if ((w[1].t - w[0].t) - h).abs() > 1e-9 * h {
            return Err(HybridError::InvalidParameter(
                "variational flow requires a uniform-step nominal".into(),
            ));
        }
    }
    let j = nominal.samples[0].mode;
    let mut out = VariationalFlow { samples: Vec::with_capacity(nominal.samples.len()) };
    out.samples.push((nominal.samples[0].t, dx.clone()));
    for w in nominal.samples.windows(2) {
        let u = input.eval(w[0].t);
        let phi = step_jacobian(rs, scheme, j, &w[0].x, u, h)?;
        dx = phi * dx;
        out.samples.push((w[1].t, dx.clone()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub h: f64,
    pub eps: f64,
    pub delta: f64,
    pub error: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitSummary {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    StepSize,
    Epsilon,
    Delta,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub fit: FitSummary,
    pub axis: SweepAxis,
}

/// Errors below this are floating-point noise and do not enter log-log fits.
pub const USABLE_ERROR_FLOOR: f64 = 1e-13;

/// Least-squares log-log fit over the usable rows (≥ 3 required).
pub fn fit_loglog(points: &[(f64, f64)]) -> Result<FitSummary> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|&(x, y)| x > 0.0 && y.is_finite() && y > USABLE_ERROR_FLOOR)
        .collect();
    if usable.len() < 3 {
        return Err(HybridError::InsufficientGrid(usable.len()));
    }
    let n = usable.len() as f64;
    let xs: Vec<f64> = usable.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = usable.iter().map(|p| p.1.ln()).collect();
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let mean_y = sy / n;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean_y).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - (slope * x + intercept)).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(FitSummary { slope, intercept, r2 })
}

fn axis_value(axis: SweepAxis, row: &SweepRow) -> f64 {
    match axis {
        SweepAxis::StepSize => row.h,
        SweepAxis::Epsilon => row.eps,
        SweepAxis::Delta => row.delta,
    }
}

fn finish_sweep(rows: Vec<SweepRow>, axis: SweepAxis) -> Result<SweepResult> {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (axis_value(axis, r), r.error)).collect();
    let fit = fit_loglog(&pts)?;
    Ok(SweepResult { rows, fit, axis })
}

/// Scenario shared by the sweep drivers.
#[derive(Debug, Clone)]
pub struct SweepConfig<'a> {
    pub system: &'a HybridSystem,
    pub scheme: Scheme,
    pub x0: Vector,
    pub j0: usize,
    pub input: InputSignal,
    pub t_final: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepErrorKind {
    /// sup over t ≥ t_start of ‖x(t)‖∞ (rest norm past a Zeno accumulation).
    PostZenoRest { t_start: f64 },
    /// ρ^ε against the adaptive reference execution at the same ε.
    VsReference { tol: f64 },
    /// ρ^ε against the run at the finest step size in the grid.
    VsFinest,
    /// ρ^ε against the event-driven Filippov reference (computed at ε of the
    /// row for the comparison space).
    VsFilippov { tol: f64 },
}

fn rest_norm(traj: &Trajectory, state_dim: usize, t_start: f64) -> f64 {
    traj.samples
        .iter()
        .filter(|s| s.t >= t_start)
        .map(|s| s.x.rows(0, state_dim).amax())
        .fold(0.0, f64::max)
}

fn sweep_threads() -> usize {
    std::env::var("HYBRID_RELAX_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Run one closure per grid point with capped parallelism, gathering results
/// in grid order.
fn run_grid<T: Send, F: Fn(usize) -> T + Sync>(count: usize, job: F) -> Vec<T> {
    let cap = sweep_threads().min(count.max(1));
    if cap <= 1 || count <= 1 {
        return (0..count).map(job).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<T>> = (0..count).map(|_| None).collect();
    let slots_ref = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..cap {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= count {
                    break;
                }
                let value = job(i);
                slots_ref.lock().unwrap()[i] = Some(value);
            });
        }
    });
    slots.into_iter().map(|v| v.expect("worker filled slot")).collect()
}

/// One simulation per (h, ε) grid point; the error per the declared kind.
pub fn convergence_sweep(
    cfg: &SweepConfig,
    grid: &[(f64, f64)],
    kind: SweepErrorKind,
    axis: SweepAxis,
) -> Result<SweepResult> {
    // The finest run is the reference for the self-referencing kind.
    let finest: Option<(f64, Trajectory, RelaxationParams)> = match kind {
        SweepErrorKind::VsFinest => {
            let &(h_min, eps_min) = grid
                .iter()
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                .ok_or(HybridError::InsufficientGrid(0))?;
            let params = RelaxationParams::new(eps_min);
            let rs = RelaxedSystem::new(cfg.system, params)?;
            let traj =
                simulate_augmented(&rs, cfg.scheme, h_min, &cfg.x0, cfg.j0, &cfg.input, cfg.t_final)?;
            Some((h_min, traj, params))
        }
        _ => None,
    };

    let results = run_grid(grid.len(), |i| -> Result<SweepRow> {
        let (h, eps) = grid[i];
        let start = Instant::now();
        let params = RelaxationParams::new(eps);
        let rs = RelaxedSystem::new(cfg.system, params)?;
        let traj = simulate_augmented(&rs, cfg.scheme, h, &cfg.x0, cfg.j0, &cfg.input, cfg.t_final)?;
        let error = match kind {
            SweepErrorKind::PostZenoRest { t_start } => {
                rest_norm(&traj, cfg.system.state_dim, t_start)
            }
            SweepErrorKind::VsReference { tol } => {
                let reference = simulate_augmented_reference(&rs, &cfg.x0, cfg.j0, &cfg.input, cfg.t_final, tol)?;
                trajectory_distance(&rs, &traj, &reference)?
            }
            SweepErrorKind::VsFinest => {
                let (h_min, ref_traj, _) = finest.as_ref().expect("finest run prepared");
                if (h - h_min).abs() <= f64::EPSILON * h_min {
                    f64::NAN // self-comparison carries no information
                } else {
                    trajectory_distance(&rs, &traj, ref_traj)?
                }
            }
            SweepErrorKind::VsFilippov { tol } => {
                let reference = simulate_filippov(&rs.geo, &cfg.x0, cfg.j0, &cfg.input, cfg.t_final, tol)?;
                trajectory_distance(&rs, &traj, &reference)?
            }
        };
        Ok(SweepRow { h, eps, delta: 0.0, error, wall_time_s: start.elapsed().as_secs_f64() })
    });
    let rows: Vec<SweepRow> = results.into_iter().collect::<Result<_>>()?;
    finish_sweep(rows, axis)
}

/// The sensitivity experiment: a no-reset chart nominal, perturbed initial
/// conditions `x0 + δ·dir`, and the linearized approximation x̂ = x⁰ + δ·Dx;
/// the error per row is ρ^ε(x^δ, x̂^δ).
pub fn sensitivity_sweep(
    cfg: &SweepConfig,
    eps: f64,
    h: f64,
    dir: &Vector,
    deltas: &[f64],
) -> Result<SweepResult> {
    let rs = RelaxedSystem::new(cfg.system, RelaxationParams::new(eps))?;
    let nominal = flow_chart_discrete(&rs, cfg.scheme, h, &cfg.x0, cfg.j0, &cfg.input, cfg.t_final)?;
    if nominal.termination != Termination::HorizonReached {
        return Err(HybridError::InvalidParameter(
            "sensitivity nominal terminated before the horizon".into(),
        ));
    }
    let unit_flow = variational_flow(&rs, cfg.scheme, &nominal, dir, &cfg.input)?;

    let results = run_grid(deltas.len(), |i| -> Result<SweepRow> {
        let delta = deltas[i];
        let start = Instant::now();
        let rs_local = RelaxedSystem::new(cfg.system, RelaxationParams::new(eps))?;
        let x0_pert = &cfg.x0 + dir * delta;
        let perturbed =
            flow_chart_discrete(&rs_local, cfg.scheme, h, &x0_pert, cfg.j0, &cfg.input, cfg.t_final)?;
        // Linearity of the recursion: Dx^δ = δ · Dx(dir).
        let scaled = VariationalFlow {
            samples: unit_flow.samples.iter().map(|(t, dx)| (*t, dx * delta)).collect(),
        };
        let approx = scaled.approximation(&nominal);
        let error = trajectory_distance(&rs_local, &perturbed, &approx)?;
        Ok(SweepRow { h, eps, delta, error, wall_time_s: start.elapsed().as_secs_f64() })
    });
    let rows: Vec<SweepRow> = results.into_iter().collect::<Result<_>>()?;
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.delta, r.error)).collect();
    let fit = fit_loglog(&pts).unwrap_or(FitSummary { slope: f64::NAN, intercept: f64::NAN, r2: f64::NAN });
    Ok(SweepResult { rows, fit, axis: SweepAxis::Delta })
}

/// Sweep CSV: `h,eps,delta,error,slope_running,wall_time_s`.
pub fn write_sweep_csv(result: &SweepResult, out: &mut impl Write) -> Result<()> {
    writeln!(out, "h,eps,delta,error,slope_running,wall_time_s")?;
    let mut seen: Vec<(f64, f64)> = Vec::new();
    for row in &result.rows {
        seen.push((axis_value(result.axis, row), row.error));
        let slope = fit_loglog(&seen).map(|f| f.slope).unwrap_or(f64::NAN);
        writeln!(
            out,
            "{},{},{},{},{},{}",
            row.h, row.eps, row.delta, row.error, slope, row.wall_time_s
        )?;
    }
    Ok(())
}

/// Fit summary as a JSON record `{slope, intercept, r2}`.
pub fn fit_to_json(fit: &FitSummary) -> String {
    serde_json::to_string_pretty(fit).expect("serializable")
}
