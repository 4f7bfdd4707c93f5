//! Hybrid-system definition and structural validation.
//!
//! A system is a finite set of [`Mode`]s (compact polytope domains with
//! vector fields) and [`Edge`]s (guard hyperplane + affine reset). Guards use
//! the outward convention: the guard normal points out of the source domain,
//! so `g_e(x) = ĝ_e·x − c_e ≤ 0` holds on the whole source polytope.
//!
//! Validation is data, not failure: [`validate_system`] returns a report with
//! one entry per violated invariant, and an empty report means the system is
//! well formed.

use std::fmt;

use crate::{HybridError, Matrix, Result, Vector};

/// Tolerance for unit-norm checks on stored normals.
pub const UNIT_NORM_TOL: f64 = 1e-12;
/// Tolerance for affine identities checked on sampled points (round trips,
/// plane containment of reset images).
pub const AFFINE_TOL: f64 = 1e-10;
/// Slack used for polytope membership and vertex dedup.
pub const GEOM_TOL: f64 = 1e-9;

/// Half-space system `Hx ≤ h` with unit outward row normals.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    /// One row per facet, unit Euclidean norm.
    pub normals: Matrix,
    pub offsets: Vector,
}

impl Polytope {
    pub fn new(normals: Matrix, offsets: Vector) -> Self {
        assert_eq!(normals.nrows(), offsets.len());
        Self { normals, offsets }
    }

    /// Axis-aligned box `lo_i ≤ x_i ≤ hi_i`.
    pub fn boxed(bounds: &[(f64, f64)]) -> Self {
        let n = bounds.len();
        let mut normals = Matrix::zeros(2 * n, n);
        let mut offsets = Vector::zeros(2 * n);
        for (i, &(lo, hi)) in bounds.iter().enumerate() {
            normals[(2 * i, i)] = -1.0;
            offsets[2 * i] = -lo;
            normals[(2 * i + 1, i)] = 1.0;
            offsets[2 * i + 1] = hi;
        }
        Self { normals, offsets }
    }

    pub fn dim(&self) -> usize {
        self.normals.ncols()
    }

    pub fn contains(&self, x: &Vector, tol: f64) -> bool {
        (0..self.normals.nrows()).all(|i| self.normals.row(i).transpose().dot(x) <= self.offsets[i] + tol)
    }

    /// Signed violation: max over facets of `H_i·x − h_i` (≤ 0 inside).
    pub fn violation(&self, x: &Vector) -> f64 {
        (0..self.normals.nrows())
            .map(|i| self.normals.row(i).transpose().dot(x) - self.offsets[i])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Brute-force vertex enumeration by intersecting n-subsets of facet
    /// planes. Intended for the validation path at n ≤ 6.
    pub fn vertices(&self) -> Vec<Vector> {
        let n = self.dim();
        let m = self.normals.nrows();
        let mut verts: Vec<Vector> = Vec::new();
        for combo in combinations(m, n) {
            let mut a = Matrix::zeros(n, n);
            let mut b = Vector::zeros(n);
            for (r, &i) in combo.iter().enumerate() {
                a.row_mut(r).copy_from(&self.normals.row(i));
                b[r] = self.offsets[i];
            }
            let lu = a.lu();
            if let Some(v) = lu.solve(&b) {
                if v.iter().all(|c| c.is_finite())
                    && self.contains(&v, GEOM_TOL)
                    && !verts.iter().any(|w| (w - &v).norm() <= GEOM_TOL)
                {
                    verts.push(v);
                }
            }
        }
        verts
    }

    /// A polytope is bounded iff its recession cone `{d : Hd ≤ 0}` is trivial.
    /// Extreme rays are pinned by n−1 active independent rows, so scanning
    /// (n−1)-subsets for a nonzero null direction is exhaustive at this scale.
    pub fn is_bounded(&self) -> bool {
        let n = self.dim();
        let m = self.normals.nrows();
        if m < n + 1 {
            return false; // a bounded n-polytope needs at least n+1 facets
        }
        if n == 1 {
            let has_lower = (0..m).any(|i| self.normals[(i, 0)] < -0.5);
            let has_upper = (0..m).any(|i| self.normals[(i, 0)] > 0.5);
            return has_lower && has_upper;
        }
        for combo in combinations(m, n - 1) {
            let mut rows = Matrix::zeros(n - 1, n);
            for (r, &i) in combo.iter().enumerate() {
                rows.row_mut(r).copy_from(&self.normals.row(i));
            }
            // Null direction of the selected rows via the orthogonal
            // projector I − Aᵀ(AAᵀ)⁻¹A (rank 1 when the rows are independent).
            let gram = &rows * rows.transpose();
            let Some(chol) = nalgebra::Cholesky::new(gram) else { continue };
            let proj = Matrix::identity(n, n) - rows.transpose() * chol.solve(&rows);
            let mut d = Vector::zeros(n);
            let mut best = 0.0;
            for c in 0..n {
                let col = proj.column(c);
                if col.norm() > best {
                    best = col.norm();
                    d = col.into_owned();
                }
            }
            if best < 1e-9 {
                continue;
            }
            d /= best;
            for dir in [d.clone(), -d] {
                let recedes = (0..m).all(|i| self.normals.row(i).transpose().dot(&dir) <= 1e-12);
                if recedes {
                    return false;
                }
            }
        }
        true
    }

    /// Vertices lying on the plane `n̂·x = c` (within tol): the facet spanned
    /// by that hyperplane.
    pub fn facet_vertices(&self, normal: &Vector, offset: f64, tol: f64) -> Vec<Vector> {
        self.vertices()
            .into_iter()
            .filter(|v| (normal.dot(v) - offset).abs() <= tol)
            .collect()
    }
}

fn combinations(m: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k == 0 || k > m {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        // Advance the rightmost index that can still move.
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + m - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Continuous dynamics of one mode. Evaluation is defined on all of ℝⁿ (the
/// formulas act as the smooth extension beyond the domain polytope).
#[derive(Debug, Clone, PartialEq)]
pub enum VectorField {
    /// `ẋ = F x + G u + w`.
    Affine { f: Matrix, g: Matrix, w: Vector },
    /// Planar double pendulum in relative coordinates
    /// `(θ1, θ̇1, θ2, θ̇2)`, θ2 measured between the links.
    DoublePendulum(DoublePendulumParams),
}

/// Physical parameters of the double pendulum. `k` and `c` parametrize the
/// impact law of the mechanical stop and do not enter the continuous field.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DoublePendulumParams {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    pub g: f64,
    /// Impact coupling of the stop: θ̇1 gains k(1+c)·θ̇2. The default is the
    /// momentum-matched value [`DoublePendulumParams::momentum_matched_k`]
    /// (0.4 for unit parameters); larger values inject energy at impacts.
    #[serde(default = "default_k")]
    pub k: f64,
    #[serde(default = "default_c")]
    pub c: f64,
}

fn default_k() -> f64 {
    0.4
}
fn default_c() -> f64 {
    0.5
}

impl Default for DoublePendulumParams {
    fn default() -> Self {
        Self { m1: 1.0, m2: 1.0, l1: 1.0, l2: 1.0, g: 1.0, k: default_k(), c: 0.5 }
    }
}

impl DoublePendulumParams {
    /// Coupling that conserves the θ1 generalized momentum through an
    /// impact: k = M12/M11 evaluated at the stop (θ2 = 0).
    pub fn momentum_matched_k(&self) -> f64 {
        let m11 = (self.m1 + self.m2) * self.l1 * self.l1
            + self.m2 * self.l2 * self.l2
            + 2.0 * self.m2 * self.l1 * self.l2;
        let m12 = self.m2 * self.l2 * self.l2 + self.m2 * self.l1 * self.l2;
        m12 / m11
    }
}

impl VectorField {
    pub fn state_dim(&self) -> Option<usize> {
        match self {
            VectorField::Affine { f, .. } => Some(f.nrows()),
            VectorField::DoublePendulum(_) => Some(4),
        }
    }

    pub fn eval(&self, x: &Vector, u: &Vector) -> Vector {
        match self {
            VectorField::Affine { f, g, w } => {
                let mut out = f * x + w;
                if g.ncols() > 0 {
                    out += g * u;
                }
                out
            }
            VectorField::DoublePendulum(p) => double_pendulum_field(p, x),
        }
    }

    /// Analytic state Jacobian, available for every registered field kind.
    pub fn jacobian_x(&self, x: &Vector, _u: &Vector) -> Option<Matrix> {
        match self {
            VectorField::Affine { f, .. } => Some(f.clone()),
            VectorField::DoublePendulum(p) => Some(double_pendulum_jacobian(p, x)),
        }
    }
}

/// Accelerations (θ̈1, θ̈2) from the Euler-Lagrange equations in relative
/// coordinates: M(q) q̈ = rhs(q, q̇).
fn double_pendulum_accel(p: &DoublePendulumParams, x: &Vector) -> (f64, f64) {
    let (t1, w1, t2, w2) = (x[0], x[1], x[2], x[3]);
    let (m1, m2, l1, l2, g) = (p.m1, p.m2, p.l1, p.l2, p.g);
    let (s2, c2) = t2.sin_cos();
    let m11 = (m1 + m2) * l1 * l1 + m2 * l2 * l2 + 2.0 * m2 * l1 * l2 * c2;
    let m12 = m2 * l2 * l2 + m2 * l1 * l2 * c2;
    let m22 = m2 * l2 * l2;
    let r1 = m2 * l1 * l2 * (2.0 * w1 + w2) * w2 * s2
        - (m1 + m2) * g * l1 * t1.sin()
        - m2 * g * l2 * (t1 + t2).sin();
    let r2 = -m2 * l1 * l2 * w1 * w1 * s2 - m2 * g * l2 * (t1 + t2).sin();
    let det = m11 * m22 - m12 * m12;
    ((m22 * r1 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det)
}

fn double_pendulum_field(p: &DoublePendulumParams, x: &Vector) -> Vector {
    let (a1, a2) = double_pendulum_accel(p, x);
    Vector::from_vec(vec![x[1], a1, x[3], a2])
}

/// Analytic 4×4 Jacobian of the pendulum field. Differentiates the solved
/// system via ∂q̈/∂y = M⁻¹ (∂rhs/∂y − ∂M/∂y q̈); only θ2 enters M.
fn double_pendulum_jacobian(p: &DoublePendulumParams, x: &Vector) -> Matrix {
    let (t1, w1, t2, w2) = (x[0], x[1], x[2], x[3]);
    let (m1, m2, l1, l2, g) = (p.m1, p.m2, p.l1, p.l2, p.g);
    let (s2, c2) = t2.sin_cos();
    let mll = m2 * l1 * l2;
    let m11 = (m1 + m2) * l1 * l1 + m2 * l2 * l2 + 2.0 * mll * c2;
    let m12 = m2 * l2 * l2 + mll * c2;
    let m22 = m2 * l2 * l2;
    let det = m11 * m22 - m12 * m12;
    let (q1, q2) = double_pendulum_accel(p, x);

    // ∂rhs/∂(θ1, θ̇1, θ2, θ̇2)
    let c12 = (t1 + t2).cos();
    let dr1 = [
        -(m1 + m2) * g * l1 * t1.cos() - m2 * g * l2 * c12,
        2.0 * mll * w2 * s2,
        mll * (2.0 * w1 + w2) * w2 * c2 - m2 * g * l2 * c12,
        mll * (2.0 * w1 + 2.0 * w2) * s2,
    ];
    let dr2 = [
        -m2 * g * l2 * c12,
        -2.0 * mll * w1 * s2,
        -mll * w1 * w1 * c2 - m2 * g * l2 * c12,
        0.0,
    ];
    // ∂M/∂θ2 contributes −(∂M/∂θ2) q̈ to the effective rhs derivative.
    let dm11 = -2.0 * mll * s2;
    let dm12 = -mll * s2;

    let mut jac = Matrix::zeros(4, 4);
    jac[(0, 1)] = 1.0;
    jac[(2, 3)] = 1.0;
    for col in 0..4 {
        let mut e1 = dr1[col];
        let mut e2 = dr2[col];
        if col == 2 {
            e1 -= dm11 * q1 + dm12 * q2;
            e2 -= dm12 * q1; // dm22/dθ2 = 0
        }
        jac[(1, col)] = (m22 * e1 - m12 * e2) / det;
        jac[(3, col)] = (m11 * e2 - m12 * e1) / det;
    }
    jac
}

/// Total mechanical energy of the pendulum; conserved along interior flow.
pub fn double_pendulum_energy(p: &DoublePendulumParams, x: &Vector) -> f64 {
    let (t1, w1, t2, w2) = (x[0], x[1], x[2], x[3]);
    let (m1, m2, l1, l2, g) = (p.m1, p.m2, p.l1, p.l2, p.g);
    let kinetic = 0.5 * (m1 + m2) * l1 * l1 * w1 * w1
        + 0.5 * m2 * l2 * l2 * (w1 + w2) * (w1 + w2)
        + m2 * l1 * l2 * w1 * (w1 + w2) * t2.cos();
    let potential = -(m1 + m2) * g * l1 * t1.cos() - m2 * g * l2 * (t1 + t2).cos();
    kinetic + potential
}

/// One discrete transition: guard hyperplane on the source mode's boundary
/// plus an affine reset `R_e(x) = A_e x + b_e`.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub id: usize,
    pub source: usize,
    pub target: usize,
    /// Unit normal pointing out of the source domain along the guard.
    pub guard_normal: Vector,
    pub guard_offset: f64,
    pub reset_a: Matrix,
    pub reset_b: Vector,
    /// Partner edge whose reset inverts this one (reversible edges).
    pub partner: Option<usize>,
    /// For partnerless edges: outward unit normal and offset of the target
    /// facet that receives the reset image.
    pub target_facet_normal: Option<Vector>,
    pub target_facet_offset: Option<f64>,
}

impl Edge {
    /// Signed guard value `g_e(x) = ĝ_e·x − c_e` (≤ 0 inside the source).
    pub fn guard_value(&self, x: &Vector) -> f64 {
        self.guard_normal.dot(x) - self.guard_offset
    }

    /// Relaxed guard value `g_e^ε(x) = g_e(x) − ε`.
    pub fn relaxed_guard_value(&self, eps: f64, x: &Vector) -> f64 {
        self.guard_value(x) - eps
    }

    /// Orthogonal projection onto the guard hyperplane:
    /// `P_e(x) = x − ĝ_e g_e(x)`.
    pub fn project_to_plane(&self, x: &Vector) -> Vector {
        x - &self.guard_normal * self.guard_value(x)
    }

    /// Unrelaxed reset `R_e(x) = A_e x + b_e`.
    pub fn reset(&self, x: &Vector) -> Vector {
        &self.reset_a * x + &self.reset_b
    }
}

/// Mode: domain polytope plus continuous dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub id: usize,
    pub polytope: Polytope,
    pub field: VectorField,
}

/// The full system. Immutable after construction; all queries are pure.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridSystem {
    pub modes: Vec<Mode>,
    pub edges: Vec<Edge>,
    pub state_dim: usize,
    pub input_dim: usize,
    /// Per-coordinate input bounds `[lo, hi]`.
    pub input_box: Vec<(f64, f64)>,
}

impl HybridSystem {
    pub fn mode(&self, j: usize) -> Result<&Mode> {
        self.modes.get(j).ok_or(HybridError::Dimension {
            context: "mode index",
            expected: self.modes.len(),
            got: j,
        })
    }

    pub fn edge(&self, e: usize) -> Result<&Edge> {
        self.edges.get(e).ok_or(HybridError::Dimension {
            context: "edge index",
            expected: self.edges.len(),
            got: e,
        })
    }

    /// Edges leaving mode `j`, in id order.
    pub fn neighborhood(&self, j: usize) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.source == j)
    }

    /// Evaluate the (extended) field of mode `j`; `x` may lie outside the
    /// domain polytope.
    pub fn eval_field(&self, j: usize, x: &Vector, u: &Vector) -> Result<Vector> {
        let mode = self.mode(j)?;
        if x.len() != self.state_dim {
            return Err(HybridError::Dimension {
                context: "eval_field state",
                expected: self.state_dim,
                got: x.len(),
            });
        }
        if u.len() != self.input_dim {
            return Err(HybridError::Dimension {
                context: "eval_field input",
                expected: self.input_dim,
                got: u.len(),
            });
        }
        Ok(mode.field.eval(x, u))
    }

    pub fn input_contains(&self, u: &Vector) -> bool {
        u.len() == self.input_dim
            && self
                .input_box
                .iter()
                .zip(u.iter())
                .all(|(&(lo, hi), &v)| v >= lo - GEOM_TOL && v <= hi + GEOM_TOL)
    }
}

/// Piecewise-constant input signal: `u(t) = values[i]` for
/// `t ∈ [breakpoints[i], breakpoints[i+1])`, right-continuous, clamped to the
/// first/last value outside the breakpoint range.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSignal {
    breakpoints: Vec<f64>,
    values: Vec<Vector>,
}

impl InputSignal {
    /// Zero-dimensional input for systems with `input_dim = 0`.
    pub fn none() -> Self {
        Self { breakpoints: vec![0.0], values: vec![Vector::zeros(0)] }
    }

    pub fn constant(u: Vector) -> Self {
        Self { breakpoints: vec![0.0], values: vec![u] }
    }

    pub fn piecewise(breakpoints: Vec<f64>, values: Vec<Vector>) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints.len() != values.len() {
            return Err(HybridError::InvalidParameter(
                "input table needs equally many breakpoints and values (≥ 1)".into(),
            ));
        }
        if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(HybridError::InvalidParameter(
                "input breakpoints must be strictly increasing".into(),
            ));
        }
        Ok(Self { breakpoints, values })
    }

    pub fn eval(&self, t: f64) -> &Vector {
        match self.breakpoints.binary_search_by(|b| b.partial_cmp(&t).unwrap()) {
            Ok(i) => &self.values[i],
            Err(0) => &self.values[0],
            Err(i) => &self.values[i - 1],
        }
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// All table values inside the system's input box.
    pub fn within_box(&self, system: &HybridSystem) -> bool {
        self.values.iter().all(|u| system.input_contains(u))
    }
}

/// One violated invariant found by [`validate_system`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub subject: String,
    pub message: String,
}

/// Validation outcome; empty iff the system is well formed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, subject: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation { subject: subject.into(), message: message.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for v in &self.violations {
            writeln!(f, "- [{}] {}", v.subject, v.message)?;
        }
        Ok(())
    }
}

/// Reversibility classification of an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeClass {
    Reversible,
    NonReversible,
}

/// Check every structural invariant of the system and report violations.
pub fn validate_system(system: &HybridSystem) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = system.state_dim;

    if system.modes.is_empty() {
        report.push("system", "mode set is empty");
    }
    if system.input_box.len() != system.input_dim {
        report.push(
            "system",
            format!(
                "input box has {} coordinate ranges for input_dim {}",
                system.input_box.len(),
                system.input_dim
            ),
        );
    }
    for &(lo, hi) in &system.input_box {
        if lo > hi {
            report.push("system", format!("input box range [{lo}, {hi}] is empty"));
        }
    }

    let mut mode_vertices: Vec<Vec<Vector>> = Vec::with_capacity(system.modes.len());
    for (idx, mode) in system.modes.iter().enumerate() {
        let subject = format!("mode {}", mode.id);
        if mode.id != idx {
            report.push(&subject, format!("mode ids must be contiguous; found {} at slot {idx}", mode.id));
        }
        if mode.polytope.dim() != n {
            report.push(&subject, format!("polytope dimension {} ≠ state_dim {n}", mode.polytope.dim()));
        }
        for i in 0..mode.polytope.normals.nrows() {
            let row_norm = mode.polytope.normals.row(i).norm();
            if (row_norm - 1.0).abs() > UNIT_NORM_TOL {
                report.push(&subject, format!("facet normal {i} has norm {row_norm}, expected 1"));
            }
        }
        if let Some(dim) = mode.field.state_dim() {
            if dim != n {
                report.push(&subject, format!("field dimension {dim} ≠ state_dim {n}"));
            }
        }
        if !mode.polytope.is_bounded() {
            report.push(&subject, "domain polytope is unbounded");
        }
        let verts = mode.polytope.vertices();
        if verts.is_empty() {
            report.push(&subject, "domain polytope is empty");
        }
        mode_vertices.push(verts);
    }

    for edge in &system.edges {
        let subject = format!("edge {}", edge.id);
        let Some(src) = system.modes.get(edge.source) else {
            report.push(&subject, format!("source mode {} does not exist", edge.source));
            continue;
        };
        let Some(tgt) = system.modes.get(edge.target) else {
            report.push(&subject, format!("target mode {} does not exist", edge.target));
            continue;
        };
        if (edge.guard_normal.norm() - 1.0).abs() > UNIT_NORM_TOL {
            report.push(&subject, format!("guard normal has norm {}", edge.guard_normal.norm()));
        }

        // Guard must be a facet hyperplane of the source polytope.
        let poly = &src.polytope;
        let is_facet = (0..poly.normals.nrows()).any(|i| {
            (poly.normals.row(i).transpose() - &edge.guard_normal).norm() <= GEOM_TOL
                && (poly.offsets[i] - edge.guard_offset).abs() <= GEOM_TOL
        });
        if !is_facet {
            report.push(&subject, "guard plane is not a facet hyperplane of the source polytope");
        }

        // Outward convention: g_e ≤ 0 on every source vertex.
        for v in &mode_vertices[edge.source] {
            if edge.guard_value(v) > UNIT_NORM_TOL {
                report.push(
                    &subject,
                    format!("guard normal does not point out of the source domain (g_e = {} at a vertex)", edge.guard_value(v)),
                );
                break;
            }
        }

        let guard_samples = guard_sample_points(src, edge);
        match edge.partner {
            Some(pid) => {
                let Some(partner) = system.edges.get(pid) else {
                    report.push(&subject, format!("partner edge {pid} does not exist"));
                    continue;
                };
                if partner.source != edge.target || partner.target != edge.source {
                    report.push(&subject, "partner edge does not reverse this edge's endpoints");
                }
                if edge.reset_a.clone().lu().is_invertible() {
                    for x in &guard_samples {
                        let image = edge.reset(x);
                        if partner.guard_value(&image).abs() > AFFINE_TOL {
                            report.push(&subject, "reset image of the guard leaves the partner's guard plane");
                            break;
                        }
                        let back = partner.reset(&image);
                        if (x - back).norm() > AFFINE_TOL {
                            report.push(&subject, "partner round trip R_e' ∘ R_e is not the identity on the guard");
                            break;
                        }
                    }
                } else {
                    report.push(&subject, "reset matrix of a reversible edge must be invertible");
                }
            }
            None => {
                let (Some(hn), Some(hd)) = (&edge.target_facet_normal, edge.target_facet_offset) else {
                    report.push(&subject, "partnerless edge must supply the receiving facet plane (normal, offset)");
                    continue;
                };
                if (hn.norm() - 1.0).abs() > UNIT_NORM_TOL {
                    report.push(&subject, format!("receiving facet normal has norm {}", hn.norm()));
                }
                for v in &mode_vertices[edge.target] {
                    if hn.dot(v) - hd > UNIT_NORM_TOL {
                        report.push(&subject, "receiving facet normal does not point out of the target domain");
                        break;
                    }
                }
                let _ = tgt;
                for x in &guard_samples {
                    let image = edge.reset(x);
                    if (hn.dot(&image) - hd).abs() > AFFINE_TOL {
                        report.push(&subject, "reset image of the guard leaves the receiving facet plane");
                        break;
                    }
                }
            }
        }
    }

    // Guards of distinct edges may not share points. Guards are whole facets
    // here, so two guards on the same plane of the same source overlap.
    for (i, a) in system.edges.iter().enumerate() {
        for b in system.edges.iter().skip(i + 1) {
            if a.source != b.source {
                continue;
            }
            let same_plane = (&a.guard_normal - &b.guard_normal).norm() <= GEOM_TOL
                && (a.guard_offset - b.guard_offset).abs() <= GEOM_TOL;
            if same_plane {
                report.push(
                    format!("edges {} and {}", a.id, b.id),
                    "guards share a plane on the same source mode and therefore intersect",
                );
            }
        }
    }

    report
}

/// Sample points on the guard: facet vertices plus their centroid.
pub(crate) fn guard_sample_points(src: &Mode, edge: &Edge) -> Vec<Vector> {
    let mut pts = src
        .polytope
        .facet_vertices(&edge.guard_normal, edge.guard_offset, GEOM_TOL);
    if !pts.is_empty() {
        let mut centroid = Vector::zeros(pts[0].len());
        for p in &pts {
            centroid += p;
        }
        centroid /= pts.len() as f64;
        pts.push(centroid);
    }
    pts
}

/// Classify an edge as reversible (partner present, round trip holds) or
/// non-reversible. A declared partner whose round trip fails is an error.
pub fn classify_edge(system: &HybridSystem, e: usize) -> Result<EdgeClass> {
    let edge = system.edge(e)?;
    let Some(pid) = edge.partner else {
        return Ok(EdgeClass::NonReversible);
    };
    let partner = system.edge(pid)?;
    if !edge.reset_a.clone().lu().is_invertible() {
        return Err(HybridError::Geometry {
            edge: e,
            message: "declared reversible but reset matrix is singular".into(),
        });
    }
    let src = system.mode(edge.source)?;
    for x in guard_sample_points(src, edge) {
        let back = partner.reset(&edge.reset(&x));
        if (&back - &x).norm() > AFFINE_TOL {
            return Err(HybridError::Geometry {
                edge: e,
                message: format!(
                    "declared partner {pid} does not invert the reset (round-trip error {})",
                    (&back - &x).norm()
                ),
            });
        }
    }
    Ok(EdgeClass::Reversible)
}

#[cfg(test)]
pub(crate) mod testutil {
    //! Deterministic sampling helpers shared by the unit suites.

    /// SplitMix64; cheap and reproducible.
    pub struct Rng(u64);

    impl Rng {
        pub fn new(seed: u64) -> Self {
            Self(seed)
        }

        pub fn next_u64(&mut self) -> u64 {
            self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
            let mut z = self.0;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
            z ^ (z >> 31)
        }

        /// Uniform in [lo, hi).
        pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
            let u = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            lo + u * (hi - lo)
        }

        pub fn vector(&mut self, dim: usize, lo: f64, hi: f64) -> crate::Vector {
            crate::Vector::from_fn(dim, |_, _| self.uniform(lo, hi))
        }
    }
}
