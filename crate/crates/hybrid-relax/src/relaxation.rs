//! Transition functions and the ε-relaxed vector fields.
//!
//! A transition function φ ramps monotonically from 0 to 1 over [0, 1] with
//! φ' Lipschitz, vanishing derivative at both ends, and point symmetry
//! φ(1−a) = 1 − φ(a). Writing `φ_e^ε(x) = φ(g_e(x)/ε)`, the relaxed edge
//! field blends the source field with the transported target field across the
//! strip:
//!
//! ```text
//! f_e^ε(x,u) = (1 − φ_e^ε(x)) f_j(x,u) + φ_e^ε(x) Ā_e⁻¹ f_{j'}(R̄_e^ε(x),u)
//! ```
//!
//! The blend is continuously differentiable, equals `f_j` where `g_e ≤ 0`,
//! and satisfies `Ā_e f_e^ε = f_{j'}∘R̄_e^ε` where `g_e ≥ ε`. Point symmetry
//! of φ is what makes the charts of partner edges produce equivalent flows.
//!
//! Rank-deficient edges blend in the augmented state space instead:
//!
//! ```text
//! f̂^ε((x,z),u) = (1 − φ_e^ε(x))·(f_j(x,u), 0) + φ_e^ε(x)·Ã_e† f_{j'}(R̃_e^ε(x,z),u)
//! ```
//!
//! so the auxiliary coordinates stay dormant until the state reaches the
//! strip and then carry the target-field components that `Ā_e` cannot
//! represent.

use serde::{Deserialize, Serialize};

use crate::geometry::{Region, SystemGeometry};
use crate::model::HybridSystem;
use crate::{HybridError, Result, Vector};

/// Selection of the blending ramp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TransitionKind {
    /// `φ(a) = 1/2 + 1/2·sin(πa − π/2)` on (0, 1).
    #[default]
    SinePaper,
    /// `φ(a) = 3a² − 2a³` on (0, 1); used to check that results do not
    /// depend on the particular ramp.
    SmoothstepCubic,
}

impl TransitionKind {
    pub fn phi(self, a: f64) -> f64 {
        if a <= 0.0 {
            return 0.0;
        }
        if a >= 1.0 {
            return 1.0;
        }
        match self {
            TransitionKind::SinePaper => 0.5 + 0.5 * (std::f64::consts::PI * a - std::f64::consts::FRAC_PI_2).sin(),
            TransitionKind::SmoothstepCubic => a * a * (3.0 - 2.0 * a),
        }
    }

    pub fn phi_prime(self, a: f64) -> f64 {
        if !(0.0..=1.0).contains(&a) {
            return 0.0;
        }
        match self {
            TransitionKind::SinePaper => {
                0.5 * std::f64::consts::PI * (std::f64::consts::PI * a - std::f64::consts::FRAC_PI_2).cos()
            }
            TransitionKind::SmoothstepCubic => 6.0 * a * (1.0 - a),
        }
    }
}

/// Relaxation parameters: strip width, blend ramp, linear-solve tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxationParams {
    pub eps: f64,
    pub transition: TransitionKind,
    pub solve_tol: f64,
}

impl RelaxationParams {
    pub fn new(eps: f64) -> Self {
        Self { eps, transition: TransitionKind::SinePaper, solve_tol: 1e-9 }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return Err(HybridError::InvalidParameter(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// A system together with its transition geometry and relaxation parameters.
/// Immutable after construction; all evaluations are pure.
#[derive(Debug, Clone)]
pub struct RelaxedSystem<'a> {
    pub geo: SystemGeometry<'a>,
    pub params: RelaxationParams,
}

impl<'a> RelaxedSystem<'a> {
    pub fn new(system: &'a HybridSystem, params: RelaxationParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { geo: SystemGeometry::build(system)?, params })
    }

    pub fn system(&self) -> &HybridSystem {
        self.geo.system
    }

    pub fn eps(&self) -> f64 {
        self.params.eps
    }

    /// `φ_e^ε(x) = φ(g_e(x)/ε)`.
    pub fn phi_edge(&self, e: usize, x: &Vector) -> f64 {
        let edge = &self.system().edges[e];
        self.params.transition.phi(edge.guard_value(x) / self.params.eps)
    }

    /// State dimension of the augmented chart of mode `j`.
    pub fn chart_dim(&self, j: usize) -> usize {
        self.system().state_dim + self.geo.mode_aux_dim(j)
    }
}

/// Relaxed edge field `f_e^ε` for a full-rank edge.
pub fn relaxed_edge_field(rs: &RelaxedSystem, e: usize, x: &Vector, u: &Vector) -> Result<Vector> {
    let eg = rs.geo.edge_geometry(e);
    if !eg.is_full_rank() {
        return Err(HybridError::RankDeficient { edge: e });
    }
    let phi = rs.phi_edge(e, x);
    let f_src = rs.system().eval_field(eg.source, x, u)?;
    if phi == 0.0 {
        return Ok(f_src);
    }
    let rhs = rs.system().eval_field(eg.target, &eg.bar_reset(rs.eps(), x), u)?;
    let transported = eg.solve_a_bar(&rhs)?;
    let resid = (&eg.a_bar * &transported - &rhs).norm();
    if resid > rs.params.solve_tol * (1.0 + rhs.norm()) {
        return Err(HybridError::Geometry {
            edge: e,
            message: format!("transported-field solve residual {resid} exceeds tolerance"),
        });
    }
    Ok(f_src * (1.0 - phi) + transported * phi)
}

/// Relaxed mode field `f_j^ε`: the mode's own field on its polytope, the
/// relaxed edge field on each strip and pulled-back domain.
pub fn relaxed_mode_field(rs: &RelaxedSystem, j: usize, x: &Vector, u: &Vector) -> Result<Vector> {
    match rs.geo.membership(rs.eps(), j, x) {
        Region::Interior => rs.system().eval_field(j, x, u),
        Region::Strip(e) | Region::Projected(e) => relaxed_edge_field(rs, e, x, u),
        Region::Outside => Err(HybridError::OutsideDomain { mode: j, t: f64::NAN }),
    }
}

/// Augmented relaxed field of edge `e` over `(x, z)`; returns an
/// (n + p_e)-vector. Full-rank edges (p_e = 0) reduce to the plain blend.
pub fn augmented_edge_field(
    rs: &RelaxedSystem,
    e: usize,
    x: &Vector,
    z: &Vector,
    u: &Vector,
) -> Result<Vector> {
    let eg = rs.geo.edge_geometry(e);
    let p = eg.aux_dim();
    if z.len() != p {
        return Err(HybridError::Dimension { context: "auxiliary state", expected: p, got: z.len() });
    }
    let n = rs.system().state_dim;
    let phi = rs.phi_edge(e, x);
    let f_src = rs.system().eval_field(eg.source, x, u)?;
    let mut out = Vector::zeros(n + p);
    out.rows_mut(0, n).copy_from(&(&f_src * (1.0 - phi)));
    if phi > 0.0 {
        let image = eg.tilde_reset(rs.eps(), x, z)?;
        let f_tgt = rs.system().eval_field(eg.target, &image, u)?;
        out += &eg.a_tilde_pinv * &f_tgt * phi;
    }
    Ok(out)
}

/// Augmented relaxed mode field over the chart state `(x, z)` of mode `j`,
/// where `z` has the dimension of the mode's rank-deficient edge (possibly
/// zero). Full-rank strips leave `z` dormant.
pub fn augmented_mode_field(rs: &RelaxedSystem, j: usize, state: &Vector, u: &Vector) -> Result<Vector> {
    let n = rs.system().state_dim;
    let p = rs.geo.mode_aux_dim(j);
    if state.len() != n + p {
        return Err(HybridError::Dimension { context: "chart state", expected: n + p, got: state.len() });
    }
    let x = state.rows(0, n).into_owned();
    let z = state.rows(n, p).into_owned();
    match rs.geo.membership_aug(rs.eps(), j, &x, Some(&z)) {
        Region::Interior => {
            let mut out = Vector::zeros(n + p);
            out.rows_mut(0, n).copy_from(&rs.system().eval_field(j, &x, u)?);
            Ok(out)
        }
        Region::Strip(e) | Region::Projected(e) => {
            if Some(e) == rs.geo.mode_aux_edge(j) {
                augmented_edge_field(rs, e, &x, &z, u)
            } else {
                let mut out = Vector::zeros(n + p);
                out.rows_mut(0, n).copy_from(&relaxed_edge_field(rs, e, &x, u)?);
                Ok(out)
            }
        }
        Region::Outside => Err(HybridError::OutsideDomain { mode: j, t: f64::NAN }),
    }
}
