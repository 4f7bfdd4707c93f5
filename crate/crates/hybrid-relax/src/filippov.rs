//! The unrelaxed switched-system view of a transition.
//!
//! Transporting the target field back through an edge's change of basis,
//! `f_e(x, u) = Ā_e⁻¹ f_{j'}(R̄_e(x), u)`, turns a discrete jump into the
//! flow of a switched field on the extended domain `D̄_j = D_j ∪ (∪_e D_e)`.
//! On the guard surface the pair of normal components
//!
//! * `a1 = ĝ_e·f_j(x, u)` (source side) and
//! * `a2 = ĝ_e·f_e(x, u)` (transported target side)
//!
//! classifies the contact: crossing when `a1·a2 > 0`, sliding when `a1 > 0 >
//! a2`, escaping when `a1 ≤ 0 ≤ a2`. Sliding contacts follow the Filippov
//! convex combination `f^s = (1−α) f_j + α f_e`, tangent to the guard.

use crate::geometry::{Region, SystemGeometry};
use crate::{HybridError, Result, Vector};

/// Contact classification with the two normal components attached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionSample {
    pub tag: RegionTag,
    pub a1: f64,
    pub a2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionTag {
    Crossing,
    Sliding,
    Escaping,
    /// Tangency cases not covered by the strict/non-strict inequalities
    /// above (one component exactly zero with the other positive).
    Degenerate,
}

pub fn classify_components(a1: f64, a2: f64) -> RegionTag {
    if a1 * a2 > 0.0 {
        RegionTag::Crossing
    } else if a1 > 0.0 && a2 < 0.0 {
        RegionTag::Sliding
    } else if a1 <= 0.0 && a2 >= 0.0 {
        RegionTag::Escaping
    } else {
        RegionTag::Degenerate
    }
}

/// Transported target field `f_e(x, u) = Ā_e⁻¹ f_{j'}(R̄_e(x), u)`.
/// Rank-deficient edges must use the augmented path instead.
pub fn projected_field(geo: &SystemGeometry, e: usize, x: &Vector, u: &Vector) -> Result<Vector> {
    let eg = geo.edge_geometry(e);
    let rhs = geo.system.eval_field(eg.target, &eg.bar_reset(0.0, x), u)?;
    eg.solve_a_bar(&rhs)
}

/// Classify the guard contact of edge `e` at `x` (intended for points on or
/// near the guard plane).
pub fn classify_region(geo: &SystemGeometry, e: usize, x: &Vector, u: &Vector) -> Result<RegionSample> {
    let eg = geo.edge_geometry(e);
    let edge = geo.system.edge(e)?;
    let f_src = geo.system.eval_field(eg.source, x, u)?;
    let f_proj = projected_field(geo, e, x, u)?;
    let a1 = edge.guard_normal.dot(&f_src);
    let a2 = edge.guard_normal.dot(&f_proj);
    Ok(RegionSample { tag: classify_components(a1, a2), a1, a2 })
}

/// Filippov sliding field at a sliding contact: returns the convex weight α
/// and `f^s = (1−α) f_j + α f_e`, tangent to the guard plane.
pub fn sliding_field(geo: &SystemGeometry, e: usize, x: &Vector, u: &Vector) -> Result<(f64, Vector)> {
    let eg = geo.edge_geometry(e);
    let edge = geo.system.edge(e)?;
    let f_src = geo.system.eval_field(eg.source, x, u)?;
    let f_proj = projected_field(geo, e, x, u)?;
    let a1 = edge.guard_normal.dot(&f_src);
    let a2 = edge.guard_normal.dot(&f_proj);
    if classify_components(a1, a2) != RegionTag::Sliding {
        return Err(HybridError::NotSliding { a1, a2 });
    }
    let alpha = a1 / (a1 - a2);
    Ok((alpha, &f_src * (1.0 - alpha) + &f_proj * alpha))
}

/// The switched field on the extended domain: `f_j` inside the mode's own
/// polytope (guard-plane points included, by membership precedence), the
/// transported `f_e` on each pulled-back target domain.
pub fn switched_field(geo: &SystemGeometry, j: usize, x: &Vector, u: &Vector) -> Result<Vector> {
    match geo.membership(0.0, j, x) {
        Region::Interior | Region::Strip(_) => geo.system.eval_field(j, x, u),
        Region::Projected(e) => projected_field(geo, e, x, u),
        Region::Outside => Err(HybridError::OutsideDomain { mode: j, t: f64::NAN }),
    }
}
