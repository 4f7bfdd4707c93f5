//! Affine geometry of transitions.
//!
//! For an edge `e = (j, j')` the reset is replayed inside the source chart by
//! the transported map
//!
//! ```text
//! R̄_e(x)   = R_e(P_e(x)) − w·g_e(x)        = Ā_e x + b̄_e
//! R̄_e^ε(x) = R̄_e(x) + w·ε                 = Ā_e x + b̄_e + w·ε
//! ```
//!
//! where `P_e` projects onto the guard plane and `w` is the outward unit
//! normal of the facet receiving the image (the partner's guard normal for
//! reversible edges, the declared facet normal `ĥ_e` otherwise). `Ā_e`
//! performs the change of basis of the transition:
//! `Ā_e = A_e(I − ĝ_e ĝ_eᵀ) − w ĝ_eᵀ`, `b̄_e = A_e ĝ_e c_e + b_e + w c_e`.
//!
//! When `Ā_e` is rank deficient, components of the target field lying in
//! `range(Ā_e)^⊥` cannot be pulled back through the edge. An orthonormal
//! basis `V_e` of that complement spans auxiliary coordinates `z`; the
//! augmented map `R̃_e^ε(x, z) = R̄_e^ε(x) + V_e z = Ã_e (x; z) + b̄_e^ε` with
//! `Ã_e = [Ā_e | V_e]` is surjective and admits a right inverse `Ã_e†`.

use nalgebra::{Dyn, LU};

use crate::model::{guard_sample_points, HybridSystem, GEOM_TOL};
use crate::{HybridError, Matrix, Result, Vector};

/// Relative singular-value cutoff for the rank decision.
const RANK_CUTOFF: f64 = 1e-9;

/// Precomputed transition geometry of one edge. Immutable after build.
#[derive(Debug, Clone)]
pub struct EdgeGeometry {
    pub edge: usize,
    pub source: usize,
    pub target: usize,
    /// Change-of-basis matrix `Ā_e`.
    pub a_bar: Matrix,
    /// ε-independent offset `b̄_e`.
    pub b_bar: Vector,
    /// Outward unit normal of the receiving facet (`ĝ_{e'}` or `ĥ_e`).
    pub receiving_normal: Vector,
    /// Offset of the receiving facet plane.
    pub receiving_offset: f64,
    pub rank: usize,
    /// Orthonormal basis of `range(Ā_e)^⊥`, one column per auxiliary
    /// coordinate (n × p).
    pub null_basis: Matrix,
    /// `Ã_e = [Ā_e | V_e]`, n × (n+p).
    pub a_tilde: Matrix,
    /// Minimal-norm right inverse of `Ã_e`, (n+p) × n.
    pub a_tilde_pinv: Matrix,
    /// max over target-domain vertices of ‖v‖∞; used for the auxiliary-state
    /// bound.
    max_target_vertex_inf: f64,
    /// Cached factorization of `Ā_e` (full-rank edges only).
    lu: Option<LU<f64, Dyn, Dyn>>,
}

impl EdgeGeometry {
    pub fn build(system: &HybridSystem, edge_id: usize) -> Result<Self> {
        let edge = system.edge(edge_id)?;
        let n = system.state_dim;
        let ghat = &edge.guard_normal;

        let (receiving_normal, receiving_offset) = match edge.partner {
            Some(pid) => {
                let partner = system.edge(pid)?;
                (partner.guard_normal.clone(), partner.guard_offset)
            }
            None => {
                let normal = edge.target_facet_normal.clone().ok_or(HybridError::Geometry {
                    edge: edge_id,
                    message: "partnerless edge lacks a receiving facet plane".into(),
                })?;
                (normal, edge.target_facet_offset.unwrap_or(0.0))
            }
        };

        let eye = Matrix::identity(n, n);
        let proj = &eye - ghat * ghat.transpose();
        let a_bar = &edge.reset_a * proj - &receiving_normal * ghat.transpose();
        let b_bar =
            &edge.reset_a * ghat * edge.guard_offset + &edge.reset_b + &receiving_normal * edge.guard_offset;

        let svd = a_bar.clone().svd(true, false);
        let smax = svd.singular_values.max();
        let cutoff = RANK_CUTOFF * smax.max(f64::MIN_POSITIVE);
        let small: Vec<usize> = (0..n).filter(|&i| svd.singular_values[i] <= cutoff).collect();
        let rank = n - small.len();

        if edge.partner.is_some() && rank < n {
            return Err(HybridError::Geometry {
                edge: edge_id,
                message: format!(
                    "reversible edge has a near-singular transition matrix (rank {rank} of {n})"
                ),
            });
        }

        let u = svd.u.as_ref().expect("svd with u");
        let mut null_basis = Matrix::zeros(n, small.len());
        for (col, &i) in small.iter().enumerate() {
            let mut v: Vector = u.column(i).into();
            // Deterministic orientation: largest-magnitude entry positive.
            let lead = v.iter().cloned().fold(0.0f64, |acc, c| if c.abs() > acc.abs() { c } else { acc });
            if lead < 0.0 {
                v = -v;
            }
            null_basis.set_column(col, &v);
        }

        let p = null_basis.ncols();
        let mut a_tilde = Matrix::zeros(n, n + p);
        a_tilde.view_mut((0, 0), (n, n)).copy_from(&a_bar);
        if p > 0 {
            a_tilde.view_mut((0, n), (n, p)).copy_from(&null_basis);
        }
        // Ã has full row rank, so ÃÃᵀ is SPD and Ã† = Ãᵀ(ÃÃᵀ)⁻¹ is the
        // minimal-norm right inverse.
        let gram = &a_tilde * a_tilde.transpose();
        let chol = nalgebra::Cholesky::new(gram).ok_or(HybridError::Geometry {
            edge: edge_id,
            message: "augmented transition matrix is not surjective".into(),
        })?;
        let a_tilde_pinv = a_tilde.transpose() * chol.inverse();

        let resid = (&a_tilde * &a_tilde_pinv - &eye).amax();
        if resid > 1e-10 {
            return Err(HybridError::Geometry {
                edge: edge_id,
                message: format!("right inverse residual {resid} exceeds 1e-10"),
            });
        }
        let annih = (a_bar.transpose() * &null_basis).amax();
        if annih > 1e-9 {
            return Err(HybridError::Geometry {
                edge: edge_id,
                message: format!("null basis is not orthogonal to range (residual {annih})"),
            });
        }

        let geo = Self {
            edge: edge_id,
            source: edge.source,
            target: edge.target,
            a_bar,
            b_bar,
            receiving_normal,
            receiving_offset,
            rank,
            null_basis,
            a_tilde,
            a_tilde_pinv,
            max_target_vertex_inf: system.mode(edge.target)?
                .polytope
                .vertices()
                .iter()
                .map(|v| v.amax())
                .fold(0.0, f64::max),
            lu: None,
        };
        let geo = Self {
            lu: if rank == n { Some(geo.a_bar.clone().lu()) } else { None },
            ..geo
        };

        // Transverse alignment on guard samples: the receiving-plane value of
        // the transported image must mirror the guard value.
        let src = system.mode(edge.source)?;
        for x in guard_sample_points(src, edge) {
            let image = geo.bar_reset(0.0, &x);
            let recv = geo.receiving_value(&image);
            if (recv + edge.guard_value(&x)).abs() > 1e-9 {
                return Err(HybridError::Geometry {
                    edge: edge_id,
                    message: "transported reset does not align transverse coordinates; check the receiving facet data".into(),
                });
            }
        }

        Ok(geo)
    }

    /// Number of auxiliary coordinates `p_e = n − rank(Ā_e)`.
    pub fn aux_dim(&self) -> usize {
        self.null_basis.ncols()
    }

    pub fn is_full_rank(&self) -> bool {
        self.aux_dim() == 0
    }

    /// `b̄_e^ε = b̄_e + w·ε`.
    pub fn bar_offset(&self, eps: f64) -> Vector {
        &self.b_bar + &self.receiving_normal * eps
    }

    /// Transported relaxed reset `R̄_e^ε(x) = Ā_e x + b̄_e^ε`.
    pub fn bar_reset(&self, eps: f64, x: &Vector) -> Vector {
        &self.a_bar * x + self.bar_offset(eps)
    }

    /// Augmented transported reset `R̃_e^ε(x, z) = R̄_e^ε(x) + V_e z`.
    pub fn tilde_reset(&self, eps: f64, x: &Vector, z: &Vector) -> Result<Vector> {
        if z.len() != self.aux_dim() {
            return Err(HybridError::Dimension {
                context: "auxiliary state",
                expected: self.aux_dim(),
                got: z.len(),
            });
        }
        let mut out = self.bar_reset(eps, x);
        if !z.is_empty() {
            out += &self.null_basis * z;
        }
        Ok(out)
    }

    /// Signed value of the receiving facet plane at `y` (≤ 0 inside the
    /// target domain).
    pub fn receiving_value(&self, y: &Vector) -> f64 {
        self.receiving_normal.dot(y) - self.receiving_offset
    }

    /// Solve `Ā_e y = rhs`; errors on rank-deficient edges.
    pub fn solve_a_bar(&self, rhs: &Vector) -> Result<Vector> {
        match &self.lu {
            Some(lu) => lu.solve(rhs).ok_or(HybridError::Geometry {
                edge: self.edge,
                message: "factorized solve failed".into(),
            }),
            None => Err(HybridError::RankDeficient { edge: self.edge }),
        }
    }

    /// Safe over-approximation of the auxiliary-state bound:
    /// `M = max_v ‖v‖∞ + ‖b̄_e^ε‖∞` over target-domain vertices.
    pub fn z_bound(&self, eps: f64) -> f64 {
        self.max_target_vertex_inf + self.bar_offset(eps).amax()
    }
}

/// Region tag of a point relative to one mode's extended domain family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// Inside the mode's own polytope.
    Interior,
    /// Inside the ε-strip appended past the named edge's guard.
    Strip(usize),
    /// Past the strip, inside the pull-back of the target domain.
    Projected(usize),
    Outside,
}

/// Geometry of every edge of a system, built once and shared read-only.
#[derive(Debug, Clone)]
pub struct SystemGeometry<'a> {
    pub system: &'a HybridSystem,
    pub edges: Vec<EdgeGeometry>,
    /// Per mode: the rank-deficient outgoing edge, if any. At most one is
    /// supported per mode.
    mode_aux_edge: Vec<Option<usize>>,
}

impl<'a> SystemGeometry<'a> {
    pub fn build(system: &'a HybridSystem) -> Result<Self> {
        let edges: Vec<EdgeGeometry> = (0..system.edges.len())
            .map(|e| EdgeGeometry::build(system, e))
            .collect::<Result<_>>()?;
        let mut mode_aux_edge = vec![None; system.modes.len()];
        for geo in &edges {
            if geo.aux_dim() > 0 {
                if mode_aux_edge[geo.source].is_some() {
                    return Err(HybridError::InvalidParameter(format!(
                        "mode {} has more than one rank-deficient edge; unsupported",
                        geo.source
                    )));
                }
                mode_aux_edge[geo.source] = Some(geo.edge);
            }
        }
        Ok(Self { system, edges, mode_aux_edge })
    }

    pub fn edge_geometry(&self, e: usize) -> &EdgeGeometry {
        &self.edges[e]
    }

    /// Auxiliary-state dimension carried while simulating in mode `j`.
    pub fn mode_aux_dim(&self, j: usize) -> usize {
        self.mode_aux_edge[j].map_or(0, |e| self.edges[e].aux_dim())
    }

    /// The rank-deficient outgoing edge of mode `j`, if any.
    pub fn mode_aux_edge(&self, j: usize) -> Option<usize> {
        self.mode_aux_edge[j]
    }

    /// Whether every edge has a full-rank transition matrix.
    pub fn all_full_rank(&self) -> bool {
        self.edges.iter().all(|g| g.is_full_rank())
    }

    /// Classify a point relative to mode `j`'s extended domain family, with
    /// fixed precedence Interior > Strip > Projected and lowest edge id
    /// first. Strips additionally require the plane projection to land in the
    /// guard facet.
    pub fn membership(&self, eps: f64, j: usize, x: &Vector) -> Region {
        self.membership_aug(eps, j, x, None)
    }

    /// Augmented variant: the projected-region test of a rank-deficient edge
    /// uses `R̃_e^ε(x, z)` in place of `R̄_e^ε(x)`.
    pub fn membership_aug(&self, eps: f64, j: usize, x: &Vector, z: Option<&Vector>) -> Region {
        let mode = &self.system.modes[j];
        if mode.polytope.contains(x, GEOM_TOL) {
            return Region::Interior;
        }
        for edge in self.system.neighborhood(j) {
            let g = edge.guard_value(x);
            if g >= -GEOM_TOL && g <= eps + GEOM_TOL {
                let p = edge.project_to_plane(x);
                if mode.polytope.contains(&p, GEOM_TOL) {
                    return Region::Strip(edge.id);
                }
            }
        }
        for edge in self.system.neighborhood(j) {
            if edge.guard_value(x) >= eps - GEOM_TOL && self.image_in_target(eps, edge.id, x, z) {
                return Region::Projected(edge.id);
            }
        }
        Region::Outside
    }

    /// All edges whose projected region contains the point (used for
    /// earliest-crossing tie-breaking between simultaneous transitions).
    pub fn projected_candidates(&self, eps: f64, j: usize, x: &Vector, z: Option<&Vector>) -> Vec<usize> {
        self.system
            .neighborhood(j)
            .filter(|edge| edge.guard_value(x) >= eps - GEOM_TOL && self.image_in_target(eps, edge.id, x, z))
            .map(|edge| edge.id)
            .collect()
    }

    fn image_in_target(&self, eps: f64, e: usize, x: &Vector, z: Option<&Vector>) -> bool {
        let geo = &self.edges[e];
        let image = match (geo.aux_dim(), z) {
            (0, _) => geo.bar_reset(eps, x),
            (_, Some(z)) => match geo.tilde_reset(eps, x, z) {
                Ok(img) => img,
                Err(_) => return false,
            },
            (_, None) => geo.bar_reset(eps, x),
        };
        self.system.modes[geo.target].polytope.contains(&image, GEOM_TOL)
    }

    /// Apply the relaxed reset of edge `e`: new chart state plus a zeroed
    /// auxiliary state sized for the target mode.
    pub fn apply_reset(&self, eps: f64, e: usize, x: &Vector, z: &Vector) -> Result<(Vector, Vector)> {
        let geo = &self.edges[e];
        let image = if geo.aux_dim() == 0 {
            geo.bar_reset(eps, x)
        } else {
            geo.tilde_reset(eps, x, z)?
        };
        Ok((image, Vector::zeros(self.mode_aux_dim(geo.target))))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::testutil::Rng;
    use crate::model::{Edge, HybridSystem, Mode, Polytope, VectorField};
    use crate::registry::{self, BouncingBallParams};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn affine(f: Matrix, w: Vector) -> VectorField {
        let n = w.len();
        VectorField::Affine { f, g: Matrix::zeros(n, 0), w }
    }

    pub(crate) fn constant_field(w: &[f64]) -> VectorField {
        let n = w.len();
        affine(Matrix::zeros(n, n), Vector::from_row_slice(w))
    }

    /// Two unit squares glued along x1 = 0 with identity resets.
    pub(crate) fn glued_identity_bimodal() -> HybridSystem {
        glued_bimodal_with_fields(constant_field(&[0.0, 0.0]), constant_field(&[0.0, 0.0]))
    }

    pub(crate) fn glued_bimodal_with_fields(f1: VectorField, f2: VectorField) -> HybridSystem {
        HybridSystem {
            modes: vec![
                Mode { id: 0, polytope: Polytope::boxed(&[(-1.0, 0.0), (-1.0, 1.0)]), field: f1 },
                Mode { id: 1, polytope: Polytope::boxed(&[(0.0, 1.0), (-1.0, 1.0)]), field: f2 },
            ],
            edges: vec![
                Edge {
                    id: 0,
                    source: 0,
                    target: 1,
                    guard_normal: Vector::from_vec(vec![1.0, 0.0]),
                    guard_offset: 0.0,
                    reset_a: Matrix::identity(2, 2),
                    reset_b: Vector::zeros(2),
                    partner: Some(1),
                    target_facet_normal: None,
                    target_facet_offset: None,
                },
                Edge {
                    id: 1,
                    source: 1,
                    target: 0,
                    guard_normal: Vector::from_vec(vec![-1.0, 0.0]),
                    guard_offset: 0.0,
                    reset_a: Matrix::identity(2, 2),
                    reset_b: Vector::zeros(2),
                    partner: Some(0),
                    target_facet_normal: None,
                    target_facet_offset: None,
                },
            ],
            state_dim: 2,
            input_dim: 0,
            input_box: vec![],
        }
    }

    /// Reversible pair with a non-identity reset: guard {1}×[−1,1] of mode 0
    /// maps onto {2}×[−2,2] of mode 1 by (1, s) ↦ (2, 2s).
    pub(crate) fn scaled_bimodal(f1: VectorField, f2: VectorField) -> HybridSystem {
        HybridSystem {
            modes: vec![
                Mode { id: 0, polytope: Polytope::boxed(&[(0.0, 1.0), (-1.0, 1.0)]), field: f1 },
                Mode { id: 1, polytope: Polytope::boxed(&[(2.0, 3.0), (-2.0, 2.0)]), field: f2 },
            ],
            edges: vec![
                Edge {
                    id: 0,
                    source: 0,
                    target: 1,
                    guard_normal: Vector::from_vec(vec![1.0, 0.0]),
                    guard_offset: 1.0,
                    reset_a: Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]),
                    reset_b: Vector::from_vec(vec![1.0, 0.0]),
                    partner: Some(1),
                    target_facet_normal: None,
                    target_facet_offset: None,
                },
                Edge {
                    id: 1,
                    source: 1,
                    target: 0,
                    guard_normal: Vector::from_vec(vec![-1.0, 0.0]),
                    guard_offset: -2.0,
                    reset_a: Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5]),
                    reset_b: Vector::from_vec(vec![-1.0, 0.0]),
                    partner: Some(0),
                    target_facet_normal: None,
                    target_facet_offset: None,
                },
            ],
            state_dim: 2,
            input_dim: 0,
            input_box: vec![],
        }
    }

    #[test]
    fn validates_synthetic_systems() {
        for sys in [glued_identity_bimodal(), scaled_bimodal(constant_field(&[1.0, 0.3]), constant_field(&[0.5, -0.2]))] {
            let report = crate::model::validate_system(&sys);
            assert!(report.is_valid(), "{report}");
        }
    }

    #[test]
    fn guard_values() {
        let e = Edge {
            id: 0,
            source: 0,
            target: 0,
            guard_normal: Vector::from_vec(vec![0.0, 1.0]),
            guard_offset: 1.0,
            reset_a: Matrix::identity(2, 2),
            reset_b: Vector::zeros(2),
            partner: None,
            target_facet_normal: None,
            target_facet_offset: None,
        };
        assert_relative_eq!(e.guard_value(&Vector::from_vec(vec![3.0, 1.0])), 0.0);

        let e2 = Edge { guard_normal: Vector::from_vec(vec![-1.0, 0.0]), guard_offset: 0.0, ..e };
        let x = Vector::from_vec(vec![0.25, -1.0]);
        assert_relative_eq!(e2.guard_value(&x), -0.25);
        assert_relative_eq!(e2.relaxed_guard_value(0.1, &x), -0.35);
    }

    #[test]
    fn plane_projection() {
        let e = Edge {
            id: 0,
            source: 0,
            target: 0,
            guard_normal: Vector::from_vec(vec![0.0, 1.0]),
            guard_offset: 0.0,
            reset_a: Matrix::identity(2, 2),
            reset_b: Vector::zeros(2),
            partner: None,
            target_facet_normal: None,
            target_facet_offset: None,
        };
        let p = e.project_to_plane(&Vector::from_vec(vec![2.0, 5.0]));
        assert_relative_eq!(p, Vector::from_vec(vec![2.0, 0.0]));
        assert_relative_eq!(e.project_to_plane(&p), p, epsilon = 1e-15);

        let e2 = Edge { guard_normal: Vector::from_vec(vec![-1.0, 0.0]), ..e };
        assert_relative_eq!(
            e2.project_to_plane(&Vector::from_vec(vec![-0.3, 2.0])),
            Vector::from_vec(vec![0.0, 2.0])
        );
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(x0 in -10.0f64..10.0, x1 in -10.0f64..10.0, c in -2.0f64..2.0) {
            let e = Edge {
                id: 0,
                source: 0,
                target: 0,
                guard_normal: Vector::from_vec(vec![-1.0, 0.0]),
                guard_offset: c,
                reset_a: Matrix::identity(2, 2),
                reset_b: Vector::zeros(2),
                partner: None,
                target_facet_normal: None,
                target_facet_offset: None,
            };
            let x = Vector::from_vec(vec![x0, x1]);
            let p = e.project_to_plane(&x);
            prop_assert!((e.project_to_plane(&p) - &p).norm() <= 1e-12);
            prop_assert!(e.guard_value(&p).abs() <= 1e-12);
        }

        #[test]
        fn relaxed_guard_offset_is_minus_eps(x0 in -5.0f64..5.0, x1 in -5.0f64..5.0, eps in 1e-6f64..1.0) {
            let sys = registry::bouncing_ball(BouncingBallParams::default()).unwrap();
            let x = Vector::from_vec(vec![x0, x1]);
            let e = &sys.edges[0];
            prop_assert!((e.relaxed_guard_value(eps, &x) - (e.guard_value(&x) - eps)).abs() <= 1e-15);
        }
    }

    #[test]
    fn glued_identity_geometry() {
        let sys = glued_identity_bimodal();
        let geo = SystemGeometry::build(&sys).unwrap();
        let g0 = geo.edge_geometry(0);
        assert_relative_eq!(g0.a_bar, Matrix::identity(2, 2), epsilon = 1e-14);
        assert_relative_eq!(g0.b_bar, Vector::zeros(2), epsilon = 1e-14);
        assert_eq!(g0.rank, 2);

        // A guard point is glued to itself under the ε = 0 transported reset.
        let x = Vector::from_vec(vec![0.0, 0.4]);
        assert_relative_eq!(g0.bar_reset(0.0, &x), x, epsilon = 1e-14);
    }

    #[test]
    fn bouncing_ball_geometry_matrix() {
        let sys = registry::bouncing_ball(BouncingBallParams::default()).unwrap();
        let geo = SystemGeometry::build(&sys).unwrap();
        let g = geo.edge_geometry(0);
        assert_relative_eq!(
            g.a_bar,
            Matrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -0.5]),
            epsilon = 1e-14
        );
        assert_eq!(g.rank, 2);
        assert_eq!(g.aux_dim(), 0);
        assert_relative_eq!(g.b_bar, Vector::zeros(2), epsilon = 1e-14);

        // Transported reset mirrors height past the plane and flips/scales
        // the velocity: R̄(−0.3, −2) = (0.3, 1).
        let img = g.bar_reset(0.0, &Vector::from_vec(vec![-0.3, -2.0]));
        assert_relative_eq!(img, Vector::from_vec(vec![0.3, 1.0]), epsilon = 1e-14);
    }

    #[test]
    fn pendulum_augmented_geometry_matches_hand_matrices() {
        let p = crate::model::DoublePendulumParams { c: 0.0, k: 1.0, ..Default::default() };
        let sys = registry::double_pendulum(p).unwrap();
        let geo = SystemGeometry::build(&sys).unwrap();
        let g = geo.edge_geometry(0);

        let expected = Matrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 1.0, //
                0.0, 0.0, -1.0, 0.0, //
                0.0, 0.0, 0.0, 0.0,
            ],
        );
        assert_relative_eq!(g.a_bar, expected, epsilon = 1e-14);
        assert_eq!(g.rank, 3);
        assert_eq!(g.aux_dim(), 1);
        assert_relative_eq!(
            g.null_basis.column(0).into_owned(),
            Vector::from_vec(vec![0.0, 0.0, 0.0, 1.0]),
            epsilon = 1e-12
        );
        assert_eq!(g.a_tilde.shape(), (4, 5));
        assert_relative_eq!(
            g.a_tilde.column(4).into_owned(),
            Vector::from_vec(vec![0.0, 0.0, 0.0, 1.0]),
            epsilon = 1e-12
        );
        // Right inverse and annihilation residuals.
        assert!((&g.a_tilde * &g.a_tilde_pinv - Matrix::identity(4, 4)).amax() <= 1e-10);
        assert!((g.a_bar.transpose() * &g.null_basis).amax() <= 1e-9);
    }

    #[test]
    fn reversible_near_singular_is_rejected() {
        let mut sys = scaled_bimodal(constant_field(&[1.0, 0.0]), constant_field(&[1.0, 0.0]));
        // Collapse the reset onto the guard-parallel direction: Ā loses rank.
        sys.edges[0].reset_a = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            EdgeGeometry::build(&sys, 0),
            Err(HybridError::Geometry { .. })
        ));
    }

    #[test]
    fn transported_reset_formulas_agree() {
        // Matrix form Āx + b̄^ε versus definition R(P(x)) − w·g^ε(x).
        let mut rng = Rng::new(11);
        for sys in [
            registry::bouncing_ball(BouncingBallParams::default()).unwrap(),
            scaled_bimodal(constant_field(&[1.0, 0.0]), constant_field(&[1.0, 0.0])),
        ] {
            let geo = SystemGeometry::build(&sys).unwrap();
            for g in &geo.edges {
                let edge = &sys.edges[g.edge];
                for _ in 0..200 {
                    let x = rng.vector(2, -3.0, 3.0);
                    let eps = rng.uniform(0.0, 0.5);
                    let matrix_form = g.bar_reset(eps, &x);
                    let definition = edge.reset(&edge.project_to_plane(&x))
                        - &g.receiving_normal * edge.relaxed_guard_value(eps, &x);
                    assert!((matrix_form - definition).norm() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn transverse_alignment_holds_for_random_points() {
        let mut rng = Rng::new(5);
        let sys = scaled_bimodal(constant_field(&[1.0, 0.0]), constant_field(&[1.0, 0.0]));
        let ball = registry::bouncing_ball(BouncingBallParams::default()).unwrap();
        for (sys, eps) in [(&sys, 0.0), (&sys, 0.07), (&ball, 0.0), (&ball, 0.03)] {
            let geo = SystemGeometry::build(sys).unwrap();
            for g in &geo.edges {
                let edge = &sys.edges[g.edge];
                for _ in 0..1000 {
                    let x = rng.vector(2, -3.0, 3.0);
                    let image = g.bar_reset(eps, &x);
                    let resid = g.receiving_value(&image) + edge.relaxed_guard_value(eps, &x);
                    assert!(resid.abs() <= 1e-10, "alignment residual {resid}");
                }
            }
        }
    }

    #[test]
    fn relaxed_guard_maps_to_receiving_facet() {
        // g_e(x) = ε on the relaxed guard, so the image lies on the plane.
        let sys = registry::bouncing_ball(BouncingBallParams::default()).unwrap();
        let geo = SystemGeometry::build(&sys).unwrap();
        let g = geo.edge_geometry(0);
        let eps = 0.2;
        let x = Vector::from_vec(vec![-eps, -1.3]); // g = ε
        let image = g.bar_reset(eps, &x);
        assert_relative_eq!(g.receiving_value(&image), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn partner_round_trip_on_guard() {
        let sys = scaled_bimodal(constant_field(&[1.0, 0.0]), constant_field(&[1.0, 0.0]));
        let geo = SystemGeometry::build(&sys).unwrap();
        let (g0, g1) = (geo.edge_geometry(0), geo.edge_geometry(1));
        let mut rng = Rng::new(23);
        for _ in 0..200 {
            let x = Vector::from_vec(vec![1.0, rng.uniform(-1.0, 1.0)]); // on the guard plane
            let back = g1.bar_reset(0.0, &g0.bar_reset(0.0, &x));
            assert!((back - &x).norm() <= 1e-10);
        }
    }

    #[test]
    fn membership_regions_for_bouncing_ball() {
        let sys = registry::bouncing_ball(BouncingBallParams::default()).unwrap();
        let geo = SystemGeometry::build(&sys).unwrap();
        let eps = 0.1;

        assert_eq!(geo.membership(eps, 0, &Vector::from_vec(vec![1.0, 0.5])), Region::Interior);
        assert_eq!(geo.membership(eps, 0, &Vector::from_vec(vec![-0.05, -1.0])), Region::Strip(0));
        // R̄^ε(−0.5, −1) = (0.4, 0.5) lies in the domain, so the point is in
        // the projected region.
        let x = Vector::from_vec(vec![-0.5, -1.0]);
        assert_relative_eq!(
            geo.edge_geometry(0).bar_reset(eps, &x),
            Vector::from_vec(vec![0.4, 0.5]),
            epsilon = 1e-14
        );
        assert_eq!(geo.membership(eps, 0, &x), Region::Projected(0));
        // Far past everything.
        assert_eq!(geo.membership(eps, 0, &Vector::from_vec(vec![-5.0, 0.0])), Region::Outside);
        // Strip membership requires the plane projection to stay in the
        // guard facet: slide far along the velocity axis.
        assert_eq!(geo.membership(eps, 0, &Vector::from_vec(vec![-0.05, -7.0])), Region::Outside);
    }

    #[test]
    fn boundary_point_prefers_interior() {
        let sys = registry::bouncing_ball(BouncingBallParams::default()).unwrap();
        let geo = SystemGeometry::build(&sys).unwrap();
        assert_eq!(geo.membership(0.1, 0, &Vector::from_vec(vec![0.0, -1.0])), Region::Interior);
    }

    #[test]
    fn augmented_reset_zero_auxiliary_matches_bar_reset() {
        let p = crate::model::DoublePendulumParams { c: 0.0, ..Default::default() };
        let sys = registry::double_pendulum(p).unwrap();
        let geo = SystemGeometry::build(&sys).unwrap();
        let g = geo.edge_geometry(0);
        let eps = 1e-3;
        let x = Vector::from_vec(vec![0.3, -0.2, -eps, -0.4]);
        let z0 = Vector::zeros(1);
        assert_relative_eq!(g.tilde_reset(eps, &x, &z0).unwrap(), g.bar_reset(eps, &x), epsilon = 1e-15);

        // Auxiliary coordinate feeds the fourth state of the image.
        let zeta = 0.37;
        let img = g.tilde_reset(eps, &x, &Vector::from_vec(vec![zeta])).unwrap();
        assert_relative_eq!(img[3], zeta, epsilon = 1e-14);
        // On the relaxed guard the image lands exactly on the stop plane.
        assert_relative_eq!(img[2], 0.0, epsilon = 1e-14);

        // The reset's auxiliary output is always the zero vector.
        let (_, z_new) = geo.apply_reset(eps, 0, &x, &Vector::from_vec(vec![zeta])).unwrap();
        assert_eq!(z_new, Vector::zeros(1));

        // Dimension mismatch is rejected.
        assert!(g.tilde_reset(eps, &x, &Vector::zeros(2)).is_err());
    }

    #[test]
    fn z_bound_is_positive_and_grows_with_eps() {
        let p = crate::model::DoublePendulumParams { c: 0.0, ..Default::default() };
        let sys = registry::double_pendulum(p).unwrap();
        let geo = SystemGeometry::build(&sys).unwrap();
        let g = geo.edge_geometry(0);
        let m0 = g.z_bound(1e-6);
        assert!(m0 > 0.0);
        assert!(g.z_bound(0.5) >= m0);
    }
}
