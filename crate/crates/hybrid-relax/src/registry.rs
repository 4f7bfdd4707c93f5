//! Built-in example systems.
//!
//! Both are unimodal with a single non-reversible self-edge. The bouncing
//! ball Zeno-accumulates at the origin; the double pendulum with a mechanical
//! stop hides a Zeno "locked" mode on the stop plane.

use crate::model::{
    validate_system, DoublePendulumParams, Edge, HybridSystem, Mode, Polytope, VectorField,
};
use crate::{HybridError, Matrix, Result, Vector};

/// Bouncing ball: state (height, vertical velocity), impacts at height 0
/// reset the velocity to −c·x2.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BouncingBallParams {
    pub g: f64,
    /// Coefficient of restitution in [0, 1].
    pub c: f64,
    /// Domain bounds, chosen generously beyond the reference trajectories.
    pub x1_max: f64,
    pub v_max: f64,
}

impl Default for BouncingBallParams {
    fn default() -> Self {
        Self { g: 1.0, c: 0.5, x1_max: 2.0, v_max: 3.0 }
    }
}

pub fn bouncing_ball(p: BouncingBallParams) -> Result<HybridSystem> {
    if !(0.0..=1.0).contains(&p.c) {
        return Err(HybridError::InvalidParameter(format!(
            "restitution c must lie in [0, 1], got {}",
            p.c
        )));
    }
    if p.g <= 0.0 || p.x1_max <= 0.0 || p.v_max <= 0.0 {
        return Err(HybridError::InvalidParameter("g, x1_max, v_max must be positive".into()));
    }
    let field = VectorField::Affine {
        f: Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        g: Matrix::zeros(2, 0),
        w: Vector::from_vec(vec![0.0, -p.g]),
    };
    let ghat = Vector::from_vec(vec![-1.0, 0.0]);
    let system = HybridSystem {
        modes: vec![Mode {
            id: 0,
            polytope: Polytope::boxed(&[(0.0, p.x1_max), (-p.v_max, p.v_max)]),
            field,
        }],
        edges: vec![Edge {
            id: 0,
            source: 0,
            target: 0,
            guard_normal: ghat.clone(),
            guard_offset: 0.0,
            reset_a: Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -p.c]),
            reset_b: Vector::zeros(2),
            partner: None,
            target_facet_normal: Some(ghat),
            target_facet_offset: Some(0.0),
        }],
        state_dim: 2,
        input_dim: 0,
        input_box: vec![],
    };
    finish(system)
}

/// Time of the ball's Zeno accumulation from initial height/velocity.
pub fn bouncing_ball_zeno_time(p: &BouncingBallParams, x0: &Vector) -> f64 {
    let v0 = x0[1];
    let speed = (v0 * v0 + 2.0 * p.g * x0[0]).sqrt();
    v0 / p.g + (1.0 / p.c + 1.0) * speed / (p.g * (1.0 / p.c - 1.0))
}

/// Double pendulum with a mechanical stop at θ2 = 0. State
/// (θ1, θ̇1, θ2, θ̇2) with θ2 the relative angle of the second link; the
/// domain keeps θ2 ∈ [0, π] and impacts reset
/// (θ̇1, θ̇2) → (θ̇1 + k(1+c)·θ̇2, −c·θ̇2).
pub fn double_pendulum(p: DoublePendulumParams) -> Result<HybridSystem> {
    if !(0.0..=1.0).contains(&p.c) {
        return Err(HybridError::InvalidParameter(format!(
            "restitution c must lie in [0, 1], got {}",
            p.c
        )));
    }
    if p.k <= 0.0 {
        return Err(HybridError::InvalidParameter(format!("k must be positive, got {}", p.k)));
    }
    if p.m1 <= 0.0 || p.m2 <= 0.0 || p.l1 <= 0.0 || p.l2 <= 0.0 || p.g <= 0.0 {
        return Err(HybridError::InvalidParameter("masses, lengths and g must be positive".into()));
    }
    const W_MAX: f64 = 20.0;
    let ghat = Vector::from_vec(vec![0.0, 0.0, -1.0, 0.0]);
    let reset_a = Matrix::from_row_slice(
        4,
        4,
        &[
            1.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, p.k * (1.0 + p.c), //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, -p.c,
        ],
    );
    let system = HybridSystem {
        modes: vec![Mode {
            id: 0,
            polytope: Polytope::boxed(&[
                (-std::f64::consts::PI, std::f64::consts::PI),
                (-W_MAX, W_MAX),
                (0.0, std::f64::consts::PI),
                (-W_MAX, W_MAX),
            ]),
            field: VectorField::DoublePendulum(p),
        }],
        edges: vec![Edge {
            id: 0,
            source: 0,
            target: 0,
            guard_normal: ghat.clone(),
            guard_offset: 0.0,
            reset_a,
            reset_b: Vector::zeros(4),
            partner: None,
            target_facet_normal: Some(ghat),
            target_facet_offset: Some(0.0),
        }],
        state_dim: 4,
        input_dim: 0,
        input_box: vec![],
    };
    finish(system)
}

fn finish(system: HybridSystem) -> Result<HybridSystem> {
    let report = validate_system(&system);
    if report.is_valid() {
        Ok(system)
    } else {
        Err(HybridError::InvalidSystem(report))
    }
}

/// Look up an example system by name with default parameters.
pub fn registry_system(name: &str) -> Result<HybridSystem> {
    match name {
        "bouncing-ball" => bouncing_ball(BouncingBallParams::default()),
        "double-pendulum" => double_pendulum(DoublePendulumParams::default()),
        other => Err(HybridError::InvalidParameter(format!(
            "unknown example system '{other}' (known: bouncing-ball, double-pendulum)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn registry_systems_validate_clean() {
        for name in ["bouncing-ball", "double-pendulum"] {
            let sys = registry_system(name).unwrap();
            assert!(validate_system(&sys).is_valid());
        }
        assert!(registry_system("pogo-stick").is_err());
    }

    #[test]
    fn ball_reset_flips_and_scales_velocity() {
        let sys = bouncing_ball(BouncingBallParams::default()).unwrap();
        let img = sys.edges[0].reset(&Vector::from_vec(vec![0.0, -2.0]));
        assert_relative_eq!(img, Vector::from_vec(vec![0.0, 1.0]));
    }

    #[test]
    fn pendulum_reset_transfers_momentum() {
        let p = DoublePendulumParams { c: 0.5, k: 1.0, ..Default::default() };
        let sys = double_pendulum(p).unwrap();
        // velocities (1, −2) → (1 + 1·1.5·(−2), −0.5·(−2)) = (−2, 1)
        let img = sys.edges[0].reset(&Vector::from_vec(vec![0.2, 1.0, 0.0, -2.0]));
        assert_relative_eq!(img[1], -2.0);
        assert_relative_eq!(img[3], 1.0);
    }

    #[test]
    fn zeno_time_formula() {
        let p = BouncingBallParams::default();
        let t_inf = bouncing_ball_zeno_time(&p, &Vector::from_vec(vec![1.0, 0.0]));
        assert_relative_eq!(t_inf, 3.0 * 2.0f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn parameter_validation() {
        assert!(bouncing_ball(BouncingBallParams { c: 1.5, ..Default::default() }).is_err());
        let bad = DoublePendulumParams { c: -0.1, ..Default::default() };
        assert!(double_pendulum(bad).is_err());
        let bad_k = DoublePendulumParams { k: 0.0, ..Default::default() };
        assert!(double_pendulum(bad_k).is_err());
    }
}
