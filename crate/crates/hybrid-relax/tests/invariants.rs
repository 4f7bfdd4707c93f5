//! Trajectory-level invariants: discrete-to-reference convergence at the
//! scheme's order, chart equivalence of partner edges at trajectory level,
//! and event consistency on the glued space.

use nalgebra::{DMatrix, DVector};

use hybrid_relax::analysis::{fit_loglog, interpret_chart_point, quotient_distance};
use hybrid_relax::execution::{
    flow_chart_discrete, simulate_augmented, simulate_relaxed_reference, Scheme,
};
use hybrid_relax::model::{Edge, HybridSystem, InputSignal, Mode, Polytope, VectorField};
use hybrid_relax::registry::{self, BouncingBallParams};
use hybrid_relax::relaxation::{RelaxationParams, RelaxedSystem};

type Vector = DVector<f64>;
type Matrix = DMatrix<f64>;

fn affine(f: Matrix, w: Vector) -> VectorField {
    let n = w.len();
    VectorField::Affine { f, g: Matrix::zeros(n, 0), w }
}

/// Two stacked boxes glued along x2 = 1; gentle rotation fields keep the
/// crossing transversal and the flow smooth.
fn crossing_system() -> HybridSystem {
    HybridSystem {
        modes: vec![
            Mode {
                id: 0,
                polytope: Polytope::boxed(&[(-2.0, 2.0), (0.0, 1.0)]),
                field: affine(
                    Matrix::from_row_slice(2, 2, &[0.0, 0.3, -0.3, 0.0]),
                    Vector::from_vec(vec![0.1, 0.8]),
                ),
            },
            Mode {
                id: 1,
                polytope: Polytope::boxed(&[(-2.0, 2.0), (1.0, 3.0)]),
                field: affine(
                    Matrix::from_row_slice(2, 2, &[0.0, -0.2, 0.2, 0.0]),
                    Vector::from_vec(vec![-0.1, 0.6]),
                ),
            },
        ],
        edges: vec![
            Edge {
                id: 0,
                source: 0,
                target: 1,
                guard_normal: Vector::from_vec(vec![0.0, 1.0]),
                guard_offset: 1.0,
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
                guard_normal: Vector::from_vec(vec![0.0, -1.0]),
                guard_offset: -1.0,
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

/// Sup over the discrete trajectory's sample times of the quotient distance
/// to the reference (the integrator-order definition compares at sample
/// times; the linear interpolant between samples is only second-order
/// accurate regardless of the scheme).
fn sup_error_at_sample_times(
    rs: &RelaxedSystem,
    discrete: &hybrid_relax::execution::Trajectory,
    reference: &hybrid_relax::execution::Trajectory,
) -> f64 {
    discrete
        .samples
        .iter()
        .map(|s| {
            let (mode_r, x_r) = reference.eval_chart(s.t);
            let a = interpret_chart_point(rs, s.mode, &s.x);
            let b = interpret_chart_point(rs, mode_r, &x_r);
            quotient_distance(rs, &a, &b)
        })
        .fold(0.0, f64::max)
}

#[test]
fn discrete_converges_to_reference_at_scheme_order() {
    // Euler across a transversal crossing: first order in the quotient
    // metric, with the reference execution at tol 1e-12 as the target.
    let sys = crossing_system();
    let eps = 1e-3;
    let rs = RelaxedSystem::new(&sys, RelaxationParams::new(eps)).unwrap();
    let x0 = Vector::from_vec(vec![0.2, 0.3]);
    let t_final = 1.6;
    let reference =
        simulate_relaxed_reference(&rs, &x0, 0, &InputSignal::none(), t_final, 1e-12).unwrap();
    assert_eq!(reference.events.len(), 1);

    let mut pts = Vec::new();
    for k in 2..=4 {
        let h = 10f64.powi(-k) * 1.6; // N = 10^k steps
        let traj = simulate_augmented(&rs, Scheme::Euler, h, &x0, 0, &InputSignal::none(), t_final)
            .unwrap();
        pts.push((h, sup_error_at_sample_times(&rs, &traj, &reference)));
    }
    let fit = fit_loglog(&pts).unwrap();
    assert!(
        (fit.slope - 1.0).abs() <= 0.2,
        "euler slope {} (points {pts:?})",
        fit.slope
    );

    // RK4 on a smooth no-guard arc versus a densely sampled reference flow.
    let omega: f64 = 3.0;
    let smooth = HybridSystem {
        modes: vec![Mode {
            id: 0,
            polytope: Polytope::boxed(&[(-4.0, 4.0), (-4.0 * omega, 4.0 * omega)]),
            field: affine(
                Matrix::from_row_slice(2, 2, &[0.0, 1.0, -omega * omega, 0.0]),
                Vector::zeros(2),
            ),
        }],
        edges: vec![],
        state_dim: 2,
        input_dim: 0,
        input_box: vec![],
    };
    let rs = RelaxedSystem::new(&smooth, RelaxationParams::new(1e-6)).unwrap();
    let x0 = Vector::from_vec(vec![1.0, 0.0]);
    // Dense reference grid: the comparison interpolates the reference at the
    // discrete sample times, so its own interpolation floor must sit well
    // below the finest RK4 truncation error.
    let reference = hybrid_relax::execution::flow_chart_reference(
        &rs,
        &x0,
        0,
        &InputSignal::none(),
        1.0,
        1e-12,
        Some(4e-5),
    )
    .unwrap();
    let mut pts = Vec::new();
    for h in [1e-1, 10f64.powf(-1.33), 10f64.powf(-1.66), 1e-2] {
        // Land exactly on the horizon.
        let n = (1.0 / h).round();
        let h = 1.0 / n;
        let traj =
            simulate_augmented(&rs, Scheme::Rk4, h, &x0, 0, &InputSignal::none(), 1.0).unwrap();
        pts.push((h, sup_error_at_sample_times(&rs, &traj, &reference)));
    }
    let fit = fit_loglog(&pts).unwrap();
    assert!((fit.slope - 4.0).abs() <= 0.3, "rk4 slope {} (points {pts:?})", fit.slope);
}

#[test]
fn partner_charts_agree_at_trajectory_level() {
    // Fixed-step chart flows commute exactly with the affine chart map, so
    // simulating a strip passage on either side of a reversible edge gives
    // the same curve on the glued space (up to rounding).
    let sys = crossing_system();
    let eps = 0.05;
    let rs = RelaxedSystem::new(&sys, RelaxationParams::new(eps)).unwrap();
    let g0 = rs.geo.edge_geometry(0);

    let x0 = Vector::from_vec(vec![0.1, 1.02]); // inside the strip of edge 0
    let y0 = g0.bar_reset(eps, &x0);
    let h = 1e-3;
    let t_final = 0.4;
    let a = flow_chart_discrete(&rs, Scheme::Rk4, h, &x0, 0, &InputSignal::none(), t_final).unwrap();
    let b = flow_chart_discrete(&rs, Scheme::Rk4, h, &y0, 1, &InputSignal::none(), t_final).unwrap();
    for (sa, sb) in a.samples.iter().zip(b.samples.iter()) {
        let mapped = g0.bar_reset(eps, &sa.x);
        assert!(
            (mapped - &sb.x).norm() <= 1e-10 * (1.0 + sb.x.norm()),
            "charts diverge at t = {}",
            sa.t
        );
    }
}

#[test]
fn events_are_continuous_on_the_glued_space() {
    // Reference execution: the pre-event state sits on the relaxed guard, so
    // its quotient distance to the post-event state is zero. Discrete
    // step-over events: the chart interpretation of the pre-state IS the
    // post-state.
    let sys = crossing_system();
    let eps = 1e-3;
    let rs = RelaxedSystem::new(&sys, RelaxationParams::new(eps)).unwrap();
    let x0 = Vector::from_vec(vec![0.2, 0.3]);

    let reference =
        simulate_relaxed_reference(&rs, &x0, 0, &InputSignal::none(), 1.6, 1e-12).unwrap();
    for ev in &reference.events {
        let d = quotient_distance(
            &rs,
            &hybrid_relax::analysis::HybridPoint { mode: ev.pre_mode, x: ev.pre.clone() },
            &hybrid_relax::analysis::HybridPoint { mode: ev.post_mode, x: ev.post.clone() },
        );
        assert!(d <= 1e-10, "event at t = {} has quotient gap {d}", ev.t);
    }

    let ball = registry::bouncing_ball(BouncingBallParams::default()).unwrap();
    let rs = RelaxedSystem::new(&ball, RelaxationParams::new(1e-4)).unwrap();
    let traj = simulate_augmented(
        &rs,
        Scheme::Euler,
        1e-3,
        &Vector::from_vec(vec![1.0, 0.0]),
        0,
        &InputSignal::none(),
        3.0,
    )
    .unwrap();
    assert!(!traj.events.is_empty());
    for ev in &traj.events {
        let interp = interpret_chart_point(&rs, ev.pre_mode, &ev.pre);
        assert_eq!(interp.mode, ev.post_mode);
        assert!((interp.x - &ev.post).norm() <= 1e-10);
    }
}

#[test]
fn sweep_vs_filippov_reference_rate() {
    // Transversal crossing against the event-driven Filippov reference:
    // first order in ε with the step size held small and fixed.
    let sys = crossing_system();
    let x0 = Vector::from_vec(vec![0.2, 0.3]);
    let cfg = hybrid_relax::analysis::SweepConfig {
        system: &sys,
        scheme: Scheme::Euler,
        x0,
        j0: 0,
        input: InputSignal::none(),
        t_final: 1.6,
    };
    let grid = [(2e-5, 1e-2), (2e-5, 1e-3), (2e-5, 1e-4)];
    let result = hybrid_relax::analysis::convergence_sweep(
        &cfg,
        &grid,
        hybrid_relax::analysis::SweepErrorKind::VsFilippov { tol: 1e-12 },
        hybrid_relax::analysis::SweepAxis::Epsilon,
    )
    .unwrap();
    assert!(
        (0.8..=1.2).contains(&result.fit.slope),
        "slope {} rows {:?}",
        result.fit.slope,
        result.rows.iter().map(|r| (r.eps, r.error)).collect::<Vec<_>>()
    );
}

#[test]
fn sweep_self_reference_excludes_finest_row() {
    let sys = crossing_system();
    let x0 = Vector::from_vec(vec![0.2, 0.3]);
    let cfg = hybrid_relax::analysis::SweepConfig {
        system: &sys,
        scheme: Scheme::Euler,
        x0,
        j0: 0,
        input: InputSignal::none(),
        t_final: 1.6,
    };
    let eps = 1e-3;
    let grid = [(1.6e-2, eps), (8e-3, eps), (4e-3, eps), (2e-3, eps), (1e-3, eps)];
    let result = hybrid_relax::analysis::convergence_sweep(
        &cfg,
        &grid,
        hybrid_relax::analysis::SweepErrorKind::VsFinest,
        hybrid_relax::analysis::SweepAxis::StepSize,
    )
    .unwrap();
    // The finest row carries no information and is excluded from the fit;
    // errors against the (unconverged) self-reference still shrink with h.
    assert!(result.rows.last().unwrap().error.is_nan());
    let errs: Vec<f64> = result.rows.iter().take(4).map(|r| r.error).collect();
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "errors {errs:?}");
    assert!(result.fit.slope > 0.5 && result.fit.slope.is_finite(), "slope {}", result.fit.slope);
}

#[test]
fn plastic_stop_captures_into_strip() {
    // With zero restitution the reset lands the link on the stop at rest in
    // the transverse direction: the locked mode is a clean in-strip
    // residence well past the 0.05 s scale.
    let p = hybrid_relax::model::DoublePendulumParams { c: 0.0, ..Default::default() };
    let sys = registry::double_pendulum(p).unwrap();
    let deg = std::f64::consts::PI / 180.0;
    let x0 = Vector::from_vec(vec![25.0 * deg, 0.0, 35.0 * deg, 0.0]);
    let eps = 1e-5;
    let rs = RelaxedSystem::new(&sys, RelaxationParams::new(eps)).unwrap();
    let traj =
        simulate_augmented(&rs, Scheme::Rk4, 1e-4, &x0, 0, &InputSignal::none(), 4.0).unwrap();

    let mut best = 0.0f64;
    let mut current: Option<f64> = None;
    for s in &traj.samples {
        use hybrid_relax::execution::SampleRegion;
        match (s.region, current) {
            (SampleRegion::Strip(_), None) => current = Some(s.t),
            (SampleRegion::Interior, Some(t0)) => {
                best = best.max(s.t - t0);
                current = None;
            }
            _ => {}
        }
    }
    if let Some(t0) = current {
        best = best.max(traj.end_time() - t0);
    }
    assert!(best > 0.05, "longest in-strip residence {best} s");
    // Inside the residence the stop coordinate stays within the strip.
    for s in &traj.samples {
        if matches!(s.region, hybrid_relax::execution::SampleRegion::Strip(_)) {
            assert!(s.x[2] <= 1e-9 && s.x[2] >= -eps - 1e-9);
        }
    }
}

#[test]
fn input_is_frozen_at_interval_starts() {
    // One Euler step spans an input breakpoint: the whole step must use the
    // value sampled at the interval start.
    let sys = HybridSystem {
        modes: vec![Mode {
            id: 0,
            polytope: Polytope::boxed(&[(-4.0, 4.0)]),
            field: VectorField::Affine {
                f: Matrix::zeros(1, 1),
                g: Matrix::from_row_slice(1, 1, &[1.0]),
                w: Vector::zeros(1),
            },
        }],
        edges: vec![],
        state_dim: 1,
        input_dim: 1,
        input_box: vec![(-2.0, 2.0)],
    };
    let rs = RelaxedSystem::new(&sys, RelaxationParams::new(0.01)).unwrap();
    let input = InputSignal::piecewise(
        vec![0.0, 0.05],
        vec![Vector::from_vec(vec![1.0]), Vector::from_vec(vec![-1.0])],
    )
    .unwrap();
    let traj = simulate_augmented(
        &rs,
        Scheme::Euler,
        0.1,
        &Vector::from_vec(vec![0.0]),
        0,
        &input,
        0.2,
    )
    .unwrap();
    // Step 1 uses u(0) = 1 for the full interval; step 2 uses u(0.1) = −1.
    assert!((traj.samples[1].x[0] - 0.1).abs() <= 1e-15);
    assert!((traj.samples[2].x[0] - 0.0).abs() <= 1e-15);

    // Out-of-box inputs are rejected up front.
    let bad = InputSignal::constant(Vector::from_vec(vec![5.0]));
    assert!(simulate_augmented(&rs, Scheme::Euler, 0.1, &Vector::zeros(1), 0, &bad, 0.2).is_err());
}

#[test]
fn hop_solver_matches_brute_force_oracle() {
    // Independent oracle for the one-hop quotient distance in 2D: dense scan
    // of the relaxed guard segment plus golden-section refinement of
    //   F(w) = |p − w| + |R̄^ε(w) − q|.
    let ball = registry::bouncing_ball(BouncingBallParams::default()).unwrap();
    let eps = 0.08;
    let rs = RelaxedSystem::new(&ball, RelaxationParams::new(eps)).unwrap();
    let geo = rs.geo.edge_geometry(0);

    // Guard facet {0}×[−3,3] lifted onto the relaxed guard plane x1 = −ε.
    let v_max = 3.0;
    let cost = |s: f64, p: &Vector, q: &Vector| -> f64 {
        let w = Vector::from_vec(vec![-eps, s]);
        (p - &w).norm() + (geo.bar_reset(eps, &w) - q).norm()
    };
    let brute = |p: &Vector, q: &Vector| -> f64 {
        let mut best = f64::INFINITY;
        let mut s_best = 0.0;
        let n = 4000;
        for i in 0..=n {
            let s = -v_max + 2.0 * v_max * i as f64 / n as f64;
            let c = cost(s, p, q);
            if c < best {
                best = c;
                s_best = s;
            }
        }
        // Golden-section polish around the grid minimum.
        let (mut lo, mut hi) = ((s_best - 2.0e-3).max(-v_max), (s_best + 2.0e-3).min(v_max));
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..200 {
            let m1 = hi - phi * (hi - lo);
            let m2 = lo + phi * (hi - lo);
            if cost(m1, p, q) < cost(m2, p, q) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        cost(0.5 * (lo + hi), p, q)
    };

    let mut state = 12345u64;
    let mut rnd = |lo: f64, hi: f64| {
        state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        let u = ((z ^ (z >> 31)) >> 11) as f64 / (1u64 << 53) as f64;
        lo + u * (hi - lo)
    };
    let mut checked = 0;
    for _ in 0..400 {
        let p = hybrid_relax::analysis::HybridPoint {
            mode: 0,
            x: Vector::from_vec(vec![rnd(-eps, 2.0), rnd(-3.0, 3.0)]),
        };
        let q = hybrid_relax::analysis::HybridPoint {
            mode: 0,
            x: Vector::from_vec(vec![rnd(-eps, 2.0), rnd(-3.0, 3.0)]),
        };
        let expected = brute(&p.x, &q.x)
            .min(brute(&q.x, &p.x))
            .min((&p.x - &q.x).norm());
        let got = quotient_distance(&rs, &p, &q);
        assert!(
            (got - expected).abs() <= 1e-7 * (1.0 + expected),
            "hop solver {got} vs oracle {expected} for p={:?} q={:?}",
            p.x.as_slice(),
            q.x.as_slice()
        );
        checked += 1;
    }
    assert_eq!(checked, 400);
}
