//! Trajectory constructors.
//!
//! * [`simulate_discrete`] — the fixed-step approximation. One integrator
//!   step per interval; if the step lands past a strip in some pulled-back
//!   target domain, the transported relaxed reset is applied and the mode
//!   switches ("stepping over the strip"): no step-size modulation around
//!   transitions.
//! * [`simulate_relaxed_reference`] — high-accuracy adaptive realization of
//!   the relaxed execution, with relaxed-guard crossings localized by
//!   bisection and resets applied exactly on the relaxed guard.
//! * [`simulate_filippov`] — event-driven reference on the unrelaxed switched
//!   system: flow to the guard, classify, cross or slide; errors where the
//!   Filippov solution concept is undefined.
//! * [`simulate_augmented`] / [`simulate_augmented_reference`] — the same
//!   constructions over the augmented state `(x, z)` for systems with
//!   rank-deficient edges.
//! * [`flow_chart_discrete`] / [`flow_chart_reference`] — chart flows that
//!   never reset: the auxiliary curve living on one extended domain, used by
//!   convergence comparisons and sensitivity analysis.

use std::io::Write;

use crate::geometry::{Region, SystemGeometry};
use crate::model::{HybridSystem, InputSignal, GEOM_TOL};
use crate::relaxation::{augmented_mode_field, RelaxedSystem};
use crate::{HybridError, Result, Vector};

/// Fixed-step one-step maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    Rk4,
}

impl Scheme {
    /// Classical convergence order ω.
    pub fn order(self) -> usize {
        match self {
            Scheme::Euler => 1,
            Scheme::Rk4 => 4,
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scheme::Euler => write!(f, "euler"),
            Scheme::Rk4 => write!(f, "rk4"),
        }
    }
}

/// One step of the scheme for `ẋ = f(x)` with the input frozen inside the
/// step (the caller bakes `u` into the closure).
pub fn step_with<F>(scheme: Scheme, f: &F, x: &Vector, h: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> Result<Vector>,
{
    let next = match scheme {
        Scheme::Euler => x + f(x)? * h,
        Scheme::Rk4 => {
            let k1 = f(x)?;
            let k2 = f(&(x + &k1 * (h / 2.0)))?;
            let k3 = f(&(x + &k2 * (h / 2.0)))?;
            let k4 = f(&(x + &k3 * h))?;
            x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
        }
    };
    if next.iter().any(|c| !c.is_finite()) {
        return Err(HybridError::NonFinite { t: f64::NAN, context: "integrator step".into() });
    }
    Ok(next)
}

/// One step of `ẋ = f_j^ε(x, u)` in mode `j` (augmented chart state).
pub fn step_mode(rs: &RelaxedSystem, scheme: Scheme, j: usize, x: &Vector, u: &Vector, h: f64) -> Result<Vector> {
    step_with(scheme, &|y: &Vector| augmented_mode_field(rs, j, y, u), x, h)
}

/// Region tag recorded with each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleRegion {
    Interior,
    Strip(usize),
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub t: f64,
    pub mode: usize,
    /// Chart state; auxiliary coordinates, when present, are appended after
    /// the first `state_dim` entries.
    pub x: Vector,
    pub region: SampleRegion,
}

/// A discrete transition: the pre-state is the raw chart point that
/// triggered the reset, the post-state is its reset image.
#[derive(Debug, Clone)]
pub struct Event {
    pub t: f64,
    pub edge: usize,
    pub pre_mode: usize,
    pub pre: Vector,
    pub post_mode: usize,
    pub post: Vector,
    /// Index of the post-state sample in `Trajectory::samples`.
    pub(crate) post_sample: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Termination {
    HorizonReached,
    /// Left the extended domain other than through a relaxed guard.
    LeftDomain(f64),
    /// Auxiliary state exceeded its compactness bound.
    ZBoundExceeded(f64),
}

/// Time-stamped hybrid arc.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub events: Vec<Event>,
    pub termination: Termination,
    pub state_dim: usize,
}

impl Trajectory {
    pub fn start_time(&self) -> f64 {
        self.samples.first().map_or(0.0, |s| s.t)
    }

    pub fn end_time(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.t)
    }

    pub fn final_sample(&self) -> &Sample {
        self.samples.last().expect("trajectory has at least the initial sample")
    }

    /// Chart value at time `t` by linear interpolation within same-mode runs.
    /// Across an event the pre-event chart (stored in the event) extends the
    /// old mode's segment up to the event time.
    pub fn eval_chart(&self, t: f64) -> (usize, Vector) {
        let samples = &self.samples;
        if t <= samples[0].t {
            return (samples[0].mode, samples[0].x.clone());
        }
        let last = samples.len() - 1;
        if t >= samples[last].t {
            return (samples[last].mode, samples[last].x.clone());
        }
        // First sample with time > t.
        let hi = samples.partition_point(|s| s.t <= t);
        let (a, b) = (&samples[hi - 1], &samples[hi]);
        let span = b.t - a.t;
        if span <= 0.0 {
            return (b.mode, b.x.clone());
        }
        let w = (t - a.t) / span;
        if a.mode == b.mode && a.x.len() == b.x.len() {
            return (a.mode, &a.x * (1.0 - w) + &b.x * w);
        }
        // Mode change at b: interpolate toward the pre-event chart point.
        if let Some(ev) = self.events.iter().find(|e| e.post_sample == hi) {
            return (a.mode, &a.x * (1.0 - w) + &ev.pre * w);
        }
        (a.mode, a.x.clone())
    }
}

const EVENT_BUDGET: usize = 1_000_000;
/// Relative guard-residual target of event localization.
const LOC_TOL: f64 = 1e-12;
const MAX_BISECT: usize = 200;

fn check_horizon(h: f64, t_final: f64) -> Result<usize> {
    if !h.is_finite() || h <= 0.0 || !t_final.is_finite() || t_final <= 0.0 {
        return Err(HybridError::InvalidParameter("step size and horizon must be positive".into()));
    }
    let n = (t_final / h).round();
    if n < 1.0 || (n * h - t_final).abs() > 1e-9 * t_final.max(1.0) {
        return Err(HybridError::InvalidParameter(format!(
            "horizon {t_final} is not an integer multiple of the step size {h}"
        )));
    }
    Ok(n as usize)
}

fn pad_chart(rs: &RelaxedSystem, j: usize, x0: &Vector) -> Result<Vector> {
    let n = rs.system().state_dim;
    let dim = rs.chart_dim(j);
    if x0.len() == dim {
        return Ok(x0.clone());
    }
    if x0.len() == n {
        let mut out = Vector::zeros(dim);
        out.rows_mut(0, n).copy_from(x0);
        return Ok(out);
    }
    Err(HybridError::Dimension { context: "initial state", expected: dim, got: x0.len() })
}

fn split_chart(rs: &RelaxedSystem, state: &Vector) -> (Vector, Vector) {
    let n = rs.system().state_dim;
    (state.rows(0, n).into_owned(), state.rows(n, state.len() - n).into_owned())
}

fn sample_region(rs: &RelaxedSystem, j: usize, x: &Vector, z: &Vector) -> SampleRegion {
    match rs.geo.membership_aug(rs.eps(), j, x, Some(z)) {
        Region::Strip(e) => SampleRegion::Strip(e),
        _ => SampleRegion::Interior,
    }
}

struct DiscreteConfig {
    scheme: Scheme,
    h: f64,
    apply_resets: bool,
}

fn check_input(system: &HybridSystem, input: &InputSignal) -> Result<()> {
    if input.within_box(system) {
        Ok(())
    } else {
        Err(HybridError::InvalidParameter("input signal leaves the input box".into()))
    }
}

fn run_discrete(
    rs: &RelaxedSystem,
    cfg: DiscreteConfig,
    j0: usize,
    chart0: Vector,
    input: &InputSignal,
    t_final: f64,
) -> Result<Trajectory> {
    let n_steps = check_horizon(cfg.h, t_final)?;
    check_input(rs.system(), input)?;
    let nn = rs.system().state_dim;
    let mut j = j0;
    let mut state = chart0;
    let (x0, z0) = split_chart(rs, &state);
    if rs.geo.membership_aug(rs.eps(), j, &x0, Some(&z0)) == Region::Outside {
        return Err(HybridError::OutsideDomain { mode: j, t: 0.0 });
    }

    let mut traj = Trajectory {
        samples: vec![Sample { t: 0.0, mode: j, x: state.clone(), region: sample_region(rs, j, &x0, &z0) }],
        events: Vec::new(),
        termination: Termination::HorizonReached,
        state_dim: nn,
    };

    for k in 0..n_steps {
        let t = k as f64 * cfg.h;
        let t_next = (k + 1) as f64 * cfg.h;
        let u = input.eval(t).clone();
        // The lenient field keeps RK4 trial stages evaluable just past the
        // domain family; the post-step membership handles genuine exits.
        let gamma = step_with(cfg.scheme, &|y: &Vector| chart_field_lenient(rs, j, y, &u), &state, cfg.h)
            .map_err(|e| at_time(e, t))?;
        let (gx, gz) = split_chart(rs, &gamma);

        // Auxiliary-state compactness bound.
        if let Some(aux_edge) = rs.geo.mode_aux_edge(j) {
            let bound = rs.geo.edge_geometry(aux_edge).z_bound(rs.eps());
            if gz.amax() > bound {
                traj.samples.push(Sample { t: t_next, mode: j, x: gamma, region: SampleRegion::Interior });
                traj.termination = Termination::ZBoundExceeded(t_next);
                return Ok(traj);
            }
        }

        match rs.geo.membership_aug(rs.eps(), j, &gx, Some(&gz)) {
            Region::Outside => {
                // Truncate at the last in-domain point of the interpolated
                // step segment.
                let (mut lo, mut hi) = (0.0f64, 1.0f64);
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    let xm = &state * (1.0 - mid) + &gamma * mid;
                    let (xmx, xmz) = split_chart(rs, &xm);
                    if rs.geo.membership_aug(rs.eps(), j, &xmx, Some(&xmz)) == Region::Outside {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                let t_exit = t + lo * cfg.h;
                let x_exit = &state * (1.0 - lo) + &gamma * lo;
                let (xx, xz) = split_chart(rs, &x_exit);
                traj.samples.push(Sample {
                    t: t_exit,
                    mode: j,
                    region: sample_region(rs, j, &xx, &xz),
                    x: x_exit,
                });
                traj.termination = Termination::LeftDomain(t_exit);
                return Ok(traj);
            }
            Region::Projected(_) if cfg.apply_resets => {
                // Earliest linear-interpolation crossing wins; ties by edge id.
                let (sx, _) = split_chart(rs, &state);
                let candidates = rs.geo.projected_candidates(rs.eps(), j, &gx, Some(&gz));
                let mut best: Option<(f64, usize)> = None;
                for e in candidates {
                    let edge = &rs.system().edges[e];
                    let g_prev = edge.relaxed_guard_value(rs.eps(), &sx);
                    let g_new = edge.relaxed_guard_value(rs.eps(), &gx);
                    let s = if g_new > g_prev { (-g_prev / (g_new - g_prev)).clamp(0.0, 1.0) } else { 1.0 };
                    if best.is_none_or(|(bs, be)| s < bs - 1e-15 || (s <= bs + 1e-15 && e < be)) {
                        best = Some((s, e));
                    }
                }
                let (_, e) = best.expect("projected region implies at least one candidate");
                let (post_x, post_z) = rs.geo.apply_reset(rs.eps(), e, &gx, &gz)?;
                let target = rs.geo.edge_geometry(e).target;
                match rs.geo.membership_aug(rs.eps(), target, &post_x, Some(&post_z)) {
                    Region::Interior | Region::Strip(_) => {}
                    _ => return Err(HybridError::ResetConsistency { t: t_next, edge: e }),
                }
                let mut post = Vector::zeros(nn + post_z.len());
                post.rows_mut(0, nn).copy_from(&post_x);
                post.rows_mut(nn, post_z.len()).copy_from(&post_z);
                traj.events.push(Event {
                    t: t_next,
                    edge: e,
                    pre_mode: j,
                    pre: gamma,
                    post_mode: target,
                    post: post.clone(),
                    post_sample: traj.samples.len(),
                });
                if traj.events.len() > EVENT_BUDGET {
                    return Err(HybridError::EventBudget { t: t_next, budget: EVENT_BUDGET });
                }
                j = target;
                traj.samples.push(Sample {
                    t: t_next,
                    mode: j,
                    region: sample_region(rs, j, &post_x, &post_z),
                    x: post.clone(),
                });
                state = post;
            }
            region => {
                let tag = match region {
                    Region::Strip(e) => SampleRegion::Strip(e),
                    _ => SampleRegion::Interior,
                };
                traj.samples.push(Sample { t: t_next, mode: j, x: gamma.clone(), region: tag });
                state = gamma;
            }
        }
    }
    Ok(traj)
}

fn at_time(e: HybridError, t: f64) -> HybridError {
    match e {
        HybridError::NonFinite { context, .. } => HybridError::NonFinite { t, context },
        HybridError::OutsideDomain { mode, .. } => HybridError::OutsideDomain { mode, t },
        other => other,
    }
}

/// Fixed-step discrete approximation for systems whose edges all have
/// full-rank transition matrices. `t_final` must be an integer multiple of
/// `h`; the input is sampled at interval starts.
pub fn simulate_discrete(
    rs: &RelaxedSystem,
    scheme: Scheme,
    h: f64,
    x0: &Vector,
    j0: usize,
    input: &InputSignal,
    t_final: f64,
) -> Result<Trajectory> {
    if let Some(g) = rs.geo.edges.iter().find(|g| !g.is_full_rank()) {
        return Err(HybridError::RankDeficient { edge: g.edge });
    }
    let chart0 = pad_chart(rs, j0, x0)?;
    run_discrete(rs, DiscreteConfig { scheme, h, apply_resets: true }, j0, chart0, input, t_final)
}

/// Fixed-step discrete approximation over the augmented state `(x, z)`;
/// `z` starts at zero and is zeroed again at every transition.
pub fn simulate_augmented(
    rs: &RelaxedSystem,
    scheme: Scheme,
    h: f64,
    x0: &Vector,
    j0: usize,
    input: &InputSignal,
    t_final: f64,
) -> Result<Trajectory> {
    let chart0 = pad_chart(rs, j0, x0)?;
    run_discrete(rs, DiscreteConfig { scheme, h, apply_resets: true }, j0, chart0, input, t_final)
}

/// Fixed-step chart flow without resets: the auxiliary curve on one extended
/// domain. Used as the nominal for sensitivity analysis.
pub fn flow_chart_discrete(
    rs: &RelaxedSystem,
    scheme: Scheme,
    h: f64,
    chart0: &Vector,
    j: usize,
    input: &InputSignal,
    t_final: f64,
) -> Result<Trajectory> {
    let chart0 = pad_chart(rs, j, chart0)?;
    run_discrete(rs, DiscreteConfig { scheme, h, apply_resets: false }, j, chart0, input, t_final)
}

// ---------------------------------------------------------------------------
// Adaptive reference integration (embedded RKF45 with event localization)
// ---------------------------------------------------------------------------

/// One 4(5) Fehlberg step: returns the 5th-order advance and the embedded
/// error estimate.
fn rkf45_step<F>(f: &F, x: &Vector, h: f64) -> Result<(Vector, f64)>
where
    F: Fn(&Vector) -> Result<Vector>,
{
    let k1 = f(x)?;
    let k2 = f(&(x + &k1 * (h * 0.25)))?;
    let k3 = f(&(x + (&k1 * (3.0 / 32.0) + &k2 * (9.0 / 32.0)) * h))?;
    let k4 = f(&(x
        + (&k1 * (1932.0 / 2197.0) - &k2 * (7200.0 / 2197.0) + &k3 * (7296.0 / 2197.0)) * h))?;
    let k5 = f(&(x
        + (&k1 * (439.0 / 216.0) - &k2 * 8.0 + &k3 * (3680.0 / 513.0) - &k4 * (845.0 / 4104.0))
            * h))?;
    let k6 = f(&(x
        + (-&k1 * (8.0 / 27.0) + &k2 * 2.0 - &k3 * (3544.0 / 2565.0) + &k4 * (1859.0 / 4104.0)
            - &k5 * (11.0 / 40.0))
            * h))?;
    let x5 = x
        + (&k1 * (16.0 / 135.0) + &k3 * (6656.0 / 12825.0) + &k4 * (28561.0 / 56430.0)
            - &k5 * (9.0 / 50.0)
            + &k6 * (2.0 / 55.0))
            * h;
    let x4 = x
        + (&k1 * (25.0 / 216.0) + &k3 * (1408.0 / 2565.0) + &k4 * (2197.0 / 4104.0) - &k5 * 0.2) * h;
    if x5.iter().any(|c| !c.is_finite()) {
        return Err(HybridError::NonFinite { t: f64::NAN, context: "adaptive step".into() });
    }
    Ok((x5.clone(), (x5 - x4).norm()))
}

/// Total field for integration trial stages: membership dispatch with a
/// smooth fallback outside the extended domain (the accepted trajectory never
/// lives there; exits are localized and handled by the caller).
fn chart_field_lenient(rs: &RelaxedSystem, j: usize, state: &Vector, u: &Vector) -> Result<Vector> {
    match augmented_mode_field(rs, j, state, u) {
        Err(HybridError::OutsideDomain { .. }) => {
            let (x, z) = split_chart(rs, state);
            let best = rs
                .system()
                .neighborhood(j)
                .map(|e| (e.id, e.guard_value(&x)))
                .filter(|&(_, g)| g > 0.0)
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
            match best {
                Some((e, _)) if Some(e) == rs.geo.mode_aux_edge(j) => {
                    crate::relaxation::augmented_edge_field(rs, e, &x, &z, u)
                }
                Some((e, _)) if rs.geo.edge_geometry(e).is_full_rank() => {
                    let fe = crate::relaxation::relaxed_edge_field(rs, e, &x, u)?;
                    let mut out = Vector::zeros(state.len());
                    out.rows_mut(0, x.len()).copy_from(&fe);
                    Ok(out)
                }
                _ => {
                    let mut out = Vector::zeros(state.len());
                    out.rows_mut(0, x.len()).copy_from(&rs.system().eval_field(j, &x, u)?);
                    Ok(out)
                }
            }
        }
        other => other,
    }
}

struct ReferenceConfig {
    tol: f64,
    apply_resets: bool,
    max_step: f64,
}

fn run_reference(
    rs: &RelaxedSystem,
    cfg: ReferenceConfig,
    j0: usize,
    chart0: Vector,
    input: &InputSignal,
    t_final: f64,
) -> Result<Trajectory> {
    check_input(rs.system(), input)?;
    let nn = rs.system().state_dim;
    let eps = rs.eps();
    let mut j = j0;
    let mut state = chart0;
    let mut t = 0.0f64;
    let (x0, z0) = split_chart(rs, &state);
    if rs.geo.membership_aug(eps, j, &x0, Some(&z0)) == Region::Outside {
        return Err(HybridError::OutsideDomain { mode: j, t: 0.0 });
    }
    let mut traj = Trajectory {
        samples: vec![Sample { t, mode: j, x: state.clone(), region: sample_region(rs, j, &x0, &z0) }],
        events: Vec::new(),
        termination: Termination::HorizonReached,
        state_dim: nn,
    };

    let h_floor = 1e-14 * t_final.max(1.0);
    let mut h = (cfg.max_step / 8.0).min(t_final / 16.0).max(h_floor);
    let mut stalls = 0usize;

    while t < t_final - 1e-14 * t_final.max(1.0) {
        // Keep steps inside one piecewise-constant input segment.
        let seg_end = input
            .breakpoints()
            .iter()
            .copied()
            .find(|&b| b > t + 1e-15)
            .map_or(t_final, |b| b.min(t_final));
        h = h.min(cfg.max_step).min(seg_end - t).max(h_floor);
        let u = input.eval(t).clone();
        let field = |y: &Vector| chart_field_lenient(rs, j, y, &u);

        let (x_new, err) = match rkf45_step(&field, &state, h) {
            Ok(v) => v,
            Err(_) if h > 16.0 * h_floor => {
                h *= 0.25;
                continue;
            }
            Err(e) => return Err(at_time(e, t)),
        };
        let scale = cfg.tol * (1.0 + state.norm());
        if err > scale && h > 16.0 * h_floor {
            h *= 0.9 * (scale / err).powf(0.2).clamp(0.2, 1.0);
            stalls += 1;
            if stalls > 10_000_000 {
                return Err(HybridError::NonFinite { t, context: "step control stalled".into() });
            }
            continue;
        }
        stalls = 0;

        let (nx, nz) = split_chart(rs, &x_new);

        // Relaxed-guard crossings (only when resets are applied).
        if cfg.apply_resets {
            let (sx, _) = split_chart(rs, &state);
            let mut best: Option<(f64, usize, Vector)> = None;
            for edge in rs.system().neighborhood(j) {
                let chi_old = edge.relaxed_guard_value(eps, &sx);
                let chi_new = edge.relaxed_guard_value(eps, &nx);
                if chi_old < 0.0 && chi_new >= 0.0 {
                    let (h_star, x_star) = localize(&field, &state, h, |y: &Vector| {
                        let (yx, _) = split_chart(rs, y);
                        edge.relaxed_guard_value(eps, &yx)
                    })?;
                    if best.as_ref().is_none_or(|(bh, be, _)| {
                        h_star < bh - 1e-15 || (h_star <= bh + 1e-15 && edge.id < *be)
                    }) {
                        best = Some((h_star, edge.id, x_star));
                    }
                }
            }
            if let Some((h_star, e, x_star)) = best {
                let t_star = t + h_star;
                let (cx, cz) = split_chart(rs, &x_star);
                // Crossing outside the guard facet is a plain domain exit.
                let edge = &rs.system().edges[e];
                let on_facet = rs.system().modes[j]
                    .polytope
                    .contains(&edge.project_to_plane(&cx), GEOM_TOL);
                if !on_facet {
                    traj.samples.push(Sample {
                        t: t_star,
                        mode: j,
                        region: SampleRegion::Interior,
                        x: x_star,
                    });
                    traj.termination = Termination::LeftDomain(t_star);
                    return Ok(traj);
                }
                let (post_x, post_z) = rs.geo.apply_reset(eps, e, &cx, &cz)?;
                let target = rs.geo.edge_geometry(e).target;
                match rs.geo.membership_aug(eps, target, &post_x, Some(&post_z)) {
                    Region::Interior | Region::Strip(_) => {}
                    _ => return Err(HybridError::ResetConsistency { t: t_star, edge: e }),
                }
                let mut post = Vector::zeros(nn + post_z.len());
                post.rows_mut(0, nn).copy_from(&post_x);
                post.rows_mut(nn, post_z.len()).copy_from(&post_z);
                traj.events.push(Event {
                    t: t_star,
                    edge: e,
                    pre_mode: j,
                    pre: x_star,
                    post_mode: target,
                    post: post.clone(),
                    post_sample: traj.samples.len(),
                });
                if traj.events.len() > EVENT_BUDGET {
                    return Err(HybridError::EventBudget { t: t_star, budget: EVENT_BUDGET });
                }
                j = target;
                traj.samples.push(Sample {
                    t: t_star,
                    mode: j,
                    region: sample_region(rs, j, &post_x, &post_z),
                    x: post.clone(),
                });
                state = post;
                t = t_star;
                continue;
            }
        }

        // Auxiliary-state bound.
        if let Some(aux_edge) = rs.geo.mode_aux_edge(j) {
            let bound = rs.geo.edge_geometry(aux_edge).z_bound(eps);
            if nz.amax() > bound {
                traj.samples.push(Sample { t: t + h, mode: j, x: x_new, region: SampleRegion::Interior });
                traj.termination = Termination::ZBoundExceeded(t + h);
                return Ok(traj);
            }
        }

        // Exit through a non-guard boundary.
        if rs.geo.membership_aug(eps, j, &nx, Some(&nz)) == Region::Outside {
            let (h_star, x_star) = localize(&field, &state, h, |y: &Vector| {
                let (yx, yz) = split_chart(rs, y);
                match rs.geo.membership_aug(eps, j, &yx, Some(&yz)) {
                    Region::Outside => 1.0,
                    _ => -1.0,
                }
            })?;
            let t_star = t + h_star;
            let (xx, xz) = split_chart(rs, &x_star);
            traj.samples.push(Sample {
                t: t_star,
                mode: j,
                region: sample_region(rs, j, &xx, &xz),
                x: x_star,
            });
            traj.termination = Termination::LeftDomain(t_star);
            return Ok(traj);
        }

        t += h;
        traj.samples.push(Sample {
            t,
            mode: j,
            region: match rs.geo.membership_aug(eps, j, &nx, Some(&nz)) {
                Region::Strip(e) => SampleRegion::Strip(e),
                _ => SampleRegion::Interior,
            },
            x: x_new.clone(),
        });
        state = x_new;
        if err > 0.0 {
            h = (h * 0.9 * (scale / err).powf(0.2).clamp(0.2, 5.0)).max(h_floor);
        } else {
            h = (h * 5.0).max(h_floor);
        }
    }
    Ok(traj)
}

/// Bisect the sub-step size of an accepted step for the earliest zero of the
/// signed indicator (negative before, nonnegative after).
fn localize<F, P>(field: &F, x0: &Vector, h_acc: f64, pred: P) -> Result<(f64, Vector)>
where
    F: Fn(&Vector) -> Result<Vector>,
    P: Fn(&Vector) -> f64,
{
    let step_to = |h: f64| -> Result<Vector> {
        if h <= 0.0 {
            return Ok(x0.clone());
        }
        Ok(rkf45_step(field, x0, h)?.0)
    };
    let (mut lo, mut hi) = (0.0f64, h_acc);
    let mut x_hi = step_to(hi)?;
    for _ in 0..MAX_BISECT {
        let x_cur = &x_hi;
        let val = pred(x_cur);
        if val >= 0.0 && val <= LOC_TOL * (1.0 + x_cur.norm()) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let x_mid = step_to(mid)?;
        if pred(&x_mid) >= 0.0 {
            hi = mid;
            x_hi = x_mid;
        } else {
            lo = mid;
        }
        if hi - lo <= f64::EPSILON * h_acc {
            break;
        }
    }
    Ok((hi, x_hi))
}

/// Adaptive realization of the relaxed execution: integrate `f_j^ε`, localize
/// relaxed-guard crossings by bisection, reset exactly on the relaxed guard.
/// Requires full-rank edges.
pub fn simulate_relaxed_reference(
    rs: &RelaxedSystem,
    x0: &Vector,
    j0: usize,
    input: &InputSignal,
    t_final: f64,
    tol: f64,
) -> Result<Trajectory> {
    if let Some(g) = rs.geo.edges.iter().find(|g| !g.is_full_rank()) {
        return Err(HybridError::RankDeficient { edge: g.edge });
    }
    let chart0 = pad_chart(rs, j0, x0)?;
    run_reference(
        rs,
        ReferenceConfig { tol, apply_resets: true, max_step: t_final / 200.0 },
        j0,
        chart0,
        input,
        t_final,
    )
}

/// Adaptive augmented execution over `(x, z)`.
pub fn simulate_augmented_reference(
    rs: &RelaxedSystem,
    x0: &Vector,
    j0: usize,
    input: &InputSignal,
    t_final: f64,
    tol: f64,
) -> Result<Trajectory> {
    let chart0 = pad_chart(rs, j0, x0)?;
    run_reference(
        rs,
        ReferenceConfig { tol, apply_resets: true, max_step: t_final / 200.0 },
        j0,
        chart0,
        input,
        t_final,
    )
}

/// Adaptive chart flow without resets (the auxiliary curve γ^ε on one
/// extended domain).
pub fn flow_chart_reference(
    rs: &RelaxedSystem,
    chart0: &Vector,
    j: usize,
    input: &InputSignal,
    t_final: f64,
    tol: f64,
    max_step: Option<f64>,
) -> Result<Trajectory> {
    let chart0 = pad_chart(rs, j, chart0)?;
    run_reference(
        rs,
        ReferenceConfig {
            tol,
            apply_resets: false,
            max_step: max_step.unwrap_or(t_final / 200.0),
        },
        j,
        chart0,
        input,
        t_final,
    )
}

// ---------------------------------------------------------------------------
// Filippov reference execution (unrelaxed, event driven)
// ---------------------------------------------------------------------------

/// Event-driven integration of the unrelaxed switched system: flow the mode
/// field to the guard, classify the contact, cross (exact reset) or slide
/// (Filippov convex combination along the plane) until the sliding condition
/// fails. Escaping or degenerate contacts are errors: the reference solution
/// does not exist there and the relaxed path must be used.
pub fn simulate_filippov(
    geo: &SystemGeometry,
    x0: &Vector,
    j0: usize,
    input: &InputSignal,
    t_final: f64,
    tol: f64,
) -> Result<Trajectory> {
    check_input(geo.system, input)?;
    let nn = geo.system.state_dim;
    let mut j = j0;
    let mut x = x0.clone();
    let mut t = 0.0f64;
    if !geo.system.modes[j].polytope.contains(&x, GEOM_TOL) {
        return Err(HybridError::OutsideDomain { mode: j, t: 0.0 });
    }
    let mut traj = Trajectory {
        samples: vec![Sample { t, mode: j, x: x.clone(), region: SampleRegion::Interior }],
        events: Vec::new(),
        termination: Termination::HorizonReached,
        state_dim: nn,
    };

    let h_floor = 1e-14 * t_final.max(1.0);
    let max_step = t_final / 200.0;
    let mut h = max_step / 8.0;
    let mut zero_advance = 0usize;

    #[derive(PartialEq)]
    enum Phase {
        Interior,
        Sliding(usize),
    }
    let mut phase = Phase::Interior;
    // States sitting exactly on a guard plane (the initial condition, or a
    // reset image) are classified before flowing; tangent contacts where the
    // Filippov concept breaks down are reported from here.
    let mut check_contact = true;

    'outer: while t < t_final - 1e-14 * t_final.max(1.0) {
        let seg_end = input
            .breakpoints()
            .iter()
            .copied()
            .find(|&b| b > t + 1e-15)
            .map_or(t_final, |b| b.min(t_final));
        h = h.min(max_step).min(seg_end - t).max(h_floor);
        let u = input.eval(t).clone();

        if phase == Phase::Interior && check_contact {
            check_contact = false;
            for edge in geo.system.neighborhood(j) {
                let on_plane = edge.guard_value(&x).abs() <= LOC_TOL * (1.0 + x.norm());
                let on_facet =
                    geo.system.modes[j].polytope.contains(&edge.project_to_plane(&x), GEOM_TOL);
                if !(on_plane && on_facet) {
                    continue;
                }
                let sample = crate::filippov::classify_region(geo, edge.id, &x, &u)?;
                match sample.tag {
                    crate::filippov::RegionTag::Sliding => {
                        phase = Phase::Sliding(edge.id);
                        x = edge.project_to_plane(&x);
                        continue 'outer;
                    }
                    crate::filippov::RegionTag::Escaping
                    | crate::filippov::RegionTag::Degenerate => {
                        return Err(HybridError::FilippovUndefined {
                            t,
                            mode: j,
                            x: x.iter().cloned().collect(),
                            a1: sample.a1,
                            a2: sample.a2,
                        });
                    }
                    crate::filippov::RegionTag::Crossing => {} // flows off the plane
                }
            }
        }

        match phase {
            Phase::Interior => {
                let field = |y: &Vector| geo.system.eval_field(j, y, &u);
                let (x_new, err) = rkf45_step(&field, &x, h)?;
                let scale = tol * (1.0 + x.norm());
                if err > scale && h > 16.0 * h_floor {
                    h *= 0.9 * (scale / err).powf(0.2).clamp(0.2, 1.0);
                    continue;
                }

                // Guard contacts: g_e rising through zero.
                let mut hit: Option<(f64, usize, Vector)> = None;
                for edge in geo.system.neighborhood(j) {
                    if edge.guard_value(&x) < 0.0 && edge.guard_value(&x_new) >= 0.0 {
                        let (h_star, x_star) =
                            localize(&field, &x, h, |y: &Vector| edge.guard_value(y))?;
                        if hit.as_ref().is_none_or(|(bh, be, _)| {
                            h_star < bh - 1e-15 || (h_star <= bh + 1e-15 && edge.id < *be)
                        }) {
                            hit = Some((h_star, edge.id, x_star));
                        }
                    }
                }
                if let Some((h_star, e, x_star)) = hit {
                    let t_star = t + h_star;
                    let edge = &geo.system.edges[e];
                    let on_facet = geo.system.modes[j]
                        .polytope
                        .contains(&edge.project_to_plane(&x_star), GEOM_TOL);
                    if !on_facet {
                        traj.samples.push(Sample { t: t_star, mode: j, x: x_star, region: SampleRegion::Interior });
                        traj.termination = Termination::LeftDomain(t_star);
                        return Ok(traj);
                    }
                    let sample = crate::filippov::classify_region(geo, e, &x_star, &u)?;
                    if h_star <= 1e-14 {
                        zero_advance += 1;
                        if zero_advance > 10_000 {
                            return Err(HybridError::FilippovUndefined {
                                t: t_star,
                                mode: j,
                                x: x_star.iter().cloned().collect(),
                                a1: sample.a1,
                                a2: sample.a2,
                            });
                        }
                    } else {
                        zero_advance = 0;
                    }
                    match sample.tag {
                        crate::filippov::RegionTag::Crossing if sample.a1 > 0.0 => {
                            let post = edge.reset(&x_star);
                            let target = edge.target;
                            if !geo.system.modes[target].polytope.contains(&post, 1e-6) {
                                return Err(HybridError::ResetConsistency { t: t_star, edge: e });
                            }
                            traj.events.push(Event {
                                t: t_star,
                                edge: e,
                                pre_mode: j,
                                pre: x_star,
                                post_mode: target,
                                post: post.clone(),
                                post_sample: traj.samples.len(),
                            });
                            if traj.events.len() > EVENT_BUDGET {
                                return Err(HybridError::EventBudget { t: t_star, budget: EVENT_BUDGET });
                            }
                            j = target;
                            traj.samples.push(Sample { t: t_star, mode: j, x: post.clone(), region: SampleRegion::Interior });
                            x = post;
                            t = t_star;
                            check_contact = true;
                            continue 'outer;
                        }
                        crate::filippov::RegionTag::Crossing => {
                            // Both components negative: the flow re-enters the
                            // source domain; continue without a transition.
                            traj.samples.push(Sample { t: t_star, mode: j, x: x_star.clone(), region: SampleRegion::Interior });
                            x = x_star;
                            t = t_star;
                            continue 'outer;
                        }
                        crate::filippov::RegionTag::Sliding => {
                            let x_slide = edge.project_to_plane(&x_star);
                            traj.samples.push(Sample { t: t_star, mode: j, x: x_slide.clone(), region: SampleRegion::Strip(e) });
                            x = x_slide;
                            t = t_star;
                            phase = Phase::Sliding(e);
                            continue 'outer;
                        }
                        crate::filippov::RegionTag::Escaping | crate::filippov::RegionTag::Degenerate => {
                            return Err(HybridError::FilippovUndefined {
                                t: t_star,
                                mode: j,
                                x: x_star.iter().cloned().collect(),
                                a1: sample.a1,
                                a2: sample.a2,
                            });
                        }
                    }
                }

                // Non-guard exit.
                if !geo.system.modes[j].polytope.contains(&x_new, GEOM_TOL) {
                    let (h_star, x_star) = localize(&field, &x, h, |y: &Vector| {
                        geo.system.modes[j].polytope.violation(y)
                    })?;
                    let t_star = t + h_star;
                    traj.samples.push(Sample { t: t_star, mode: j, x: x_star, region: SampleRegion::Interior });
                    traj.termination = Termination::LeftDomain(t_star);
                    return Ok(traj);
                }

                t += h;
                traj.samples.push(Sample { t, mode: j, x: x_new.clone(), region: SampleRegion::Interior });
                x = x_new;
                if err > 0.0 {
                    h = (h * 0.9 * (scale / err).powf(0.2).clamp(0.2, 5.0)).max(h_floor);
                } else {
                    h = (h * 5.0).max(h_floor);
                }
            }
            Phase::Sliding(e) => {
                let edge = &geo.system.edges[e];
                // Lenient sliding field for trial stages; the accepted arc is
                // kept strictly inside the sliding region by the monitor.
                let field = |y: &Vector| -> Result<Vector> {
                    let f_src = geo.system.eval_field(j, y, &u)?;
                    let f_proj = crate::filippov::projected_field(geo, e, y, &u)?;
                    let a1 = edge.guard_normal.dot(&f_src);
                    let a2 = edge.guard_normal.dot(&f_proj);
                    let denom = a1 - a2;
                    if denom.abs() < 1e-300 {
                        return Ok(f_src);
                    }
                    let alpha = (a1 / denom).clamp(0.0, 1.0);
                    Ok(f_src * (1.0 - alpha) + f_proj * alpha)
                };
                // Sliding persists while a1 > 0 and a2 < 0.
                let monitor = |y: &Vector| -> Result<f64> {
                    let s = crate::filippov::classify_region(geo, e, y, &u)?;
                    Ok(s.a1.min(-s.a2))
                };

                let (x_raw, err) = rkf45_step(&field, &x, h)?;
                let scale = tol * (1.0 + x.norm());
                if err > scale && h > 16.0 * h_floor {
                    h *= 0.9 * (scale / err).powf(0.2).clamp(0.2, 1.0);
                    continue;
                }
                let x_new = edge.project_to_plane(&x_raw);

                if monitor(&x_new)? <= 0.0 {
                    // Locate the sliding exit.
                    let (h_star, x_star_raw) = localize(&field, &x, h, |y: &Vector| {
                        let p = edge.project_to_plane(y);
                        match monitor(&p) {
                            Ok(v) => -v,
                            Err(_) => 1.0,
                        }
                    })?;
                    let x_star = edge.project_to_plane(&x_star_raw);
                    let t_star = t + h_star;
                    let s = crate::filippov::classify_region(geo, e, &x_star, &u)?;
                    traj.samples.push(Sample { t: t_star, mode: j, x: x_star.clone(), region: SampleRegion::Strip(e) });
                    if h_star <= 1e-14 {
                        zero_advance += 1;
                        if zero_advance > 10_000 {
                            return Err(HybridError::FilippovUndefined {
                                t: t_star,
                                mode: j,
                                x: x_star.iter().cloned().collect(),
                                a1: s.a1,
                                a2: s.a2,
                            });
                        }
                    } else {
                        zero_advance = 0;
                    }
                    if s.a2 >= 0.0 && s.a1 > 0.0 {
                        // The transported flow now points outward: transition.
                        let post = edge.reset(&x_star);
                        let target = edge.target;
                        traj.events.push(Event {
                            t: t_star,
                            edge: e,
                            pre_mode: j,
                            pre: x_star.clone(),
                            post_mode: target,
                            post: post.clone(),
                            post_sample: traj.samples.len(),
                        });
                        if traj.events.len() > EVENT_BUDGET {
                            return Err(HybridError::EventBudget { t: t_star, budget: EVENT_BUDGET });
                        }
                        j = target;
                        traj.samples.push(Sample { t: t_star, mode: j, x: post.clone(), region: SampleRegion::Interior });
                        x = post;
                        check_contact = true;
                    } else if s.a1 <= 0.0 && s.a2 < 0.0 {
                        // The source field pulls back inside: resume the mode.
                        x = x_star;
                    } else {
                        return Err(HybridError::FilippovUndefined {
                            t: t_star,
                            mode: j,
                            x: x_star.iter().cloned().collect(),
                            a1: s.a1,
                            a2: s.a2,
                        });
                    }
                    t = t_star;
                    phase = Phase::Interior;
                    continue;
                }

                // Slid off the guard facet: domain exit.
                if !geo.system.modes[j].polytope.contains(&x_new, GEOM_TOL) {
                    traj.samples.push(Sample { t: t + h, mode: j, x: x_new, region: SampleRegion::Strip(e) });
                    traj.termination = Termination::LeftDomain(t + h);
                    return Ok(traj);
                }

                t += h;
                traj.samples.push(Sample { t, mode: j, x: x_new.clone(), region: SampleRegion::Strip(e) });
                x = x_new;
                if err > 0.0 {
                    h = (h * 0.9 * (scale / err).powf(0.2).clamp(0.2, 5.0)).max(h_floor);
                } else {
                    h = (h * 5.0).max(h_floor);
                }
            }
        }
    }
    Ok(traj)
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

/// Write the trajectory as CSV: `t,mode,region,x0..x{n-1}[,z0..z{p-1}],event_edge`
/// with shortest-round-trip floats. Events appear as paired rows (pre, then
/// post) sharing the event time, tagged in `event_edge`.
pub fn write_trajectory_csv(
    system: &HybridSystem,
    traj: &Trajectory,
    out: &mut impl Write,
) -> Result<()> {
    let n = system.state_dim;
    let p_max = traj
        .samples
        .iter()
        .map(|s| s.x.len() - n)
        .max()
        .unwrap_or(0)
        .max(traj.events.iter().map(|e| (e.pre.len() - n).max(e.post.len() - n)).max().unwrap_or(0));

    let mut header = String::from("t,mode,region");
    for i in 0..n {
        header.push_str(&format!(",x{i}"));
    }
    for i in 0..p_max {
        header.push_str(&format!(",z{i}"));
    }
    header.push_str(",event_edge");
    writeln!(out, "{header}")?;

    let write_row = |out: &mut dyn Write,
                     t: f64,
                     mode: usize,
                     region: &str,
                     x: &Vector,
                     event: Option<usize>|
     -> std::io::Result<()> {
        let mut row = format!("{t},{mode},{region}");
        for i in 0..n {
            row.push_str(&format!(",{}", x[i]));
        }
        for i in 0..p_max {
            let v = if n + i < x.len() { x[n + i] } else { 0.0 };
            row.push_str(&format!(",{v}"));
        }
        match event {
            Some(e) => row.push_str(&format!(",{e}")),
            None => row.push(','),
        }
        writeln!(out, "{row}")
    };

    let mut next_event = 0usize;
    for (i, s) in traj.samples.iter().enumerate() {
        if next_event < traj.events.len() && traj.events[next_event].post_sample == i {
            let ev = &traj.events[next_event];
            write_row(out, ev.t, ev.pre_mode, "interior", &ev.pre, Some(ev.edge))?;
            let region = region_str(s.region);
            write_row(out, s.t, s.mode, &region, &s.x, Some(ev.edge))?;
            next_event += 1;
        } else {
            let region = region_str(s.region);
            write_row(out, s.t, s.mode, &region, &s.x, None)?;
        }
    }
    Ok(())
}

fn region_str(region: SampleRegion) -> String {
    match region {
        SampleRegion::Interior => "interior".to_string(),
        SampleRegion::Strip(e) => format!("strip:{e}"),
    }
}
