//! Simulation of hybrid dynamical systems through discrete transitions and
//! Zeno accumulations, via strip relaxation.
//!
//! A hybrid system here is a finite set of modes, each a compact polytope
//! carrying a vector field, connected by edges whose guards are facet
//! hyperplanes and whose resets are affine maps. Crossing a guard triggers an
//! instantaneous reset into the target mode. Systems of this kind can switch
//! infinitely often in finite time (Zeno), which defeats event-driven
//! integration.
//!
//! This crate simulates such systems by appending an ε-thick strip past each
//! guard and blending the source field with the target field transported back
//! through the transition's change of coordinates. The blended fields are
//! continuously differentiable, so fixed-step integrators converge at their
//! classical order even across transitions, executions extend past Zeno, and
//! trajectories admit first-order sensitivity analysis.
//!
//! ```
//! use hybrid_relax::execution::{simulate_augmented, Scheme};
//! use hybrid_relax::model::InputSignal;
//! use hybrid_relax::registry::{bouncing_ball, BouncingBallParams};
//! use hybrid_relax::relaxation::{RelaxationParams, RelaxedSystem};
//! use nalgebra::DVector;
//!
//! let system = bouncing_ball(BouncingBallParams::default())?;
//! let relaxed = RelaxedSystem::new(&system, RelaxationParams::new(1e-5))?;
//! let trajectory = simulate_augmented(
//!     &relaxed,
//!     Scheme::Euler,
//!     1e-3,
//!     &DVector::from_vec(vec![1.0, 0.0]),
//!     0,
//!     &InputSignal::none(),
//!     6.0,
//! )?;
//! // The ball Zeno-accumulates near t = 3·√2 and stays at rest afterwards.
//! let tail = trajectory
//!     .samples
//!     .iter()
//!     .filter(|s| s.t >= 4.5)
//!     .map(|s| s.x.amax())
//!     .fold(0.0, f64::max);
//! assert!(tail < 0.05);
//! # Ok::<(), hybrid_relax::HybridError>(())
//! ```
//!
//! Module map:
//!
//! * [`model`] — system definition, validation, edge classification.
//! * [`config`] — JSON system files.
//! * [`geometry`] — transition geometry: projections, transported resets,
//!   strip membership, the augmented construction for rank-deficient edges.
//! * [`filippov`] — the unrelaxed switched-system view: region
//!   classification, sliding fields, transported fields.
//! * [`relaxation`] — transition functions and the ε-relaxed vector fields.
//! * [`execution`] — fixed-step and adaptive simulators, event localization,
//!   the step-over-the-strip discrete approximation, Filippov reference
//!   executions, and the augmented execution.
//! * [`analysis`] — quotient-space metrics, convergence sweeps, Jacobians,
//!   and the variational (sensitivity) recursion.
//! * [`registry`] — built-in example systems (bouncing ball, double pendulum
//!   with a mechanical stop).

pub mod analysis;
pub mod config;
pub mod error;
pub mod execution;
pub mod filippov;
pub mod geometry;
pub mod model;
pub mod registry;
pub mod relaxation;

pub use error::HybridError;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, HybridError>;

pub(crate) type Vector = nalgebra::DVector<f64>;
pub(crate) type Matrix = nalgebra::DMatrix<f64>;
