//! Cooperative payload transport with safety-constrained predictive control.
//!
//! Two quadruped-scale single-rigid-body (SRB) agents carry a shared payload
//! SRB through a rigid bracket on each side. A centralized nonlinear MPC
//! treats ground reaction forces and the bracket interaction wrenches as
//! decision variables, enforces the rigid coupling at acceleration level, and
//! keeps every body away from point obstacles through discrete-time
//! higher-order barrier constraints. An independently integrated plant with
//! its own (possibly mismatched) parameters closes the loop.
//!
//! Module map:
//! - [`spatial`] — rotations, Euler-rate kinematics, derivative helpers and
//!   the finite-difference oracle used to cross-check every hand-derived
//!   Jacobian.
//! - [`srb`] — single-rigid-body parameters, state, ground-reaction-force
//!   inputs, trot scheduling, continuous dynamics and the RK4 step with
//!   analytic sensitivities.
//! - [`coupling`] — attachment geometry, holonomic constraint residuals,
//!   interaction wrench maps, the assembled three-body model and the
//!   algebraic wrench solve used by the plant.
//! - [`safety`] — obstacle clearance barriers, the discrete-time ψ-sequence,
//!   and the closed-loop invariance monitor.
//! - [`ocp`] — horizon transcription: decision layout, cost, constraint
//!   blocks, linearization.
//! - [`qp`] — structured equality/inequality QP engine (Riccati sweep plus
//!   active-set Schur complement) and a dense reference solver for tests.
//! - [`nmpc`] — the SQP loop, warm starting, the receding-horizon
//!   controller, and the independent optimality certificate checker.
//! - [`plant`] — ground-truth integrator, disturbances, measurement model,
//!   closed-loop driver, and the run log.
//! - [`scenario`] — human-editable scenario files, reference generation, run
//!   orchestration, summaries, plot-data export, and log persistence.
//!
//! Runnable demonstrations live in `examples/` (one per major capability);
//! the `cotrans` binary exposes `run`, `export-plots` and `summarize`.

pub mod coupling;
pub mod nmpc;
pub mod ocp;
pub mod plant;
pub mod qp;
pub mod safety;
pub mod scenario;
pub mod spatial;
pub mod srb;

#[cfg(test)]
pub(crate) mod testutil;
