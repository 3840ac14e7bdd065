//! Receding-horizon controller: an SQP loop around the structured QP engine.
//!
//! Each control tick builds the horizon problem at the measured state,
//! then iterates:
//!
//! 1. linearize dynamics, coupling and inequality rows at the iterate;
//! 2. solve the quadratic subproblem (exact diagonal Hessian, linearized
//!    constraints, exact `l1` penalty on the soft barrier rows);
//! 3. check the scaled optimality residual assembled from the subproblem's
//!    multipliers — the stationarity defect, constraint violations and
//!    complementarity — and stop below tolerance;
//! 4. otherwise backtrack on an `l1` merit function whose constraint
//!    penalty dominates the current multipliers, and take the step.
//!
//! Warm starts shift the previous solution by one interval and repeat the
//! tail. If a subproblem fails, the tick falls back to the shifted previous
//! solution so the vehicle keeps receiving a usable (friction-projected)
//! input; the outcome is labeled so the log shows exactly which ticks fell
//! back. All arithmetic is deterministic: identical measurements and
//! references produce bitwise-identical inputs.

use crate::coupling::{GlobalInput, GlobalState, GlobalStateVector, NUM_AGENTS};
use crate::ocp::{FrictionParams, OcpError, OcpProblem, OcpWeights};
use crate::qp::{
    row_dot, solve_qp, stationarity_residual, QpError, QpOptions, QpSolution,
};
use crate::safety::{HocbfParams, Obstacle};
use crate::srb::{trot_schedule, ContactSchedule, GaitConfig, NUM_FEET};
use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NmpcError {
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error("controller configuration invalid: {reason}")]
    InvalidConfig { reason: String },
}

/// SQP loop parameters.
#[derive(Debug, Clone)]
pub struct SqpOptions {
    pub max_iterations: usize,
    /// Scaled optimality residual below which the iterate is accepted.
    pub kkt_tolerance: f64,
    /// Sufficient-decrease coefficient of the merit backtracking.
    pub armijo: f64,
    pub max_backtracks: usize,
    pub qp: QpOptions,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            kkt_tolerance: 1e-4,
            armijo: 1e-4,
            max_backtracks: 12,
            qp: QpOptions::default(),
        }
    }
}

/// How a tick's solve ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    IterationLimit,
    /// The subproblem failed; the applied input came from the shifted
    /// previous solution.
    InfeasibleFallback,
}

impl SolveStatus {
    /// Stable integer used in the binary/CSV logs.
    pub fn code(self) -> u8 {
        match self {
            SolveStatus::Converged => 0,
            SolveStatus::IterationLimit => 1,
            SolveStatus::InfeasibleFallback => 2,
        }
    }
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolveStatus::Converged => write!(f, "converged"),
            SolveStatus::IterationLimit => write!(f, "iteration-limit"),
            SolveStatus::InfeasibleFallback => write!(f, "infeasible-fallback"),
        }
    }
}

/// Optimality residuals of an iterate, assembled from the subproblem
/// multipliers at the same point.
#[derive(Debug, Clone, Copy)]
pub struct KktResidual {
    /// Lagrangian gradient, scaled by `1 + ||grad f||_inf`.
    pub stationarity: f64,
    /// Largest equality residual magnitude.
    pub equality: f64,
    /// Largest hard-inequality violation.
    pub hard_violation: f64,
    /// Largest complementarity defect, scaled per row by `1 + |mu|`.
    pub complementarity: f64,
}

impl KktResidual {
    pub fn worst(&self) -> f64 {
        self.stationarity
            .max(self.equality)
            .max(self.hard_violation)
            .max(self.complementarity)
    }
}

/// Internal SQP termination cause.
#[derive(Debug, Clone, PartialEq)]
enum SqpStatus {
    Converged,
    IterationLimit,
    QpFailure(QpError),
}

/// Result of solving one horizon problem.
pub struct SqpOutcome {
    pub z: DVector<f64>,
    status: SqpStatus,
    pub iterations: usize,
    pub qp_iterations: usize,
    pub kkt: Option<KktResidual>,
    /// Multipliers of the last subproblem, taken at the final iterate when
    /// converged (used by the optimality certificate).
    pub final_qp: Option<QpSolution>,
}

impl SqpOutcome {
    pub fn converged(&self) -> bool {
        self.status == SqpStatus::Converged
    }
}

/// Evaluate the optimality residual at the point `lin`/`grad` were taken,
/// with the multipliers of a subproblem solved at that same point.
pub fn kkt_residual(
    problem: &OcpProblem,
    lin: &crate::ocp::Linearization,
    grad: &DVector<f64>,
    qp: &QpSolution,
) -> KktResidual {
    let stat =
        stationarity_residual(problem.layout, lin, grad, &qp.eq_multipliers, &qp.ineq_multipliers);
    let stationarity = stat.amax() / (1.0 + grad.amax());

    let mut equality = lin.pin.amax();
    for st in &lin.stages {
        equality = equality.max(st.defect.amax()).max(st.er.amax());
    }

    let w = problem.weights.slack_penalty;
    let mut hard_violation: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    for (j, row) in lin.ineqs.iter().enumerate() {
        let mu = qp.ineq_multipliers[j];
        if row.soft {
            // Exact-penalty optimality: interior multipliers need a tight
            // row, saturated multipliers a violated (or tight) one.
            let comp = if row.value >= 0.0 { mu * row.value } else { (w - mu) * (-row.value) };
            complementarity = complementarity.max(comp.abs() / (1.0 + mu.abs()));
        } else {
            hard_violation = hard_violation.max(-row.value);
            complementarity =
                complementarity.max((mu * row.value).abs() / (1.0 + mu.abs()));
        }
    }
    KktResidual {
        stationarity,
        equality,
        hard_violation: hard_violation.max(0.0),
        complementarity,
    }
}

/// Merit pieces at a point: tracking cost, `l1` soft-row violation, `l1`
/// equality residual, `l1` hard-row violation.
struct MeritParts {
    cost: f64,
    soft_l1: f64,
    eq_l1: f64,
    hard_l1: f64,
}

impl MeritParts {
    fn value(&self, slack_weight: f64, penalty: f64) -> f64 {
        self.cost + slack_weight * self.soft_l1 + penalty * (self.eq_l1 + self.hard_l1)
    }
}

fn merit_parts(problem: &OcpProblem, z: &DVector<f64>) -> Result<MeritParts, OcpError> {
    let cost = problem.cost(z);
    let eq = problem.equality_residuals(z)?;
    let eq_l1 = eq.iter().map(|v| v.abs()).sum();
    let rows = problem.inequality_rows(z)?;
    let mut soft_l1 = 0.0;
    let mut hard_l1 = 0.0;
    for row in &rows {
        let viol = (-row.value).max(0.0);
        if row.soft {
            soft_l1 += viol;
        } else {
            hard_l1 += viol;
        }
    }
    Ok(MeritParts { cost, soft_l1, eq_l1, hard_l1 })
}

/// Write the subproblem that just broke the solver to
/// `$COTRANS_QP_DUMP/qp_fail_<n>.json` so it can be replayed offline.
/// No-op unless the environment variable is set.
fn snapshot_failed_qp(
    layout: crate::ocp::OcpLayout,
    h: &DVector<f64>,
    g: &DVector<f64>,
    lin: &crate::ocp::Linearization,
    slack_weight: f64,
) {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let Ok(dir) = std::env::var("COTRANS_QP_DUMP") else { return };
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let path = std::path::Path::new(&dir).join(format!("qp_fail_{n:04}.json"));
    let snap = crate::qp::snapshot::QpSnapshot::capture(layout, h, g, lin, slack_weight);
    match snap.save(&path) {
        Ok(()) => log::info!("saved failing subproblem to {}", path.display()),
        Err(e) => log::warn!("could not save failing subproblem: {e}"),
    }
}

/// Total soft-row violation (unweighted `l1`) at a point.
pub fn soft_violation_l1(problem: &OcpProblem, z: &DVector<f64>) -> Result<f64, OcpError> {
    Ok(problem
        .inequality_rows(z)?
        .iter()
        .filter(|r| r.soft)
        .map(|r| (-r.value).max(0.0))
        .sum())
}

/// Solve one horizon problem by SQP from the given initial iterate.
pub fn solve_ocp(
    problem: &OcpProblem,
    z0: DVector<f64>,
    options: &SqpOptions,
) -> Result<SqpOutcome, NmpcError> {
    let h = problem.hessian_diagonal();
    let w = problem.weights.slack_penalty;
    let mut z = z0;
    let mut penalty = 1.0f64;
    let mut qp_iterations = 0;
    let mut kkt_best: Option<KktResidual> = None;
    let mut final_qp = None;
    let mut iterations = 0;
    let mut status = SqpStatus::IterationLimit;

    while iterations < options.max_iterations {
        iterations += 1;
        let lin = problem.linearize(&z)?;
        let g = problem.cost_gradient(&z);
        let sol = match solve_qp(problem.layout, &h, &g, &lin, w, &options.qp) {
            Ok(s) => s,
            Err(e) => {
                snapshot_failed_qp(problem.layout, &h, &g, &lin, w);
                status = SqpStatus::QpFailure(e);
                iterations -= 1;
                break;
            }
        };
        qp_iterations += sol.active_set_iterations;
        let kkt = kkt_residual(problem, &lin, &g, &sol);
        let worst = kkt.worst();
        kkt_best = Some(kkt);
        if worst < options.kkt_tolerance {
            final_qp = Some(sol);
            status = SqpStatus::Converged;
            break;
        }

        // Penalty large enough that the merit function is exact for the
        // current multiplier estimates.
        let mut mu_max = sol.ineq_multipliers.iter().fold(0.0f64, |a, &m| a.max(m.abs()));
        mu_max = mu_max.max(sol.eq_multipliers.pin.amax());
        for nu in &sol.eq_multipliers.defects {
            mu_max = mu_max.max(nu.amax());
        }
        for eta in &sol.eq_multipliers.stage_rows {
            mu_max = mu_max.max(eta.amax());
        }
        penalty = penalty.max(2.0 * mu_max);

        let dz = &sol.dz;
        let parts0 = merit_parts(problem, &z)?;
        let m0 = parts0.value(w, penalty);
        // Predicted decrease of the merit under the subproblem's model:
        // the step zeroes the linearized equalities and hard rows.
        let quad: f64 = g.dot(dz)
            + 0.5 * dz.iter().zip(h.iter()).map(|(d, hh)| hh * d * d).sum::<f64>();
        let soft_lin: f64 = lin
            .ineqs
            .iter()
            .filter(|r| r.soft)
            .map(|r| (-(r.value + row_dot(r, dz))).max(0.0))
            .sum();
        let predicted = (-quad + w * (parts0.soft_l1 - soft_lin)
            + penalty * (parts0.eq_l1 + parts0.hard_l1))
            .max(f64::EPSILON);

        let mut alpha = 1.0f64;
        let mut accepted = false;
        for _ in 0..=options.max_backtracks {
            let z_trial = &z + dz * alpha;
            match merit_parts(problem, &z_trial) {
                Ok(parts) => {
                    if parts.value(w, penalty) <= m0 - options.armijo * alpha * predicted {
                        z = z_trial;
                        accepted = true;
                        break;
                    }
                }
                Err(_) => {
                    // Trial point left the model's valid region (e.g. hit
                    // the attitude-singularity guard); shorten the step.
                }
            }
            alpha *= 0.5;
        }
        final_qp = Some(sol);
        if !accepted {
            // No productive step along this direction; report the iterate.
            break;
        }
    }
    Ok(SqpOutcome { z, status, iterations, qp_iterations, kkt: kkt_best, final_qp })
}

/// Everything the loop needs to build each tick's horizon problem.
#[derive(Debug, Clone)]
pub struct NmpcConfig {
    pub model: crate::coupling::CoupledModel,
    pub weights: OcpWeights,
    pub friction: FrictionParams,
    pub hocbf: HocbfParams,
    pub obstacles: Vec<Obstacle>,
    pub safety_enabled: bool,
    pub gait: GaitConfig,
    pub horizon: usize,
    pub ts: f64,
    pub sqp: SqpOptions,
}

impl NmpcConfig {
    pub fn validate(&self) -> Result<(), NmpcError> {
        self.weights.validate().map_err(NmpcError::Ocp)?;
        self.hocbf
            .validate()
            .map_err(|e| NmpcError::InvalidConfig { reason: e.to_string() })?;
        if self.horizon == 0 {
            return Err(NmpcError::InvalidConfig { reason: "horizon must be at least 1".into() });
        }
        if !(self.ts.is_finite() && self.ts > 0.0) {
            return Err(NmpcError::InvalidConfig {
                reason: format!("control interval {} s must be positive", self.ts),
            });
        }
        Ok(())
    }
}

/// Per-tick solve diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct SolveInfo {
    pub status: SolveStatus,
    pub sqp_iterations: usize,
    pub qp_iterations: usize,
    pub kkt_worst: f64,
    /// Unweighted `l1` violation of the soft barrier rows at the solution.
    pub slack_l1: f64,
    pub cost: f64,
    pub solve_time_ms: f64,
}

/// Output of one control tick.
pub struct StepResult {
    /// First-interval input, swing feet zeroed and stance forces projected
    /// into the friction pyramid.
    pub input: GlobalInput,
    /// Full solution trajectory (for logging and warm-start inspection).
    pub z: DVector<f64>,
    pub info: SolveInfo,
    /// Multipliers backing the optimality certificate, when available.
    pub qp: Option<QpSolution>,
}

/// Receding-horizon controller with shift warm starting.
pub struct NmpcController {
    pub config: NmpcConfig,
    warm: Option<DVector<f64>>,
    tick: u64,
}

impl NmpcController {
    pub fn new(config: NmpcConfig) -> Result<Self, NmpcError> {
        config.validate()?;
        Ok(Self { config, warm: None, tick: 0 })
    }

    pub fn time_s(&self) -> f64 {
        self.tick as f64 * self.config.ts
    }

    pub fn reset(&mut self) {
        self.warm = None;
        self.tick = 0;
    }

    /// Build this tick's contact schedules (both agents trot in phase).
    pub fn schedules_at(&self, time_s: f64) -> [ContactSchedule; NUM_AGENTS] {
        let sched =
            trot_schedule(time_s, self.config.horizon, self.config.ts, &self.config.gait);
        [sched.clone(), sched]
    }

    /// Shift the previous solution one interval forward, repeating the tail
    /// and overwriting the first node with the measurement.
    fn shifted_warm_start(
        &self,
        prev: &DVector<f64>,
        problem: &OcpProblem,
        measured: &GlobalState,
    ) -> DVector<f64> {
        let layout = problem.layout;
        let n = layout.horizon;
        let mut z = prev.clone();
        for k in 0..n {
            let src = prev.rows(layout.state_offset(k + 1), crate::coupling::GLOBAL_STATE_DIM);
            z.rows_mut(layout.state_offset(k), crate::coupling::GLOBAL_STATE_DIM)
                .copy_from(&src);
        }
        for k in 0..n.saturating_sub(1) {
            let src = prev.rows(layout.input_offset(k + 1), crate::coupling::GLOBAL_INPUT_DIM);
            z.rows_mut(layout.input_offset(k), crate::coupling::GLOBAL_INPUT_DIM)
                .copy_from(&src);
        }
        z.rows_mut(layout.state_offset(0), crate::coupling::GLOBAL_STATE_DIM)
            .copy_from_slice(measured.to_vector().as_slice());
        z
    }

    /// Run one control tick: solve the horizon problem at the measurement
    /// and return the first input. `references` must hold `horizon + 1`
    /// stacked state targets.
    pub fn step(
        &mut self,
        measured: &GlobalState,
        references: &[GlobalStateVector],
    ) -> Result<StepResult, NmpcError> {
        let start = std::time::Instant::now();
        let t = self.time_s();
        let schedules = self.schedules_at(t);
        let problem = OcpProblem::new(
            self.config.model.clone(),
            self.config.weights.clone(),
            self.config.friction,
            self.config.hocbf,
            self.config.obstacles.clone(),
            self.config.safety_enabled,
            schedules.clone(),
            references.to_vec(),
            *measured,
            self.config.horizon,
            self.config.ts,
        )?;
        let z0 = match &self.warm {
            Some(prev) => self.shifted_warm_start(prev, &problem, measured),
            None => problem.cold_start(),
        };
        let outcome = solve_ocp(&problem, z0.clone(), &self.config.sqp)?;
        let (status, z_final, qp) = match outcome.status {
            SqpStatus::Converged => (SolveStatus::Converged, outcome.z, outcome.final_qp),
            SqpStatus::IterationLimit => {
                (SolveStatus::IterationLimit, outcome.z, outcome.final_qp)
            }
            SqpStatus::QpFailure(e) => {
                log::warn!("tick {} (t = {:.3} s): QP subproblem failed ({e}); holding shifted trajectory", self.tick, t);
                (SolveStatus::InfeasibleFallback, z0, None)
            }
        };

        let mut input = problem.layout.input_at(&z_final, 0);
        project_input(&mut input, &schedules, &self.config.friction);
        let slack_l1 = soft_violation_l1(&problem, &z_final).unwrap_or(f64::NAN);
        let cost = problem.cost(&z_final);
        let info = SolveInfo {
            status,
            sqp_iterations: outcome.iterations,
            qp_iterations: outcome.qp_iterations,
            kkt_worst: outcome.kkt.map_or(f64::NAN, |k| k.worst()),
            slack_l1,
            cost,
            solve_time_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.warm = Some(z_final.clone());
        self.tick += 1;
        Ok(StepResult { input, z: z_final, info, qp })
    }
}

/// Zero swing-foot forces and project stance forces into the friction
/// pyramid and vertical bounds. The solver already enforces these rows; the
/// projection guarantees them bit-exactly on the applied input even on
/// fallback ticks.
pub fn project_input(
    input: &mut GlobalInput,
    schedules: &[ContactSchedule; NUM_AGENTS],
    friction: &FrictionParams,
) {
    for e in 0..NUM_AGENTS {
        let stance = schedules[e].stance_at(0);
        for foot in 0..NUM_FEET {
            let f = &mut input.grfs[e].forces[foot];
            if !stance[foot] {
                *f = nalgebra::Vector3::zeros();
                continue;
            }
            f.z = f.z.clamp(0.0, friction.fz_max_n);
            let bound = friction.mu * f.z;
            f.x = f.x.clamp(-bound, bound);
            f.y = f.y.clamp(-bound, bound);
        }
    }
}
