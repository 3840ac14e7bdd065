//! Ground-truth plant and closed-loop driver.
//!
//! The plant integrates the coupled assembly with its *true* parameters —
//! which may differ from whatever model a controller carries — at a fine
//! substep of the control interval. Interaction wrenches are re-solved from
//! the current state at every integrator stage with Baumgarte stabilization
//! active, so attachment drift is corrected continuously instead of
//! accumulating. External pushes enter as scheduled CoM forces. The module
//! also provides the measurement channel (exact, or payload state
//! reconstructed rigidly from the two robot states) and the lockstep
//! measure → solve → integrate loop that produces a [`RunLog`].

use crate::coupling::{
    AttachmentGeometry, Baumgarte, CoupledModel, CouplingError, ExtraWrenches, GlobalInput,
    GlobalState, GlobalStateVector, InteractionWrench, NO_EXTRA, NUM_AGENTS, PHI_DIM,
};
use crate::nmpc::{NmpcController, SolveInfo};
use crate::safety::{barrier, Obstacle};
use crate::spatial::{
    euler_rate, euler_rate_map_inverse, rotation_from_euler, rotation_partials, EulerAngles,
};
use crate::srb::{ContactSchedule, GaitConfig, GrfInput, SrbState, NUM_FEET};
use nalgebra::{Vector2, Vector3};
use thiserror::Error;

/// Attachment-residual stack norm beyond which the rigid-coupling model is
/// declared broken and integration refuses to continue.
pub const PHI_BLOWUP_LIMIT: f64 = 0.05;

/// Errors raised by plant configuration, integration, and measurement.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlantError {
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error(
        "attachment residual norm {phi_norm:.3e} exceeds {PHI_BLOWUP_LIMIT} at t = {time_s:.4} s; \
         the rigid-assembly model no longer holds"
    )]
    ConstraintBlowup { time_s: f64, phi_norm: f64 },
    #[error("invalid plant configuration: {reason}")]
    InvalidConfig { reason: String },
    #[error("payload reconstruction is degenerate: {reason}")]
    DegenerateMeasurement { reason: &'static str },
}

/// One scheduled external push: a constant world-frame force applied at the
/// CoM of one body over a time window. Pure force — no applied torque.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disturbance {
    pub start_s: f64,
    pub duration_s: f64,
    /// Body index: agents are 0 and 1, the payload is 2.
    pub body: usize,
    pub force_n: Vector3<f64>,
}

impl Disturbance {
    pub fn active_at(&self, time_s: f64) -> bool {
        time_s >= self.start_s && time_s < self.start_s + self.duration_s
    }
}

/// True-parameter simulation setup.
#[derive(Debug, Clone)]
pub struct PlantConfig {
    /// Ground-truth assembly parameters. Nothing in this module ever reads a
    /// controller's nominal model; mismatch lives entirely in the caller
    /// handing different models to the two sides.
    pub model: CoupledModel,
    /// Foot geometry used to map applied ground forces to body torques.
    pub gait: GaitConfig,
    /// Integrator substep, s. Must divide the control interval exactly.
    pub dt: f64,
    /// Attachment-drift stabilization used in the plant-side wrench solve.
    pub baumgarte: Baumgarte,
    pub disturbances: Vec<Disturbance>,
}

impl PlantConfig {
    /// Substep count per control tick, after validating divisibility.
    pub fn substeps_per_tick(&self, control_interval_s: f64) -> Result<usize, PlantError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(PlantError::InvalidConfig {
                reason: format!("substep {} s must be positive", self.dt),
            });
        }
        let ratio = control_interval_s / self.dt;
        let rounded = ratio.round();
        if rounded < 1.0 || (ratio - rounded).abs() > 1e-9 * ratio.max(1.0) {
            return Err(PlantError::InvalidConfig {
                reason: format!(
                    "substep {} s does not divide the control interval {} s",
                    self.dt, control_interval_s
                ),
            });
        }
        Ok(rounded as usize)
    }

    pub fn validate(&self, control_interval_s: f64) -> Result<(), PlantError> {
        self.substeps_per_tick(control_interval_s)?;
        for (i, d) in self.disturbances.iter().enumerate() {
            if d.body >= 3 {
                return Err(PlantError::InvalidConfig {
                    reason: format!("disturbance {i} targets body {}; bodies are 0..3", d.body),
                });
            }
            if !(d.start_s.is_finite() && d.duration_s.is_finite() && d.duration_s >= 0.0) {
                return Err(PlantError::InvalidConfig {
                    reason: format!("disturbance {i} has an invalid time window"),
                });
            }
            if !d.force_n.iter().all(|v| v.is_finite()) {
                return Err(PlantError::InvalidConfig {
                    reason: format!("disturbance {i} has a non-finite force"),
                });
            }
        }
        Ok(())
    }
}

/// Diagnostics from one control tick of the plant.
#[derive(Debug, Clone, Copy)]
pub struct TickInfo {
    /// Interaction wrenches resolved at the first substep — the plant-side
    /// counterpart of a controller's first-interval prediction.
    pub lambda: [InteractionWrench; NUM_AGENTS],
    /// Per-edge attachment residual norms after the tick.
    pub phi_edge_norm: [f64; NUM_AGENTS],
}

/// Ground-truth integrator. Owns the true state; advances by whole substeps
/// and counts them so time stamps do not accumulate rounding.
pub struct Plant {
    config: PlantConfig,
    schedules: [ContactSchedule; NUM_AGENTS],
    state: GlobalState,
    steps: u64,
}

impl Plant {
    pub fn new(config: PlantConfig, initial: GlobalState) -> Result<Self, PlantError> {
        if !(config.dt.is_finite() && config.dt > 0.0) {
            return Err(PlantError::InvalidConfig {
                reason: format!("substep {} s must be positive", config.dt),
            });
        }
        if !initial.to_vector().iter().all(|v| v.is_finite()) {
            return Err(PlantError::InvalidConfig { reason: "initial state is not finite".into() });
        }
        // Applied forces on swing feet are already zero, so a permanent
        // all-stance schedule maps any applied GRF set to body wrenches
        // correctly; the plant needs foot geometry, not gait timing.
        let sched = ContactSchedule {
            stance: vec![[true; NUM_FEET]],
            foot_positions_body: std::array::from_fn(|i| config.gait.foot_position(i)),
            period_s: config.gait.period_s,
            phase_offset_s: 0.0,
        };
        Ok(Self { config, schedules: [sched.clone(), sched], state: initial, steps: 0 })
    }

    pub fn config(&self) -> &PlantConfig {
        &self.config
    }

    pub fn state(&self) -> &GlobalState {
        &self.state
    }

    pub fn time_s(&self) -> f64 {
        self.steps as f64 * self.config.dt
    }

    /// Which bodies have an active push at the given time.
    pub fn disturbance_flags(&self, time_s: f64) -> [bool; 3] {
        let mut flags = [false; 3];
        for d in &self.config.disturbances {
            if d.active_at(time_s) {
                flags[d.body] = true;
            }
        }
        flags
    }

    fn extra_at(&self, time_s: f64) -> ExtraWrenches {
        let mut extra = NO_EXTRA;
        for d in &self.config.disturbances {
            if d.active_at(time_s) {
                extra[d.body].force += d.force_n;
            }
        }
        extra
    }

    /// State derivative under the true model: interaction wrenches are
    /// solved fresh at the evaluation state so every integrator stage sees
    /// consistent constraint forces.
    fn rhs(
        &self,
        x: &GlobalState,
        grfs: &[GrfInput; NUM_AGENTS],
        extra: &ExtraWrenches,
    ) -> Result<(GlobalStateVector, [InteractionWrench; NUM_AGENTS]), CouplingError> {
        let lambda = self.config.model.solve_constraint_wrenches(
            x,
            grfs,
            &self.schedules,
            0,
            extra,
            Some(self.config.baumgarte),
        )?;
        let inp = GlobalInput { grfs: *grfs, wrenches: lambda };
        let dx = self.config.model.global_rhs(x, &inp, &self.schedules, 0, extra)?;
        Ok((dx, lambda))
    }

    /// Advance one substep with classical RK4, holding the applied forces
    /// and any active disturbance constant across the substep. Returns the
    /// wrenches resolved at the substep's initial state.
    pub fn substep(
        &mut self,
        grfs: &[GrfInput; NUM_AGENTS],
    ) -> Result<[InteractionWrench; NUM_AGENTS], PlantError> {
        let t = self.time_s();
        let phi_norm = self.config.model.phi_stack(&self.state).norm();
        if phi_norm > PHI_BLOWUP_LIMIT {
            return Err(PlantError::ConstraintBlowup { time_s: t, phi_norm });
        }
        let extra = self.extra_at(t);
        let h = self.config.dt;
        let x0 = self.state.to_vector();
        let (k1, lambda) = self.rhs(&self.state, grfs, &extra)?;
        let (k2, _) = self.rhs(&GlobalState::from_vector(&(x0 + k1 * (0.5 * h))), grfs, &extra)?;
        let (k3, _) = self.rhs(&GlobalState::from_vector(&(x0 + k2 * (0.5 * h))), grfs, &extra)?;
        let (k4, _) = self.rhs(&GlobalState::from_vector(&(x0 + k3 * h)), grfs, &extra)?;
        let next = x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(PlantError::InvalidConfig {
                reason: format!("integration diverged to a non-finite state at t = {t:.4} s"),
            });
        }
        self.state = GlobalState::from_vector(&next);
        self.steps += 1;
        Ok(lambda)
    }

    /// Advance one full control interval under constant applied forces.
    pub fn tick(
        &mut self,
        grfs: &[GrfInput; NUM_AGENTS],
        control_interval_s: f64,
    ) -> Result<TickInfo, PlantError> {
        let n = self.config.substeps_per_tick(control_interval_s)?;
        let mut first_lambda = None;
        for _ in 0..n {
            let lambda = self.substep(grfs)?;
            first_lambda.get_or_insert(lambda);
        }
        let phi = self.config.model.phi_stack(&self.state);
        let phi_edge_norm =
            std::array::from_fn(|e| phi.fixed_rows::<PHI_DIM>(e * PHI_DIM).norm());
        Ok(TickInfo {
            lambda: first_lambda.unwrap_or([InteractionWrench::default(); NUM_AGENTS]),
            phi_edge_norm,
        })
    }
}

/// What the controller gets to see each tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasurementMode {
    /// Full true state.
    Exact,
    /// Robot states pass through unchanged; the payload state is rebuilt
    /// from them through the rigid attachment geometry.
    ReconstructPayload,
}

/// Produce the controller's view of the true state.
pub fn measure(
    x: &GlobalState,
    geometry: &AttachmentGeometry,
    mode: MeasurementMode,
) -> Result<GlobalState, PlantError> {
    match mode {
        MeasurementMode::Exact => Ok(*x),
        MeasurementMode::ReconstructPayload => {
            let mut m = *x;
            m.bodies[2] = reconstruct_payload(x, geometry)?;
            Ok(m)
        }
    }
}

/// Rebuild the payload state from the two robot states.
///
/// The coupling locks the payload's Euler roll and pitch (and their rates)
/// to both robots', so those come straight from the robot attitudes. Yaw is
/// the remaining rotational unknown; the attachment points pin two known
/// payload-frame points to world positions computed from the robots, and
/// the planar direction of that span fixes yaw. Position follows from the
/// span midpoint, and the velocity-level quantities from differentiating
/// the same relations. On states that satisfy the coupling exactly the
/// reconstruction is exact; measurement noise on the robots is amplified by
/// fixed geometric factors of order one (the span length is the yaw lever).
pub fn reconstruct_payload(
    x: &GlobalState,
    geometry: &AttachmentGeometry,
) -> Result<SrbState, PlantError> {
    let mut b = [Vector3::zeros(); NUM_AGENTS];
    let mut bd = [Vector3::zeros(); NUM_AGENTS];
    let mut roll_pitch = Vector2::zeros();
    let mut roll_pitch_rate = Vector2::zeros();
    for e in 0..NUM_AGENTS {
        let agent = x.agent(e);
        let r = agent.rotation();
        let arm = r * geometry.agent_attach[e];
        b[e] = agent.position + arm;
        bd[e] = agent.velocity + agent.angular_velocity.cross(&arm);
        roll_pitch +=
            0.5 * Vector2::new(agent.orientation.roll, agent.orientation.pitch);
        let rates = euler_rate(&agent.orientation, &agent.angular_velocity)
            .map_err(CouplingError::from)?;
        roll_pitch_rate += 0.5 * Vector2::new(rates.x, rates.y);
    }

    // Attachment span in the world and in the roll/pitch-only payload frame.
    let d_world = b[1] - b[0];
    let dd_world = bd[1] - bd[0];
    let d_body = geometry.payload_attach[1] - geometry.payload_attach[0];
    let tilt = EulerAngles::new(roll_pitch.x, roll_pitch.y, 0.0);
    let u = rotation_from_euler(&tilt) * d_body;
    let tilt_parts = rotation_partials(&tilt);
    let du = (tilt_parts[0] * d_body) * roll_pitch_rate.x
        + (tilt_parts[1] * d_body) * roll_pitch_rate.y;
    if planar_norm(&d_world) < 1e-6 || planar_norm(&u) < 1e-6 {
        return Err(PlantError::DegenerateMeasurement {
            reason: "attachment span has no planar extent; yaw unobservable",
        });
    }
    let yaw = wrap_angle(d_world.y.atan2(d_world.x) - u.y.atan2(u.x));
    let yaw_rate = planar_angle_rate(&d_world, &dd_world) - planar_angle_rate(&u, &du);

    let orientation = EulerAngles::new(roll_pitch.x, roll_pitch.y, yaw);
    let rot = rotation_from_euler(&orientation);
    let r_bar = rot * ((geometry.payload_attach[0] + geometry.payload_attach[1]) * 0.5);
    let position = (b[0] + b[1]) * 0.5 - r_bar;
    let rates = Vector3::new(roll_pitch_rate.x, roll_pitch_rate.y, yaw_rate);
    let angular_velocity = euler_rate_map_inverse(&orientation) * rates;
    let velocity = (bd[0] + bd[1]) * 0.5 - angular_velocity.cross(&r_bar);

    Ok(SrbState { position, orientation, velocity, angular_velocity })
}

fn planar_norm(v: &Vector3<f64>) -> f64 {
    v.xy().norm()
}

/// Rotation rate of a vector's planar direction.
fn planar_angle_rate(v: &Vector3<f64>, vd: &Vector3<f64>) -> f64 {
    (v.x * vd.y - v.y * vd.x) / (v.x * v.x + v.y * v.y)
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut w = a % two_pi;
    if w > std::f64::consts::PI {
        w -= two_pi;
    } else if w <= -std::f64::consts::PI {
        w += two_pi;
    }
    w
}

/// How a closed-loop run ended.
#[derive(Debug, Clone, PartialEq)]
pub enum RunTermination {
    /// All requested ticks ran.
    Completed,
    /// The attachment residual blew past [`PHI_BLOWUP_LIMIT`].
    ConstraintBlowup { time_s: f64, phi_norm: f64 },
    /// The controller returned an error (not a soft fallback — those keep
    /// the loop running).
    ControllerFailure { time_s: f64, message: String },
    /// Integration or measurement failed.
    PlantFailure { time_s: f64, message: String },
}

impl RunTermination {
    pub fn is_completed(&self) -> bool {
        matches!(self, RunTermination::Completed)
    }
}

/// One tick of a closed-loop run. States, clearances, and flags are sampled
/// at the tick start (when the controller acted); attachment norms are taken
/// after the plant advanced.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub time_s: f64,
    /// True plant state at the tick start.
    pub truth: GlobalState,
    /// What the controller saw.
    pub measured: GlobalState,
    /// Current-tick reference target.
    pub reference: GlobalStateVector,
    /// Applied ground forces plus the controller's predicted interaction
    /// wrenches for the first interval.
    pub applied: GlobalInput,
    /// Interaction wrenches the plant resolved when the forces hit.
    pub plant_lambda: [InteractionWrench; NUM_AGENTS],
    /// Per-edge attachment residual norms after the tick.
    pub phi_edge_norm: [f64; NUM_AGENTS],
    /// Planar clearances of every body from every obstacle at the true
    /// state, body-major.
    pub barriers: Vec<f64>,
    pub solve: SolveInfo,
    pub disturbance_active: [bool; 3],
}

/// Uniformly sampled closed-loop time series plus how the run ended.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub control_interval_s: f64,
    pub distance_threshold_m: f64,
    pub obstacles: Vec<Obstacle>,
    pub records: Vec<RunRecord>,
    pub termination: RunTermination,
}

impl RunLog {
    /// Minimum clearance over all bodies, obstacles, and ticks; infinite
    /// when nothing was logged or no obstacles exist.
    pub fn min_barrier(&self) -> f64 {
        self.records
            .iter()
            .flat_map(|r| r.barriers.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest per-edge attachment residual norm seen at any tick boundary.
    pub fn max_phi_norm(&self) -> f64 {
        self.records
            .iter()
            .flat_map(|r| r.phi_edge_norm.iter().copied())
            .fold(0.0, f64::max)
    }
}

/// Run the measure → solve → integrate loop for `ticks` control intervals.
///
/// `references` holds one stacked state target per tick plus the horizon
/// tail (`ticks + horizon + 1` entries at least); the controller at tick `i`
/// sees the window starting at `i`. Runtime failures end the run early with
/// the cause recorded in the returned log; only configuration errors are
/// returned as `Err`.
pub fn run_closed_loop(
    controller: &mut NmpcController,
    plant: &mut Plant,
    references: &[GlobalStateVector],
    ticks: usize,
    mode: MeasurementMode,
) -> Result<RunLog, PlantError> {
    let ts = controller.config.ts;
    plant.config.validate(ts)?;
    let horizon = controller.config.horizon;
    let needed = ticks + horizon + 1;
    if references.len() < needed {
        return Err(PlantError::InvalidConfig {
            reason: format!(
                "{} reference entries provided; {ticks} ticks with horizon {horizon} need {needed}",
                references.len()
            ),
        });
    }
    if (controller.time_s() - plant.time_s()).abs() > 1e-9 {
        return Err(PlantError::InvalidConfig {
            reason: format!(
                "controller clock {} s and plant clock {} s disagree",
                controller.time_s(),
                plant.time_s()
            ),
        });
    }

    let obstacles = controller.config.obstacles.clone();
    let d_th = controller.config.hocbf.distance_threshold_m;
    let mut records = Vec::with_capacity(ticks);
    let mut termination = RunTermination::Completed;

    for i in 0..ticks {
        let t = controller.time_s();
        let truth = *plant.state();
        let measured = match measure(&truth, &controller.config.model.geometry, mode) {
            Ok(m) => m,
            Err(e) => {
                termination = RunTermination::PlantFailure { time_s: t, message: e.to_string() };
                break;
            }
        };
        let step = match controller.step(&measured, &references[i..i + horizon + 1]) {
            Ok(s) => s,
            Err(e) => {
                termination =
                    RunTermination::ControllerFailure { time_s: t, message: e.to_string() };
                break;
            }
        };
        let tick_info = match plant.tick(&step.input.grfs, ts) {
            Ok(info) => info,
            Err(PlantError::ConstraintBlowup { time_s, phi_norm }) => {
                termination = RunTermination::ConstraintBlowup { time_s, phi_norm };
                break;
            }
            Err(e) => {
                termination = RunTermination::PlantFailure { time_s: t, message: e.to_string() };
                break;
            }
        };

        let mut barriers = Vec::with_capacity(3 * obstacles.len());
        for body in &truth.bodies {
            let p = Vector2::new(body.position.x, body.position.y);
            for obs in &obstacles {
                barriers.push(barrier(&p, obs, d_th));
            }
        }
        records.push(RunRecord {
            time_s: t,
            truth,
            measured,
            reference: references[i],
            applied: step.input,
            plant_lambda: tick_info.lambda,
            phi_edge_norm: tick_info.phi_edge_norm,
            barriers,
            solve: step.info,
            disturbance_active: plant.disturbance_flags(t),
        });
    }

    Ok(RunLog {
        control_interval_s: ts,
        distance_threshold_m: d_th,
        obstacles,
        records,
        termination,
    })
}
