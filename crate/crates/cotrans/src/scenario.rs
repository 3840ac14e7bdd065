//! Scenario definition, reference generation, run orchestration, structured
//! logging, summary metrics, and plot-data export.
//!
//! A scenario is a human-editable TOML document with units in every field
//! name. It fixes the controller's nominal model, the plant's true model
//! (defaulting to nominal when omitted), obstacle layout, barrier
//! parameters, the straight-line reference (heading + speed), scheduled
//! pushes, and run length. Running a scenario produces a [`RunLog`]
//! (persisted as columnar CSV plus a compact binary mirror), a
//! deterministic [`RunSummary`] (no wall-clock content, so identical runs
//! produce byte-identical summaries), and a separate [`TimingReport`] that
//! carries the solve-time statistics.

use crate::coupling::{
    AttachmentGeometry, Baumgarte, CoupledModel, GlobalInput, GlobalState, GlobalStateVector,
    InteractionWrench, NUM_AGENTS, PHI_DIM,
};
use crate::nmpc::{NmpcConfig, NmpcController, SolveInfo, SolveStatus, SqpOptions};
use crate::ocp::{FrictionParams, OcpWeights};
use crate::plant::{
    run_closed_loop, Disturbance, MeasurementMode, Plant, PlantConfig, RunLog, RunRecord,
    RunTermination,
};
use crate::safety::{assess_samples, HocbfParams, Obstacle, SafetyReport};
use crate::spatial::{rotation_from_euler, EulerAngles};
use crate::srb::{BodyId, GaitConfig, SrbParams, SrbState, STATE_DIM};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// A tick counts as obstacle-free when every body keeps at least this much
/// clearance beyond the required threshold; tracking quality is reported
/// separately over those segments since the safety filter legitimately
/// overrides tracking near obstacles.
pub const CLEAR_SEGMENT_MARGIN_M: f64 = 0.25;

/// Errors raised by scenario parsing, validation, and log I/O.
#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid scenario: {reason}")]
    Invalid { reason: String },
    #[error("log format mismatch in {path}: {message}")]
    LogFormat { path: String, message: String },
}

impl ScenarioError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        ScenarioError::Io { path: path.display().to_string(), source }
    }

    fn format(path: &Path, message: impl Into<String>) -> Self {
        ScenarioError::LogFormat { path: path.display().to_string(), message: message.into() }
    }
}

// ---------------------------------------------------------------------------
// Scenario specification
// ---------------------------------------------------------------------------

/// Which measurement channel the closed loop uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasurementSpec {
    #[default]
    Exact,
    ReconstructPayload,
}

impl MeasurementSpec {
    pub fn mode(self) -> MeasurementMode {
        match self {
            MeasurementSpec::Exact => MeasurementMode::Exact,
            MeasurementSpec::ReconstructPayload => MeasurementMode::ReconstructPayload,
        }
    }

    fn label(self) -> &'static str {
        match self {
            MeasurementSpec::Exact => "exact",
            MeasurementSpec::ReconstructPayload => "reconstruct-payload",
        }
    }
}

/// How the plant is driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActuationSpec {
    /// Closed loop under the predictive controller.
    #[default]
    Nmpc,
    /// Zero inputs — feet unloaded, no commanded wrenches — so the coupled
    /// assembly moves ballistically. Micro-scenarios use this to exercise
    /// the plant and logging pipeline without a controller in the loop.
    None,
}

/// Straight-line reference: the payload CoM advances from the start point
/// along the heading at constant speed and hover height; robot references
/// keep the rigid formation offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSpec {
    pub start_xy_m: [f64; 2],
    pub heading_rad: f64,
    pub speed_mps: f64,
    pub payload_height_m: f64,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        Self { start_xy_m: [0.0, 0.0], heading_rad: 0.0, speed_mps: 0.0, payload_height_m: 0.33 }
    }
}

/// Barrier-chain parameters plus the monitoring window that separates
/// transient from persistent violations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetySpec {
    pub alpha1: f64,
    pub alpha2: f64,
    pub distance_threshold_m: f64,
    pub transient_max_s: f64,
    /// Constraint tightening: the controller keeps `distance_threshold_m +
    /// controller_margin_m` of clearance while the monitor and all logged
    /// barrier values use `distance_threshold_m` alone, so small
    /// model/integration mismatch cannot turn a boundary graze into a
    /// recorded violation.
    pub controller_margin_m: f64,
}

impl Default for SafetySpec {
    fn default() -> Self {
        Self {
            alpha1: 0.4,
            alpha2: 0.04,
            distance_threshold_m: 0.5,
            transient_max_s: 0.5,
            controller_margin_m: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub x_m: f64,
    pub y_m: f64,
}

/// Mass properties of one side (controller nominal or plant truth). Payload
/// inertia defaults use a box approximation from mass and dimensions; the
/// source experiments report only masses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BodySetSpec {
    pub agent_mass_kg: f64,
    pub agent_inertia_diag_kgm2: [f64; 3],
    pub payload_mass_kg: f64,
    pub payload_inertia_diag_kgm2: [f64; 3],
}

impl Default for BodySetSpec {
    fn default() -> Self {
        Self {
            agent_mass_kg: 15.0,
            agent_inertia_diag_kgm2: [0.16, 0.50, 0.56],
            payload_mass_kg: 5.0,
            payload_inertia_diag_kgm2: [0.047, 0.426, 0.454],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub nominal: BodySetSpec,
    /// Plant-side truth; omitted means "matches nominal".
    pub true_params: Option<BodySetSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySpec {
    pub agent_attach_m: [[f64; 3]; NUM_AGENTS],
    pub payload_attach_m: [[f64; 3]; NUM_AGENTS],
}

impl Default for GeometrySpec {
    fn default() -> Self {
        let g = AttachmentGeometry::default();
        Self {
            agent_attach_m: [g.agent_attach[0].into(), g.agent_attach[1].into()],
            payload_attach_m: [g.payload_attach[0].into(), g.payload_attach[1].into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSpec {
    pub q_position: [f64; 3],
    pub q_attitude: [f64; 3],
    pub q_velocity: [f64; 3],
    pub q_angular: [f64; 3],
    pub terminal_scale: f64,
    pub r_grf: f64,
    pub r_wrench_force: f64,
    pub r_wrench_torque: f64,
    pub slack_penalty: f64,
}

impl Default for WeightsSpec {
    fn default() -> Self {
        let w = OcpWeights::default();
        Self {
            q_position: w.q_position.into(),
            q_attitude: w.q_attitude.into(),
            q_velocity: w.q_velocity.into(),
            q_angular: w.q_angular.into(),
            terminal_scale: w.terminal_scale,
            r_grf: w.r_grf,
            r_wrench_force: w.r_wrench_force,
            r_wrench_torque: w.r_wrench_torque,
            slack_penalty: w.slack_penalty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrictionSpec {
    pub mu: f64,
    pub fz_max_n: f64,
}

impl Default for FrictionSpec {
    fn default() -> Self {
        let f = FrictionParams::default();
        Self { mu: f.mu, fz_max_n: f.fz_max_n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSpec {
    pub start_s: f64,
    pub duration_s: f64,
    pub body: BodyId,
    pub force_n: [f64; 3],
}

fn default_control_rate_hz() -> f64 {
    60.0
}

fn default_horizon() -> usize {
    8
}

fn default_plant_substeps() -> u32 {
    16
}

fn default_true() -> bool {
    true
}

/// Complete scenario document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub duration_s: f64,
    #[serde(default = "default_control_rate_hz")]
    pub control_rate_hz: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_plant_substeps")]
    pub plant_substeps: u32,
    #[serde(default)]
    pub measurement: MeasurementSpec,
    #[serde(default)]
    pub actuation: ActuationSpec,
    #[serde(default = "default_true")]
    pub safety_enabled: bool,
    #[serde(default)]
    pub reference: ReferenceSpec,
    #[serde(default)]
    pub safety: SafetySpec,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub geometry: GeometrySpec,
    #[serde(default)]
    pub weights: WeightsSpec,
    #[serde(default)]
    pub friction: FrictionSpec,
    #[serde(default)]
    pub gait: GaitConfig,
    #[serde(default)]
    pub disturbances: Vec<DisturbanceSpec>,
}

/// Command-line overrides applied on top of a parsed scenario.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub horizon: Option<usize>,
    pub control_interval_s: Option<f64>,
    pub measurement: Option<MeasurementSpec>,
    pub disable_safety: bool,
}

impl ScenarioSpec {
    /// Minimal scenario with every tunable at its default.
    pub fn hover(name: &str, duration_s: f64) -> Self {
        Self {
            name: name.to_string(),
            description: String::new(),
            duration_s,
            control_rate_hz: default_control_rate_hz(),
            horizon: default_horizon(),
            seed: 0,
            plant_substeps: default_plant_substeps(),
            measurement: MeasurementSpec::Exact,
            actuation: ActuationSpec::Nmpc,
            safety_enabled: true,
            reference: ReferenceSpec::default(),
            safety: SafetySpec::default(),
            obstacles: Vec::new(),
            model: ModelSpec::default(),
            geometry: GeometrySpec::default(),
            weights: WeightsSpec::default(),
            friction: FrictionSpec::default(),
            gait: GaitConfig::default(),
            disturbances: Vec::new(),
        }
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ScenarioError> {
        let spec: ScenarioSpec = toml::from_str(text)
            .map_err(|e| ScenarioError::Parse { path: origin.to_string(), message: e.to_string() })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> Result<String, ScenarioError> {
        toml::to_string_pretty(self)
            .map_err(|e| ScenarioError::Invalid { reason: e.to_string() })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(horizon) = o.horizon {
            self.horizon = horizon;
        }
        if let Some(dt) = o.control_interval_s {
            self.control_rate_hz = 1.0 / dt;
        }
        if let Some(m) = o.measurement {
            self.measurement = m;
        }
        if o.disable_safety {
            self.safety_enabled = false;
        }
    }

    pub fn control_interval_s(&self) -> f64 {
        1.0 / self.control_rate_hz
    }

    pub fn ticks(&self) -> usize {
        (self.duration_s * self.control_rate_hz).round() as usize
    }

    pub fn attachment_geometry(&self) -> Result<AttachmentGeometry, ScenarioError> {
        AttachmentGeometry::new(
            [self.geometry.agent_attach_m[0].into(), self.geometry.agent_attach_m[1].into()],
            [self.geometry.payload_attach_m[0].into(), self.geometry.payload_attach_m[1].into()],
        )
        .map_err(|e| ScenarioError::Invalid { reason: e.to_string() })
    }

    fn coupled_model(&self, set: &BodySetSpec) -> Result<CoupledModel, ScenarioError> {
        let agent = |id| {
            SrbParams::from_inertia_diagonal(id, set.agent_mass_kg, set.agent_inertia_diag_kgm2.into())
        };
        let payload = SrbParams::from_inertia_diagonal(
            BodyId::Payload,
            set.payload_mass_kg,
            set.payload_inertia_diag_kgm2.into(),
        );
        CoupledModel::new(
            [
                agent(BodyId::Agent1).map_err(|e| ScenarioError::Invalid { reason: e.to_string() })?,
                agent(BodyId::Agent2).map_err(|e| ScenarioError::Invalid { reason: e.to_string() })?,
            ],
            payload.map_err(|e| ScenarioError::Invalid { reason: e.to_string() })?,
            self.attachment_geometry()?,
        )
        .map_err(|e| ScenarioError::Invalid { reason: e.to_string() })
    }

    /// Controller-side model.
    pub fn nominal_model(&self) -> Result<CoupledModel, ScenarioError> {
        self.coupled_model(&self.model.nominal)
    }

    /// Plant-side model (nominal when no explicit truth given).
    pub fn true_model(&self) -> Result<CoupledModel, ScenarioError> {
        self.coupled_model(self.model.true_params.as_ref().unwrap_or(&self.model.nominal))
    }

    pub fn ocp_weights(&self) -> OcpWeights {
        OcpWeights {
            q_position: self.weights.q_position.into(),
            q_attitude: self.weights.q_attitude.into(),
            q_velocity: self.weights.q_velocity.into(),
            q_angular: self.weights.q_angular.into(),
            terminal_scale: self.weights.terminal_scale,
            r_grf: self.weights.r_grf,
            r_wrench_force: self.weights.r_wrench_force,
            r_wrench_torque: self.weights.r_wrench_torque,
            slack_penalty: self.weights.slack_penalty,
        }
    }

    /// Barrier parameters as enforced by the controller (threshold
    /// tightened by the configured margin).
    pub fn hocbf_params(&self) -> Result<HocbfParams, ScenarioError> {
        if !(self.safety.controller_margin_m >= 0.0 && self.safety.controller_margin_m.is_finite())
        {
            return Err(ScenarioError::Invalid {
                reason: format!(
                    "controller margin {} m must be nonnegative",
                    self.safety.controller_margin_m
                ),
            });
        }
        HocbfParams::new(
            self.safety.alpha1,
            self.safety.alpha2,
            self.safety.distance_threshold_m + self.safety.controller_margin_m,
        )
        .map_err(|e| ScenarioError::Invalid { reason: e.to_string() })
    }

    pub fn obstacle_list(&self) -> Vec<Obstacle> {
        self.obstacles.iter().map(|o| Obstacle::new(o.x_m, o.y_m)).collect()
    }

    pub fn nmpc_config(&self) -> Result<NmpcConfig, ScenarioError> {
        let config = NmpcConfig {
            model: self.nominal_model()?,
            weights: self.ocp_weights(),
            friction: FrictionParams { mu: self.friction.mu, fz_max_n: self.friction.fz_max_n },
            hocbf: self.hocbf_params()?,
            obstacles: self.obstacle_list(),
            safety_enabled: self.safety_enabled,
            gait: self.gait.clone(),
            horizon: self.horizon,
            ts: self.control_interval_s(),
            sqp: SqpOptions::default(),
        };
        config.validate().map_err(|e| ScenarioError::Invalid { reason: e.to_string() })?;
        Ok(config)
    }

    pub fn plant_config(&self) -> Result<PlantConfig, ScenarioError> {
        let disturbances = self
            .disturbances
            .iter()
            .map(|d| Disturbance {
                start_s: d.start_s,
                duration_s: d.duration_s,
                body: d.body.index(),
                force_n: d.force_n.into(),
            })
            .collect();
        let config = PlantConfig {
            model: self.true_model()?,
            gait: self.gait.clone(),
            dt: self.control_interval_s() / self.plant_substeps as f64,
            baumgarte: Baumgarte::default(),
            disturbances,
        };
        config
            .validate(self.control_interval_s())
            .map_err(|e| ScenarioError::Invalid { reason: e.to_string() })?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.name.is_empty() {
            return Err(ScenarioError::Invalid { reason: "name must not be empty".into() });
        }
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            return Err(ScenarioError::Invalid {
                reason: format!("duration {} s must be nonnegative", self.duration_s),
            });
        }
        if !(self.control_rate_hz > 0.0 && self.control_rate_hz.is_finite()) {
            return Err(ScenarioError::Invalid {
                reason: format!("control rate {} Hz must be positive", self.control_rate_hz),
            });
        }
        if self.plant_substeps == 0 {
            return Err(ScenarioError::Invalid {
                reason: "plant_substeps must be at least 1".into(),
            });
        }
        if !(self.reference.speed_mps >= 0.0 && self.reference.speed_mps.is_finite()) {
            return Err(ScenarioError::Invalid {
                reason: format!("reference speed {} m/s must be nonnegative", self.reference.speed_mps),
            });
        }
        if !(self.safety.transient_max_s > 0.0 && self.safety.transient_max_s.is_finite()) {
            return Err(ScenarioError::Invalid {
                reason: format!(
                    "transient window {} s must be positive",
                    self.safety.transient_max_s
                ),
            });
        }
        self.nmpc_config()?;
        self.plant_config()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// References and initial state
// ---------------------------------------------------------------------------

/// Reference state of the whole assembly at elapsed time `t`: the payload
/// slides along the heading at constant speed, the robots hold the rigid
/// formation offsets, with yaws fixed (payload broadside to the heading).
pub fn reference_state(spec: &ScenarioSpec, t: f64) -> Result<GlobalState, ScenarioError> {
    let geometry = spec.attachment_geometry()?;
    let r = &spec.reference;
    let dir = Vector3::new(r.heading_rad.cos(), r.heading_rad.sin(), 0.0);
    let velocity = dir * r.speed_mps;
    let payload_yaw = r.heading_rad + std::f64::consts::FRAC_PI_2;
    let payload_pos = Vector3::new(r.start_xy_m[0], r.start_xy_m[1], r.payload_height_m)
        + velocity * t;
    let rot_payload = rotation_from_euler(&EulerAngles::new(0.0, 0.0, payload_yaw));
    let rot_agent = rotation_from_euler(&EulerAngles::new(0.0, 0.0, r.heading_rad));

    let mut x = GlobalState::default();
    x.bodies[2] = SrbState {
        position: payload_pos,
        orientation: EulerAngles::new(0.0, 0.0, payload_yaw),
        velocity,
        angular_velocity: Vector3::zeros(),
    };
    for e in 0..NUM_AGENTS {
        x.bodies[e] = SrbState {
            position: payload_pos + rot_payload * geometry.payload_attach[e]
                - rot_agent * geometry.agent_attach[e],
            orientation: EulerAngles::new(0.0, 0.0, r.heading_rad),
            velocity,
            angular_velocity: Vector3::zeros(),
        };
    }
    Ok(x)
}

/// Stacked reference targets for `count` ticks starting at `t = 0`.
pub fn generate_references(
    spec: &ScenarioSpec,
    count: usize,
) -> Result<Vec<GlobalStateVector>, ScenarioError> {
    let ts = spec.control_interval_s();
    (0..count).map(|k| Ok(reference_state(spec, k as f64 * ts)?.to_vector())).collect()
}

/// Runs start exactly on the reference path.
pub fn initial_state(spec: &ScenarioSpec) -> Result<GlobalState, ScenarioError> {
    reference_state(spec, 0.0)
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

/// Everything a scenario run produces.
pub struct ScenarioOutcome {
    pub spec: ScenarioSpec,
    pub meta: LogMeta,
    pub log: RunLog,
    pub summary: RunSummary,
    pub timing: TimingReport,
}

impl ScenarioOutcome {
    /// Process exit code mirroring the summary: 0 success, 3 dynamics
    /// failure, 4 persistent safety violation.
    pub fn exit_code(&self) -> i32 {
        match self.meta.termination {
            TerminationMeta::Completed => {
                if self.summary.violation_count > 0 && !self.summary.violations_all_transient {
                    4
                } else {
                    0
                }
            }
            _ => 3,
        }
    }
}

/// Execute the run a scenario describes (closed loop under the controller,
/// or zero-input plant propagation for `actuation = "none"`).
pub fn run_scenario(spec: &ScenarioSpec) -> Result<ScenarioOutcome, ScenarioError> {
    spec.validate()?;
    let mut plant = Plant::new(spec.plant_config()?, initial_state(spec)?)
        .map_err(|e| ScenarioError::Invalid { reason: e.to_string() })?;
    let ticks = spec.ticks();
    let references = generate_references(spec, ticks + spec.horizon + 1)?;
    let log = match spec.actuation {
        ActuationSpec::Nmpc => {
            let mut controller = NmpcController::new(spec.nmpc_config()?)
                .map_err(|e| ScenarioError::Invalid { reason: e.to_string() })?;
            let mut log = run_closed_loop(
                &mut controller,
                &mut plant,
                &references,
                ticks,
                spec.measurement.mode(),
            )
            .map_err(|e| ScenarioError::Invalid { reason: e.to_string() })?;
            remonitor_barriers(&mut log, spec);
            log
        }
        ActuationSpec::None => zero_input_log(spec, &mut plant, &references, ticks)?,
    };
    let meta = LogMeta::new(spec, &log);
    let summary = RunSummary::from_log(&log, &meta);
    let timing = TimingReport::from_log(&log);
    Ok(ScenarioOutcome { spec: spec.clone(), meta, log, summary, timing })
}

/// The controller may enforce a tightened clearance threshold; the log and
/// everything derived from it always grade clearance at the scenario's
/// monitor threshold, so rewrite the recorded barrier rows from truth.
fn remonitor_barriers(log: &mut RunLog, spec: &ScenarioSpec) {
    use crate::safety::barrier;
    let d_th = spec.safety.distance_threshold_m;
    log.distance_threshold_m = d_th;
    let obstacles = log.obstacles.clone();
    for rec in &mut log.records {
        let mut barriers = Vec::with_capacity(3 * obstacles.len());
        for body in &rec.truth.bodies {
            let p = nalgebra::Vector2::new(body.position.x, body.position.y);
            for obs in &obstacles {
                barriers.push(barrier(&p, obs, d_th));
            }
        }
        rec.barriers = barriers;
    }
}

/// Propagate the plant with zero inputs, recording the same bookkeeping the
/// closed loop produces (quiet solver columns, clearances from truth).
fn zero_input_log(
    spec: &ScenarioSpec,
    plant: &mut Plant,
    references: &[GlobalStateVector],
    ticks: usize,
) -> Result<RunLog, ScenarioError> {
    use crate::plant::{measure, PlantError};
    use crate::safety::barrier;
    use crate::srb::GrfInput;

    let geometry = spec.nominal_model()?.geometry;
    let obstacles = spec.obstacle_list();
    let d_th = spec.safety.distance_threshold_m;
    let ts = spec.control_interval_s();
    let zero_grfs = [GrfInput::default(); NUM_AGENTS];
    let quiet_solve = SolveInfo {
        status: SolveStatus::Converged,
        sqp_iterations: 0,
        qp_iterations: 0,
        kkt_worst: 0.0,
        slack_l1: 0.0,
        cost: 0.0,
        solve_time_ms: 0.0,
    };

    let mut records = Vec::with_capacity(ticks);
    let mut termination = RunTermination::Completed;
    for i in 0..ticks {
        let t = plant.time_s();
        let truth = *plant.state();
        let measured = match measure(&truth, &geometry, spec.measurement.mode()) {
            Ok(m) => m,
            Err(e) => {
                termination = RunTermination::PlantFailure { time_s: t, message: e.to_string() };
                break;
            }
        };
        let tick_info = match plant.tick(&zero_grfs, ts) {
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
            let p = nalgebra::Vector2::new(body.position.x, body.position.y);
            for obs in &obstacles {
                barriers.push(barrier(&p, obs, d_th));
            }
        }
        records.push(RunRecord {
            time_s: t,
            truth,
            measured,
            reference: references[i],
            applied: GlobalInput::default(),
            plant_lambda: tick_info.lambda,
            phi_edge_norm: tick_info.phi_edge_norm,
            barriers,
            solve: quiet_solve,
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

// ---------------------------------------------------------------------------
// Summary and timing
// ---------------------------------------------------------------------------

/// Minimum clearance of one (body, obstacle) pair over the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairClearance {
    pub body: String,
    pub obstacle: usize,
    pub min_h_m: f64,
}

/// One recorded violation excursion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationSummary {
    pub start_s: f64,
    pub end_s: f64,
    pub min_h_m: f64,
    pub recovered: bool,
}

/// Deterministic digest of a run: pure function of the log and the scenario
/// echo, with no wall-clock content. Re-summarizing a stored log reproduces
/// it byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub horizon: usize,
    pub control_rate_hz: f64,
    pub requested_duration_s: f64,
    pub ticks_completed: usize,
    pub status: String,
    pub status_detail: String,
    pub safety_enabled: bool,
    pub measurement: String,
    pub min_h_m: f64,
    pub violation_count: usize,
    pub violations_all_transient: bool,
    pub longest_violation_s: f64,
    pub total_slack: f64,
    pub max_slack: f64,
    pub velocity_rmse_mps: f64,
    pub clear_velocity_rmse_mps: f64,
    pub payload_velocity_rmse_mps: f64,
    pub payload_position_rmse_m: f64,
    pub payload_yaw_rmse_rad: f64,
    pub phi_max: f64,
    pub lambda_rms_discrepancy_pct: f64,
    pub ticks_converged: usize,
    pub ticks_iteration_limit: usize,
    pub ticks_fallback: usize,
    pub mean_sqp_iterations: f64,
    pub max_kkt: f64,
    pub min_h_per_pair: Vec<PairClearance>,
    pub violations: Vec<ViolationSummary>,
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

fn rmse(sum_sq: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (sum_sq / n as f64).sqrt()
    }
}

impl RunSummary {
    pub fn from_log(log: &RunLog, meta: &LogMeta) -> Self {
        let records = &log.records;
        let n_obs = log.obstacles.len();
        let body_names = ["agent1", "agent2", "payload"];

        // Per-pair clearance minima (body-major, matching the record layout).
        let mut min_h_per_pair = Vec::with_capacity(3 * n_obs);
        for (b, name) in body_names.iter().enumerate() {
            for o in 0..n_obs {
                let min_h = records
                    .iter()
                    .map(|r| r.barriers[b * n_obs + o])
                    .fold(f64::INFINITY, f64::min);
                min_h_per_pair.push(PairClearance {
                    body: name.to_string(),
                    obstacle: o,
                    min_h_m: min_h,
                });
            }
        }

        // Violation classification over the per-tick worst clearance.
        let samples: Vec<(f64, f64)> = records
            .iter()
            .map(|r| {
                (r.time_s, r.barriers.iter().copied().fold(f64::INFINITY, f64::min))
            })
            .collect();
        let report: SafetyReport = assess_samples(&samples, meta.transient_max_s);
        let violations: Vec<ViolationSummary> = report
            .violations
            .iter()
            .map(|v| ViolationSummary {
                start_s: v.start_s,
                end_s: v.end_s,
                min_h_m: v.min_value,
                recovered: v.recovered,
            })
            .collect();
        let longest_violation_s =
            report.violations.iter().map(|v| v.duration_s()).fold(0.0, f64::max);

        // Tracking errors against the logged references.
        let mut vel_sq = 0.0;
        let mut vel_n = 0usize;
        let mut clear_sq = 0.0;
        let mut clear_n = 0usize;
        let mut pl_vel_sq = 0.0;
        let mut pl_pos_sq = 0.0;
        let mut yaw_sq = 0.0;
        for (rec, (_, min_h)) in records.iter().zip(&samples) {
            let clear = n_obs == 0 || *min_h >= CLEAR_SEGMENT_MARGIN_M;
            for b in 0..3 {
                let v = rec.truth.bodies[b].velocity;
                let off = b * STATE_DIM + 6;
                let vr = Vector3::new(
                    rec.reference[off],
                    rec.reference[off + 1],
                    rec.reference[off + 2],
                );
                let err = (v - vr).norm_squared();
                vel_sq += err;
                vel_n += 3;
                if clear {
                    clear_sq += err;
                    clear_n += 3;
                }
                if b == 2 {
                    pl_vel_sq += err;
                }
            }
            let p = rec.truth.bodies[2].position;
            let off = 2 * STATE_DIM;
            let pr = Vector3::new(
                rec.reference[off],
                rec.reference[off + 1],
                rec.reference[off + 2],
            );
            pl_pos_sq += (p - pr).norm_squared();
            let yaw_err =
                wrap_angle(rec.truth.bodies[2].orientation.yaw - rec.reference[off + 5]);
            yaw_sq += yaw_err * yaw_err;
        }

        // Interaction-wrench consistency between plant and prediction.
        let mut lam_diff_sq = 0.0;
        let mut lam_ref_sq = 0.0;
        for rec in records {
            for e in 0..NUM_AGENTS {
                let plant = rec.plant_lambda[e].to_vector();
                let predicted = rec.applied.wrenches[e].to_vector();
                lam_diff_sq += (plant - predicted).norm_squared();
                lam_ref_sq += plant.norm_squared();
            }
        }
        let lambda_rms_discrepancy_pct = if lam_ref_sq > 0.0 {
            100.0 * (lam_diff_sq / lam_ref_sq).sqrt()
        } else {
            0.0
        };

        let total_slack: f64 = records.iter().map(|r| r.solve.slack_l1.max(0.0)).sum();
        let max_slack = records.iter().map(|r| r.solve.slack_l1).fold(0.0, f64::max);
        let phi_max = log.max_phi_norm();
        let ticks_converged = records
            .iter()
            .filter(|r| r.solve.status == SolveStatus::Converged)
            .count();
        let ticks_iteration_limit = records
            .iter()
            .filter(|r| r.solve.status == SolveStatus::IterationLimit)
            .count();
        let ticks_fallback = records
            .iter()
            .filter(|r| r.solve.status == SolveStatus::InfeasibleFallback)
            .count();
        let mean_sqp_iterations = if records.is_empty() {
            0.0
        } else {
            records.iter().map(|r| r.solve.sqp_iterations as f64).sum::<f64>()
                / records.len() as f64
        };
        let max_kkt = records
            .iter()
            .map(|r| r.solve.kkt_worst)
            .filter(|k| k.is_finite())
            .fold(0.0, f64::max);

        RunSummary {
            name: meta.name.clone(),
            seed: meta.seed,
            horizon: meta.horizon,
            control_rate_hz: meta.control_rate_hz,
            requested_duration_s: meta.duration_s,
            ticks_completed: records.len(),
            status: meta.termination.label().to_string(),
            status_detail: meta.termination.detail(),
            safety_enabled: meta.safety_enabled,
            measurement: meta.measurement.clone(),
            min_h_m: report.min_value,
            violation_count: violations.len(),
            violations_all_transient: report.all_transient,
            longest_violation_s,
            total_slack,
            max_slack,
            velocity_rmse_mps: rmse(vel_sq, vel_n),
            clear_velocity_rmse_mps: rmse(clear_sq, clear_n),
            payload_velocity_rmse_mps: rmse(pl_vel_sq, records.len() * 3),
            payload_position_rmse_m: rmse(pl_pos_sq, records.len() * 3),
            payload_yaw_rmse_rad: rmse(yaw_sq, records.len()),
            phi_max,
            lambda_rms_discrepancy_pct,
            ticks_converged,
            ticks_iteration_limit,
            ticks_fallback,
            mean_sqp_iterations,
            max_kkt,
            min_h_per_pair,
            violations,
        }
    }

    pub fn to_toml_string(&self) -> Result<String, ScenarioError> {
        toml::to_string_pretty(self)
            .map_err(|e| ScenarioError::Invalid { reason: e.to_string() })
    }
}

/// Wall-clock solve-time statistics, kept out of [`RunSummary`] so summaries
/// stay byte-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub solves: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub total_ms: f64,
}

impl TimingReport {
    pub fn from_log(log: &RunLog) -> Self {
        let times: Vec<f64> = log.records.iter().map(|r| r.solve.solve_time_ms).collect();
        if times.is_empty() {
            return Self { solves: 0, mean_ms: 0.0, std_ms: 0.0, min_ms: 0.0, max_ms: 0.0, total_ms: 0.0 };
        }
        let n = times.len() as f64;
        let total: f64 = times.iter().sum();
        let mean = total / n;
        let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
        Self {
            solves: times.len(),
            mean_ms: mean,
            std_ms: var.sqrt(),
            min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
            max_ms: times.iter().copied().fold(0.0, f64::max),
            total_ms: total,
        }
    }

    pub fn to_toml_string(&self) -> Result<String, ScenarioError> {
        toml::to_string_pretty(self)
            .map_err(|e| ScenarioError::Invalid { reason: e.to_string() })
    }
}

// ---------------------------------------------------------------------------
// Log persistence
// ---------------------------------------------------------------------------

/// Serializable mirror of [`RunTermination`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TerminationMeta {
    Completed,
    ConstraintBlowup { time_s: f64, phi_norm: f64 },
    ControllerFailure { time_s: f64, message: String },
    PlantFailure { time_s: f64, message: String },
}

impl TerminationMeta {
    fn from_run(t: &RunTermination) -> Self {
        match t {
            RunTermination::Completed => TerminationMeta::Completed,
            RunTermination::ConstraintBlowup { time_s, phi_norm } => {
                TerminationMeta::ConstraintBlowup { time_s: *time_s, phi_norm: *phi_norm }
            }
            RunTermination::ControllerFailure { time_s, message } => {
                TerminationMeta::ControllerFailure { time_s: *time_s, message: message.clone() }
            }
            RunTermination::PlantFailure { time_s, message } => {
                TerminationMeta::PlantFailure { time_s: *time_s, message: message.clone() }
            }
        }
    }

    fn to_run(&self) -> RunTermination {
        match self {
            TerminationMeta::Completed => RunTermination::Completed,
            TerminationMeta::ConstraintBlowup { time_s, phi_norm } => {
                RunTermination::ConstraintBlowup { time_s: *time_s, phi_norm: *phi_norm }
            }
            TerminationMeta::ControllerFailure { time_s, message } => {
                RunTermination::ControllerFailure { time_s: *time_s, message: message.clone() }
            }
            TerminationMeta::PlantFailure { time_s, message } => {
                RunTermination::PlantFailure { time_s: *time_s, message: message.clone() }
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            TerminationMeta::Completed => "completed",
            TerminationMeta::ConstraintBlowup { .. } => "constraint-blowup",
            TerminationMeta::ControllerFailure { .. } => "controller-failure",
            TerminationMeta::PlantFailure { .. } => "plant-failure",
        }
    }

    pub fn detail(&self) -> String {
        match self {
            TerminationMeta::Completed => String::new(),
            TerminationMeta::ConstraintBlowup { time_s, phi_norm } => {
                format!("attachment residual {phi_norm:.6e} at t = {time_s:.4} s")
            }
            TerminationMeta::ControllerFailure { time_s, message }
            | TerminationMeta::PlantFailure { time_s, message } => {
                format!("{message} at t = {time_s:.4} s")
            }
        }
    }
}

/// Run context embedded in every log file so logs are self-describing: a
/// summary can be rebuilt from the log alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMeta {
    pub name: String,
    pub seed: u64,
    pub horizon: usize,
    pub control_rate_hz: f64,
    pub duration_s: f64,
    pub plant_substeps: u32,
    pub measurement: String,
    pub safety_enabled: bool,
    pub distance_threshold_m: f64,
    pub controller_margin_m: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub transient_max_s: f64,
    pub obstacles: Vec<[f64; 2]>,
    pub nominal_payload_mass_kg: f64,
    pub true_payload_mass_kg: f64,
    pub termination: TerminationMeta,
}

impl LogMeta {
    pub fn new(spec: &ScenarioSpec, log: &RunLog) -> Self {
        let truth = spec.model.true_params.as_ref().unwrap_or(&spec.model.nominal);
        Self {
            name: spec.name.clone(),
            seed: spec.seed,
            horizon: spec.horizon,
            control_rate_hz: spec.control_rate_hz,
            duration_s: spec.duration_s,
            plant_substeps: spec.plant_substeps,
            measurement: spec.measurement.label().to_string(),
            safety_enabled: spec.safety_enabled,
            distance_threshold_m: spec.safety.distance_threshold_m,
            controller_margin_m: spec.safety.controller_margin_m,
            alpha1: spec.safety.alpha1,
            alpha2: spec.safety.alpha2,
            transient_max_s: spec.safety.transient_max_s,
            obstacles: spec.obstacles.iter().map(|o| [o.x_m, o.y_m]).collect(),
            nominal_payload_mass_kg: spec.model.nominal.payload_mass_kg,
            true_payload_mass_kg: truth.payload_mass_kg,
            termination: TerminationMeta::from_run(&log.termination),
        }
    }
}

const LOG_COMMENT_TAG: &str = "# cotrans-log v1";
const BIN_MAGIC: &[u8; 8] = b"CTRNLG1\0";
const BODY_TAGS: [&str; 3] = ["a1", "a2", "pl"];
const STATE_TAGS: [&str; STATE_DIM] =
    ["px", "py", "pz", "roll", "pitch", "yaw", "vx", "vy", "vz", "wx", "wy", "wz"];
const WRENCH_TAGS: [&str; PHI_DIM] = ["fx", "fy", "fz", "tr", "tp"];

/// Column names of the numeric log matrix for a given obstacle count.
pub fn log_columns(n_obstacles: usize) -> Vec<String> {
    let mut cols = vec!["time_s".to_string()];
    for body in BODY_TAGS {
        for tag in STATE_TAGS {
            cols.push(format!("{body}_{tag}"));
        }
    }
    for tag in STATE_TAGS {
        cols.push(format!("m_pl_{tag}"));
    }
    for body in BODY_TAGS {
        for tag in STATE_TAGS {
            cols.push(format!("r_{body}_{tag}"));
        }
    }
    for e in 0..NUM_AGENTS {
        for foot in 0..4 {
            for axis in ["x", "y", "z"] {
                cols.push(format!("a{}_f{foot}{axis}", e + 1));
            }
        }
    }
    for e in 0..NUM_AGENTS {
        for tag in WRENCH_TAGS {
            cols.push(format!("lam{}_{tag}", e + 1));
        }
    }
    for e in 0..NUM_AGENTS {
        for tag in WRENCH_TAGS {
            cols.push(format!("plam{}_{tag}", e + 1));
        }
    }
    cols.push("phi_e1".into());
    cols.push("phi_e2".into());
    for body in BODY_TAGS {
        for o in 0..n_obstacles {
            cols.push(format!("h_{body}_o{o}"));
        }
    }
    for tag in ["status", "sqp_iters", "qp_iters", "kkt", "slack_l1", "cost", "solve_ms"] {
        cols.push(tag.to_string());
    }
    for body in BODY_TAGS {
        cols.push(format!("dist_{body}"));
    }
    cols
}

fn record_to_row(rec: &RunRecord, n_obstacles: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(log_columns(n_obstacles).len());
    row.push(rec.time_s);
    row.extend(rec.truth.to_vector().iter());
    row.extend(rec.measured.bodies[2].to_vector().iter());
    row.extend(rec.reference.iter());
    for e in 0..NUM_AGENTS {
        row.extend(rec.applied.grfs[e].to_vector().iter());
    }
    for e in 0..NUM_AGENTS {
        row.extend(rec.applied.wrenches[e].to_vector().iter());
    }
    for e in 0..NUM_AGENTS {
        row.extend(rec.plant_lambda[e].to_vector().iter());
    }
    row.extend(rec.phi_edge_norm);
    assert_eq!(rec.barriers.len(), 3 * n_obstacles, "barrier column count mismatch");
    row.extend(rec.barriers.iter());
    row.push(rec.solve.status.code() as f64);
    row.push(rec.solve.sqp_iterations as f64);
    row.push(rec.solve.qp_iterations as f64);
    row.push(rec.solve.kkt_worst);
    row.push(rec.solve.slack_l1);
    row.push(rec.solve.cost);
    row.push(rec.solve.solve_time_ms);
    row.extend(rec.disturbance_active.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    row
}

fn status_from_code(code: i64) -> Result<SolveStatus, String> {
    match code {
        0 => Ok(SolveStatus::Converged),
        1 => Ok(SolveStatus::IterationLimit),
        2 => Ok(SolveStatus::InfeasibleFallback),
        other => Err(format!("unknown solve status code {other}")),
    }
}

fn row_to_record(row: &[f64], n_obstacles: usize) -> Result<RunRecord, String> {
    let expected = log_columns(n_obstacles).len();
    if row.len() != expected {
        return Err(format!("row has {} values, expected {expected}", row.len()));
    }
    let mut at = 0usize;
    let mut take = |n: usize| {
        let slice = &row[at..at + n];
        at += n;
        slice
    };
    let time_s = take(1)[0];
    let truth = GlobalState::from_vector(&GlobalStateVector::from_column_slice(take(36)));
    let measured_payload =
        SrbState::from_vector(&nalgebra::SVector::<f64, STATE_DIM>::from_column_slice(take(12)));
    let mut measured = truth;
    measured.bodies[2] = measured_payload;
    let reference = GlobalStateVector::from_column_slice(take(36));
    let mut applied = GlobalInput::default();
    for e in 0..NUM_AGENTS {
        applied.grfs[e] =
            crate::srb::GrfInput::from_vector(&nalgebra::SVector::from_column_slice(take(12)));
    }
    for e in 0..NUM_AGENTS {
        applied.wrenches[e] =
            InteractionWrench::from_vector(&nalgebra::SVector::from_column_slice(take(5)));
    }
    let mut plant_lambda = [InteractionWrench::default(); NUM_AGENTS];
    for lam in plant_lambda.iter_mut() {
        *lam = InteractionWrench::from_vector(&nalgebra::SVector::from_column_slice(take(5)));
    }
    let phi = take(2);
    let phi_edge_norm = [phi[0], phi[1]];
    let barriers = take(3 * n_obstacles).to_vec();
    let solve_cols = take(7);
    let solve = SolveInfo {
        status: status_from_code(solve_cols[0] as i64)?,
        sqp_iterations: solve_cols[1] as usize,
        qp_iterations: solve_cols[2] as usize,
        kkt_worst: solve_cols[3],
        slack_l1: solve_cols[4],
        cost: solve_cols[5],
        solve_time_ms: solve_cols[6],
    };
    let flags = take(3);
    let disturbance_active = [flags[0] != 0.0, flags[1] != 0.0, flags[2] != 0.0];
    Ok(RunRecord {
        time_s,
        truth,
        measured,
        reference,
        applied,
        plant_lambda,
        phi_edge_norm,
        barriers,
        solve,
        disturbance_active,
    })
}

fn rebuild_log(meta: &LogMeta, rows: Vec<Vec<f64>>, path: &Path) -> Result<RunLog, ScenarioError> {
    let n_obstacles = meta.obstacles.len();
    let records = rows
        .iter()
        .map(|row| row_to_record(row, n_obstacles))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|m| ScenarioError::format(path, m))?;
    Ok(RunLog {
        control_interval_s: 1.0 / meta.control_rate_hz,
        distance_threshold_m: meta.distance_threshold_m,
        obstacles: meta.obstacles.iter().map(|o| Obstacle::new(o[0], o[1])).collect(),
        records,
        termination: meta.termination.to_run(),
    })
}

/// Write the columnar text log: two `#` header lines (format tag, then the
/// run context as JSON) followed by CSV. Floats print in shortest
/// round-trip form, so reading the file back reproduces exact bits.
pub fn write_log_csv(path: &Path, log: &RunLog, meta: &LogMeta) -> Result<(), ScenarioError> {
    let mut file = std::fs::File::create(path).map_err(|e| ScenarioError::io(path, e))?;
    let meta_json = serde_json::to_string(meta)
        .map_err(|e| ScenarioError::Invalid { reason: e.to_string() })?;
    writeln!(file, "{LOG_COMMENT_TAG}").map_err(|e| ScenarioError::io(path, e))?;
    writeln!(file, "# {meta_json}").map_err(|e| ScenarioError::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    let n_obstacles = log.obstacles.len();
    writer
        .write_record(log_columns(n_obstacles))
        .map_err(|e| ScenarioError::format(path, e.to_string()))?;
    for rec in &log.records {
        let row: Vec<String> =
            record_to_row(rec, n_obstacles).iter().map(|v| format!("{v}")).collect();
        writer.write_record(&row).map_err(|e| ScenarioError::format(path, e.to_string()))?;
    }
    writer.flush().map_err(|e| ScenarioError::io(path, e))?;
    Ok(())
}

/// Read a text log produced by [`write_log_csv`].
pub fn read_log_csv(path: &Path) -> Result<(RunLog, LogMeta), ScenarioError> {
    let file = std::fs::File::open(path).map_err(|e| ScenarioError::io(path, e))?;
    let mut reader = std::io::BufReader::new(file);
    let mut tag = String::new();
    reader.read_line(&mut tag).map_err(|e| ScenarioError::io(path, e))?;
    if tag.trim_end() != LOG_COMMENT_TAG {
        return Err(ScenarioError::format(path, "missing log format tag"));
    }
    let mut meta_line = String::new();
    reader.read_line(&mut meta_line).map_err(|e| ScenarioError::io(path, e))?;
    let meta_json = meta_line
        .trim_end()
        .strip_prefix("# ")
        .ok_or_else(|| ScenarioError::format(path, "missing metadata line"))?;
    let meta: LogMeta = serde_json::from_str(meta_json)
        .map_err(|e| ScenarioError::format(path, format!("metadata: {e}")))?;

    let mut csv_reader = csv::Reader::from_reader(reader);
    let expected = log_columns(meta.obstacles.len());
    let headers = csv_reader
        .headers()
        .map_err(|e| ScenarioError::format(path, e.to_string()))?
        .clone();
    if headers.iter().map(str::to_string).collect::<Vec<_>>() != expected {
        return Err(ScenarioError::format(path, "column names do not match the log schema"));
    }
    let mut rows = Vec::new();
    for record in csv_reader.records() {
        let record = record.map_err(|e| ScenarioError::format(path, e.to_string()))?;
        let row = record
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| format!("bad float {s:?}: {e}")))
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|m| ScenarioError::format(path, m))?;
        rows.push(row);
    }
    let log = rebuild_log(&meta, rows, path)?;
    Ok((log, meta))
}

/// Write the compact binary mirror: magic, JSON metadata block, dimensions,
/// then the row-major `f64` matrix in little-endian order.
pub fn write_log_bin(path: &Path, log: &RunLog, meta: &LogMeta) -> Result<(), ScenarioError> {
    let mut file =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| ScenarioError::io(path, e))?);
    let meta_json = serde_json::to_string(meta)
        .map_err(|e| ScenarioError::Invalid { reason: e.to_string() })?;
    let n_obstacles = log.obstacles.len();
    let n_cols = log_columns(n_obstacles).len() as u32;
    file.write_all(BIN_MAGIC).map_err(|e| ScenarioError::io(path, e))?;
    file.write_u32::<LittleEndian>(meta_json.len() as u32)
        .map_err(|e| ScenarioError::io(path, e))?;
    file.write_all(meta_json.as_bytes()).map_err(|e| ScenarioError::io(path, e))?;
    file.write_u32::<LittleEndian>(n_cols).map_err(|e| ScenarioError::io(path, e))?;
    file.write_u64::<LittleEndian>(log.records.len() as u64)
        .map_err(|e| ScenarioError::io(path, e))?;
    for rec in &log.records {
        for v in record_to_row(rec, n_obstacles) {
            file.write_f64::<LittleEndian>(v).map_err(|e| ScenarioError::io(path, e))?;
        }
    }
    file.flush().map_err(|e| ScenarioError::io(path, e))?;
    Ok(())
}

/// Read a binary log produced by [`write_log_bin`].
pub fn read_log_bin(path: &Path) -> Result<(RunLog, LogMeta), ScenarioError> {
    let mut file =
        std::io::BufReader::new(std::fs::File::open(path).map_err(|e| ScenarioError::io(path, e))?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|e| ScenarioError::io(path, e))?;
    if &magic != BIN_MAGIC {
        return Err(ScenarioError::format(path, "bad magic bytes"));
    }
    let meta_len = file.read_u32::<LittleEndian>().map_err(|e| ScenarioError::io(path, e))?;
    let mut meta_buf = vec![0u8; meta_len as usize];
    file.read_exact(&mut meta_buf).map_err(|e| ScenarioError::io(path, e))?;
    let meta: LogMeta = serde_json::from_slice(&meta_buf)
        .map_err(|e| ScenarioError::format(path, format!("metadata: {e}")))?;
    let n_cols = file.read_u32::<LittleEndian>().map_err(|e| ScenarioError::io(path, e))? as usize;
    let expected = log_columns(meta.obstacles.len()).len();
    if n_cols != expected {
        return Err(ScenarioError::format(
            path,
            format!("{n_cols} columns, schema expects {expected}"),
        ));
    }
    let n_rows = file.read_u64::<LittleEndian>().map_err(|e| ScenarioError::io(path, e))? as usize;
    let mut rows = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let mut row = Vec::with_capacity(n_cols);
        for _ in 0..n_cols {
            row.push(file.read_f64::<LittleEndian>().map_err(|e| ScenarioError::io(path, e))?);
        }
        rows.push(row);
    }
    let log = rebuild_log(&meta, rows, path)?;
    Ok((log, meta))
}

/// Read either log format, chosen by file extension (`.bin` is binary,
/// anything else is the text format).
pub fn read_log(path: &Path) -> Result<(RunLog, LogMeta), ScenarioError> {
    if path.extension().and_then(|e| e.to_str()) == Some("bin") {
        read_log_bin(path)
    } else {
        read_log_csv(path)
    }
}

/// Artifact paths produced by [`write_artifacts`].
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub log_csv: PathBuf,
    pub log_bin: PathBuf,
    pub summary: PathBuf,
    pub timing: PathBuf,
}

/// Persist a run: columnar log, binary mirror, deterministic summary, and
/// the separate timing report.
pub fn write_artifacts(dir: &Path, outcome: &ScenarioOutcome) -> Result<ArtifactPaths, ScenarioError> {
    std::fs::create_dir_all(dir).map_err(|e| ScenarioError::io(dir, e))?;
    let paths = ArtifactPaths {
        log_csv: dir.join("log.csv"),
        log_bin: dir.join("log.bin"),
        summary: dir.join("summary.toml"),
        timing: dir.join("timing.toml"),
    };
    write_log_csv(&paths.log_csv, &outcome.log, &outcome.meta)?;
    write_log_bin(&paths.log_bin, &outcome.log, &outcome.meta)?;
    std::fs::write(&paths.summary, outcome.summary.to_toml_string()?)
        .map_err(|e| ScenarioError::io(&paths.summary, e))?;
    std::fs::write(&paths.timing, outcome.timing.to_toml_string()?)
        .map_err(|e| ScenarioError::io(&paths.timing, e))?;
    Ok(paths)
}

/// Rebuild the deterministic summary from a stored log.
pub fn summarize_file(path: &Path) -> Result<RunSummary, ScenarioError> {
    let (log, meta) = read_log(path)?;
    Ok(RunSummary::from_log(&log, &meta))
}

// ---------------------------------------------------------------------------
// Plot-data export
// ---------------------------------------------------------------------------

/// File names produced by [`export_plots`].
pub const PLOT_FILES: [&str; 4] =
    ["velocities_yaw.csv", "wrenches.csv", "barriers.csv", "xy_traces.csv"];

fn plot_writer(path: &Path, comments: &[String]) -> Result<std::fs::File, ScenarioError> {
    let mut file = std::fs::File::create(path).map_err(|e| ScenarioError::io(path, e))?;
    for line in comments {
        writeln!(file, "# {line}").map_err(|e| ScenarioError::io(path, e))?;
    }
    Ok(file)
}

fn write_plot_rows(
    path: &Path,
    comments: &[String],
    header: Vec<String>,
    rows: impl Iterator<Item = Vec<f64>>,
) -> Result<(), ScenarioError> {
    let file = plot_writer(path, comments)?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(&header).map_err(|e| ScenarioError::format(path, e.to_string()))?;
    for row in rows {
        let row: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writer.write_record(&row).map_err(|e| ScenarioError::format(path, e.to_string()))?;
    }
    writer.flush().map_err(|e| ScenarioError::io(path, e))?;
    Ok(())
}

/// Emit the four figure-analogue data files into `dir`:
/// reference-vs-actual velocities (plus payload yaw), applied and resolved
/// wrenches, every clearance series, and the planar CoM traces with
/// obstacle annotations.
pub fn export_plots(dir: &Path, log: &RunLog, meta: &LogMeta) -> Result<Vec<PathBuf>, ScenarioError> {
    std::fs::create_dir_all(dir).map_err(|e| ScenarioError::io(dir, e))?;
    let name_comment = vec![format!("scenario: {}", meta.name)];
    let mut written = Vec::new();

    // (a) reference vs. actual velocities and payload yaw.
    let mut header = vec!["time_s".to_string()];
    for body in BODY_TAGS {
        for axis in ["vx", "vy", "vz"] {
            header.push(format!("{body}_{axis}"));
        }
        for axis in ["vx", "vy", "vz"] {
            header.push(format!("r_{body}_{axis}"));
        }
    }
    header.push("pl_yaw".into());
    header.push("r_pl_yaw".into());
    let path = dir.join(PLOT_FILES[0]);
    write_plot_rows(
        &path,
        &name_comment,
        header,
        log.records.iter().map(|rec| {
            let mut row = vec![rec.time_s];
            for b in 0..3 {
                let v = rec.truth.bodies[b].velocity;
                row.extend([v.x, v.y, v.z]);
                let off = b * STATE_DIM + 6;
                row.extend([rec.reference[off], rec.reference[off + 1], rec.reference[off + 2]]);
            }
            row.push(rec.truth.bodies[2].orientation.yaw);
            row.push(rec.reference[2 * STATE_DIM + 5]);
            row
        }),
    )?;
    written.push(path);

    // (b) applied foot forces and both interaction-wrench series.
    let mut header = vec!["time_s".to_string()];
    for e in 0..NUM_AGENTS {
        for foot in 0..4 {
            for axis in ["x", "y", "z"] {
                header.push(format!("a{}_f{foot}{axis}", e + 1));
            }
        }
    }
    for e in 0..NUM_AGENTS {
        for tag in WRENCH_TAGS {
            header.push(format!("lam{}_{tag}", e + 1));
        }
    }
    for e in 0..NUM_AGENTS {
        for tag in WRENCH_TAGS {
            header.push(format!("plam{}_{tag}", e + 1));
        }
    }
    let path = dir.join(PLOT_FILES[1]);
    write_plot_rows(
        &path,
        &name_comment,
        header,
        log.records.iter().map(|rec| {
            let mut row = vec![rec.time_s];
            for e in 0..NUM_AGENTS {
                row.extend(rec.applied.grfs[e].to_vector().iter());
            }
            for e in 0..NUM_AGENTS {
                row.extend(rec.applied.wrenches[e].to_vector().iter());
            }
            for e in 0..NUM_AGENTS {
                row.extend(rec.plant_lambda[e].to_vector().iter());
            }
            row
        }),
    )?;
    written.push(path);

    // (c) every clearance series plus the running minimum.
    let n_obs = log.obstacles.len();
    let mut header = vec!["time_s".to_string()];
    for body in BODY_TAGS {
        for o in 0..n_obs {
            header.push(format!("h_{body}_o{o}"));
        }
    }
    header.push("min_h".into());
    let path = dir.join(PLOT_FILES[2]);
    write_plot_rows(
        &path,
        &name_comment,
        header,
        log.records.iter().map(|rec| {
            let mut row = vec![rec.time_s];
            row.extend(rec.barriers.iter());
            row.push(rec.barriers.iter().copied().fold(f64::INFINITY, f64::min));
            row
        }),
    )?;
    written.push(path);

    // (d) planar CoM traces with the obstacle layout annotated in comments.
    let mut comments = name_comment.clone();
    comments.push(format!("clearance threshold: {} m", log.distance_threshold_m));
    for (i, obs) in log.obstacles.iter().enumerate() {
        comments.push(format!(
            "obstacle {i}: x={} y={} threshold={}",
            obs.center_m.x, obs.center_m.y, log.distance_threshold_m
        ));
    }
    let header: Vec<String> = ["time_s", "a1_x", "a1_y", "a2_x", "a2_y", "pl_x", "pl_y", "r_pl_x", "r_pl_y"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let path = dir.join(PLOT_FILES[3]);
    write_plot_rows(
        &path,
        &comments,
        header,
        log.records.iter().map(|rec| {
            vec![
                rec.time_s,
                rec.truth.bodies[0].position.x,
                rec.truth.bodies[0].position.y,
                rec.truth.bodies[1].position.x,
                rec.truth.bodies[1].position.y,
                rec.truth.bodies[2].position.x,
                rec.truth.bodies[2].position.y,
                rec.reference[2 * STATE_DIM],
                rec.reference[2 * STATE_DIM + 1],
            ]
        }),
    )?;
    written.push(path);

    Ok(written)
}
