//! Single-rigid-body (SRB) model of one agent or the payload.
//!
//! State `x = (p, th, v, w)`: world CoM position, ZYX Euler attitude, world
//! CoM velocity, world angular velocity. Continuous dynamics under a net
//! wrench `(f, tau)` about the CoM:
//!
//! ```text
//! pdot = v
//! thdot = A(th) w
//! vdot = f/m - g0,            g0 = (0, 0, 9.81)
//! wdot = Iw^-1 (tau - w x Iw w),   Iw = R(th) Ib R(th)^T
//! ```
//!
//! Agents are force-actuated through their stance feet: the 6x12 map built
//! by [`grf_map`] turns four stacked foot forces into a net wrench, with
//! swing-foot columns zeroed by the trot schedule. Discretization is one RK4
//! step with the net wrench held constant (zero-order hold); its analytic
//! state and wrench sensitivities are assembled by chaining the stage
//! Jacobians, and are cross-checked against finite differences in the tests.

use crate::spatial::{
    euler_rate_map, euler_rate_map_partials, rotation_from_euler, rotation_partials, skew,
    EulerAngles, SpatialError,
};
use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Gravitational acceleration, m/s^2.
pub const GRAVITY: f64 = 9.81;
/// Dimension of one SRB state.
pub const STATE_DIM: usize = 12;
/// Dimension of one agent's stacked foot-force input.
pub const GRF_DIM: usize = 12;
/// Feet per agent, ordered (front-left, front-right, rear-left, rear-right).
pub const NUM_FEET: usize = 4;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type WrenchVector = SVector<f64, 6>;

/// Errors from model construction and evaluation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SrbError {
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error("{body} mass {mass_kg} kg must be positive and finite")]
    InvalidMass { body: BodyId, mass_kg: f64 },
    #[error("{body} body inertia must be symmetric positive definite")]
    InvalidInertia { body: BodyId },
}

/// Which rigid body a parameter set or state belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BodyId {
    Agent1,
    Agent2,
    Payload,
}

impl BodyId {
    pub const ALL: [BodyId; 3] = [BodyId::Agent1, BodyId::Agent2, BodyId::Payload];

    /// Stacking order used by the three-body model: agents first, payload last.
    pub fn index(self) -> usize {
        match self {
            BodyId::Agent1 => 0,
            BodyId::Agent2 => 1,
            BodyId::Payload => 2,
        }
    }
}

impl std::fmt::Display for BodyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BodyId::Agent1 => write!(f, "agent1"),
            BodyId::Agent2 => write!(f, "agent2"),
            BodyId::Payload => write!(f, "payload"),
        }
    }
}

/// Mass properties of one SRB.
#[derive(Debug, Clone, PartialEq)]
pub struct SrbParams {
    pub body: BodyId,
    pub mass_kg: f64,
    /// Body-frame inertia about the CoM, kg m^2.
    pub inertia_body: Matrix3<f64>,
}

impl SrbParams {
    pub fn new(body: BodyId, mass_kg: f64, inertia_body: Matrix3<f64>) -> Result<Self, SrbError> {
        let params = Self { body, mass_kg, inertia_body };
        params.validate()?;
        Ok(params)
    }

    pub fn from_inertia_diagonal(
        body: BodyId,
        mass_kg: f64,
        diag: Vector3<f64>,
    ) -> Result<Self, SrbError> {
        Self::new(body, mass_kg, Matrix3::from_diagonal(&diag))
    }

    pub fn validate(&self) -> Result<(), SrbError> {
        if !(self.mass_kg.is_finite() && self.mass_kg > 0.0) {
            return Err(SrbError::InvalidMass { body: self.body, mass_kg: self.mass_kg });
        }
        let sym_defect = (self.inertia_body - self.inertia_body.transpose()).amax();
        if !self.inertia_body.iter().all(|v| v.is_finite()) || sym_defect > 1e-12 {
            return Err(SrbError::InvalidInertia { body: self.body });
        }
        // SPD check via Cholesky.
        if self.inertia_body.cholesky().is_none() {
            return Err(SrbError::InvalidInertia { body: self.body });
        }
        Ok(())
    }

    /// World-frame inertia at the given attitude.
    pub fn world_inertia(&self, th: &EulerAngles) -> Matrix3<f64> {
        let r = rotation_from_euler(th);
        r * self.inertia_body * r.transpose()
    }
}

/// Full state of one SRB.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SrbState {
    pub position: Vector3<f64>,
    pub orientation: EulerAngles,
    pub velocity: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
}

impl SrbState {
    /// Flat layout `[p, th, v, w]`.
    pub fn to_vector(&self) -> StateVector {
        let mut v = StateVector::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.position);
        v.fixed_rows_mut::<3>(3).copy_from(&self.orientation.to_vector());
        v.fixed_rows_mut::<3>(6).copy_from(&self.velocity);
        v.fixed_rows_mut::<3>(9).copy_from(&self.angular_velocity);
        v
    }

    pub fn from_vector(v: &StateVector) -> Self {
        Self {
            position: v.fixed_rows::<3>(0).into(),
            orientation: EulerAngles::from_vector(&v.fixed_rows::<3>(3).into()),
            velocity: v.fixed_rows::<3>(6).into(),
            angular_velocity: v.fixed_rows::<3>(9).into(),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_euler(&self.orientation)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Net force and torque about the CoM, world frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NetWrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl NetWrench {
    pub fn new(force: Vector3<f64>, torque: Vector3<f64>) -> Self {
        Self { force, torque }
    }

    pub fn to_vector(&self) -> WrenchVector {
        let mut v = WrenchVector::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.force);
        v.fixed_rows_mut::<3>(3).copy_from(&self.torque);
        v
    }

    pub fn from_vector(v: &WrenchVector) -> Self {
        Self { force: v.fixed_rows::<3>(0).into(), torque: v.fixed_rows::<3>(3).into() }
    }
}

impl std::ops::Add for NetWrench {
    type Output = NetWrench;
    fn add(self, rhs: NetWrench) -> NetWrench {
        NetWrench { force: self.force + rhs.force, torque: self.torque + rhs.torque }
    }
}

/// Stacked foot forces of one agent, world frame, N.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GrfInput {
    pub forces: [Vector3<f64>; NUM_FEET],
}

impl GrfInput {
    pub fn to_vector(&self) -> SVector<f64, GRF_DIM> {
        let mut v = SVector::<f64, GRF_DIM>::zeros();
        for (k, f) in self.forces.iter().enumerate() {
            v.fixed_rows_mut::<3>(3 * k).copy_from(f);
        }
        v
    }

    pub fn from_vector(v: &SVector<f64, GRF_DIM>) -> Self {
        let mut forces = [Vector3::zeros(); NUM_FEET];
        for (k, f) in forces.iter_mut().enumerate() {
            *f = v.fixed_rows::<3>(3 * k).into();
        }
        Self { forces }
    }
}

/// Trot gait parameters: two diagonal foot pairs alternate with 50% duty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitConfig {
    pub period_s: f64,
    pub phase_offset_s: f64,
    /// Body-frame foot positions relative to the CoM, m.
    pub foot_positions_m: [[f64; 3]; NUM_FEET],
}

impl Default for GaitConfig {
    fn default() -> Self {
        Self {
            period_s: 0.4,
            phase_offset_s: 0.0,
            foot_positions_m: [
                [0.19, 0.14, -0.28],
                [0.19, -0.14, -0.28],
                [-0.19, 0.14, -0.28],
                [-0.19, -0.14, -0.28],
            ],
        }
    }
}

impl GaitConfig {
    pub fn foot_position(&self, foot: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.foot_positions_m[foot])
    }
}

/// Per-step stance flags over a control horizon plus the geometry they were
/// built from. Entry `k` applies to the interval starting at `t + k*ts`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactSchedule {
    pub stance: Vec<[bool; NUM_FEET]>,
    pub foot_positions_body: [Vector3<f64>; NUM_FEET],
    pub period_s: f64,
    pub phase_offset_s: f64,
}

impl ContactSchedule {
    pub fn stance_at(&self, step: usize) -> [bool; NUM_FEET] {
        self.stance[step]
    }

    pub fn len(&self) -> usize {
        self.stance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stance.is_empty()
    }
}

/// Stance pattern of a 50%-duty trot at gait phase in [0, 1): the
/// (front-left, rear-right) diagonal leads, (front-right, rear-left) follows.
fn trot_stance(phase: f64) -> [bool; NUM_FEET] {
    if phase < 0.5 {
        [true, false, false, true]
    } else {
        [false, true, true, false]
    }
}

/// Evaluate the trot schedule at `horizon + 1` step starts from time `t`.
///
/// Exactly two diagonal feet are in stance at every step (no flight phase),
/// and each foot spends half of every gait period in stance.
pub fn trot_schedule(t: f64, horizon: usize, ts: f64, gait: &GaitConfig) -> ContactSchedule {
    assert!(gait.period_s > 0.0, "gait period must be positive");
    let mut stance = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let phase = ((t + k as f64 * ts + gait.phase_offset_s) / gait.period_s).rem_euclid(1.0);
        stance.push(trot_stance(phase));
    }
    ContactSchedule {
        stance,
        foot_positions_body: std::array::from_fn(|k| gait.foot_position(k)),
        period_s: gait.period_s,
        phase_offset_s: gait.phase_offset_s,
    }
}

/// Foot-force-to-wrench map `E` at one schedule step: a 6x12 matrix with an
/// identity force block and a `skew(r_foot - p_com)` torque block per stance
/// foot; swing-foot columns are zero. The lever `r_foot - p_com = R(th) r_b`
/// uses the constant body-frame foot offsets, so `E` depends on attitude
/// only.
pub fn grf_map(
    state: &SrbState,
    schedule: &ContactSchedule,
    step: usize,
) -> SMatrix<f64, 6, GRF_DIM> {
    let r = state.rotation();
    let stance = schedule.stance_at(step);
    let mut e = SMatrix::<f64, 6, GRF_DIM>::zeros();
    for foot in 0..NUM_FEET {
        if !stance[foot] {
            continue;
        }
        let lever = r * schedule.foot_positions_body[foot];
        e.fixed_view_mut::<3, 3>(0, 3 * foot).copy_from(&Matrix3::identity());
        e.fixed_view_mut::<3, 3>(3, 3 * foot).copy_from(&skew(&lever));
    }
    e
}

/// Partial of `grf_map(state, ..) * u` with respect to the attitude angles,
/// a 6x3 matrix (force rows are attitude-independent).
pub fn grf_wrench_attitude_jacobian(
    state: &SrbState,
    schedule: &ContactSchedule,
    step: usize,
    u: &GrfInput,
) -> SMatrix<f64, 6, 3> {
    let parts = rotation_partials(&state.orientation);
    let stance = schedule.stance_at(step);
    let mut jac = SMatrix::<f64, 6, 3>::zeros();
    for foot in 0..NUM_FEET {
        if !stance[foot] {
            continue;
        }
        for (k, dr) in parts.iter().enumerate() {
            let dlever = dr * schedule.foot_positions_body[foot];
            let dtorque = dlever.cross(&u.forces[foot]);
            for i in 0..3 {
                jac[(3 + i, k)] += dtorque[i];
            }
        }
    }
    jac
}

/// Continuous dynamics under gravity `g` (m/s^2, along -z); exposed so tests
/// can switch gravity off for conservation checks.
pub fn continuous_rhs_with_gravity(
    params: &SrbParams,
    state: &SrbState,
    net: &NetWrench,
    gravity: f64,
) -> Result<StateVector, SrbError> {
    let a = euler_rate_map(&state.orientation)?;
    let iw = params.world_inertia(&state.orientation);
    let iw_inv = iw.try_inverse().ok_or(SrbError::InvalidInertia { body: params.body })?;
    let w = state.angular_velocity;

    let mut dx = StateVector::zeros();
    dx.fixed_rows_mut::<3>(0).copy_from(&state.velocity);
    dx.fixed_rows_mut::<3>(3).copy_from(&(a * w));
    dx.fixed_rows_mut::<3>(6)
        .copy_from(&(net.force / params.mass_kg - Vector3::new(0.0, 0.0, gravity)));
    dx.fixed_rows_mut::<3>(9).copy_from(&(iw_inv * (net.torque - w.cross(&(iw * w)))));
    Ok(dx)
}

/// Continuous dynamics `xdot = f(x, net)` under standard gravity.
pub fn srb_continuous_rhs(
    params: &SrbParams,
    state: &SrbState,
    net: &NetWrench,
) -> Result<StateVector, SrbError> {
    continuous_rhs_with_gravity(params, state, net, GRAVITY)
}

/// Analytic Jacobians of [`srb_continuous_rhs`]: `d xdot / d x` with the net
/// wrench held at its current value, and `d xdot / d net`.
///
/// The attitude columns of the `wdot` rows carry both the gyroscopic term
/// and `d(Iw^-1)/dth * (tau - w x Iw w)`; callers composing a state-dependent
/// wrench (foot forces, coupling) add `jn * d net/d x` on top.
pub fn continuous_rhs_jacobians(
    params: &SrbParams,
    state: &SrbState,
    net: &NetWrench,
) -> Result<(SMatrix<f64, STATE_DIM, STATE_DIM>, SMatrix<f64, STATE_DIM, 6>), SrbError> {
    let th = &state.orientation;
    let a = euler_rate_map(th)?;
    let a_parts = euler_rate_map_partials(th);
    let r_parts = rotation_partials(th);
    let r = rotation_from_euler(th);
    let iw = r * params.inertia_body * r.transpose();
    let iw_inv = iw.try_inverse().ok_or(SrbError::InvalidInertia { body: params.body })?;
    let w = state.angular_velocity;

    let mut jx = SMatrix::<f64, STATE_DIM, STATE_DIM>::zeros();
    let mut jn = SMatrix::<f64, STATE_DIM, 6>::zeros();

    // pdot = v
    jx.fixed_view_mut::<3, 3>(0, 6).copy_from(&Matrix3::identity());

    // thdot = A(th) w
    for k in 0..3 {
        let col = a_parts[k] * w;
        for i in 0..3 {
            jx[(3 + i, 3 + k)] = col[i];
        }
    }
    jx.fixed_view_mut::<3, 3>(3, 9).copy_from(&a);

    // vdot = f/m - g0
    jn.fixed_view_mut::<3, 3>(6, 0)
        .copy_from(&(Matrix3::identity() / params.mass_kg));

    // wdot = Iw^-1 (tau - w x Iw w): attitude enters through Iw on both the
    // applied torque and the gyroscopic term, via d(Iw^-1) = -Iw^-1 dIw Iw^-1.
    let resid = net.torque - w.cross(&(iw * w));
    for k in 0..3 {
        let diw = r_parts[k] * params.inertia_body * r.transpose()
            + r * params.inertia_body * r_parts[k].transpose();
        let dcol = -iw_inv * diw * iw_inv * resid + iw_inv * (-w.cross(&(diw * w)));
        for i in 0..3 {
            jx[(9 + i, 3 + k)] = dcol[i];
        }
    }
    let dw = iw_inv * (skew(&(iw * w)) - skew(&w) * iw);
    jx.fixed_view_mut::<3, 3>(9, 9).copy_from(&dw);
    jn.fixed_view_mut::<3, 3>(9, 3).copy_from(&iw_inv);

    Ok((jx, jn))
}

/// One RK4 step of the continuous dynamics with the net wrench held constant.
pub fn discretize(
    params: &SrbParams,
    state: &SrbState,
    net: &NetWrench,
    dt: f64,
) -> Result<SrbState, SrbError> {
    let x0 = state.to_vector();
    let k1 = srb_continuous_rhs(params, state, net)?;
    let k2 = srb_continuous_rhs(params, &SrbState::from_vector(&(x0 + k1 * (dt / 2.0))), net)?;
    let k3 = srb_continuous_rhs(params, &SrbState::from_vector(&(x0 + k2 * (dt / 2.0))), net)?;
    let k4 = srb_continuous_rhs(params, &SrbState::from_vector(&(x0 + k3 * dt)), net)?;
    let xn = x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    Ok(SrbState::from_vector(&xn))
}

/// [`discretize`] plus analytic sensitivities of the next state with respect
/// to the current state and the (held) net wrench, assembled by chaining the
/// four stage Jacobians.
pub fn discretize_with_jacobians(
    params: &SrbParams,
    state: &SrbState,
    net: &NetWrench,
    dt: f64,
) -> Result<
    (SrbState, SMatrix<f64, STATE_DIM, STATE_DIM>, SMatrix<f64, STATE_DIM, 6>),
    SrbError,
> {
    type Jx = SMatrix<f64, STATE_DIM, STATE_DIM>;
    type Jn = SMatrix<f64, STATE_DIM, 6>;
    let x0 = state.to_vector();
    let eye = Jx::identity();

    let stage = |x: &StateVector| -> Result<(StateVector, Jx, Jn), SrbError> {
        let s = SrbState::from_vector(x);
        let k = srb_continuous_rhs(params, &s, net)?;
        let (fx, fn_) = continuous_rhs_jacobians(params, &s, net)?;
        Ok((k, fx, fn_))
    };

    let (k1, f1x, f1n) = stage(&x0)?;
    let j1x = f1x;
    let j1n = f1n;

    let x2 = x0 + k1 * (dt / 2.0);
    let (k2, f2x, f2n) = stage(&x2)?;
    let j2x = f2x * (eye + j1x * (dt / 2.0));
    let j2n = f2x * j1n * (dt / 2.0) + f2n;

    let x3 = x0 + k2 * (dt / 2.0);
    let (k3, f3x, f3n) = stage(&x3)?;
    let j3x = f3x * (eye + j2x * (dt / 2.0));
    let j3n = f3x * j2n * (dt / 2.0) + f3n;

    let x4 = x0 + k3 * dt;
    let (k4, f4x, f4n) = stage(&x4)?;
    let j4x = f4x * (eye + j3x * dt);
    let j4n = f4x * j3n * dt + f4n;

    let xn = x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let jx = eye + (j1x + j2x * 2.0 + j3x * 2.0 + j4x) * (dt / 6.0);
    let jn = (j1n + j2n * 2.0 + j3n * 2.0 + j4n) * (dt / 6.0);
    Ok((SrbState::from_vector(&xn), jx, jn))
}
