//! Rigid coupling between the two agents and the payload.
//!
//! Each agent `i` is bolted to the payload through a bracket: attachment
//! point `r_a` in the agent frame meets point `r_L(i)` in the payload frame,
//! and the bracket transmits roll and pitch but leaves relative yaw free.
//! Per edge that is a 5-dimensional holonomic constraint
//!
//! ```text
//! phi = [ p_i + R_i r_a - p_L - R_L r_L(i) ]   (3 rows, m)
//!       [ roll_i - roll_L                   ]   (rad)
//!       [ pitch_i - pitch_L                 ]   (rad)
//! ```
//!
//! The bracket reaction is a 5-dimensional interaction wrench: a world-frame
//! force plus roll/pitch torques about the payload's body axes. It enters
//! the agent through the 6x5 map built by [`wrench_map`] and the payload
//! through the negated map with the payload's own lever arm, so internal
//! forces cancel exactly.
//!
//! [`CoupledModel`] assembles the three-body dynamics: net wrenches from
//! foot forces + interaction wrenches, the zero-order-hold RK4 step used by
//! the controller model, the acceleration-level constraint residual
//! `phidd(x, u, lambda)` (optionally Baumgarte-stabilized), analytic
//! Jacobians of all of it, and the plant-side algebraic solve that recovers
//! the wrenches which keep `phidd = 0` under the true parameters.

use crate::spatial::{
    euler_rate_map, euler_rate_map_partials, euler_rate_map_second_partials, rotation_partials,
    skew, SpatialError,
};
use crate::srb::{
    continuous_rhs_jacobians, discretize, discretize_with_jacobians, grf_map,
    grf_wrench_attitude_jacobian, srb_continuous_rhs, BodyId, ContactSchedule, GrfInput,
    NetWrench, SrbError, SrbParams, SrbState, GRF_DIM, STATE_DIM,
};
use nalgebra::{Matrix3, SMatrix, SVector, Vector2, Vector3};
use thiserror::Error;

/// Number of agents (= coupling edges).
pub const NUM_AGENTS: usize = 2;
/// Rows of one edge's holonomic constraint.
pub const PHI_DIM: usize = 5;
/// Rows of the stacked two-edge constraint.
pub const PHI_STACK_DIM: usize = NUM_AGENTS * PHI_DIM;
/// Dimension of the stacked three-body state (agent1, agent2, payload).
pub const GLOBAL_STATE_DIM: usize = 3 * STATE_DIM;
/// Dimension of the stacked per-step input (two GRF sets, two wrenches).
pub const GLOBAL_INPUT_DIM: usize = 2 * GRF_DIM + NUM_AGENTS * PHI_DIM;

pub type GlobalStateVector = SVector<f64, GLOBAL_STATE_DIM>;
pub type GlobalInputVector = SVector<f64, GLOBAL_INPUT_DIM>;
pub type PhiVector = SVector<f64, PHI_STACK_DIM>;

/// Errors from coupling evaluation and the plant-side wrench solve.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CouplingError {
    #[error(transparent)]
    Srb(#[from] SrbError),
    #[error("coupling wrench system is numerically singular (condition {cond:.3e})")]
    SingularCoupling { cond: f64 },
    #[error("attachment geometry invalid: {reason}")]
    InvalidGeometry { reason: String },
}

impl From<SpatialError> for CouplingError {
    fn from(e: SpatialError) -> Self {
        CouplingError::Srb(SrbError::Spatial(e))
    }
}

/// Bracket locations: one attachment point per agent, and the matching
/// points on the payload.
#[derive(Debug, Clone, PartialEq)]
pub struct AttachmentGeometry {
    /// Attachment point in each agent's body frame, m.
    pub agent_attach: [Vector3<f64>; NUM_AGENTS],
    /// Matching attachment points in the payload body frame, m.
    pub payload_attach: [Vector3<f64>; NUM_AGENTS],
}

impl AttachmentGeometry {
    pub fn new(
        agent_attach: [Vector3<f64>; NUM_AGENTS],
        payload_attach: [Vector3<f64>; NUM_AGENTS],
    ) -> Result<Self, CouplingError> {
        let geom = Self { agent_attach, payload_attach };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<(), CouplingError> {
        let all_finite = self
            .agent_attach
            .iter()
            .chain(self.payload_attach.iter())
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !all_finite {
            return Err(CouplingError::InvalidGeometry { reason: "non-finite offset".into() });
        }
        if (self.payload_attach[0] - self.payload_attach[1]).norm() < 1e-6 {
            return Err(CouplingError::InvalidGeometry {
                reason: "payload attachment points coincide".into(),
            });
        }
        Ok(())
    }
}

impl Default for AttachmentGeometry {
    /// Forward-mounted brackets on both agents, payload bar spanning them.
    fn default() -> Self {
        Self {
            agent_attach: [Vector3::new(0.25, 0.0, 0.05); NUM_AGENTS],
            payload_attach: [Vector3::new(-0.45, 0.0, 0.0), Vector3::new(0.45, 0.0, 0.0)],
        }
    }
}

/// Bracket reaction on one edge: world-frame force plus torques about the
/// payload's roll and pitch axes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InteractionWrench {
    pub force: Vector3<f64>,
    pub torque_rp: Vector2<f64>,
}

impl InteractionWrench {
    pub fn to_vector(&self) -> SVector<f64, PHI_DIM> {
        let mut v = SVector::<f64, PHI_DIM>::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.force);
        v.fixed_rows_mut::<2>(3).copy_from(&self.torque_rp);
        v
    }

    pub fn from_vector(v: &SVector<f64, PHI_DIM>) -> Self {
        Self { force: v.fixed_rows::<3>(0).into(), torque_rp: v.fixed_rows::<2>(3).into() }
    }
}

/// Stacked state of (agent1, agent2, payload).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GlobalState {
    pub bodies: [SrbState; 3],
}

impl GlobalState {
    pub fn agent(&self, edge: usize) -> &SrbState {
        &self.bodies[edge]
    }

    pub fn payload(&self) -> &SrbState {
        &self.bodies[2]
    }

    pub fn body(&self, id: BodyId) -> &SrbState {
        &self.bodies[id.index()]
    }

    pub fn to_vector(&self) -> GlobalStateVector {
        let mut v = GlobalStateVector::zeros();
        for (b, s) in self.bodies.iter().enumerate() {
            v.fixed_rows_mut::<STATE_DIM>(b * STATE_DIM).copy_from(&s.to_vector());
        }
        v
    }

    pub fn from_vector(v: &GlobalStateVector) -> Self {
        Self {
            bodies: std::array::from_fn(|b| {
                SrbState::from_vector(&v.fixed_rows::<STATE_DIM>(b * STATE_DIM).into())
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bodies.iter().all(|s| s.is_finite())
    }
}

/// Stacked per-step input `[u1, u2, lambda1, lambda2]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GlobalInput {
    pub grfs: [GrfInput; NUM_AGENTS],
    pub wrenches: [InteractionWrench; NUM_AGENTS],
}

impl GlobalInput {
    pub fn to_vector(&self) -> GlobalInputVector {
        let mut v = GlobalInputVector::zeros();
        for (e, u) in self.grfs.iter().enumerate() {
            v.fixed_rows_mut::<GRF_DIM>(e * GRF_DIM).copy_from(&u.to_vector());
        }
        for (e, w) in self.wrenches.iter().enumerate() {
            v.fixed_rows_mut::<PHI_DIM>(2 * GRF_DIM + e * PHI_DIM).copy_from(&w.to_vector());
        }
        v
    }

    pub fn from_vector(v: &GlobalInputVector) -> Self {
        Self {
            grfs: std::array::from_fn(|e| {
                GrfInput::from_vector(&v.fixed_rows::<GRF_DIM>(e * GRF_DIM).into())
            }),
            wrenches: std::array::from_fn(|e| {
                InteractionWrench::from_vector(
                    &v.fixed_rows::<PHI_DIM>(2 * GRF_DIM + e * PHI_DIM).into(),
                )
            }),
        }
    }

    /// Column offset of agent `e`'s GRF block in the flat input vector.
    pub fn grf_offset(e: usize) -> usize {
        e * GRF_DIM
    }

    /// Column offset of edge `e`'s wrench block in the flat input vector.
    pub fn wrench_offset(e: usize) -> usize {
        2 * GRF_DIM + e * PHI_DIM
    }
}

/// Holonomic residual of one edge (see module docs for the row layout).
pub fn holonomic_residual(
    agent: &SrbState,
    payload: &SrbState,
    geom: &AttachmentGeometry,
    edge: usize,
) -> SVector<f64, PHI_DIM> {
    let mut phi = SVector::<f64, PHI_DIM>::zeros();
    let pos = agent.position + agent.rotation() * geom.agent_attach[edge]
        - payload.position
        - payload.rotation() * geom.payload_attach[edge];
    phi.fixed_rows_mut::<3>(0).copy_from(&pos);
    phi[3] = agent.orientation.roll - payload.orientation.roll;
    phi[4] = agent.orientation.pitch - payload.orientation.pitch;
    phi
}

/// Time derivative of [`holonomic_residual`] along the current velocities.
pub fn holonomic_velocity(
    agent: &SrbState,
    payload: &SrbState,
    geom: &AttachmentGeometry,
    edge: usize,
) -> Result<SVector<f64, PHI_DIM>, CouplingError> {
    let s_a = agent.rotation() * geom.agent_attach[edge];
    let s_p = payload.rotation() * geom.payload_attach[edge];
    let vel = agent.velocity + agent.angular_velocity.cross(&s_a)
        - payload.velocity
        - payload.angular_velocity.cross(&s_p);
    let rate_a = euler_rate_map(&agent.orientation)? * agent.angular_velocity;
    let rate_p = euler_rate_map(&payload.orientation)? * payload.angular_velocity;
    let mut phidot = SVector::<f64, PHI_DIM>::zeros();
    phidot.fixed_rows_mut::<3>(0).copy_from(&vel);
    phidot[3] = rate_a.x - rate_p.x;
    phidot[4] = rate_a.y - rate_p.y;
    Ok(phidot)
}

/// Analytic Jacobian of [`holonomic_residual`] with respect to the stacked
/// agent and payload states `[x_agent; x_payload]` (5 x 24); velocity
/// columns are zero since `phi` is configuration-only.
pub fn holonomic_jacobian(
    agent: &SrbState,
    payload: &SrbState,
    geom: &AttachmentGeometry,
    edge: usize,
) -> SMatrix<f64, PHI_DIM, 24> {
    let mut jac = SMatrix::<f64, PHI_DIM, 24>::zeros();
    jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    jac.fixed_view_mut::<3, 3>(0, 12).copy_from(&(-Matrix3::identity()));
    let parts_a = rotation_partials(&agent.orientation);
    let parts_p = rotation_partials(&payload.orientation);
    for k in 0..3 {
        let da = parts_a[k] * geom.agent_attach[edge];
        let dp = parts_p[k] * geom.payload_attach[edge];
        for i in 0..3 {
            jac[(i, 3 + k)] = da[i];
            jac[(i, 15 + k)] = -dp[i];
        }
    }
    jac[(3, 3)] = 1.0;
    jac[(3, 15)] = -1.0;
    jac[(4, 4)] = 1.0;
    jac[(4, 16)] = -1.0;
    jac
}

/// Wrench maps of one edge: `(onto agent, onto payload)`, both 6x5 over
/// `[force; torque_rp]`.
///
/// Force columns are identity (world frame); torque columns combine the
/// lever arm of the body's own attachment point with the payload roll/pitch
/// axes expressed in the world frame. The payload side is the negation with
/// the payload lever, so the pair transmits zero net wrench.
pub fn wrench_map(
    agent: &SrbState,
    payload: &SrbState,
    geom: &AttachmentGeometry,
    edge: usize,
) -> (SMatrix<f64, 6, PHI_DIM>, SMatrix<f64, 6, PHI_DIM>) {
    let r_l = payload.rotation();
    let s_a = agent.rotation() * geom.agent_attach[edge];
    let s_p = r_l * geom.payload_attach[edge];
    let axes = r_l.fixed_view::<3, 2>(0, 0).into_owned(); // payload roll/pitch axes in world

    let mut on_agent = SMatrix::<f64, 6, PHI_DIM>::zeros();
    on_agent.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    on_agent.fixed_view_mut::<3, 3>(3, 0).copy_from(&skew(&s_a));
    on_agent.fixed_view_mut::<3, 2>(3, 3).copy_from(&axes);

    let mut on_payload = SMatrix::<f64, 6, PHI_DIM>::zeros();
    on_payload.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-Matrix3::identity()));
    on_payload.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-skew(&s_p)));
    on_payload.fixed_view_mut::<3, 2>(3, 3).copy_from(&(-axes));
    (on_agent, on_payload)
}

/// Baumgarte stabilization gains: `phidd + 2*zeta*omega*phid + omega^2*phi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baumgarte {
    pub zeta: f64,
    pub omega: f64,
}

impl Default for Baumgarte {
    fn default() -> Self {
        Self { zeta: 1.0, omega: 50.0 }
    }
}

/// Net wrench of one body together with its sensitivities to the global
/// state and input vectors.
#[derive(Debug, Clone)]
struct WrenchLin {
    value: NetWrench,
    jx: SMatrix<f64, 6, GLOBAL_STATE_DIM>,
    jw: SMatrix<f64, 6, GLOBAL_INPUT_DIM>,
}

impl WrenchLin {
    fn zero() -> Self {
        Self {
            value: NetWrench::default(),
            jx: SMatrix::zeros(),
            jw: SMatrix::zeros(),
        }
    }
}

/// The assembled three-body model used by the controller (nominal
/// parameters) and the plant (true parameters).
#[derive(Debug, Clone)]
pub struct CoupledModel {
    pub agents: [SrbParams; NUM_AGENTS],
    pub payload: SrbParams,
    pub geometry: AttachmentGeometry,
}

/// Additional wrenches applied on top of the modeled ones (disturbances);
/// indexed like [`GlobalState::bodies`].
pub type ExtraWrenches = [NetWrench; 3];

pub const NO_EXTRA: ExtraWrenches =
    [NetWrench { force: Vector3::new(0.0, 0.0, 0.0), torque: Vector3::new(0.0, 0.0, 0.0) },
     NetWrench { force: Vector3::new(0.0, 0.0, 0.0), torque: Vector3::new(0.0, 0.0, 0.0) },
     NetWrench { force: Vector3::new(0.0, 0.0, 0.0), torque: Vector3::new(0.0, 0.0, 0.0) }];

impl CoupledModel {
    pub fn new(
        agents: [SrbParams; NUM_AGENTS],
        payload: SrbParams,
        geometry: AttachmentGeometry,
    ) -> Result<Self, CouplingError> {
        agents[0].validate()?;
        agents[1].validate()?;
        payload.validate()?;
        geometry.validate()?;
        Ok(Self { agents, payload, geometry })
    }

    pub fn params(&self, body: usize) -> &SrbParams {
        if body < NUM_AGENTS {
            &self.agents[body]
        } else {
            &self.payload
        }
    }

    /// Stacked holonomic residual of both edges.
    pub fn phi_stack(&self, x: &GlobalState) -> PhiVector {
        let mut phi = PhiVector::zeros();
        for e in 0..NUM_AGENTS {
            phi.fixed_rows_mut::<PHI_DIM>(e * PHI_DIM).copy_from(&holonomic_residual(
                x.agent(e),
                x.payload(),
                &self.geometry,
                e,
            ));
        }
        phi
    }

    /// Stacked holonomic velocity of both edges.
    pub fn phi_velocity_stack(&self, x: &GlobalState) -> Result<PhiVector, CouplingError> {
        let mut phid = PhiVector::zeros();
        for e in 0..NUM_AGENTS {
            phid.fixed_rows_mut::<PHI_DIM>(e * PHI_DIM).copy_from(&holonomic_velocity(
                x.agent(e),
                x.payload(),
                &self.geometry,
                e,
            )?);
        }
        Ok(phid)
    }

    /// Net wrench per body: agents receive foot forces plus their bracket
    /// wrench, the payload receives both negated bracket wrenches; `extra`
    /// adds external disturbances.
    pub fn net_wrenches(
        &self,
        x: &GlobalState,
        inp: &GlobalInput,
        schedules: &[ContactSchedule; NUM_AGENTS],
        step: usize,
        extra: &ExtraWrenches,
    ) -> [NetWrench; 3] {
        let mut nets = [NetWrench::default(); 3];
        for e in 0..NUM_AGENTS {
            let (on_agent, on_payload) =
                wrench_map(x.agent(e), x.payload(), &self.geometry, e);
            let lam = inp.wrenches[e].to_vector();
            let ew = grf_map(x.agent(e), &schedules[e], step) * inp.grfs[e].to_vector();
            let aw = on_agent * lam;
            nets[e].force += Vector3::from(ew.fixed_rows::<3>(0)) + Vector3::from(aw.fixed_rows::<3>(0));
            nets[e].torque += Vector3::from(ew.fixed_rows::<3>(3)) + Vector3::from(aw.fixed_rows::<3>(3));
            let pw = on_payload * lam;
            nets[2].force += Vector3::from(pw.fixed_rows::<3>(0));
            nets[2].torque += Vector3::from(pw.fixed_rows::<3>(3));
        }
        for b in 0..3 {
            nets[b] = nets[b] + extra[b];
        }
        nets
    }

    /// Net wrenches with analytic sensitivities to the flat global state and
    /// input vectors. `extra` is constant and only shifts the values.
    fn net_wrenches_lin(
        &self,
        x: &GlobalState,
        inp: &GlobalInput,
        schedules: &[ContactSchedule; NUM_AGENTS],
        step: usize,
        extra: &ExtraWrenches,
    ) -> [WrenchLin; 3] {
        let mut out = [WrenchLin::zero(), WrenchLin::zero(), WrenchLin::zero()];
        let payload_parts = rotation_partials(&x.payload().orientation);
        let payload_th_col = 2 * STATE_DIM + 3;

        for e in 0..NUM_AGENTS {
            let agent = x.agent(e);
            let payload = x.payload();
            let lam = inp.wrenches[e];
            let lam_v = lam.to_vector();
            let tau_vec = Vector3::new(lam.torque_rp.x, lam.torque_rp.y, 0.0);
            let agent_parts = rotation_partials(&agent.orientation);
            let (on_agent, on_payload) = wrench_map(agent, payload, &self.geometry, e);
            let e_map = grf_map(agent, &schedules[e], step);

            // Agent value.
            let total = e_map * inp.grfs[e].to_vector() + on_agent * lam_v;
            out[e].value.force = total.fixed_rows::<3>(0).into();
            out[e].value.torque = total.fixed_rows::<3>(3).into();

            // Agent input sensitivities: its own GRFs and its own wrench.
            out[e]
                .jw
                .fixed_view_mut::<6, GRF_DIM>(0, GlobalInput::grf_offset(e))
                .copy_from(&e_map);
            out[e]
                .jw
                .fixed_view_mut::<6, PHI_DIM>(0, GlobalInput::wrench_offset(e))
                .copy_from(&on_agent);

            // Agent attitude: foot levers and its own bracket lever.
            let grf_att = grf_wrench_attitude_jacobian(agent, &schedules[e], step, &inp.grfs[e]);
            out[e]
                .jx
                .fixed_view_mut::<6, 3>(0, e * STATE_DIM + 3)
                .copy_from(&grf_att);
            for k in 0..3 {
                let dlever = agent_parts[k] * self.geometry.agent_attach[e];
                let dtorque = dlever.cross(&lam.force);
                for i in 0..3 {
                    out[e].jx[(3 + i, e * STATE_DIM + 3 + k)] += dtorque[i];
                }
            }
            // Payload attitude steers the roll/pitch torque axes on the agent.
            for k in 0..3 {
                let dtorque = payload_parts[k] * tau_vec;
                for i in 0..3 {
                    out[e].jx[(3 + i, payload_th_col + k)] += dtorque[i];
                }
            }

            // Payload value and sensitivities for this edge.
            let pw = on_payload * lam_v;
            out[2].value.force += Vector3::from(pw.fixed_rows::<3>(0));
            out[2].value.torque += Vector3::from(pw.fixed_rows::<3>(3));
            let mut block = out[2]
                .jw
                .fixed_view_mut::<6, PHI_DIM>(0, GlobalInput::wrench_offset(e));
            block += on_payload;
            for k in 0..3 {
                let dlever = payload_parts[k] * self.geometry.payload_attach[e];
                let dtorque = -dlever.cross(&lam.force) - payload_parts[k] * tau_vec;
                for i in 0..3 {
                    out[2].jx[(3 + i, payload_th_col + k)] += dtorque[i];
                }
            }
        }
        for b in 0..3 {
            out[b].value = out[b].value + extra[b];
        }
        out
    }

    /// Continuous dynamics of all three bodies, wrenches evaluated at the
    /// instantaneous state (used by the plant and the integration oracles).
    pub fn global_rhs(
        &self,
        x: &GlobalState,
        inp: &GlobalInput,
        schedules: &[ContactSchedule; NUM_AGENTS],
        step: usize,
        extra: &ExtraWrenches,
    ) -> Result<GlobalStateVector, CouplingError> {
        let nets = self.net_wrenches(x, inp, schedules, step, extra);
        let mut dx = GlobalStateVector::zeros();
        for b in 0..3 {
            let d = srb_continuous_rhs(self.params(b), &x.bodies[b], &nets[b])?;
            dx.fixed_rows_mut::<STATE_DIM>(b * STATE_DIM).copy_from(&d);
        }
        Ok(dx)
    }

    /// Per-body accelerations (linear, angular) and their sensitivities to
    /// the flat global state/input vectors. Shared by the constraint
    /// residual and its Jacobians.
    fn body_dynamics_lin(
        &self,
        x: &GlobalState,
        inp: &GlobalInput,
        schedules: &[ContactSchedule; NUM_AGENTS],
        step: usize,
        extra: &ExtraWrenches,
    ) -> Result<[BodyDynLin; 3], CouplingError> {
        let wl = self.net_wrenches_lin(x, inp, schedules, step, extra);
        let mut out: [BodyDynLin; 3] = std::array::from_fn(|_| BodyDynLin::zero());
        for b in 0..3 {
            let params = self.params(b);
            let rhs = srb_continuous_rhs(params, &x.bodies[b], &wl[b].value)?;
            let (fx, fnet) = continuous_rhs_jacobians(params, &x.bodies[b], &wl[b].value)?;
            let mut jx = SMatrix::<f64, STATE_DIM, GLOBAL_STATE_DIM>::zeros();
            jx.fixed_view_mut::<STATE_DIM, STATE_DIM>(0, b * STATE_DIM).copy_from(&fx);
            jx += fnet * wl[b].jx;
            let jw = fnet * wl[b].jw;
            out[b] = BodyDynLin {
                accel: rhs.fixed_rows::<3>(6).into(),
                ang_accel: rhs.fixed_rows::<3>(9).into(),
                accel_jx: jx.fixed_rows::<3>(6).into(),
                accel_jw: jw.fixed_rows::<3>(6).into(),
                ang_jx: jx.fixed_rows::<3>(9).into(),
                ang_jw: jw.fixed_rows::<3>(9).into(),
            };
        }
        Ok(out)
    }

    /// Acceleration-level constraint residual `phidd` of both edges under
    /// the given inputs, optionally Baumgarte stabilized.
    pub fn holonomic_second_derivative(
        &self,
        x: &GlobalState,
        inp: &GlobalInput,
        schedules: &[ContactSchedule; NUM_AGENTS],
        step: usize,
        extra: &ExtraWrenches,
        baumgarte: Option<Baumgarte>,
    ) -> Result<PhiVector, CouplingError> {
        let dyn_lin = self.body_dynamics_lin(x, inp, schedules, step, extra)?;
        let mut phidd = self.phi_ddot_values(x, &dyn_lin)?;
        if let Some(bg) = baumgarte {
            let phi = self.phi_stack(x);
            let phid = self.phi_velocity_stack(x)?;
            phidd += phid * (2.0 * bg.zeta * bg.omega) + phi * (bg.omega * bg.omega);
        }
        Ok(phidd)
    }

    fn phi_ddot_values(
        &self,
        x: &GlobalState,
        dyn_lin: &[BodyDynLin; 3],
    ) -> Result<PhiVector, CouplingError> {
        let payload = x.payload();
        let eul_l = EulerAccel::new(payload, &dyn_lin[2].ang_accel)?;
        let mut phidd = PhiVector::zeros();
        for e in 0..NUM_AGENTS {
            let agent = x.agent(e);
            let s_a = agent.rotation() * self.geometry.agent_attach[e];
            let s_p = payload.rotation() * self.geometry.payload_attach[e];
            let w_a = agent.angular_velocity;
            let w_p = payload.angular_velocity;
            let trans = dyn_lin[e].accel + dyn_lin[e].ang_accel.cross(&s_a)
                + w_a.cross(&w_a.cross(&s_a))
                - dyn_lin[2].accel
                - dyn_lin[2].ang_accel.cross(&s_p)
                - w_p.cross(&w_p.cross(&s_p));
            let eul_a = EulerAccel::new(agent, &dyn_lin[e].ang_accel)?;
            phidd.fixed_rows_mut::<3>(e * PHI_DIM).copy_from(&trans);
            phidd[e * PHI_DIM + 3] = eul_a.value.x - eul_l.value.x;
            phidd[e * PHI_DIM + 4] = eul_a.value.y - eul_l.value.y;
        }
        Ok(phidd)
    }

    /// Analytic Jacobians of the raw (unstabilized) `phidd` with respect to
    /// the flat global state and input vectors.
    pub fn phi_ddot_jacobians(
        &self,
        x: &GlobalState,
        inp: &GlobalInput,
        schedules: &[ContactSchedule; NUM_AGENTS],
        step: usize,
        extra: &ExtraWrenches,
    ) -> Result<
        (SMatrix<f64, PHI_STACK_DIM, GLOBAL_STATE_DIM>, SMatrix<f64, PHI_STACK_DIM, GLOBAL_INPUT_DIM>),
        CouplingError,
    > {
        let dyn_lin = self.body_dynamics_lin(x, inp, schedules, step, extra)?;
        let payload = x.payload();
        let payload_parts = rotation_partials(&payload.orientation);
        let eul_l = EulerAccel::new(payload, &dyn_lin[2].ang_accel)?;
        let payload_col = 2 * STATE_DIM;

        let mut jx = SMatrix::<f64, PHI_STACK_DIM, GLOBAL_STATE_DIM>::zeros();
        let mut jw = SMatrix::<f64, PHI_STACK_DIM, GLOBAL_INPUT_DIM>::zeros();

        for e in 0..NUM_AGENTS {
            let agent = x.agent(e);
            let agent_parts = rotation_partials(&agent.orientation);
            let s_a = agent.rotation() * self.geometry.agent_attach[e];
            let s_p = payload.rotation() * self.geometry.payload_attach[e];
            let w_a = agent.angular_velocity;
            let w_p = payload.angular_velocity;
            let row = e * PHI_DIM;
            let agent_col = e * STATE_DIM;

            // ---- translational rows: chained acceleration terms ----
            let chain_x = dyn_lin[e].accel_jx - skew(&s_a) * dyn_lin[e].ang_jx
                - dyn_lin[2].accel_jx
                + skew(&s_p) * dyn_lin[2].ang_jx;
            let chain_w = dyn_lin[e].accel_jw - skew(&s_a) * dyn_lin[e].ang_jw
                - dyn_lin[2].accel_jw
                + skew(&s_p) * dyn_lin[2].ang_jw;
            jx.fixed_view_mut::<3, GLOBAL_STATE_DIM>(row, 0).copy_from(&chain_x);
            jw.fixed_view_mut::<3, GLOBAL_INPUT_DIM>(row, 0).copy_from(&chain_w);

            // Direct lever terms: attitude moves s, velocity product terms.
            for k in 0..3 {
                let ds_a = agent_parts[k] * self.geometry.agent_attach[e];
                let col = -skew(&ds_a) * dyn_lin[e].ang_accel + skew(&w_a) * skew(&w_a) * ds_a;
                for i in 0..3 {
                    jx[(row + i, agent_col + 3 + k)] += col[i];
                }
                let ds_p = payload_parts[k] * self.geometry.payload_attach[e];
                let col_p = skew(&ds_p) * dyn_lin[2].ang_accel - skew(&w_p) * skew(&w_p) * ds_p;
                for i in 0..3 {
                    jx[(row + i, payload_col + 3 + k)] += col_p[i];
                }
            }
            let dwa = -skew(&w_a.cross(&s_a)) - skew(&w_a) * skew(&s_a);
            let dwp = skew(&w_p.cross(&s_p)) + skew(&w_p) * skew(&s_p);
            for k in 0..3 {
                for i in 0..3 {
                    jx[(row + i, agent_col + 9 + k)] += dwa[(i, k)];
                    jx[(row + i, payload_col + 9 + k)] += dwp[(i, k)];
                }
            }

            // ---- rotational rows (roll & pitch acceleration differences) ----
            let eul_a = EulerAccel::new(agent, &dyn_lin[e].ang_accel)?;
            // Chained through the angular accelerations.
            let rot_chain_x = eul_a.d_alpha * dyn_lin[e].ang_jx - eul_l.d_alpha * dyn_lin[2].ang_jx;
            let rot_chain_w = eul_a.d_alpha * dyn_lin[e].ang_jw - eul_l.d_alpha * dyn_lin[2].ang_jw;
            for i in 0..2 {
                for c in 0..GLOBAL_STATE_DIM {
                    jx[(row + 3 + i, c)] += rot_chain_x[(i, c)];
                }
                for c in 0..GLOBAL_INPUT_DIM {
                    jw[(row + 3 + i, c)] += rot_chain_w[(i, c)];
                }
            }
            // Direct attitude / angular-velocity terms of each side.
            for k in 0..3 {
                for i in 0..2 {
                    jx[(row + 3 + i, agent_col + 3 + k)] += eul_a.d_theta[(i, k)];
                    jx[(row + 3 + i, payload_col + 3 + k)] -= eul_l.d_theta[(i, k)];
                }
            }
            for k in 0..3 {
                for i in 0..2 {
                    jx[(row + 3 + i, agent_col + 9 + k)] += eul_a.d_omega[(i, k)];
                    jx[(row + 3 + i, payload_col + 9 + k)] -= eul_l.d_omega[(i, k)];
                }
            }
        }
        Ok((jx, jw))
    }

    /// Zero-order-hold step of all three bodies: wrenches are frozen at the
    /// step start, then each body takes one RK4 step.
    pub fn global_step(
        &self,
        x: &GlobalState,
        inp: &GlobalInput,
        schedules: &[ContactSchedule; NUM_AGENTS],
        step: usize,
        dt: f64,
    ) -> Result<GlobalState, CouplingError> {
        let nets = self.net_wrenches(x, inp, schedules, step, &NO_EXTRA);
        let mut next = *x;
        for b in 0..3 {
            next.bodies[b] = discretize(self.params(b), &x.bodies[b], &nets[b], dt)?;
        }
        Ok(next)
    }

    /// [`Self::global_step`] with analytic sensitivities to the flat state
    /// and input vectors, chaining the per-body RK4 Jacobians with the
    /// frozen-wrench sensitivities.
    pub fn global_step_jacobians(
        &self,
        x: &GlobalState,
        inp: &GlobalInput,
        schedules: &[ContactSchedule; NUM_AGENTS],
        step: usize,
        dt: f64,
    ) -> Result<
        (GlobalState, SMatrix<f64, GLOBAL_STATE_DIM, GLOBAL_STATE_DIM>, SMatrix<f64, GLOBAL_STATE_DIM, GLOBAL_INPUT_DIM>),
        CouplingError,
    > {
        let wl = self.net_wrenches_lin(x, inp, schedules, step, &NO_EXTRA);
        let mut next = *x;
        let mut jx = SMatrix::<f64, GLOBAL_STATE_DIM, GLOBAL_STATE_DIM>::zeros();
        let mut jw = SMatrix::<f64, GLOBAL_STATE_DIM, GLOBAL_INPUT_DIM>::zeros();
        for b in 0..3 {
            let (xb, dx, dnet) =
                discretize_with_jacobians(self.params(b), &x.bodies[b], &wl[b].value, dt)?;
            next.bodies[b] = xb;
            jx.fixed_view_mut::<STATE_DIM, STATE_DIM>(b * STATE_DIM, b * STATE_DIM)
                .copy_from(&dx);
            let cross_x = dnet * wl[b].jx;
            let cross_w = dnet * wl[b].jw;
            for i in 0..STATE_DIM {
                for c in 0..GLOBAL_STATE_DIM {
                    jx[(b * STATE_DIM + i, c)] += cross_x[(i, c)];
                }
                for c in 0..GLOBAL_INPUT_DIM {
                    jw[(b * STATE_DIM + i, c)] += cross_w[(i, c)];
                }
            }
        }
        Ok((next, jx, jw))
    }

    /// Solve for the interaction wrenches that keep the (Baumgarte
    /// stabilized) acceleration-level constraint at zero given the applied
    /// foot forces and disturbances. This is the plant-side closure of the
    /// coupled equations: `phidd` is affine in the stacked wrench vector, so
    /// the 10x10 system is probed column-by-column and solved directly.
    pub fn solve_constraint_wrenches(
        &self,
        x: &GlobalState,
        grfs: &[GrfInput; NUM_AGENTS],
        schedules: &[ContactSchedule; NUM_AGENTS],
        step: usize,
        extra: &ExtraWrenches,
        baumgarte: Option<Baumgarte>,
    ) -> Result<[InteractionWrench; NUM_AGENTS], CouplingError> {
        let mut inp = GlobalInput { grfs: *grfs, wrenches: Default::default() };
        let base = self.holonomic_second_derivative(x, &inp, schedules, step, extra, baumgarte)?;
        let mut m = SMatrix::<f64, PHI_STACK_DIM, PHI_STACK_DIM>::zeros();
        for j in 0..PHI_STACK_DIM {
            let mut lam = [InteractionWrench::default(); NUM_AGENTS];
            let mut col = SVector::<f64, PHI_DIM>::zeros();
            col[j % PHI_DIM] = 1.0;
            lam[j / PHI_DIM] = InteractionWrench::from_vector(&col);
            inp.wrenches = lam;
            let probe =
                self.holonomic_second_derivative(x, &inp, schedules, step, extra, baumgarte)?;
            m.set_column(j, &(probe - base));
        }
        let svd = m.svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !cond.is_finite() || cond > 1e12 {
            return Err(CouplingError::SingularCoupling { cond });
        }
        let lam = m.lu().solve(&(-base)).ok_or(CouplingError::SingularCoupling { cond })?;
        Ok([
            InteractionWrench::from_vector(&lam.fixed_rows::<PHI_DIM>(0).into()),
            InteractionWrench::from_vector(&lam.fixed_rows::<PHI_DIM>(PHI_DIM).into()),
        ])
    }
}

/// Linearized accelerations of one body.
#[derive(Debug, Clone)]
struct BodyDynLin {
    accel: Vector3<f64>,
    ang_accel: Vector3<f64>,
    accel_jx: SMatrix<f64, 3, GLOBAL_STATE_DIM>,
    accel_jw: SMatrix<f64, 3, GLOBAL_INPUT_DIM>,
    ang_jx: SMatrix<f64, 3, GLOBAL_STATE_DIM>,
    ang_jw: SMatrix<f64, 3, GLOBAL_INPUT_DIM>,
}

impl BodyDynLin {
    fn zero() -> Self {
        Self {
            accel: Vector3::zeros(),
            ang_accel: Vector3::zeros(),
            accel_jx: SMatrix::zeros(),
            accel_jw: SMatrix::zeros(),
            ang_jx: SMatrix::zeros(),
            ang_jw: SMatrix::zeros(),
        }
    }
}

/// Euler-angle acceleration `thdd = d/dt(A(th) w) = H(th,w) G + A alpha`
/// of one body, with partial derivatives restricted to the roll/pitch rows
/// used by the constraint.
///
/// `G = A(th) w` are the Euler rates and `H = dG/dth` column-stacks
/// `dA/dth_k * w`.
struct EulerAccel {
    value: Vector3<f64>,
    /// Rows (roll, pitch) of the chain factor `A` applied to `d alpha`.
    d_alpha: SMatrix<f64, 2, 3>,
    /// Rows (roll, pitch) of the direct attitude partials.
    d_theta: SMatrix<f64, 2, 3>,
    /// Rows (roll, pitch) of the direct angular-velocity partials.
    d_omega: SMatrix<f64, 2, 3>,
}

impl EulerAccel {
    fn new(state: &SrbState, alpha: &Vector3<f64>) -> Result<Self, CouplingError> {
        let th = &state.orientation;
        let w = state.angular_velocity;
        let a = euler_rate_map(th)?;
        let a_parts = euler_rate_map_partials(th);
        let a_second = euler_rate_map_second_partials(th);

        let g = a * w;
        let mut h = Matrix3::zeros();
        for m in 0..3 {
            h.set_column(m, &(a_parts[m] * w));
        }
        let value = h * g + a * alpha;

        // d/dth_m (H G + A alpha) = (dH/dth_m) G + H * H[:,m] + (dA/dth_m) alpha
        let mut d_theta_full = Matrix3::zeros();
        for m in 0..3 {
            let mut dh = Matrix3::zeros();
            for c in 0..3 {
                dh.set_column(c, &(a_second[m][c] * w));
            }
            let col = dh * g + h * Vector3::from(h.column(m)) + a_parts[m] * alpha;
            d_theta_full.set_column(m, &col);
        }
        // d/dw (H G) = G[1]*A_p + G[2]*A_y + H A  (A_roll = 0).
        let d_omega_full = a_parts[1] * g[1] + a_parts[2] * g[2] + h * a;

        Ok(Self {
            value,
            d_alpha: a.fixed_rows::<2>(0).into(),
            d_theta: d_theta_full.fixed_rows::<2>(0).into(),
            d_omega: d_omega_full.fixed_rows::<2>(0).into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::{finite_difference_jacobian, jacobian_relative_error, EulerAngles};
    use crate::srb::{trot_schedule, GaitConfig, GRAVITY};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn model() -> CoupledModel {
        CoupledModel::new(
            [
                SrbParams::from_inertia_diagonal(
                    BodyId::Agent1,
                    15.0,
                    Vector3::new(0.16, 0.50, 0.56),
                )
                .unwrap(),
                SrbParams::from_inertia_diagonal(
                    BodyId::Agent2,
                    15.0,
                    Vector3::new(0.16, 0.50, 0.56),
                )
                .unwrap(),
            ],
            SrbParams::from_inertia_diagonal(
                BodyId::Payload,
                5.0,
                Vector3::new(0.047, 0.426, 0.454),
            )
            .unwrap(),
            AttachmentGeometry::default(),
        )
        .unwrap()
    }

    fn schedules() -> [ContactSchedule; NUM_AGENTS] {
        let gait = GaitConfig::default();
        [trot_schedule(0.0, 2, 1.0 / 60.0, &gait), trot_schedule(0.0, 2, 1.0 / 60.0, &gait)]
    }

    /// Configuration satisfying phi = 0: payload pose free, agent roll/pitch
    /// pinned to the payload's, agent yaw free, agent position solved from
    /// the attachment coincidence.
    fn consistent_state(rng: &mut impl Rng) -> GlobalState {
        let model = model();
        let payload = SrbState {
            position: Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.2..0.6),
            ),
            orientation: EulerAngles::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-2.0..2.0),
            ),
            velocity: Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ),
            angular_velocity: Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ),
        };
        let mut bodies = [SrbState::default(); 3];
        bodies[2] = payload;
        for e in 0..NUM_AGENTS {
            let orientation = EulerAngles::new(
                payload.orientation.roll,
                payload.orientation.pitch,
                rng.gen_range(-2.0..2.0),
            );
            let agent_rot = crate::spatial::rotation_from_euler(&orientation);
            let position = payload.position
                + payload.rotation() * model.geometry.payload_attach[e]
                - agent_rot * model.geometry.agent_attach[e];
            bodies[e] = SrbState {
                position,
                orientation,
                velocity: Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ),
                angular_velocity: Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ),
            };
        }
        GlobalState { bodies }
    }

    /// Arbitrary (generally inconsistent) state for derivative checks.
    fn random_state(rng: &mut impl Rng) -> GlobalState {
        GlobalState {
            bodies: std::array::from_fn(|_| SrbState {
                position: Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.0..0.8),
                ),
                orientation: EulerAngles::new(
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-2.0..2.0),
                ),
                velocity: Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                angular_velocity: Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
            }),
        }
    }

    fn random_input(rng: &mut impl Rng) -> GlobalInput {
        GlobalInput {
            grfs: std::array::from_fn(|_| GrfInput {
                forces: std::array::from_fn(|_| {
                    Vector3::new(
                        rng.gen_range(-30.0..30.0),
                        rng.gen_range(-30.0..30.0),
                        rng.gen_range(0.0..150.0),
                    )
                }),
            }),
            wrenches: std::array::from_fn(|_| InteractionWrench {
                force: Vector3::new(
                    rng.gen_range(-40.0..40.0),
                    rng.gen_range(-40.0..40.0),
                    rng.gen_range(-60.0..20.0),
                ),
                torque_rp: Vector2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
            }),
        }
    }

    #[test]
    fn vector_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = random_state(&mut rng);
        assert_eq!(GlobalState::from_vector(&x.to_vector()), x);
        let inp = random_input(&mut rng);
        assert_eq!(GlobalInput::from_vector(&inp.to_vector()), inp);
        assert_eq!(GLOBAL_INPUT_DIM, 34);
        assert_eq!(GLOBAL_STATE_DIM, 36);
    }

    #[test]
    fn geometry_validation_rejects_coincident_payload_points() {
        let bad = AttachmentGeometry {
            agent_attach: [Vector3::new(0.25, 0.0, 0.05); 2],
            payload_attach: [Vector3::zeros(), Vector3::zeros()],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn residual_zero_on_consistent_configuration() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = model();
        for _ in 0..20 {
            let x = consistent_state(&mut rng);
            assert!(model.phi_stack(&x).amax() < 1e-12);
        }
    }

    #[test]
    fn residual_invariant_under_common_rigid_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let model = model();
        for _ in 0..30 {
            let x = random_state(&mut rng);
            let phi0 = model.phi_stack(&x);
            // Common translation + yaw rotation applied to every body.
            let shift = Vector3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            );
            let ang: f64 = rng.gen_range(-1.0..1.0);
            let rz = crate::spatial::rotation_from_euler(&EulerAngles::new(0.0, 0.0, ang));
            let mut moved = x;
            for b in 0..3 {
                moved.bodies[b].position = rz * x.bodies[b].position + shift;
                moved.bodies[b].orientation.yaw += ang;
            }
            let phi1 = model.phi_stack(&moved);
            // Translation rows rotate with the frame: compare norms and the
            // exactly invariant roll/pitch rows.
            for e in 0..NUM_AGENTS {
                let t0 = phi0.fixed_rows::<3>(e * PHI_DIM).norm();
                let t1 = phi1.fixed_rows::<3>(e * PHI_DIM).norm();
                assert_relative_eq!(t0, t1, epsilon = 1e-9);
                assert_relative_eq!(
                    phi0[e * PHI_DIM + 3],
                    phi1[e * PHI_DIM + 3],
                    epsilon = 1e-12
                );
                assert_relative_eq!(
                    phi0[e * PHI_DIM + 4],
                    phi1[e * PHI_DIM + 4],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn holonomic_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let model = model();
        for _ in 0..100 {
            let x = random_state(&mut rng);
            for e in 0..NUM_AGENTS {
                let analytic = holonomic_jacobian(x.agent(e), x.payload(), &model.geometry, e);
                let f = |v: &DVector<f64>| {
                    let mut a = SVector::<f64, STATE_DIM>::zeros();
                    let mut p = SVector::<f64, STATE_DIM>::zeros();
                    a.copy_from_slice(&v.as_slice()[..STATE_DIM]);
                    p.copy_from_slice(&v.as_slice()[STATE_DIM..]);
                    let phi = holonomic_residual(
                        &SrbState::from_vector(&a),
                        &SrbState::from_vector(&p),
                        &model.geometry,
                        e,
                    );
                    DVector::from_iterator(PHI_DIM, phi.iter().copied())
                };
                let mut x0 = DVector::zeros(24);
                x0.rows_mut(0, 12).copy_from_slice(x.agent(e).to_vector().as_slice());
                x0.rows_mut(12, 12).copy_from_slice(x.payload().to_vector().as_slice());
                let fd = finite_difference_jacobian(f, &x0, 1e-6);
                let analytic_d = DMatrix::from_iterator(PHI_DIM, 24, analytic.iter().copied());
                assert!(
                    jacobian_relative_error(&analytic_d, &fd) < 1e-5,
                    "holonomic jacobian mismatch on edge {e}"
                );
            }
        }
    }

    #[test]
    fn holonomic_velocity_matches_time_derivative_of_residual() {
        // phidot from the analytic expression must equal d phi/dt along a
        // fine integration of the free motion.
        let model = model();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let sched = schedules();
        for _ in 0..10 {
            let x = random_state(&mut rng);
            let inp = random_input(&mut rng);
            let dt = 1e-6;
            let rhs = model.global_rhs(&x, &inp, &sched, 0, &NO_EXTRA).unwrap();
            let xp = GlobalState::from_vector(&(x.to_vector() + rhs * dt));
            let xm = GlobalState::from_vector(&(x.to_vector() - rhs * dt));
            let fd = (model.phi_stack(&xp) - model.phi_stack(&xm)) / (2.0 * dt);
            let analytic = model.phi_velocity_stack(&x).unwrap();
            assert!(
                (fd - analytic).amax() < 1e-6,
                "phidot mismatch: {}",
                (fd - analytic).amax()
            );
        }
    }

    #[test]
    fn wrench_pair_transmits_zero_net_wrench() {
        // On a configuration satisfying the positional constraint, the agent
        // and payload contributions of one edge cancel in force and in
        // moment about any world point.
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let model = model();
        for _ in 0..50 {
            let x = consistent_state(&mut rng);
            for e in 0..NUM_AGENTS {
                let (on_agent, on_payload) =
                    wrench_map(x.agent(e), x.payload(), &model.geometry, e);
                let lam = SVector::<f64, PHI_DIM>::from_fn(|_, _| rng.gen_range(-50.0..50.0));
                let wa = on_agent * lam;
                let wp = on_payload * lam;
                let fa: Vector3<f64> = wa.fixed_rows::<3>(0).into();
                let fp: Vector3<f64> = wp.fixed_rows::<3>(0).into();
                let ta: Vector3<f64> = wa.fixed_rows::<3>(3).into();
                let tp: Vector3<f64> = wp.fixed_rows::<3>(3).into();
                assert!((fa + fp).amax() < 1e-10, "forces must cancel");
                let origin = Vector3::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                );
                let moment = (x.agent(e).position - origin).cross(&fa)
                    + ta
                    + (x.payload().position - origin).cross(&fp)
                    + tp;
                assert!(
                    moment.amax() < 1e-10,
                    "moments about an arbitrary point must cancel: {moment}"
                );
            }
        }
    }

    #[test]
    fn phi_ddot_matches_second_time_difference() {
        // Raw phidd vs a central second difference of phi along a fine
        // ground-truth integration with constant inputs.
        let model = model();
        let sched = schedules();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for _ in 0..10 {
            let x = consistent_state(&mut rng);
            let inp = random_input(&mut rng);
            let dt = 1e-5;
            let integrate = |x0: &GlobalState, dt: f64| {
                // One RK4 step of the continuous coupled dynamics.
                let f = |v: &GlobalStateVector| {
                    model
                        .global_rhs(&GlobalState::from_vector(v), &inp, &sched, 0, &NO_EXTRA)
                        .unwrap()
                };
                let v0 = x0.to_vector();
                let k1 = f(&v0);
                let k2 = f(&(v0 + k1 * (dt / 2.0)));
                let k3 = f(&(v0 + k2 * (dt / 2.0)));
                let k4 = f(&(v0 + k3 * dt));
                GlobalState::from_vector(&(v0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)))
            };
            let xp = integrate(&x, dt);
            let xm = integrate(&x, -dt);
            let fd = (model.phi_stack(&xp) - model.phi_stack(&x) * 2.0 + model.phi_stack(&xm))
                / (dt * dt);
            let analytic = model
                .holonomic_second_derivative(&x, &inp, &sched, 0, &NO_EXTRA, None)
                .unwrap();
            let scale = 1.0_f64.max(analytic.amax());
            assert!(
                (fd - analytic).amax() / scale < 1e-3,
                "phidd mismatch: fd={fd:?} analytic={analytic:?}"
            );
        }
    }

    #[test]
    fn phi_ddot_is_affine_in_the_wrenches() {
        let model = model();
        let sched = schedules();
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let x = random_state(&mut rng);
        let a = random_input(&mut rng);
        let b_wrenches: [InteractionWrench; 2] = std::array::from_fn(|_| InteractionWrench {
            force: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            torque_rp: Vector2::new(rng.gen(), rng.gen()),
        });
        let eval = |wr: [InteractionWrench; 2]| {
            let mut inp = a;
            inp.wrenches = wr;
            model
                .holonomic_second_derivative(&x, &inp, &sched, 0, &NO_EXTRA, None)
                .unwrap()
        };
        let zero = [InteractionWrench::default(); 2];
        let f0 = eval(zero);
        let fa = eval(a.wrenches);
        let fb = eval(b_wrenches);
        let sum: [InteractionWrench; 2] = std::array::from_fn(|e| InteractionWrench {
            force: a.wrenches[e].force + b_wrenches[e].force,
            torque_rp: a.wrenches[e].torque_rp + b_wrenches[e].torque_rp,
        });
        let fsum = eval(sum);
        assert!(
            ((fa - f0) + (fb - f0) - (fsum - f0)).amax() < 1e-9,
            "phidd must be affine in the stacked wrench vector"
        );
    }

    #[test]
    fn phi_ddot_jacobians_match_finite_differences() {
        let model = model();
        let sched = schedules();
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        for _ in 0..100 {
            let x = random_state(&mut rng);
            let inp = random_input(&mut rng);
            let (jx, jw) = model.phi_ddot_jacobians(&x, &inp, &sched, 0, &NO_EXTRA).unwrap();

            let fx = |v: &DVector<f64>| {
                let mut sv = GlobalStateVector::zeros();
                sv.copy_from_slice(v.as_slice());
                let phidd = model
                    .holonomic_second_derivative(
                        &GlobalState::from_vector(&sv),
                        &inp,
                        &sched,
                        0,
                        &NO_EXTRA,
                        None,
                    )
                    .unwrap();
                DVector::from_iterator(PHI_STACK_DIM, phidd.iter().copied())
            };
            let x0 = DVector::from_iterator(GLOBAL_STATE_DIM, x.to_vector().iter().copied());
            let fd_x = finite_difference_jacobian(fx, &x0, 1e-6);
            let jx_d =
                DMatrix::from_iterator(PHI_STACK_DIM, GLOBAL_STATE_DIM, jx.iter().copied());
            assert!(
                jacobian_relative_error(&jx_d, &fd_x) < 1e-5,
                "phidd state jacobian mismatch: {}",
                jacobian_relative_error(&jx_d, &fd_x)
            );

            let fw = |v: &DVector<f64>| {
                let mut iv = GlobalInputVector::zeros();
                iv.copy_from_slice(v.as_slice());
                let phidd = model
                    .holonomic_second_derivative(
                        &x,
                        &GlobalInput::from_vector(&iv),
                        &sched,
                        0,
                        &NO_EXTRA,
                        None,
                    )
                    .unwrap();
                DVector::from_iterator(PHI_STACK_DIM, phidd.iter().copied())
            };
            let w0 = DVector::from_iterator(GLOBAL_INPUT_DIM, inp.to_vector().iter().copied());
            let fd_w = finite_difference_jacobian(fw, &w0, 1e-6);
            let jw_d =
                DMatrix::from_iterator(PHI_STACK_DIM, GLOBAL_INPUT_DIM, jw.iter().copied());
            assert!(
                jacobian_relative_error(&jw_d, &fd_w) < 1e-5,
                "phidd input jacobian mismatch"
            );
        }
    }

    #[test]
    fn global_step_jacobians_match_finite_differences() {
        let model = model();
        let sched = schedules();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let dt = 1.0 / 60.0;
        for _ in 0..40 {
            let x = random_state(&mut rng);
            let inp = random_input(&mut rng);
            let (_, jx, jw) = model.global_step_jacobians(&x, &inp, &sched, 0, dt).unwrap();

            let fx = |v: &DVector<f64>| {
                let mut sv = GlobalStateVector::zeros();
                sv.copy_from_slice(v.as_slice());
                let next = model
                    .global_step(&GlobalState::from_vector(&sv), &inp, &sched, 0, dt)
                    .unwrap();
                DVector::from_iterator(GLOBAL_STATE_DIM, next.to_vector().iter().copied())
            };
            let x0 = DVector::from_iterator(GLOBAL_STATE_DIM, x.to_vector().iter().copied());
            let fd_x = finite_difference_jacobian(fx, &x0, 1e-6);
            let jx_d =
                DMatrix::from_iterator(GLOBAL_STATE_DIM, GLOBAL_STATE_DIM, jx.iter().copied());
            assert!(
                jacobian_relative_error(&jx_d, &fd_x) < 1e-5,
                "global step state jacobian mismatch"
            );

            let fw = |v: &DVector<f64>| {
                let mut iv = GlobalInputVector::zeros();
                iv.copy_from_slice(v.as_slice());
                let next = model
                    .global_step(&x, &GlobalInput::from_vector(&iv), &sched, 0, dt)
                    .unwrap();
                DVector::from_iterator(GLOBAL_STATE_DIM, next.to_vector().iter().copied())
            };
            let w0 = DVector::from_iterator(GLOBAL_INPUT_DIM, inp.to_vector().iter().copied());
            let fd_w = finite_difference_jacobian(fw, &w0, 1e-6);
            let jw_d =
                DMatrix::from_iterator(GLOBAL_STATE_DIM, GLOBAL_INPUT_DIM, jw.iter().copied());
            assert!(
                jacobian_relative_error(&jw_d, &fd_w) < 1e-5,
                "global step input jacobian mismatch"
            );
        }
    }

    #[test]
    fn free_fall_requires_no_interaction_wrench() {
        // Zero foot forces, consistent resting configuration: every body
        // accelerates at -g, so the brackets carry nothing.
        let model = model();
        let sched = schedules();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut x = consistent_state(&mut rng);
        for b in 0..3 {
            x.bodies[b].velocity = Vector3::zeros();
            x.bodies[b].angular_velocity = Vector3::zeros();
        }
        let lam = model
            .solve_constraint_wrenches(
                &x,
                &[GrfInput::default(); 2],
                &sched,
                0,
                &NO_EXTRA,
                Some(Baumgarte::default()),
            )
            .unwrap();
        for e in 0..NUM_AGENTS {
            assert!(lam[e].force.amax() < 1e-9, "free fall must not load the bracket");
            assert!(lam[e].torque_rp.amax() < 1e-9);
        }
    }

    #[test]
    fn solved_wrenches_zero_the_stabilized_constraint() {
        let model = model();
        let sched = schedules();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let x = consistent_state(&mut rng);
            let grfs: [GrfInput; 2] = std::array::from_fn(|_| GrfInput {
                forces: std::array::from_fn(|_| {
                    Vector3::new(
                        rng.gen_range(-20.0..20.0),
                        rng.gen_range(-20.0..20.0),
                        rng.gen_range(0.0..150.0),
                    )
                }),
            });
            let bg = Some(Baumgarte::default());
            let lam = model
                .solve_constraint_wrenches(&x, &grfs, &sched, 0, &NO_EXTRA, bg)
                .unwrap();
            let inp = GlobalInput { grfs, wrenches: lam };
            let resid = model
                .holonomic_second_derivative(&x, &inp, &sched, 0, &NO_EXTRA, bg)
                .unwrap();
            assert!(
                resid.amax() < 1e-8,
                "solved wrenches must zero the stabilized constraint: {}",
                resid.amax()
            );
        }
    }

    #[test]
    fn payload_weight_splits_across_brackets_at_rest() {
        // Standing equilibrium (all four feet down): each bracket carries
        // half the payload weight, pulling straight down on its agent.
        // The bracket sits ahead of the agent CoM, so holding it torque-free
        // needs a front/rear split of the vertical foot forces; the split is
        // solved from the agent's own moment balance.
        let model = model();
        let gait = GaitConfig::default();
        let standing = ContactSchedule {
            stance: vec![[true; 4]; 3],
            foot_positions_body: std::array::from_fn(|f| gait.foot_position(f)),
            period_s: gait.period_s,
            phase_offset_s: 0.0,
        };
        let sched = [standing.clone(), standing];

        // Formation: agents face +x, payload bar perpendicular.
        let mut x = GlobalState::default();
        x.bodies[2] = SrbState {
            position: Vector3::new(0.0, 0.0, 0.33),
            orientation: EulerAngles::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
            ..Default::default()
        };
        for e in 0..NUM_AGENTS {
            x.bodies[e].position = x.payload().position
                + x.payload().rotation() * model.geometry.payload_attach[e]
                - x.agent(e).rotation() * model.geometry.agent_attach[e];
        }

        let half_payload = model.payload.mass_kg * GRAVITY / 2.0;
        let lift = model.agents[0].mass_kg * GRAVITY + half_payload;
        // Front/rear imbalance cancelling the bracket's pitch moment
        // s_a x (0,0,-half_payload) about the agent CoM.
        let foot_x = gait.foot_position(0).x;
        let delta = model.geometry.agent_attach[0].x * half_payload / (4.0 * foot_x);
        let grfs: [GrfInput; 2] = std::array::from_fn(|_| {
            let mut u = GrfInput::default();
            for f in 0..4 {
                let front = gait.foot_position(f).x > 0.0;
                let fz = lift / 4.0 + if front { delta } else { -delta };
                u.forces[f] = Vector3::new(0.0, 0.0, fz);
            }
            u
        });
        let lam = model
            .solve_constraint_wrenches(&x, &grfs, &sched, 0, &NO_EXTRA, Some(Baumgarte::default()))
            .unwrap();
        for e in 0..NUM_AGENTS {
            assert_relative_eq!(lam[e].force.z, -half_payload, epsilon = 1e-6);
            assert!(lam[e].force.xy().amax() < 1e-6);
            assert!(lam[e].torque_rp.amax() < 1e-6);
        }
        // And the whole assembly is in equilibrium under these inputs.
        let inp = GlobalInput { grfs, wrenches: lam };
        let rhs = model.global_rhs(&x, &inp, &sched, 0, &NO_EXTRA).unwrap();
        assert!(rhs.amax() < 1e-6, "assembly must be at rest: {}", rhs.amax());
    }
}
