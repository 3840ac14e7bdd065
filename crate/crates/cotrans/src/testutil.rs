//! Shared fixtures for the unit tests: a nominal two-agent assembly, a
//! kinematically consistent standing formation, and perturbed iterates for
//! exercising linearizations away from the reference.

use crate::coupling::{
    AttachmentGeometry, CoupledModel, GlobalInput, GlobalState, InteractionWrench, NUM_AGENTS,
};
use crate::ocp::OcpProblem;
use crate::spatial::EulerAngles;
use crate::srb::{
    trot_schedule, BodyId, ContactSchedule, GaitConfig, SrbParams, SrbState, GRAVITY, STATE_DIM,
};
use crate::coupling::GLOBAL_INPUT_DIM;
use nalgebra::{DVector, Vector3};
use rand::Rng;

pub fn model() -> CoupledModel {
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

/// Standing formation with the payload slung between the agents: payload
/// heading +y, agents heading +x, attachment residual exactly zero.
pub fn formation_state() -> GlobalState {
    let model = model();
    let mut x = GlobalState::default();
    x.bodies[2] = SrbState {
        position: Vector3::new(0.0, 0.0, 0.33),
        orientation: EulerAngles::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
        ..Default::default()
    };
    for e in 0..NUM_AGENTS {
        x.bodies[e].position = x.bodies[2].position
            + x.bodies[2].rotation() * model.geometry.payload_attach[e]
            - x.bodies[e].rotation() * model.geometry.agent_attach[e];
    }
    x
}

/// Ground forces and interaction wrenches holding [`formation_state`] in
/// exact static equilibrium: each agent lifts its own weight plus half the
/// payload, with a front/rear force split cancelling the moment the forward
/// bracket exerts about the agent CoM.
pub fn standing_input(model: &CoupledModel) -> GlobalInput {
    let gait = GaitConfig::default();
    let half = 0.5 * model.payload.mass_kg * GRAVITY;
    let bracket_x = model.geometry.agent_attach[0].x;
    let foot_x = gait.foot_position(0).x.abs();
    let lift = (model.agents[0].mass_kg * GRAVITY + half) / 4.0;
    let delta = (bracket_x * half) / (4.0 * foot_x);
    let mut inp = GlobalInput::default();
    for e in 0..NUM_AGENTS {
        for foot in 0..4 {
            let sign = if gait.foot_position(foot).x > 0.0 { 1.0 } else { -1.0 };
            inp.grfs[e].forces[foot] = Vector3::new(0.0, 0.0, lift + sign * delta);
        }
        inp.wrenches[e] = InteractionWrench {
            force: Vector3::new(0.0, 0.0, -half),
            torque_rp: nalgebra::Vector2::zeros(),
        };
    }
    inp
}

pub fn schedules(horizon: usize) -> [ContactSchedule; 2] {
    let sched = trot_schedule(0.0, horizon, 1.0 / 60.0, &GaitConfig::default());
    [sched.clone(), sched]
}

/// Cold start plus bounded random noise on every block, producing nonzero
/// defects, coupling residuals, and pin error.
pub fn perturbed_iterate(p: &OcpProblem, rng: &mut impl Rng) -> DVector<f64> {
    let mut z = p.cold_start();
    for k in 0..=p.horizon() {
        let off = p.layout.state_offset(k);
        for b in 0..3 {
            for i in 0..3 {
                z[off + b * STATE_DIM + i] += rng.gen_range(-0.05..0.05);
                z[off + b * STATE_DIM + 3 + i] += rng.gen_range(-0.08..0.08);
                z[off + b * STATE_DIM + 6 + i] += rng.gen_range(-0.3..0.3);
                z[off + b * STATE_DIM + 9 + i] += rng.gen_range(-0.3..0.3);
            }
        }
    }
    for k in 0..p.horizon() {
        let off = p.layout.input_offset(k);
        for i in 0..GLOBAL_INPUT_DIM {
            z[off + i] += rng.gen_range(-10.0..10.0);
        }
    }
    z
}
