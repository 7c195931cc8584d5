//! Kinematic bicycle transition `s_{t+1} = K(s_t, a_t)`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::geometry::{scene_geometry_summary, FrameEvents};
use crate::scenario::{wrap_deg, Action, Scene, VehicleDims, VehicleState};
use crate::{Error, ExperimentConfig, Result};

/// Actuator limits used to turn normalized actions into physical controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlLimits {
    /// Maximum acceleration (m/s^2).
    pub a_max: f64,
    /// Maximum braking deceleration (m/s^2).
    pub b_max: f64,
    /// Maximum front-wheel steering angle (degrees).
    pub phi_max_deg: f64,
}

impl Default for ControlLimits {
    fn default() -> Self {
        Self { a_max: 3.0, b_max: 8.0, phi_max_deg: 35.0 }
    }
}

impl ControlLimits {
    pub fn validate(&self) -> Result<()> {
        if !(self.a_max > 0.0 && self.b_max > 0.0 && self.phi_max_deg > 0.0 && self.phi_max_deg < 90.0) {
            return Err(Error::Config("limits must be positive with phi_max_deg < 90".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInputs {
    /// Commanded longitudinal acceleration (m/s^2).
    pub a_long: f64,
    /// Front-wheel steering angle (radians).
    pub phi: f64,
}

pub fn map_action(action: Action, limits: &ControlLimits) -> ControlInputs {
    let p = action.p.clamp(-1.0, 1.0);
    let delta = action.delta.clamp(-1.0, 1.0);
    let a_long = if p >= 0.0 { p * limits.a_max } else { p * limits.b_max };
    ControlInputs { a_long, phi: delta * limits.phi_max_deg.to_radians() }
}

/// One explicit-Euler step of the slip-angle bicycle model.
pub fn step_vehicle(state: &VehicleState, ctrl: ControlInputs, dims: &VehicleDims, dt: f64) -> Result<VehicleState> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt must be > 0, got {dt}")));
    }
    if !state.is_finite() || !ctrl.a_long.is_finite() || !ctrl.phi.is_finite() {
        return Err(Error::Domain("non-finite vehicle state or control".into()));
    }
    let beta = (dims.l_r / (dims.l_f + dims.l_r) * ctrl.phi.tan()).atan();
    let heading = state.theta.to_radians() + beta;
    let dtheta = (state.v / dims.l_r * beta.sin() * dt).to_degrees();
    Ok(VehicleState {
        x: state.x + state.v * heading.cos() * dt,
        y: state.y + state.v * heading.sin() * dt,
        v: (state.v + ctrl.a_long * dt).max(0.0),
        theta: wrap_deg(state.theta + dtheta),
        accel: ctrl.a_long,
        omega: dtheta / dt,
    })
}

/// States and geometry after one physics frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsFrame {
    pub t: f64,
    pub states: Vec<VehicleState>,
    pub events: FrameEvents,
}

/// Advances the scene by one control step of `frames_per_step` physics frames.
///
/// Controls are held for the whole step. A vehicle stops being integrated
/// for the rest of the step after its first contact. Each contacting pair is
/// reported once per step, in the frame where it is first seen.
pub fn step_scene(scene: &Scene, actions: &[Action], config: &ExperimentConfig) -> Result<(Scene, Vec<PhysicsFrame>)> {
    if actions.len() != scene.vehicles.len() {
        return Err(Error::Arity { expected: scene.vehicles.len(), got: actions.len() });
    }
    let controls: Vec<ControlInputs> = actions.iter().map(|&a| map_action(a, &config.limits)).collect();
    let dt = config.sim.dt_phys;
    let mut next = scene.clone();
    let mut frozen = vec![false; scene.vehicles.len()];
    let mut reported: HashSet<(u32, u32)> = HashSet::new();
    let mut frames = Vec::with_capacity(config.sim.frames_per_step);

    for _ in 0..config.sim.frames_per_step {
        for (i, vehicle) in next.vehicles.iter_mut().enumerate() {
            if !frozen[i] {
                vehicle.state = step_vehicle(&vehicle.state, controls[i], &vehicle.dims, dt)?;
            }
        }
        next.t += dt;
        let mut events = scene_geometry_summary(&next, &config.occlusion, &config.impulse);
        events.collisions.retain(|c| reported.insert((c.a, c.b)));
        for c in &events.collisions {
            for (i, v) in next.vehicles.iter().enumerate() {
                if v.id == c.a || v.id == c.b {
                    frozen[i] = true;
                }
            }
        }
        frames.push(PhysicsFrame {
            t: next.t,
            states: next.vehicles.iter().map(|v| v.state).collect(),
            events,
        });
    }
    Ok((next, frames))
}
