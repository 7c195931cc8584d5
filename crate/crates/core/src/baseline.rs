//! Rule-based background-vehicle controller: IDM car-following plus PD
//! lane-centering. Never changes lanes.

use serde::{Deserialize, Serialize};

use crate::dynamics::ControlLimits;
use crate::scenario::{wrap_deg, Action, Scene, STRAIGHT_HEADING};
use crate::{Error, ExperimentConfig, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams {
    /// Desired speed (m/s).
    pub v0: f64,
    /// Time headway (s).
    pub t_headway: f64,
    pub a_idm: f64,
    pub b_idm: f64,
    /// Minimum standstill gap (m).
    pub s0: f64,
    /// Lane-centering gain per metre of lateral error.
    pub k_p: f64,
    /// Lane-centering gain per degree of heading error.
    pub k_d: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self { v0: 8.0, t_headway: 1.5, a_idm: 2.0, b_idm: 3.0, s0: 2.0, k_p: 0.4, k_d: 0.05 }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.v0, self.t_headway, self.a_idm, self.b_idm, self.s0, self.k_p, self.k_d];
        if all.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("idm parameters must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// Intelligent-driver-model acceleration. `gap = inf` means free road; a
/// non-positive gap is an emergency and returns full braking.
pub fn idm_accel(v: f64, gap: f64, lead_v: f64, params: &IdmParams, limits: &ControlLimits) -> f64 {
    if gap <= 0.0 {
        return -limits.b_max;
    }
    let free = 1.0 - (v / params.v0).powi(4);
    let interaction = if gap.is_infinite() {
        0.0
    } else {
        let dv = v - lead_v;
        let s_star = params.s0 + v * params.t_headway + v * dv / (2.0 * (params.a_idm * params.b_idm).sqrt());
        (s_star.max(0.0) / gap).powi(2)
    };
    (params.a_idm * (free - interaction)).clamp(-limits.b_max, limits.a_max)
}

/// Bumper-to-bumper gap and speed of the nearest vehicle ahead in the same
/// lane (or laterally overlapping), if any.
fn leader(scene: &Scene, idx: usize) -> Option<(f64, f64)> {
    let me = &scene.vehicles[idx];
    let lane = scene.road.lane_of(me.state.x);
    scene
        .vehicles
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != idx)
        .filter(|(_, o)| {
            let lateral_overlap = (o.state.x - me.state.x).abs() < (o.dims.width + me.dims.width) / 2.0;
            scene.road.lane_of(o.state.x) == lane || lateral_overlap
        })
        // travel is towards -y
        .filter(|(_, o)| o.state.y < me.state.y)
        .map(|(_, o)| (me.state.y - o.state.y - (me.dims.length + o.dims.length) / 2.0, o.state.v))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

/// Deterministic autopilot action for `vehicle_id`.
pub fn autopilot_action(scene: &Scene, vehicle_id: u32, cfg: &ExperimentConfig) -> Result<Action> {
    let idx = scene.index_of(vehicle_id)?;
    let s = &scene.vehicles[idx].state;
    let (gap, lead_v) = leader(scene, idx).unwrap_or((f64::INFINITY, 0.0));
    let a = idm_accel(s.v, gap, lead_v, &cfg.idm, &cfg.limits);
    let p = if a >= 0.0 { a / cfg.limits.a_max } else { a / cfg.limits.b_max };

    let center = scene.road.lane_center(scene.road.lane_of(s.x));
    let lateral_error = s.x - center;
    let heading_error = wrap_deg(s.theta - STRAIGHT_HEADING);
    let delta = -cfg.idm.k_p * lateral_error - cfg.idm.k_d * heading_error;
    Ok(Action::new(p, delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::step_scene;
    use crate::scenario::{Vehicle, VehicleState};

    fn limits() -> ControlLimits {
        ControlLimits::default()
    }

    fn scene_of(states: &[VehicleState]) -> Scene {
        let cfg = ExperimentConfig::default();
        let vehicles = states
            .iter()
            .enumerate()
            .map(|(i, &state)| Vehicle { id: i as u32, state, dims: cfg.vehicle })
            .collect();
        Scene::new(0.0, vehicles, cfg.road).unwrap()
    }

    #[test]
    fn free_flow_equilibrium_is_zero() {
        let p = IdmParams::default();
        assert_eq!(idm_accel(p.v0, f64::INFINITY, 0.0, &p, &limits()), 0.0);
        assert_eq!(idm_accel(0.0, f64::INFINITY, 0.0, &p, &limits()), p.a_idm);
    }

    #[test]
    fn closing_on_stopped_leader_brakes_hard() {
        let p = IdmParams { v0: 8.0, ..IdmParams::default() };
        let v: f64 = 10.0;
        let s_star = 2.0 + v * 1.5 + v * v / (2.0 * 6f64.sqrt());
        let expected = (2.0 * (1.0 - (v / 8.0).powi(4) - (s_star / 5.0).powi(2))).max(-8.0);
        let got = idm_accel(v, 5.0, 0.0, &p, &limits());
        assert_eq!(got, expected);
        assert_eq!(got, -8.0);
        assert_eq!(idm_accel(5.0, 0.0, 5.0, &p, &limits()), -8.0);
        assert_eq!(idm_accel(5.0, -1.0, 5.0, &p, &limits()), -8.0);
    }

    #[test]
    fn centered_vehicle_at_desired_speed_holds() {
        let cfg = ExperimentConfig::default();
        let x = cfg.road.lane_center(1);
        let scene = scene_of(&[VehicleState::new(x, -50.0, cfg.idm.v0, -90.0)]);
        let a = autopilot_action(&scene, 0, &cfg).unwrap();
        assert!(a.p.abs() < 1e-9 && a.delta.abs() < 1e-9, "{a:?}");
    }

    #[test]
    fn lateral_offset_steers_back() {
        let cfg = ExperimentConfig::default();
        let x = cfg.road.lane_center(1);
        // +x is to the left of travel, and positive delta turns left.
        let left = autopilot_action(&scene_of(&[VehicleState::new(x + 0.5, -50.0, 8.0, -90.0)]), 0, &cfg).unwrap();
        assert!(left.delta < 0.0);
        let right = autopilot_action(&scene_of(&[VehicleState::new(x - 0.5, -50.0, 8.0, -90.0)]), 0, &cfg).unwrap();
        assert!(right.delta > 0.0);
    }

    #[test]
    fn stopped_leader_close_ahead_saturates_braking() {
        let cfg = ExperimentConfig::default();
        let x = cfg.road.lane_center(0);
        let follower = VehicleState::new(x, -50.0, 8.0, -90.0);
        // 4 m bumper gap to a stopped car
        let lead = VehicleState::new(x, -50.0 - 4.0 - cfg.vehicle.length, 0.0, -90.0);
        let a = autopilot_action(&scene_of(&[follower, lead]), 0, &cfg).unwrap();
        assert_eq!(a.p, -1.0);
    }

    #[test]
    fn other_lanes_are_ignored() {
        let cfg = ExperimentConfig::default();
        let me = VehicleState::new(cfg.road.lane_center(0), -50.0, cfg.idm.v0, -90.0);
        let beside = VehicleState::new(cfg.road.lane_center(1), -55.0, 0.0, -90.0);
        let a = autopilot_action(&scene_of(&[me, beside]), 0, &cfg).unwrap();
        assert!(a.p.abs() < 1e-9);
    }

    #[test]
    fn unknown_vehicle_is_an_error() {
        let cfg = ExperimentConfig::default();
        let scene = scene_of(&[VehicleState::new(5.0, -5.0, 8.0, -90.0)]);
        assert!(matches!(autopilot_action(&scene, 9, &cfg), Err(Error::UnknownVehicle(9))));
    }

    #[test]
    fn platoon_drives_a_minute_without_contact() {
        let mut cfg = ExperimentConfig::default();
        cfg.road.length = 10_000.0;
        // Two columns spaced 30 m apart, started slightly off-center.
        let mut states = Vec::new();
        for lane in 0..2 {
            for k in 0..4 {
                let x = cfg.road.lane_center(lane) + if k % 2 == 0 { 0.2 } else { -0.2 };
                states.push(VehicleState::new(x, -20.0 - 30.0 * k as f64, cfg.idm.v0, -90.0));
            }
        }
        let mut scene = scene_of(&states);
        let steps = (60.0 / cfg.sim.dt_control()).round() as usize;
        let mut max_err: f64 = 0.0;
        for step in 0..steps {
            let actions: Vec<Action> =
                scene.vehicles.iter().map(|v| autopilot_action(&scene, v.id, &cfg).unwrap()).collect();
            let (next, frames) = step_scene(&scene, &actions, &cfg).unwrap();
            assert!(frames.iter().all(|f| f.events.collisions.is_empty()));
            scene = next;
            if step > steps / 4 {
                for v in &scene.vehicles {
                    let c = cfg.road.lane_center(cfg.road.lane_of(v.state.x));
                    max_err = max_err.max((v.state.x - c).abs());
                }
            }
        }
        assert!(max_err < 0.3, "lateral error {max_err}");
    }

    #[test]
    fn output_is_deterministic_and_bounded() {
        let cfg = ExperimentConfig::default();
        for seed in 0..40 {
            let scene = crate::scenario::make_initial_scene(&cfg, seed).unwrap();
            for v in &scene.vehicles {
                let a = autopilot_action(&scene, v.id, &cfg).unwrap();
                assert_eq!(a, autopilot_action(&scene, v.id, &cfg).unwrap());
                assert!(a.p.abs() <= 1.0 && a.delta.abs() <= 1.0);
            }
        }
    }
}
