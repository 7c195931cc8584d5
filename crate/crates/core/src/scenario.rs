//! Scene and scenario types shared by the simulator, learners and metrics.
//!
//! Coordinates: `x` is lateral (road spans `0..=n_lanes * lane_width`), `y` is
//! longitudinal. Headings are degrees counter-clockwise from +x, so straight
//! travel along the road is a heading of -90 degrees and progress decreases
//! `y`. The road runs from `y = 0` to `y = -length`.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::dynamics::PhysicsFrame;
use crate::rarl::Termination;
use crate::rewards::{AttackComponents, DriveComponents};
use crate::{Error, ExperimentConfig, Result, SimRng};

/// Heading of straight travel along the road, in degrees.
pub const STRAIGHT_HEADING: f64 = -90.0;

/// Number of distinct start layouts; seeds index the pool modulo this.
pub const LAYOUT_POOL_SIZE: u64 = 20;
/// Longitudinal slots per lane in each start layout.
pub const LAYOUT_ROWS: usize = 4;
const ROW_SPACING: f64 = 18.0;
const FIRST_ROW_OFFSET: f64 = 20.0;
const ROW_JITTER: f64 = 3.0;
const LAYOUT_SALT: u64 = 0x5eed_1a70_0000_0000;
const SPEED_SALT: u64 = 0x0005_eed5_9eed_0000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Lateral position (m).
    pub x: f64,
    /// Longitudinal position (m).
    pub y: f64,
    /// Speed (m/s), never negative.
    pub v: f64,
    /// Heading (degrees) in (-180, 180].
    pub theta: f64,
    /// Longitudinal acceleration (m/s^2).
    pub accel: f64,
    /// Yaw rate (degrees/s).
    pub omega: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, v: f64, theta: f64) -> Self {
        Self { x, y, v, theta, accel: 0.0, omega: 0.0 }
    }

    /// Velocity vector in world coordinates.
    pub fn velocity(&self) -> (f64, f64) {
        let h = self.theta.to_radians();
        (self.v * h.cos(), self.v * h.sin())
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.v, self.theta, self.accel, self.omega].iter().all(|c| c.is_finite())
    }
}

/// Throttle/brake `p` and steering `delta`, both clamped into [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub p: f64,
    pub delta: f64,
}

impl Action {
    pub fn new(p: f64, delta: f64) -> Self {
        Self { p: p.clamp(-1.0, 1.0), delta: delta.clamp(-1.0, 1.0) }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.p, self.delta]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleDims {
    pub length: f64,
    pub width: f64,
    pub mass: f64,
    /// Front axle to center of mass (m).
    pub l_f: f64,
    /// Rear axle to center of mass (m).
    pub l_r: f64,
}

impl Default for VehicleDims {
    fn default() -> Self {
        Self { length: 4.5, width: 2.0, mass: 1500.0, l_f: 1.4, l_r: 1.4 }
    }
}

impl VehicleDims {
    pub fn validate(&self) -> Result<()> {
        let all_pos = [self.length, self.width, self.mass, self.l_f, self.l_r].iter().all(|&v| v > 0.0);
        if !all_pos || self.l_f + self.l_r >= self.length {
            return Err(Error::Config("vehicle dims must be > 0 with l_f + l_r < length".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoadGeometry {
    pub n_lanes: usize,
    pub lane_width: f64,
    pub length: f64,
}

impl Default for RoadGeometry {
    fn default() -> Self {
        Self { n_lanes: 3, lane_width: 3.5, length: 600.0 }
    }
}

impl RoadGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.n_lanes < 2 || !(self.lane_width > 0.0) || !(self.length > 0.0) {
            return Err(Error::Config("road needs >= 2 lanes and positive sizes".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.n_lanes as f64 * self.lane_width
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        (lane as f64 + 0.5) * self.lane_width
    }

    /// Lane containing lateral position `x`, clamped to the road.
    pub fn lane_of(&self, x: f64) -> usize {
        let lane = (x / self.lane_width).floor();
        lane.clamp(0.0, (self.n_lanes - 1) as f64) as usize
    }

    pub fn on_road(&self, x: f64) -> bool {
        (0.0..=self.width()).contains(&x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: u32,
    pub state: VehicleState,
    pub dims: VehicleDims,
}

/// Synchronized state of every vehicle. Index 0 is always the AV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub t: f64,
    pub vehicles: Vec<Vehicle>,
    pub road: RoadGeometry,
}

impl Scene {
    pub fn new(t: f64, vehicles: Vec<Vehicle>, road: RoadGeometry) -> Result<Self> {
        if vehicles.is_empty() {
            return Err(Error::Domain("scene needs at least the AV".into()));
        }
        let mut seen = HashSet::new();
        for v in &vehicles {
            if !seen.insert(v.id) {
                return Err(Error::Domain(format!("duplicate vehicle id {}", v.id)));
            }
        }
        Ok(Self { t, vehicles, road })
    }

    pub fn av(&self) -> &Vehicle {
        &self.vehicles[0]
    }

    pub fn bvs(&self) -> &[Vehicle] {
        &self.vehicles[1..]
    }

    pub fn index_of(&self, id: u32) -> Result<usize> {
        self.vehicles.iter().position(|v| v.id == id).ok_or(Error::UnknownVehicle(id))
    }
}

/// Scaling and neighbor count for [`encode_observation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObsConfig {
    /// Neighbor slots in the observation.
    pub k_obs: usize,
    pub pos_scale: f64,
    pub v_scale: f64,
    pub omega_scale: f64,
}

impl Default for ObsConfig {
    fn default() -> Self {
        Self { k_obs: 4, pos_scale: 50.0, v_scale: 20.0, omega_scale: 30.0 }
    }
}

impl ObsConfig {
    pub const EGO_FEATURES: usize = 5;
    pub const SLOT_FEATURES: usize = 6;

    pub fn dim(&self) -> usize {
        Self::EGO_FEATURES + Self::SLOT_FEATURES * self.k_obs
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pos_scale > 0.0 && self.v_scale > 0.0 && self.omega_scale > 0.0) {
            return Err(Error::Config("observation scales must be > 0".into()));
        }
        Ok(())
    }
}

/// Fixed-length policy input: an ego block followed by nearest-first neighbor slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationVector(pub Vec<f64>);

impl ObservationVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Header of a recorded episode: everything needed to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub config_hash: String,
    pub seed: u64,
    pub av_spec: String,
    pub bv_spec: String,
    pub dt_phys: f64,
    pub frames_per_step: usize,
    pub road: RoadGeometry,
    pub initial: Scene,
}

/// Rewards computed for one control step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRewards {
    pub drive: DriveComponents,
    pub attack: AttackComponents,
}

/// One control step: the joint action and every physics frame it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub actions: Vec<Action>,
    pub frames: Vec<PhysicsFrame>,
    pub rewards: StepRewards,
    pub termination: Option<Termination>,
}

/// A whole episode, `s0 -> u0 -> s1 -> ...`, at physics-frame resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub header: EpisodeHeader,
    pub steps: Vec<StepRecord>,
}

impl ScenarioRecord {
    pub fn termination(&self) -> Option<Termination> {
        self.steps.last().and_then(|s| s.termination)
    }

    pub fn frame_count(&self) -> usize {
        self.steps.iter().map(|s| s.frames.len()).sum()
    }
}

/// Wraps an angle in degrees into (-180, 180].
pub fn wrap_angle(theta_deg: f64) -> Result<f64> {
    if !theta_deg.is_finite() {
        return Err(Error::Domain(format!("non-finite angle {theta_deg}")));
    }
    Ok(wrap_deg(theta_deg))
}

pub(crate) fn wrap_deg(theta_deg: f64) -> f64 {
    let r = theta_deg.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Builds the starting scene for `seed`.
///
/// Positions come from a fixed pool of [`LAYOUT_POOL_SIZE`] lane/slot grids
/// (indexed by `seed % 20`); speeds are drawn from `[v_bar - 2, v_bar + 2]`
/// using the full seed.
pub fn make_initial_scene(config: &ExperimentConfig, seed: u64) -> Result<Scene> {
    let road = config.road;
    let capacity = road.n_lanes * LAYOUT_ROWS;
    let requested = config.n_bv + 1;
    if requested > capacity {
        return Err(Error::Capacity { capacity, requested });
    }

    let layout = seed % LAYOUT_POOL_SIZE;
    let mut layout_rng = SimRng::seed_from_u64(LAYOUT_SALT ^ layout);
    // (lane, row, y) for every slot, with a per-slot longitudinal jitter
    let mut slots: Vec<(usize, usize, f64)> = Vec::with_capacity(capacity);
    for row in 0..LAYOUT_ROWS {
        for lane in 0..road.n_lanes {
            let jitter = layout_rng.random_range(-ROW_JITTER..=ROW_JITTER);
            let y = -(FIRST_ROW_OFFSET + row as f64 * ROW_SPACING) + jitter;
            slots.push((lane, row, y));
        }
    }
    slots.shuffle(&mut layout_rng);
    // The AV starts in an interior row so traffic surrounds it.
    let av_slot = slots
        .iter()
        .position(|&(_, row, _)| row > 0 && row + 1 < LAYOUT_ROWS)
        .unwrap_or(0);
    let av = slots.remove(av_slot);
    slots.insert(0, av);

    let mut speed_rng = SimRng::seed_from_u64(SPEED_SALT ^ seed);
    let vehicles = slots
        .iter()
        .take(requested)
        .enumerate()
        .map(|(i, &(lane, _, y))| {
            let v = speed_rng.random_range((config.v_bar - 2.0)..=(config.v_bar + 2.0)).max(0.0);
            Vehicle {
                id: i as u32,
                state: VehicleState::new(road.lane_center(lane), y, v, STRAIGHT_HEADING),
                dims: config.vehicle,
            }
        })
        .collect();
    Scene::new(0.0, vehicles, road)
}

/// Encodes the scene from the point of view of `vehicle_id`.
///
/// Ego block: `[v/v_scale, sin(theta+90), cos(theta+90), lateral_offset/half_width, omega/omega_scale]`.
/// Each of the `k_obs` neighbor slots holds `[dx, dy, dv/v_scale, sin dtheta,
/// cos dtheta, 1]`, where `(dx, dy)` is the displacement in the ego frame
/// (ego heading along +y) divided by `pos_scale`. Slots are nearest first by
/// center distance, ties broken by lower id; unused slots are all zero.
pub fn encode_observation(scene: &Scene, vehicle_id: u32, config: &ExperimentConfig) -> Result<ObservationVector> {
    let obs_cfg = &config.observation;
    let ego_idx = scene.index_of(vehicle_id)?;
    let ego = &scene.vehicles[ego_idx].state;
    let half_width = scene.road.width() / 2.0;

    let mut out = Vec::with_capacity(obs_cfg.dim());
    let rel_heading = (ego.theta - STRAIGHT_HEADING).to_radians();
    out.push(ego.v / obs_cfg.v_scale);
    out.push(rel_heading.sin());
    out.push(rel_heading.cos());
    out.push((ego.x - half_width) / half_width);
    out.push(ego.omega / obs_cfg.omega_scale);

    let mut neighbors: Vec<(f64, u32, &VehicleState)> = scene
        .vehicles
        .iter()
        .filter(|v| v.id != vehicle_id)
        .map(|v| (((v.state.x - ego.x).powi(2) + (v.state.y - ego.y).powi(2)).sqrt(), v.id, &v.state))
        .collect();
    neighbors.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    // Rotation taking the ego heading onto +y.
    let rot = (90.0 - ego.theta).to_radians();
    let (s, c) = rot.sin_cos();
    for slot in 0..obs_cfg.k_obs {
        match neighbors.get(slot) {
            Some(&(_, _, other)) => {
                let dx = other.x - ego.x;
                let dy = other.y - ego.y;
                let ex = c * dx - s * dy;
                let ey = s * dx + c * dy;
                let dtheta = (other.theta - ego.theta).to_radians();
                out.extend_from_slice(&[
                    ex / obs_cfg.pos_scale,
                    ey / obs_cfg.pos_scale,
                    (other.v - ego.v) / obs_cfg.v_scale,
                    dtheta.sin(),
                    dtheta.cos(),
                    1.0,
                ]);
            }
            None => out.extend_from_slice(&[0.0; ObsConfig::SLOT_FEATURES]),
        }
    }
    Ok(ObservationVector(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{obb_overlap, ObbPose};
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(n_bv: usize) -> ExperimentConfig {
        ExperimentConfig { n_bv, ..ExperimentConfig::default() }
    }

    #[test]
    fn wrap_angle_examples() {
        assert_eq!(wrap_angle(190.0).unwrap(), -170.0);
        assert_eq!(wrap_angle(-90.0).unwrap(), -90.0);
        assert_eq!(wrap_angle(540.0).unwrap(), 180.0);
        assert_eq!(wrap_angle(-180.0).unwrap(), 180.0);
        assert!(wrap_angle(f64::NAN).is_err());
        assert!(wrap_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn wrap_angle_is_idempotent() {
        let mut rng = crate::rng_from_seed(7);
        for _ in 0..1_000_000 {
            let x: f64 = rng.random_range(-1e4..1e4);
            let w = wrap_angle(x).unwrap();
            assert!(w > -180.0 && w <= 180.0);
            assert_eq!(wrap_angle(w).unwrap(), w);
        }
    }

    #[test]
    fn initial_scene_is_valid() {
        let scene = make_initial_scene(&cfg(3), 0).unwrap();
        assert_eq!(scene.vehicles.len(), 4);
        assert_eq!(scene.av().id, 0);
        for v in &scene.vehicles {
            assert_eq!(v.state.theta, -90.0);
            assert!((6.0..=10.0).contains(&v.state.v));
        }
        for (i, a) in scene.vehicles.iter().enumerate() {
            for b in &scene.vehicles[i + 1..] {
                assert!(!obb_overlap(&ObbPose::of(a), &ObbPose::of(b)));
            }
        }
    }

    #[test]
    fn layout_pool_wraps_every_twenty_seeds() {
        let a = make_initial_scene(&cfg(3), 0).unwrap();
        let b = make_initial_scene(&cfg(3), 20).unwrap();
        for (va, vb) in a.vehicles.iter().zip(&b.vehicles) {
            assert_eq!((va.state.x, va.state.y), (vb.state.x, vb.state.y));
        }
        let c = make_initial_scene(&cfg(3), 1).unwrap();
        assert!(a.vehicles.iter().zip(&c.vehicles).any(|(p, q)| p.state.y != q.state.y));
    }

    #[test]
    fn all_layouts_are_collision_free_at_capacity() {
        for seed in 0..LAYOUT_POOL_SIZE {
            let scene = make_initial_scene(&cfg(11), seed).unwrap();
            for (i, a) in scene.vehicles.iter().enumerate() {
                for b in &scene.vehicles[i + 1..] {
                    assert!(!obb_overlap(&ObbPose::of(a), &ObbPose::of(b)), "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn too_many_vehicles_is_a_capacity_error() {
        let err = make_initial_scene(&cfg(19), 5).unwrap_err();
        assert!(matches!(err, Error::Capacity { capacity: 12, requested: 20 }));
    }

    #[test]
    fn initial_scene_is_deterministic() {
        for seed in [0u64, 3, 99, u64::MAX] {
            assert_eq!(make_initial_scene(&cfg(3), seed).unwrap(), make_initial_scene(&cfg(3), seed).unwrap());
        }
    }

    fn two_car_scene(other: VehicleState) -> Scene {
        let dims = VehicleDims::default();
        Scene::new(
            0.0,
            vec![
                Vehicle { id: 0, state: VehicleState::new(5.25, -50.0, 8.0, -90.0), dims },
                Vehicle { id: 1, state: other, dims },
            ],
            RoadGeometry::default(),
        )
        .unwrap()
    }

    #[test]
    fn padding_slots_are_zero() {
        let scene = two_car_scene(VehicleState::new(5.25, -70.0, 8.0, -90.0));
        let obs = encode_observation(&scene, 0, &cfg(1)).unwrap();
        assert_eq!(obs.len(), 5 + 6 * 4);
        assert_eq!(obs.0[5 + 5], 1.0);
        assert!(obs.0[11..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn neighbor_ahead_maps_to_positive_ego_y() {
        let scene = two_car_scene(VehicleState::new(5.25, -60.0, 8.0, -90.0));
        let obs = encode_observation(&scene, 0, &cfg(1)).unwrap();
        assert!((obs.0[6] - 10.0 / 50.0).abs() < 1e-12);
        assert!(obs.0[5].abs() < 1e-12);
        // ego block at straight heading
        assert!(obs.0[1].abs() < 1e-15 && obs.0[2] == 1.0);
    }

    #[test]
    fn equal_distance_ties_go_to_lower_id() {
        let dims = VehicleDims::default();
        let scene = Scene::new(
            0.0,
            vec![
                Vehicle { id: 0, state: VehicleState::new(5.25, -50.0, 8.0, -90.0), dims },
                Vehicle { id: 3, state: VehicleState::new(5.25, -60.0, 7.0, -90.0), dims },
                Vehicle { id: 1, state: VehicleState::new(5.25, -40.0, 9.0, -90.0), dims },
            ],
            RoadGeometry::default(),
        )
        .unwrap();
        let obs = encode_observation(&scene, 0, &cfg(2)).unwrap();
        // id 1 sits behind the ego (negative ego-frame y) and must come first
        assert!(obs.0[6] < 0.0);
        assert!(obs.0[12] > 0.0);
    }

    #[test]
    fn unknown_id_is_rejected() {
        let scene = make_initial_scene(&cfg(3), 0).unwrap();
        assert!(matches!(encode_observation(&scene, 42, &cfg(3)), Err(Error::UnknownVehicle(42))));
    }

    proptest! {
        #[test]
        fn observation_length_is_constant(seed in any::<u64>(), n_bv in 1usize..8, ego in 0u32..8) {
            let c = cfg(n_bv);
            let scene = make_initial_scene(&c, seed).unwrap();
            let id = ego % (n_bv as u32 + 1);
            let obs = encode_observation(&scene, id, &c).unwrap();
            prop_assert_eq!(obs.len(), c.obs_dim());
            for slot in 0..c.observation.k_obs {
                let base = 5 + 6 * slot;
                let block = &obs.0[base..base + 6];
                if slot < n_bv {
                    prop_assert_eq!(block[5], 1.0);
                } else {
                    prop_assert!(block.iter().all(|&v| v == 0.0));
                }
            }
        }
    }
}
