//! Driving reward for the AV and team attack reward for the BVs.

use serde::{Deserialize, Serialize};

use crate::dynamics::PhysicsFrame;
use crate::scenario::{wrap_deg, STRAIGHT_HEADING};
use crate::{Error, Result};

/// Weights alpha1..alpha9 of the two reward functions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardCoeffs {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub alpha5: f64,
    pub alpha6: f64,
    pub alpha7: f64,
    pub alpha8: f64,
    pub alpha9: f64,
}

impl Default for RewardCoeffs {
    fn default() -> Self {
        Self::from_array([40.0, 0.5, 1.2, 0.5, 0.4, 1.5, 3.0, 10.0, 0.01])
    }
}

impl RewardCoeffs {
    pub fn from_array(a: [f64; 9]) -> Self {
        Self {
            alpha1: a[0],
            alpha2: a[1],
            alpha3: a[2],
            alpha4: a[3],
            alpha5: a[4],
            alpha6: a[5],
            alpha7: a[6],
            alpha8: a[7],
            alpha9: a[8],
        }
    }

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.alpha1, self.alpha2, self.alpha3, self.alpha4, self.alpha5, self.alpha6, self.alpha7, self.alpha8,
            self.alpha9,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::Config("reward coefficients must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Everything the rewards need from one control step, seen from an ego vehicle.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepSummary {
    /// Ego took part in a contact during the step.
    pub ego_collided: bool,
    /// Largest AV-BV impulse in the step (kg m/s).
    pub j_max_step: f64,
    /// Smallest AV-BV boundary gap over the step's frames (m).
    pub d_min_current: f64,
    /// Frames of the step during which each BV occluded the AV, keyed by BV id.
    pub occlusion_frames: Vec<(u32, usize)>,
    pub ego_speed: f64,
    /// Ego heading (degrees).
    pub ego_theta: f64,
    /// End-of-step BV speeds (m/s).
    pub bv_speeds: Vec<f64>,
    /// End-of-step BV yaw rates (degrees/s).
    pub bv_yaw_rates: Vec<f64>,
    pub v_max: f64,
    pub v_min: f64,
}

impl StepSummary {
    /// Summarizes one control step. `ids` lists vehicle ids in scene order
    /// (AV first) and `ego` indexes the perspective vehicle.
    pub fn from_frames(frames: &[PhysicsFrame], ids: &[u32], ego: usize) -> Self {
        let last = frames.last().expect("a control step has at least one frame");
        let av_id = ids[0];
        let ego_id = ids[ego];
        let mut s = StepSummary { d_min_current: f64::INFINITY, ..Default::default() };
        s.occlusion_frames = ids[1..].iter().map(|&id| (id, 0)).collect();
        for f in frames {
            for c in &f.events.collisions {
                if c.a == ego_id || c.b == ego_id {
                    s.ego_collided = true;
                }
                if c.a == av_id || c.b == av_id {
                    s.j_max_step = s.j_max_step.max(c.j);
                }
            }
            s.d_min_current = s.d_min_current.min(f.events.d_min_current);
            for id in &f.events.occluding_bv_ids {
                if let Some(slot) = s.occlusion_frames.iter_mut().find(|(bid, _)| bid == id) {
                    slot.1 += 1;
                }
            }
        }
        let ego_state = &last.states[ego];
        s.ego_speed = ego_state.v;
        s.ego_theta = ego_state.theta;
        s.bv_speeds = last.states[1..].iter().map(|st| st.v).collect();
        s.bv_yaw_rates = last.states[1..].iter().map(|st| st.omega).collect();
        s.v_max = last.states.iter().map(|st| st.v).fold(f64::NEG_INFINITY, f64::max);
        s.v_min = last.states.iter().map(|st| st.v).fold(f64::INFINITY, f64::min);
        s
    }

    pub fn total_occlusion_frames(&self) -> usize {
        self.occlusion_frames.iter().map(|(_, f)| f).sum()
    }
}

/// Running minimum AV-BV gap within an episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackHistory {
    pub d_min_hist: f64,
}

impl Default for AttackHistory {
    fn default() -> Self {
        Self { d_min_hist: f64::INFINITY }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DriveComponents {
    pub collision: f64,
    pub speed: f64,
    pub yaw: f64,
    pub cooperation: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AttackComponents {
    pub speed: f64,
    pub distance: f64,
    pub lane: f64,
    pub obstacle: f64,
    pub impulse: f64,
    pub total: f64,
}

/// `-a1 1{collision} - a2 |v - v_bar| - a3 |theta + 90| - a4 (v_max - v_min)`.
///
/// The yaw deviation is measured along the shortest arc to -90 degrees.
pub fn drive_reward(summary: &StepSummary, coeffs: &RewardCoeffs, v_bar: f64) -> DriveComponents {
    let collision = if summary.ego_collided { -coeffs.alpha1 } else { 0.0 };
    let speed = -coeffs.alpha2 * (summary.ego_speed - v_bar).abs();
    let yaw = -coeffs.alpha3 * wrap_deg(summary.ego_theta - STRAIGHT_HEADING).abs();
    let cooperation = -coeffs.alpha4 * (summary.v_max - summary.v_min);
    DriveComponents { collision, speed, yaw, cooperation, total: collision + speed + yaw + cooperation }
}

/// Team attack reward shared by every BV, plus the updated gap history.
///
/// Speed and yaw-rate terms average over BVs; occlusion frames are summed.
/// The new-minimum bonus compares against the history before this step.
pub fn attack_reward(
    summary: &StepSummary,
    history: AttackHistory,
    coeffs: &RewardCoeffs,
    v_bar: f64,
) -> (AttackComponents, AttackHistory) {
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().map(|&x| f(x)).sum::<f64>() / xs.len() as f64
        }
    };
    let d = summary.d_min_current;
    let speed = -coeffs.alpha5 * mean(&summary.bv_speeds, &|v| (v - v_bar).abs());
    let distance = -coeffs.alpha6 * d;
    let lane = -coeffs.alpha7 * mean(&summary.bv_yaw_rates, &f64::abs);
    let mut obstacle = coeffs.alpha8 * summary.total_occlusion_frames() as f64;
    if d < history.d_min_hist {
        obstacle += coeffs.alpha8 * (1.0 - d / 5.0);
    }
    let impulse = -coeffs.alpha9 * summary.j_max_step;
    let comps = AttackComponents { speed, distance, lane, obstacle, impulse, total: speed + distance + lane + obstacle + impulse };
    (comps, AttackHistory { d_min_hist: history.d_min_hist.min(d) })
}
