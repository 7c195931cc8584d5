//! Experiment configuration and its canonical text form.
//!
//! Files use flat `section.key = value` lines (TOML dotted keys). The
//! canonical form sorts every dotted key, and the config hash is the SHA-256
//! of that canonical text.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::IdmParams;
use crate::dynamics::ControlLimits;
use crate::geometry::{ImpulseParams, OcclusionParams};
use crate::rarl::TrainSchedule;
use crate::rewards::RewardCoeffs;
use crate::sac::SacConfig;
use crate::scenario::{ObsConfig, RoadGeometry, VehicleDims};
use crate::{Error, Result};

/// Physics integration and episode horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Physics frame length in seconds.
    pub dt_phys: f64,
    /// Physics frames integrated per control step.
    pub frames_per_step: usize,
    /// Episode horizon in control steps.
    pub h_max: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { dt_phys: 0.05, frames_per_step: 5, h_max: 240 }
    }
}

impl SimConfig {
    pub fn dt_control(&self) -> f64 {
        self.dt_phys * self.frames_per_step as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of background vehicles.
    pub n_bv: usize,
    /// Target average velocity (m/s).
    pub v_bar: f64,
    pub sim: SimConfig,
    pub road: RoadGeometry,
    pub vehicle: VehicleDims,
    pub limits: ControlLimits,
    pub rewards: RewardCoeffs,
    pub occlusion: OcclusionParams,
    pub impulse: ImpulseParams,
    pub observation: ObsConfig,
    pub idm: IdmParams,
    pub sac: SacConfig,
    pub schedule: TrainSchedule,
    /// Environment control steps used by `pretrain` when no override is given.
    pub pretrain_steps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let v_bar = 8.0;
        Self {
            n_bv: 3,
            v_bar,
            sim: SimConfig::default(),
            road: RoadGeometry::default(),
            vehicle: VehicleDims::default(),
            limits: ControlLimits::default(),
            rewards: RewardCoeffs::default(),
            occlusion: OcclusionParams::default(),
            impulse: ImpulseParams::default(),
            observation: ObsConfig::default(),
            idm: IdmParams { v0: v_bar, ..IdmParams::default() },
            sac: SacConfig::default(),
            schedule: TrainSchedule::default(),
            pretrain_steps: 50_000,
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file and validates it. Missing keys take defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_bv < 1 {
            return fail("n_bv must be >= 1");
        }
        if !(self.sim.dt_phys > 0.0) || !self.sim.dt_phys.is_finite() {
            return fail("sim.dt_phys must be > 0");
        }
        if self.sim.frames_per_step < 1 || self.sim.h_max < 1 {
            return fail("sim.frames_per_step and sim.h_max must be >= 1");
        }
        if !(self.v_bar >= 0.0) {
            return fail("v_bar must be >= 0");
        }
        self.road.validate()?;
        self.vehicle.validate()?;
        self.limits.validate()?;
        self.rewards.validate()?;
        self.occlusion.validate()?;
        self.impulse.validate()?;
        self.observation.validate()?;
        self.idm.validate()?;
        self.sac.validate()?;
        self.schedule.validate()?;
        Ok(())
    }

    /// Sorted `key = value` lines, one per leaf setting.
    pub fn canonical_text(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut flat = BTreeMap::new();
        flatten("", &value, &mut flat);
        let mut out = String::new();
        for (k, v) in flat {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 of [`canonical_text`](Self::canonical_text).
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }

    /// Observation vector length for this configuration.
    pub fn obs_dim(&self) -> usize {
        self.observation.dim()
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), render_leaf(leaf));
        }
    }
}

fn render_leaf(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(render_leaf).collect();
            format!("[{}]", parts.join(", "))
        }
        // serde_json prints shortest round-trip floats, which are valid TOML.
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn canonical_text_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.canonical_text();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.canonical_text(), text);
    }

    #[test]
    fn dotted_keys_override_defaults() {
        let cfg = ExperimentConfig::from_toml_str("rewards.alpha1 = 12\nn_bv = 2\nsac.hidden = [8, 8]\n")
            .unwrap();
        assert_eq!(cfg.rewards.alpha1, 12.0);
        assert_eq!(cfg.n_bv, 2);
        assert_eq!(cfg.sac.hidden, vec![8, 8]);
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn key_order_does_not_change_hash() {
        let a = ExperimentConfig::from_toml_str("n_bv = 2\nv_bar = 9.0\n").unwrap();
        let b = ExperimentConfig::from_toml_str("v_bar = 9.0\nn_bv = 2\n").unwrap();
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("rewards.alpha10 = 1\n").is_err());
        assert!(ExperimentConfig::from_toml_str("sim.dt_phys = 0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("n_bv = 0\n").is_err());
    }
}
