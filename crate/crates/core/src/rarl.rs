//! Episodes, rollouts, pretraining and the alternating BV/AV optimization.

use std::fmt;

use log::{debug, info};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::autopilot_action;
use crate::dynamics::{step_scene, PhysicsFrame};
use crate::eval::{EpisodeMetrics, MetricsAccumulator};
use crate::geometry::{obb_overlap, ObbPose};
use crate::rewards::{attack_reward, drive_reward, AttackComponents, AttackHistory, DriveComponents, StepSummary};
use crate::sac::{policy_mode, policy_sample, Actor, SacAgent, Transition};
use crate::scenario::{
    encode_observation, make_initial_scene, Action, EpisodeHeader, ScenarioRecord, Scene, StepRecord, StepRewards,
};
use crate::{Error, ExperimentConfig, Result, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    Av,
    Bv,
}

impl AgentRole {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Av => "av",
            AgentRole::Bv => "bv",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AgentRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "av" => Ok(AgentRole::Av),
            "bv" => Ok(AgentRole::Bv),
            other => Err(Error::Domain(format!("unknown role {other:?}, expected av or bv"))),
        }
    }
}

/// Loop lengths of the alternating optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    /// Outer rounds.
    pub n_iter: usize,
    /// BV passes per round.
    pub n_mu: usize,
    /// AV passes per round.
    pub n_v: usize,
    /// Environment control steps per pass.
    pub n_step: usize,
    /// Environment steps per gradient step within a pass.
    pub steps_per_update: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self { n_iter: 10, n_mu: 10, n_v: 10, n_step: 1000, steps_per_update: 1 }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if [self.n_iter, self.n_mu, self.n_v, self.n_step, self.steps_per_update].contains(&0) {
            return Err(Error::Config("schedule values must be >= 1".into()));
        }
        Ok(())
    }

    /// Environment control steps consumed by one round.
    pub fn steps_per_round(&self) -> usize {
        (self.n_mu + self.n_v) * self.n_step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Collision,
    OffRoad,
    RoadEnd,
    Horizon,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Collision => "collision",
            Termination::OffRoad => "off_road",
            Termination::RoadEnd => "road_end",
            Termination::Horizon => "horizon",
        }
    }

    /// Horizon ends are truncations: the state still has a future.
    pub fn is_terminal(self) -> bool {
        self != Termination::Horizon
    }
}

impl std::str::FromStr for Termination {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Termination::Collision, Termination::OffRoad, Termination::RoadEnd, Termination::Horizon]
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Domain(format!("unknown termination '{s}'")))
    }
}

/// First applicable end condition, in the order collision, off-road, road
/// end, horizon. `frames` are the physics frames of the step just taken.
pub fn check_termination(
    scene: &Scene,
    steps_taken: usize,
    frames: &[PhysicsFrame],
    cfg: &ExperimentConfig,
) -> Option<Termination> {
    let av = scene.av();
    let av_hit = frames.iter().any(|f| f.events.av_collisions(av.id).next().is_some());
    let av_pose = ObbPose::of(av);
    if av_hit || scene.bvs().iter().any(|b| obb_overlap(&av_pose, &ObbPose::of(b))) {
        return Some(Termination::Collision);
    }
    if !scene.road.on_road(av.state.x) {
        return Some(Termination::OffRoad);
    }
    if av.state.y <= -scene.road.length {
        return Some(Termination::RoadEnd);
    }
    if steps_taken >= cfg.sim.h_max {
        return Some(Termination::Horizon);
    }
    None
}

/// Rewards produced by one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub drive: DriveComponents,
    pub attack: AttackComponents,
    /// Each BV's own driving reward, in scene order.
    pub bv_drive: Vec<f64>,
    pub termination: Option<Termination>,
}

/// A running episode with its log and live metrics.
#[derive(Debug, Clone)]
pub struct Episode {
    pub scene: Scene,
    pub steps: usize,
    pub history: AttackHistory,
    pub termination: Option<Termination>,
    record: ScenarioRecord,
    live: MetricsAccumulator,
    ids: Vec<u32>,
}

impl Episode {
    pub fn new(cfg: &ExperimentConfig, seed: u64, av_spec: &str, bv_spec: &str) -> Result<Self> {
        let scene = make_initial_scene(cfg, seed)?;
        let header = EpisodeHeader {
            config_hash: cfg.hash(),
            seed,
            av_spec: av_spec.to_string(),
            bv_spec: bv_spec.to_string(),
            dt_phys: cfg.sim.dt_phys,
            frames_per_step: cfg.sim.frames_per_step,
            road: cfg.road,
            initial: scene.clone(),
        };
        let ids = scene.vehicles.iter().map(|v| v.id).collect();
        Ok(Self {
            live: MetricsAccumulator::new(&scene),
            scene,
            steps: 0,
            history: AttackHistory::default(),
            termination: None,
            record: ScenarioRecord { header, steps: Vec::new() },
            ids,
        })
    }

    pub fn is_done(&self) -> bool {
        self.termination.is_some()
    }

    /// Applies one joint action (AV first, then BVs in scene order).
    pub fn step(&mut self, actions: &[Action], cfg: &ExperimentConfig) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::Domain("stepping a terminated episode".into()));
        }
        let (next, frames) = step_scene(&self.scene, actions, cfg)?;
        self.steps += 1;

        let av_view = StepSummary::from_frames(&frames, &self.ids, 0);
        let drive = drive_reward(&av_view, &cfg.rewards, cfg.v_bar);
        let (attack, history) = attack_reward(&av_view, self.history, &cfg.rewards, cfg.v_bar);
        self.history = history;
        let bv_drive = (1..self.ids.len())
            .map(|k| drive_reward(&StepSummary::from_frames(&frames, &self.ids, k), &cfg.rewards, cfg.v_bar).total)
            .collect();

        let termination = check_termination(&next, self.steps, &frames, cfg);
        for f in &frames {
            self.live.observe(f);
        }
        self.record.steps.push(StepRecord {
            step: self.steps - 1,
            actions: actions.to_vec(),
            frames,
            rewards: StepRewards { drive, attack },
            termination,
        });
        self.scene = next;
        self.termination = termination;
        Ok(StepOutcome { drive, attack, bv_drive, termination })
    }

    /// Metrics accumulated while stepping.
    pub fn live_metrics(&self) -> EpisodeMetrics {
        self.live.finish(self.record.header.dt_phys, self.termination)
    }

    pub fn record(&self) -> &ScenarioRecord {
        &self.record
    }

    pub fn into_record(self) -> ScenarioRecord {
        self.record
    }
}

/// How a side picks its actions.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    Autopilot,
    /// Stochastic policy sample (the learning agent).
    Sample(&'a Actor),
    /// Deterministic policy mode (frozen or evaluated agent).
    Mode(&'a Actor),
}

impl Controller<'_> {
    pub fn act<R: Rng + ?Sized>(&self, scene: &Scene, id: u32, cfg: &ExperimentConfig, rng: &mut R) -> Result<Action> {
        match self {
            Controller::Autopilot => autopilot_action(scene, id, cfg),
            Controller::Sample(actor) => Ok(policy_sample(actor, &encode_observation(scene, id, cfg)?, rng)?.0),
            Controller::Mode(actor) => policy_mode(actor, &encode_observation(scene, id, cfg)?),
        }
    }

    fn joint_action<R: Rng + ?Sized>(
        av: &Self,
        bv: &Self,
        scene: &Scene,
        cfg: &ExperimentConfig,
        rng: &mut R,
    ) -> Result<Vec<Action>> {
        let mut actions = Vec::with_capacity(scene.vehicles.len());
        actions.push(av.act(scene, scene.av().id, cfg, rng)?);
        for b in scene.bvs() {
            actions.push(bv.act(scene, b.id, cfg, rng)?);
        }
        Ok(actions)
    }
}

/// Runs one episode to termination.
pub fn run_episode<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    av: Controller<'_>,
    bv: Controller<'_>,
    seed: u64,
    specs: (&str, &str),
    rng: &mut R,
) -> Result<(ScenarioRecord, EpisodeMetrics)> {
    let mut ep = Episode::new(cfg, seed, specs.0, specs.1)?;
    while !ep.is_done() {
        let actions = Controller::joint_action(&av, &bv, &ep.scene, cfg, rng)?;
        ep.step(&actions, cfg)?;
    }
    let metrics = ep.live_metrics();
    Ok((ep.into_record(), metrics))
}

/// Reward carried by BV transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BvReward {
    /// Shared team attack reward.
    Attack,
    /// Each BV's own driving reward (BV pretraining).
    Drive,
}

/// A finished (or cut-off) episode from a rollout.
#[derive(Debug, Clone)]
pub struct EpisodeLog {
    pub record: ScenarioRecord,
    pub metrics: EpisodeMetrics,
    pub drive_return: f64,
    pub attack_return: f64,
    /// Mean over BVs of their own driving return.
    pub bv_drive_return: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Rollout {
    pub av: Vec<Transition>,
    pub bv: Vec<Transition>,
    pub episodes: Vec<EpisodeLog>,
    pub env_steps: usize,
}

/// Steps episodes back to back, resetting on termination.
#[derive(Debug, Default)]
struct Runner {
    episode: Option<(Episode, [f64; 3])>,
}

impl Runner {
    fn step<R: Rng + ?Sized>(
        &mut self,
        cfg: &ExperimentConfig,
        bv: &Controller<'_>,
        av: &Controller<'_>,
        bv_reward: BvReward,
        rng: &mut R,
        out: &mut Rollout,
    ) -> Result<()> {
        if self.episode.is_none() {
            let seed: u64 = rng.random();
            self.episode = Some((Episode::new(cfg, seed, "rollout", "rollout")?, [0.0; 3]));
        }
        let (ep, returns) = self.episode.as_mut().expect("episode present");
        let before = ep.scene.clone();
        let actions = Controller::joint_action(av, bv, &before, cfg, rng)?;
        let outcome = ep.step(&actions, cfg)?;
        let done = outcome.termination.is_some_and(Termination::is_terminal);

        let av_id = before.av().id;
        out.av.push(Transition {
            obs: encode_observation(&before, av_id, cfg)?.0,
            action: actions[0],
            reward: outcome.drive.total,
            next_obs: encode_observation(&ep.scene, av_id, cfg)?.0,
            done,
        });
        for (k, b) in before.bvs().iter().enumerate() {
            let reward = match bv_reward {
                BvReward::Attack => outcome.attack.total,
                BvReward::Drive => outcome.bv_drive[k],
            };
            out.bv.push(Transition {
                obs: encode_observation(&before, b.id, cfg)?.0,
                action: actions[k + 1],
                reward,
                next_obs: encode_observation(&ep.scene, b.id, cfg)?.0,
                done,
            });
        }
        returns[0] += outcome.drive.total;
        returns[1] += outcome.attack.total;
        returns[2] += outcome.bv_drive.iter().sum::<f64>() / outcome.bv_drive.len().max(1) as f64;
        out.env_steps += 1;
        if ep.is_done() {
            self.flush(out);
        }
        Ok(())
    }

    fn flush(&mut self, out: &mut Rollout) {
        if let Some((ep, r)) = self.episode.take() {
            let metrics = ep.live_metrics();
            out.episodes.push(EpisodeLog {
                record: ep.into_record(),
                metrics,
                drive_return: r[0],
                attack_return: r[1],
                bv_drive_return: r[2],
            });
        }
    }
}

/// Steps the environment exactly `n_steps` control steps starting from a
/// fresh episode, collecting one AV transition and one transition per BV
/// for every step. The last episode is included even if unfinished.
pub fn roll<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    bv: Controller<'_>,
    av: Controller<'_>,
    n_steps: usize,
    bv_reward: BvReward,
    rng: &mut R,
) -> Result<Rollout> {
    let mut runner = Runner::default();
    let mut out = Rollout::default();
    for _ in 0..n_steps {
        runner.step(cfg, &bv, &av, bv_reward, rng, &mut out)?;
    }
    runner.flush(&mut out);
    Ok(out)
}

/// A learner error together with the last finite parameters of each agent.
pub struct TrainFailure {
    pub error: Error,
    pub round: usize,
    pub last_finite: Vec<(AgentRole, SacAgent)>,
}

impl fmt::Debug for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrainFailure")
            .field("error", &self.error)
            .field("round", &self.round)
            .field("roles", &self.last_finite.iter().map(|(r, _)| *r).collect::<Vec<_>>())
            .finish()
    }
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training failed in round {}: {}", self.round, self.error)
    }
}

impl std::error::Error for TrainFailure {}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        Self { error, round: 0, last_finite: Vec::new() }
    }
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub agent: SacAgent,
    /// Return of every completed episode, in order.
    pub episode_returns: Vec<f64>,
    pub grad_steps: usize,
}

/// Trains `role` on the driving reward against autopilot opponents for
/// `steps` control steps. Gradient steps start once the buffer holds
/// `warmup` transitions.
pub fn pretrain(role: AgentRole, cfg: &ExperimentConfig, steps: usize, rng: &mut SimRng) -> Result<PretrainOutcome, TrainFailure> {
    let mut agent = SacAgent::new(cfg.obs_dim(), cfg.sac.clone(), rng);
    pretrain_agent(role, cfg, &mut agent, steps, rng).map(|(returns, grad_steps)| PretrainOutcome {
        agent,
        episode_returns: returns,
        grad_steps,
    })
}

fn pretrain_agent(
    role: AgentRole,
    cfg: &ExperimentConfig,
    agent: &mut SacAgent,
    steps: usize,
    rng: &mut SimRng,
) -> Result<(Vec<f64>, usize), TrainFailure> {
    let mut runner = Runner::default();
    let mut returns = Vec::new();
    let mut grad_steps = 0;
    for step in 0..steps {
        let mut out = Rollout::default();
        {
            let learner = Controller::Sample(&agent.actor);
            let (av, bv) = match role {
                AgentRole::Av => (learner, Controller::Autopilot),
                AgentRole::Bv => (Controller::Autopilot, learner),
            };
            runner.step(cfg, &bv, &av, BvReward::Drive, rng, &mut out)?;
        }
        let fresh = match role {
            AgentRole::Av => out.av,
            AgentRole::Bv => out.bv,
        };
        for t in fresh {
            agent.buffer.push(t);
        }
        for e in &out.episodes {
            returns.push(match role {
                AgentRole::Av => e.drive_return,
                AgentRole::Bv => e.bv_drive_return,
            });
        }
        if agent.buffer.len() >= cfg.sac.warmup.max(1) {
            let batch = agent.buffer.sample(cfg.sac.batch_size, rng)?;
            agent.update(&batch, rng).map_err(|error| TrainFailure {
                error,
                round: 0,
                last_finite: vec![(role, agent.clone())],
            })?;
            grad_steps += 1;
        }
        if (step + 1) % 5000 == 0 {
            let recent = &returns[returns.len().saturating_sub(10)..];
            let mean = recent.iter().sum::<f64>() / recent.len().max(1) as f64;
            info!("pretrain {role}: step {} episodes {} recent return {mean:.2}", step + 1, returns.len());
        }
    }
    Ok((returns, grad_steps))
}

/// Scalars logged after every optimization pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PassLog {
    pub round: usize,
    pub role: AgentRole,
    pub pass: usize,
    pub env_steps: usize,
    pub grad_steps: usize,
    /// Mean per-transition reward of the training agent.
    pub mean_reward: f64,
    pub episodes: usize,
    /// Mean episode return of the training agent's objective.
    pub mean_return: f64,
    pub mean_drive_return: f64,
    pub mean_attack_return: f64,
    pub collisions: usize,
    pub obf: usize,
    pub q_loss: f64,
    pub actor_loss: f64,
    /// Checksum of the frozen agent, identical before and after the pass.
    pub frozen_checksum: String,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub av: SacAgent,
    pub bv: SacAgent,
    pub passes: Vec<PassLog>,
    pub env_steps: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// One pass: roll `n_step` steps, then run the pass's gradient steps on the
/// training agent only. Returns the pass log.
fn optimize_pass(
    role: AgentRole,
    learner: &mut SacAgent,
    frozen: &SacAgent,
    schedule: &TrainSchedule,
    cfg: &ExperimentConfig,
    rng: &mut SimRng,
    ids: (usize, usize),
) -> Result<PassLog> {
    let frozen_checksum = frozen.checksum();
    let rollout = {
        let (bv, av) = match role {
            AgentRole::Bv => (Controller::Sample(&learner.actor), Controller::Mode(&frozen.actor)),
            AgentRole::Av => (Controller::Mode(&frozen.actor), Controller::Sample(&learner.actor)),
        };
        roll(cfg, bv, av, schedule.n_step, BvReward::Attack, rng)?
    };
    let fresh = match role {
        AgentRole::Av => rollout.av,
        AgentRole::Bv => rollout.bv,
    };
    let mean_reward = mean(fresh.iter().map(|t| t.reward));
    for t in fresh {
        learner.buffer.push(t);
    }

    let n_updates = schedule.n_step / schedule.steps_per_update;
    let (mut q_loss, mut actor_loss, mut grad_steps) = (0.0, 0.0, 0);
    for _ in 0..n_updates {
        if learner.buffer.len() < cfg.sac.batch_size {
            break;
        }
        let batch = learner.buffer.sample(cfg.sac.batch_size, rng)?;
        let l = learner.update(&batch, rng)?;
        q_loss += 0.5 * (l.q1 + l.q2);
        actor_loss += l.actor;
        grad_steps += 1;
    }
    if frozen.checksum() != frozen_checksum {
        let phase = match role {
            AgentRole::Av => "av",
            AgentRole::Bv => "bv",
        };
        let frozen_role = match role {
            AgentRole::Av => "bv",
            AgentRole::Bv => "av",
        };
        return Err(Error::FreezeViolation { role: frozen_role, phase });
    }
    let eps = &rollout.episodes;
    let log = PassLog {
        round: ids.0,
        role,
        pass: ids.1,
        env_steps: rollout.env_steps,
        grad_steps,
        mean_reward,
        episodes: eps.len(),
        mean_return: match role {
            AgentRole::Av => mean(eps.iter().map(|e| e.drive_return)),
            AgentRole::Bv => mean(eps.iter().map(|e| e.attack_return)),
        },
        mean_drive_return: mean(eps.iter().map(|e| e.drive_return)),
        mean_attack_return: mean(eps.iter().map(|e| e.attack_return)),
        collisions: eps.iter().map(|e| e.metrics.n_collisions).sum(),
        obf: eps.iter().map(|e| e.metrics.obf).sum(),
        q_loss: if grad_steps > 0 { q_loss / grad_steps as f64 } else { f64::NAN },
        actor_loss: if grad_steps > 0 { actor_loss / grad_steps as f64 } else { f64::NAN },
        frozen_checksum,
    };
    debug!("round {} {} pass {}: mean reward {:.3}", ids.0, role, ids.1, log.mean_reward);
    Ok(log)
}

/// Alternating optimization: per round, `n_mu` BV passes against the frozen
/// AV, then `n_v` AV passes against the frozen BVs. `on_round` receives
/// both agents after every round (rounds count from 1).
///
/// Each agent's replay buffer is cleared at the start of its phase, and the
/// frozen agent's checksum is verified after every pass.
pub fn alternate_train<F>(
    schedule: &TrainSchedule,
    cfg: &ExperimentConfig,
    mut av: SacAgent,
    mut bv: SacAgent,
    rng: &mut SimRng,
    mut on_round: F,
) -> Result<TrainOutcome, TrainFailure>
where
    F: FnMut(usize, &SacAgent, &SacAgent, &[PassLog]) -> Result<()>,
{
    schedule.validate()?;
    let mut passes = Vec::new();
    let mut env_steps = 0;
    for round in 1..=schedule.n_iter {
        let fail = |error: Error, av: &SacAgent, bv: &SacAgent| TrainFailure {
            error,
            round,
            last_finite: vec![(AgentRole::Av, av.clone()), (AgentRole::Bv, bv.clone())],
        };
        let first = passes.len();
        bv.buffer.clear();
        for pass in 0..schedule.n_mu {
            let log = optimize_pass(AgentRole::Bv, &mut bv, &av, schedule, cfg, rng, (round, pass))
                .map_err(|e| fail(e, &av, &bv))?;
            env_steps += log.env_steps;
            passes.push(log);
        }
        av.buffer.clear();
        for pass in 0..schedule.n_v {
            let log = optimize_pass(AgentRole::Av, &mut av, &bv, schedule, cfg, rng, (round, pass))
                .map_err(|e| fail(e, &av, &bv))?;
            env_steps += log.env_steps;
            passes.push(log);
        }
        info!("round {round} done: {} env steps so far", env_steps);
        on_round(round, &av, &bv, &passes[first..]).map_err(|e| fail(e, &av, &bv))?;
    }
    Ok(TrainOutcome { av, bv, passes, env_steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sac::SacConfig;
    use crate::scenario::{Vehicle, VehicleState};

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            sac: SacConfig { hidden: vec![16, 16], batch_size: 16, warmup: 32, buffer_capacity: 5000, ..SacConfig::default() },
            ..ExperimentConfig::default()
        }
    }

    fn two_car_scene(av: VehicleState, bv: VehicleState) -> Scene {
        let cfg = ExperimentConfig::default();
        let vehicles =
            vec![Vehicle { id: 0, state: av, dims: cfg.vehicle }, Vehicle { id: 1, state: bv, dims: cfg.vehicle }];
        Scene::new(0.0, vehicles, cfg.road).unwrap()
    }

    #[test]
    fn termination_rules_in_order() {
        let cfg = ExperimentConfig::default();
        let far = VehicleState::new(8.75, -200.0, 8.0, -90.0);
        let ok = two_car_scene(VehicleState::new(5.25, -50.0, 8.0, -90.0), far);
        assert_eq!(check_termination(&ok, 3, &[], &cfg), None);
        assert_eq!(check_termination(&ok, cfg.sim.h_max, &[], &cfg), Some(Termination::Horizon));

        let overlap = two_car_scene(VehicleState::new(5.25, -50.0, 8.0, -90.0), VehicleState::new(5.25, -52.0, 8.0, -90.0));
        assert_eq!(check_termination(&overlap, cfg.sim.h_max, &[], &cfg), Some(Termination::Collision));

        let off = two_car_scene(VehicleState::new(cfg.road.width() + 0.1, -50.0, 8.0, -90.0), far);
        assert_eq!(check_termination(&off, cfg.sim.h_max, &[], &cfg), Some(Termination::OffRoad));
        let off_left = two_car_scene(VehicleState::new(-0.1, -50.0, 8.0, -90.0), far);
        assert_eq!(check_termination(&off_left, 0, &[], &cfg), Some(Termination::OffRoad));

        let end = two_car_scene(VehicleState::new(5.25, -cfg.road.length - 0.01, 8.0, -90.0), far);
        assert_eq!(check_termination(&end, cfg.sim.h_max, &[], &cfg), Some(Termination::RoadEnd));
    }

    #[test]
    fn one_step_roll_has_expected_arity() {
        let cfg = small_cfg();
        let mut rng = crate::rng_from_seed(1);
        let agent = SacAgent::new(cfg.obs_dim(), cfg.sac.clone(), &mut rng);
        let out = roll(&cfg, Controller::Sample(&agent.actor), Controller::Mode(&agent.actor), 1, BvReward::Attack, &mut rng)
            .unwrap();
        assert_eq!(out.av.len(), 1);
        assert_eq!(out.bv.len(), cfg.n_bv);
        assert_eq!(out.env_steps, 1);
        assert_eq!(out.episodes.len(), 1);
        assert_eq!(out.av[0].obs.len(), cfg.obs_dim());
        // BVs share the team reward
        assert!(out.bv.iter().all(|t| t.reward == out.bv[0].reward));
    }

    #[test]
    fn zero_actions_far_apart_give_plain_reward_arithmetic() {
        let cfg = ExperimentConfig { n_bv: 1, ..ExperimentConfig::default() };
        let mut ep = Episode::new(&cfg, 4, "zero", "zero").unwrap();
        // Push the single BV far away in another lane.
        ep.scene.vehicles[1].state = VehicleState::new(cfg.road.lane_center(0), -300.0, 7.0, -90.0);
        ep.scene.vehicles[0].state = VehicleState::new(cfg.road.lane_center(2), -40.0, 9.0, -90.0);
        let out = ep.step(&[Action::default(), Action::default()], &cfg).unwrap();
        let a = cfg.rewards;
        // Coasting straight keeps speeds and headings.
        assert_eq!(out.drive.collision, 0.0);
        assert!((out.drive.speed + a.alpha2 * 1.0).abs() < 1e-12);
        assert_eq!(out.drive.yaw, 0.0);
        assert!((out.drive.cooperation + a.alpha4 * 2.0).abs() < 1e-12);
        assert!((out.attack.speed + a.alpha5 * 1.0).abs() < 1e-12);
        assert_eq!(out.attack.lane, 0.0);
        assert_eq!(out.attack.impulse, 0.0);
        assert_eq!(out.termination, None);
    }

    #[test]
    fn roll_is_deterministic() {
        let cfg = small_cfg();
        let agent = SacAgent::new(cfg.obs_dim(), cfg.sac.clone(), &mut crate::rng_from_seed(2));
        let run = |seed| {
            let mut rng = crate::rng_from_seed(seed);
            roll(&cfg, Controller::Sample(&agent.actor), Controller::Mode(&agent.actor), 300, BvReward::Attack, &mut rng)
                .unwrap()
        };
        let (a, b) = (run(7), run(7));
        assert_eq!(a.av, b.av);
        assert_eq!(a.bv, b.bv);
        assert_eq!(a.env_steps, 300);
        assert_eq!(a.av.len(), 300);
    }

    #[test]
    fn horizon_is_a_truncation() {
        let mut cfg = ExperimentConfig::default();
        cfg.sim.h_max = 5;
        let mut rng = crate::rng_from_seed(3);
        let out = roll(&cfg, Controller::Autopilot, Controller::Autopilot, 12, BvReward::Attack, &mut rng).unwrap();
        assert_eq!(out.episodes.len(), 3);
        assert!(out.episodes[..2].iter().all(|e| e.record.termination() == Some(Termination::Horizon)));
        assert!(out.av.iter().all(|t| !t.done));
    }

    #[test]
    fn pretraining_below_warmup_only_fills_the_buffer() {
        let cfg = small_cfg();
        let init = SacAgent::new(cfg.obs_dim(), cfg.sac.clone(), &mut crate::rng_from_seed(5));
        let out = pretrain(AgentRole::Av, &cfg, 10, &mut crate::rng_from_seed(5)).unwrap();
        assert_eq!(out.grad_steps, 0);
        assert_eq!(out.agent.checksum(), init.checksum());
        assert_eq!(out.agent.buffer.len(), 10);
        let bv = pretrain(AgentRole::Bv, &cfg, 10, &mut crate::rng_from_seed(5)).unwrap();
        assert_eq!(bv.agent.buffer.len(), 10 * cfg.n_bv);
        assert_eq!(bv.grad_steps, 0);
    }

    #[test]
    fn pretraining_is_reproducible() {
        let cfg = small_cfg();
        let a = pretrain(AgentRole::Av, &cfg, 60, &mut crate::rng_from_seed(6)).unwrap();
        let b = pretrain(AgentRole::Av, &cfg, 60, &mut crate::rng_from_seed(6)).unwrap();
        assert!(a.grad_steps > 0);
        assert_eq!(a.agent.checksum(), b.agent.checksum());
    }

    #[test]
    fn minimal_alternation_consumes_exact_steps_and_freezes() {
        let cfg = small_cfg();
        let schedule = TrainSchedule { n_iter: 1, n_mu: 1, n_v: 1, n_step: 10, steps_per_update: 1 };
        let mut rng = crate::rng_from_seed(8);
        let av = SacAgent::new(cfg.obs_dim(), cfg.sac.clone(), &mut rng);
        let bv = SacAgent::new(cfg.obs_dim(), cfg.sac.clone(), &mut rng);
        let av_sum = av.checksum();
        let mut rounds = Vec::new();
        let out = alternate_train(&schedule, &cfg, av, bv, &mut rng, |r, _, _, logs| {
            rounds.push((r, logs.len()));
            Ok(())
        })
        .unwrap();
        assert_eq!(out.env_steps, 20);
        assert_eq!(rounds, vec![(1, 2)]);
        assert_eq!(out.passes[0].role, AgentRole::Bv);
        assert_eq!(out.passes[0].frozen_checksum, av_sum);
        assert_eq!(out.passes[1].role, AgentRole::Av);
    }
}
