//! Episode metrics (CPS, CPM, J_max, OBF), matchups and multi-seed reports.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use serde::Serialize;

use crate::dynamics::PhysicsFrame;
use crate::rarl::{run_episode, AgentRole, Controller, Termination};
use crate::sac::Actor;
use crate::scenario::{ScenarioRecord, Scene};
use crate::{Error, ExperimentConfig, Result};

/// Default evaluation episodes per seed.
pub const DEFAULT_EPISODES: usize = 20;

/// Collisions per second of test time.
pub fn compute_cps(n_col: usize, t_total: f64) -> Result<f64> {
    if !(t_total > 0.0) {
        return Err(Error::Domain(format!("test time must be > 0, got {t_total}")));
    }
    Ok(n_col as f64 / t_total)
}

/// Collisions per 100 m of AV travel.
pub fn compute_cpm(n_col: usize, distance_m: f64) -> Result<f64> {
    if !(distance_m > 0.0) {
        return Err(Error::Domain(format!("travel distance must be > 0, got {distance_m}")));
    }
    Ok(n_col as f64 / (distance_m / 100.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeMetrics {
    /// AV-BV collision events.
    pub n_collisions: usize,
    /// Seconds of simulated time.
    pub duration: f64,
    /// Metres driven by the AV.
    pub av_distance: f64,
    /// Largest AV-BV impulse (kg m/s), 0 without collisions.
    pub j_max: f64,
    /// Physics frames in which at least one BV occludes the AV.
    pub obf: usize,
    pub termination: Option<Termination>,
}

impl EpisodeMetrics {
    pub fn cps(&self) -> Result<f64> {
        compute_cps(self.n_collisions, self.duration)
    }

    pub fn cpm(&self) -> Result<f64> {
        compute_cpm(self.n_collisions, self.av_distance)
    }
}

/// Incremental fold of physics frames into [`EpisodeMetrics`].
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsAccumulator {
    av_id: u32,
    n_vehicles: usize,
    last_av: (f64, f64),
    frames: usize,
    n_collisions: usize,
    j_max: f64,
    obf: usize,
    distance: f64,
}

impl MetricsAccumulator {
    pub fn new(initial: &Scene) -> Self {
        let av = initial.av();
        Self {
            av_id: av.id,
            n_vehicles: initial.vehicles.len(),
            last_av: (av.state.x, av.state.y),
            frames: 0,
            n_collisions: 0,
            j_max: 0.0,
            obf: 0,
            distance: 0.0,
        }
    }

    pub fn observe(&mut self, frame: &PhysicsFrame) {
        for c in frame.events.av_collisions(self.av_id) {
            self.n_collisions += 1;
            self.j_max = self.j_max.max(c.j);
        }
        if !frame.events.occluding_bv_ids.is_empty() {
            self.obf += 1;
        }
        let av = &frame.states[0];
        self.distance += (av.x - self.last_av.0).hypot(av.y - self.last_av.1);
        self.last_av = (av.x, av.y);
        self.frames += 1;
    }

    pub fn finish(&self, dt_phys: f64, termination: Option<Termination>) -> EpisodeMetrics {
        EpisodeMetrics {
            n_collisions: self.n_collisions,
            duration: self.frames as f64 * dt_phys,
            av_distance: self.distance,
            j_max: self.j_max,
            obf: self.obf,
            termination,
        }
    }
}

/// Metrics of a recorded episode.
pub fn episode_metrics(log: &ScenarioRecord) -> Result<EpisodeMetrics> {
    let initial = &log.header.initial;
    if initial.vehicles.is_empty() {
        return Err(Error::Domain("episode log has an empty initial scene".into()));
    }
    let mut acc = MetricsAccumulator::new(initial);
    for step in &log.steps {
        for f in &step.frames {
            if f.states.len() != acc.n_vehicles {
                return Err(Error::Domain(format!(
                    "step {} has {} vehicles, expected {}",
                    step.step,
                    f.states.len(),
                    acc.n_vehicles
                )));
            }
            acc.observe(f);
        }
    }
    Ok(acc.finish(log.header.dt_phys, log.termination()))
}

/// Exponential smoothing `s_t = c x_t + (1 - c) s_{t-1}` with `s_0 = x_0`.
pub fn smooth_series(values: &[f64], c: f64) -> Result<Vec<f64>> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::Domain(format!("smoothing coefficient must lie in (0, 1], got {c}")));
    }
    if values.is_empty() {
        return Err(Error::Domain("cannot smooth an empty series".into()));
    }
    let mut out = Vec::with_capacity(values.len());
    let mut s = values[0];
    out.push(s);
    for &x in &values[1..] {
        s = c * x + (1.0 - c) * s;
        out.push(s);
    }
    Ok(out)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. A constant series
/// has no ordering, and yields 0.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Domain("spearman needs two equal-length series of length >= 2".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// A policy taking part in a matchup.
#[derive(Debug, Clone)]
pub enum PolicySpec {
    Autopilot,
    Actor { label: String, actor: Box<Actor> },
}

impl PolicySpec {
    pub fn label(&self) -> &str {
        match self {
            PolicySpec::Autopilot => "autopilot",
            PolicySpec::Actor { label, .. } => label,
        }
    }

    fn controller(&self) -> Controller<'_> {
        match self {
            PolicySpec::Autopilot => Controller::Autopilot,
            PolicySpec::Actor { actor, .. } => Controller::Mode(actor),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub round: usize,
    pub seed: u64,
    pub episode: usize,
    pub metrics: EpisodeMetrics,
}

/// Pooled metrics of one seed at one round.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedAggregate {
    pub round: usize,
    pub seed: u64,
    /// Total collisions over total time.
    pub cps: f64,
    /// Total collisions per 100 m of total distance.
    pub cpm: f64,
    pub jmax: f64,
    pub obf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        // Identical values aggregate to themselves, free of rounding.
        if xs.windows(2).all(|w| w[0] == w[1]) {
            return Self { mean: xs.first().copied().unwrap_or(f64::NAN), std: 0.0 };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundAggregate {
    pub round: usize,
    pub n_seeds: usize,
    pub cps: MeanStd,
    pub cpm: MeanStd,
    pub jmax: MeanStd,
    pub obf: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn rounds(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.rows.iter().map(|r| r.round).collect();
        r.sort_unstable();
        r.dedup();
        r
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn extend(&mut self, other: MetricsReport) {
        self.rows.extend(other.rows);
    }

    /// Per-(round, seed) pooled metrics, sorted by round then seed.
    pub fn per_seed(&self) -> Vec<SeedAggregate> {
        let mut groups: BTreeMap<(usize, u64), Vec<&EpisodeMetrics>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((r.round, r.seed)).or_default().push(&r.metrics);
        }
        groups
            .into_iter()
            .map(|((round, seed), ms)| {
                let n: usize = ms.iter().map(|m| m.n_collisions).sum();
                let t: f64 = ms.iter().map(|m| m.duration).sum();
                let d: f64 = ms.iter().map(|m| m.av_distance).sum();
                let k = ms.len() as f64;
                SeedAggregate {
                    round,
                    seed,
                    cps: compute_cps(n, t).unwrap_or(f64::NAN),
                    cpm: compute_cpm(n, d).unwrap_or(f64::NAN),
                    jmax: ms.iter().map(|m| m.j_max).sum::<f64>() / k,
                    obf: ms.iter().map(|m| m.obf as f64).sum::<f64>() / k,
                }
            })
            .collect()
    }

    /// Cross-seed mean and standard deviation per round.
    pub fn aggregate(&self) -> Vec<RoundAggregate> {
        let per_seed = self.per_seed();
        self.rounds()
            .into_iter()
            .map(|round| {
                let g: Vec<&SeedAggregate> = per_seed.iter().filter(|s| s.round == round).collect();
                let col = |f: fn(&SeedAggregate) -> f64| MeanStd::of(&g.iter().map(|s| f(s)).collect::<Vec<_>>());
                RoundAggregate {
                    round,
                    n_seeds: g.len(),
                    cps: col(|s| s.cps),
                    cpm: col(|s| s.cpm),
                    jmax: col(|s| s.jmax),
                    obf: col(|s| s.obf),
                }
            })
            .collect()
    }

    /// Spearman correlation of round against a per-seed metric, per seed.
    pub fn round_trend(&self, metric: fn(&SeedAggregate) -> f64) -> Result<Vec<(u64, f64)>> {
        let per_seed = self.per_seed();
        self.seeds()
            .into_iter()
            .map(|seed| {
                let pts: Vec<&SeedAggregate> = per_seed.iter().filter(|s| s.seed == seed).collect();
                let x: Vec<f64> = pts.iter().map(|s| s.round as f64).collect();
                let y: Vec<f64> = pts.iter().map(|s| metric(s)).collect();
                Ok((seed, spearman(&x, &y)?))
            })
            .collect()
    }

    /// One line per episode.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let to_err = |e: csv::Error| Error::Domain(format!("csv: {e}"));
        out.write_record([
            "round", "seed", "episode", "n_collisions", "duration_s", "distance_m", "cps", "cpm", "jmax", "obf",
            "termination",
        ])
        .map_err(to_err)?;
        for r in &self.rows {
            let m = &r.metrics;
            out.write_record([
                r.round.to_string(),
                r.seed.to_string(),
                r.episode.to_string(),
                m.n_collisions.to_string(),
                m.duration.to_string(),
                m.av_distance.to_string(),
                m.cps().map_or("NaN".into(), |v| v.to_string()),
                m.cpm().map_or("NaN".into(), |v| v.to_string()),
                m.j_max.to_string(),
                m.obf.to_string(),
                m.termination.map_or("none", |t| t.as_str()).to_string(),
            ])
            .map_err(to_err)?;
        }
        out.flush().map_err(|e| Error::Domain(e.to_string()))
    }

    /// Parses the output of [`MetricsReport::write_csv`]. Rates are
    /// recomputed from the raw columns.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut input = csv::Reader::from_reader(r);
        let mut rows = Vec::new();
        for (i, rec) in input.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
            if rec.len() != 11 {
                return Err(Error::Parse { line, msg: format!("expected 11 fields, found {}", rec.len()) });
            }
            let field = |k: usize| rec.get(k).unwrap_or_default();
            fn num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
                s.parse().map_err(|_| Error::Parse { line, msg: format!("bad number '{s}'") })
            }
            let termination = match field(10) {
                "none" => None,
                t => Some(t.parse().map_err(|e: Error| Error::Parse { line, msg: e.to_string() })?),
            };
            rows.push(MetricsRow {
                round: num(field(0), line)?,
                seed: num(field(1), line)?,
                episode: num(field(2), line)?,
                metrics: EpisodeMetrics {
                    n_collisions: num(field(3), line)?,
                    duration: num(field(4), line)?,
                    av_distance: num(field(5), line)?,
                    j_max: num(field(8), line)?,
                    obf: num(field(9), line)?,
                    termination,
                },
            });
        }
        Ok(Self { rows })
    }

    /// Per-round mean and standard deviation over seeds.
    pub fn write_aggregate_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let to_err = |e: csv::Error| Error::Domain(format!("csv: {e}"));
        out.write_record([
            "round", "n_seeds", "cps_mean", "cps_std", "cpm_mean", "cpm_std", "jmax_mean", "jmax_std", "obf_mean",
            "obf_std",
        ])
        .map_err(to_err)?;
        for a in self.aggregate() {
            let mut rec = vec![a.round.to_string(), a.n_seeds.to_string()];
            for m in [a.cps, a.cpm, a.jmax, a.obf] {
                rec.push(m.mean.to_string());
                rec.push(m.std.to_string());
            }
            out.write_record(&rec).map_err(to_err)?;
        }
        out.flush().map_err(|e| Error::Domain(e.to_string()))
    }
}

/// Scene seeds for the episodes of one evaluation seed.
pub fn episode_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    let mut rng = crate::rng_from_seed(seed);
    (0..episodes).map(|_| rng.random()).collect()
}

/// One evaluated episode with its log.
#[derive(Debug, Clone)]
pub struct EvaluatedEpisode {
    pub row: MetricsRow,
    pub record: ScenarioRecord,
}

/// Runs `episodes` deterministic episodes per seed, seeds in parallel.
/// Rows are returned sorted by seed order then episode.
pub fn run_matchup_episodes(
    av: &PolicySpec,
    bv: &PolicySpec,
    episodes: usize,
    seeds: &[u64],
    cfg: &ExperimentConfig,
    round: usize,
) -> Result<Vec<EvaluatedEpisode>> {
    let per_seed: Vec<Result<Vec<EvaluatedEpisode>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                scope.spawn(move || {
                    // Deterministic controllers never draw from this generator.
                    let mut rng = crate::rng_from_seed(seed);
                    episode_seeds(seed, episodes)
                        .into_iter()
                        .enumerate()
                        .map(|(episode, scene_seed)| {
                            let (record, metrics) = run_episode(
                                cfg,
                                av.controller(),
                                bv.controller(),
                                scene_seed,
                                (av.label(), bv.label()),
                                &mut rng,
                            )?;
                            Ok(EvaluatedEpisode { row: MetricsRow { round, seed, episode, metrics }, record })
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("matchup worker panicked")).collect()
    });
    let mut out = Vec::new();
    for r in per_seed {
        out.extend(r?);
    }
    Ok(out)
}

/// Deterministic matchup of an AV policy against a BV policy.
pub fn run_matchup(
    av: &PolicySpec,
    bv: &PolicySpec,
    episodes: usize,
    seeds: &[u64],
    cfg: &ExperimentConfig,
) -> Result<MetricsReport> {
    let rows = run_matchup_episodes(av, bv, episodes, seeds, cfg, 0)?.into_iter().map(|e| e.row).collect();
    Ok(MetricsReport { rows })
}

/// Matchups of a fixed policy against each requested round of the varying role.
pub fn checkpoint_sweep(
    fixed: &PolicySpec,
    varying: AgentRole,
    rounds: &[usize],
    available: &BTreeMap<usize, PolicySpec>,
    episodes: usize,
    seeds: &[u64],
    cfg: &ExperimentConfig,
) -> Result<MetricsReport> {
    let missing: Vec<usize> = rounds.iter().copied().filter(|r| !available.contains_key(r)).collect();
    if !missing.is_empty() {
        return Err(Error::MissingRounds(missing));
    }
    let mut report = MetricsReport::default();
    for &round in rounds {
        let policy = &available[&round];
        let (av, bv) = match varying {
            AgentRole::Av => (policy, fixed),
            AgentRole::Bv => (fixed, policy),
        };
        let rows = run_matchup_episodes(av, bv, episodes, seeds, cfg, round)?;
        report.rows.extend(rows.into_iter().map(|e| e.row));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CollisionEvent, FrameEvents};
    use crate::scenario::{make_initial_scene, EpisodeHeader, StepRecord, StepRewards};
    use proptest::prelude::*;

    #[test]
    fn rate_formulas() {
        assert_eq!(compute_cps(3, 60.0).unwrap(), 0.05);
        assert_eq!(compute_cps(0, 100.0).unwrap(), 0.0);
        assert_eq!(compute_cps(7, 35.0).unwrap(), 0.2);
        assert_eq!(compute_cpm(3, 500.0).unwrap(), 0.6);
        assert_eq!(compute_cpm(0, 250.0).unwrap(), 0.0);
        assert_eq!(compute_cpm(2, 100.0).unwrap(), 2.0);
        assert!(compute_cps(1, 0.0).is_err());
        assert!(compute_cpm(1, -3.0).is_err());
    }

    #[test]
    fn smoothing_examples() {
        let xs = [3.0, -1.0, 4.5, 2.0];
        assert_eq!(smooth_series(&xs, 1.0).unwrap(), xs.to_vec());
        assert_eq!(smooth_series(&[2.0; 5], 0.3).unwrap(), vec![2.0; 5]);
        assert_eq!(smooth_series(&[0.0, 1.0], 0.5).unwrap(), vec![0.0, 0.5]);
        assert!(smooth_series(&xs, 0.0).is_err());
        assert!(smooth_series(&xs, 1.5).is_err());
        assert!(smooth_series(&[], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn smoothing_stays_within_range(xs in prop::collection::vec(-1e3f64..1e3, 1..50), c in 0.01f64..=1.0) {
            let s = smooth_series(&xs, c).unwrap();
            let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in s {
                prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            }
        }

        #[test]
        fn rates_are_zero_iff_no_collisions(n in 0usize..50, t in 0.1f64..1e4) {
            let cps = compute_cps(n, t).unwrap();
            let cpm = compute_cpm(n, t).unwrap();
            prop_assert!(cps >= 0.0 && cpm >= 0.0);
            prop_assert_eq!(cps == 0.0, n == 0);
            prop_assert_eq!(cpm == 0.0, n == 0);
        }
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).unwrap(), 0.0);
        // ties get average ranks: y ranks [1.5, 1.5, 3]
        let r = spearman(&[1.0, 2.0, 3.0], &[0.0, 0.0, 1.0]).unwrap();
        assert!((r - 0.75f64.sqrt()).abs() < 1e-12, "{r}");
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    fn synthetic_log(n_steps: usize, events: impl Fn(usize) -> FrameEvents) -> ScenarioRecord {
        let cfg = ExperimentConfig::default();
        let initial = make_initial_scene(&cfg, 0).unwrap();
        let mut steps = Vec::new();
        let mut frame_idx = 0;
        for step in 0..n_steps {
            let frames = (0..cfg.sim.frames_per_step)
                .map(|_| {
                    let f = PhysicsFrame {
                        t: (frame_idx + 1) as f64 * cfg.sim.dt_phys,
                        states: initial.vehicles.iter().map(|v| v.state).collect(),
                        events: events(frame_idx),
                    };
                    frame_idx += 1;
                    f
                })
                .collect();
            steps.push(StepRecord {
                step,
                actions: vec![Default::default(); initial.vehicles.len()],
                frames,
                rewards: StepRewards { drive: Default::default(), attack: Default::default() },
                termination: None,
            });
        }
        let header = EpisodeHeader {
            config_hash: cfg.hash(),
            seed: 0,
            av_spec: "a".into(),
            bv_spec: "b".into(),
            dt_phys: cfg.sim.dt_phys,
            frames_per_step: cfg.sim.frames_per_step,
            road: cfg.road,
            initial,
        };
        ScenarioRecord { header, steps }
    }

    #[test]
    fn empty_log_metrics() {
        let log = synthetic_log(240, |_| FrameEvents::default());
        let m = episode_metrics(&log).unwrap();
        assert!((m.duration - 60.0).abs() < 1e-9);
        assert_eq!((m.obf, m.j_max, m.n_collisions), (0, 0.0, 0));
    }

    #[test]
    fn jmax_is_the_largest_av_event() {
        let log = synthetic_log(4, |f| FrameEvents {
            collisions: match f {
                3 => vec![CollisionEvent { a: 0, b: 1, j: 750.0 }],
                7 => vec![CollisionEvent { a: 0, b: 2, j: 9000.0 }, CollisionEvent { a: 1, b: 2, j: 0.0 }],
                _ => vec![],
            },
            ..FrameEvents::default()
        });
        let m = episode_metrics(&log).unwrap();
        assert_eq!(m.j_max, 9000.0);
        assert_eq!(m.n_collisions, 2);
    }

    fn occlusion_log(first: std::ops::Range<usize>, second: std::ops::Range<usize>) -> ScenarioRecord {
        synthetic_log(8, |f| {
            let mut ids = Vec::new();
            if first.contains(&f) {
                ids.push(1);
            }
            if second.contains(&f) {
                ids.push(2);
            }
            FrameEvents { occluding_bv_ids: ids, ..FrameEvents::default() }
        })
    }

    #[test]
    fn obf_counts_frames_not_pairs() {
        // frames 10-19 and 15-24: 20 BV-frames but only 15 distinct frames
        assert_eq!(episode_metrics(&occlusion_log(10..20, 15..25)).unwrap().obf, 15);
        // frames 10-24 and 15-29: 25 BV-frames, 20 distinct frames
        assert_eq!(episode_metrics(&occlusion_log(10..25, 15..30)).unwrap().obf, 20);
    }

    #[test]
    fn aggregation_of_identical_seeds_is_that_value() {
        let m = EpisodeMetrics {
            n_collisions: 1,
            duration: 10.0,
            av_distance: 50.0,
            j_max: 300.0,
            obf: 7,
            termination: Some(Termination::Collision),
        };
        let rows = (0..3)
            .flat_map(|seed| (0..2).map(move |episode| (seed, episode)))
            .map(|(seed, episode)| MetricsRow { round: 1, seed, episode, metrics: m.clone() })
            .collect();
        let agg = MetricsReport { rows }.aggregate();
        assert_eq!(agg.len(), 1);
        assert_eq!(agg[0].n_seeds, 3);
        assert_eq!((agg[0].cps.mean, agg[0].cps.std), (0.1, 0.0));
        assert_eq!(agg[0].cpm.mean, 2.0);
        assert_eq!(agg[0].jmax.mean, 300.0);
        assert_eq!(agg[0].obf.mean, 7.0);
    }

    fn quick_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.sim.h_max = 40;
        cfg
    }

    #[test]
    fn autopilot_matchup_is_safe_and_sized() {
        let cfg = quick_cfg();
        let report = run_matchup(&PolicySpec::Autopilot, &PolicySpec::Autopilot, 2, &[1, 2, 3], &cfg).unwrap();
        assert_eq!(report.rows.len(), 6);
        assert!(report.rows.iter().all(|r| r.metrics.n_collisions == 0));
        let again = run_matchup(&PolicySpec::Autopilot, &PolicySpec::Autopilot, 2, &[1, 2, 3], &cfg).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn sweep_reports_missing_rounds() {
        let cfg = quick_cfg();
        let mut avail = BTreeMap::new();
        avail.insert(1, PolicySpec::Autopilot);
        let err = checkpoint_sweep(&PolicySpec::Autopilot, AgentRole::Bv, &[1, 2, 5], &avail, 1, &[0], &cfg).unwrap_err();
        assert!(matches!(err, Error::MissingRounds(ref r) if r == &vec![2, 5]));
    }

    #[test]
    fn singleton_sweep_equals_matchup() {
        let cfg = quick_cfg();
        let mut avail = BTreeMap::new();
        avail.insert(4, PolicySpec::Autopilot);
        let sweep = checkpoint_sweep(&PolicySpec::Autopilot, AgentRole::Bv, &[4], &avail, 2, &[9], &cfg).unwrap();
        let single = run_matchup(&PolicySpec::Autopilot, &PolicySpec::Autopilot, 2, &[9], &cfg).unwrap();
        let strip = |r: &MetricsReport| r.rows.iter().map(|x| (x.seed, x.episode, x.metrics.clone())).collect::<Vec<_>>();
        assert_eq!(strip(&sweep), strip(&single));
        assert!(sweep.rows.iter().all(|r| r.round == 4));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let cfg = quick_cfg();
        let report = run_matchup(&PolicySpec::Autopilot, &PolicySpec::Autopilot, 2, &[1], &cfg).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "round,seed,episode,n_collisions,duration_s,distance_m,cps,cpm,jmax,obf,termination");
        assert_eq!(lines.len(), 3);
        let mut agg = Vec::new();
        report.write_aggregate_csv(&mut agg).unwrap();
        assert_eq!(String::from_utf8(agg).unwrap().lines().count(), 2);
        assert_eq!(MetricsReport::read_csv(text.as_bytes()).unwrap(), report);
    }

    #[test]
    fn csv_reader_reports_line() {
        let text = "round,seed,episode,n_collisions,duration_s,distance_m,cps,cpm,jmax,obf,termination\n\
                    1,0,0,0,60,480,0,0,0,0,horizon\n\
                    1,0,1,x,60,480,0,0,0,0,horizon\n";
        match MetricsReport::read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
