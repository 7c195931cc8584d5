//! `nearmiss`: pretraining, alternating training, evaluation and log tools.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use nearmiss_core::eval::{checkpoint_sweep, run_matchup_episodes, smooth_series, MetricsReport, PolicySpec, DEFAULT_EPISODES};
use nearmiss_core::persist::{
    load_checkpoint, load_config, log_to_csv, read_log, read_log_prefix, save_checkpoint, write_config, write_log,
    write_pass_logs, Checkpoint, DirLock,
};
use nearmiss_core::rarl::{alternate_train, pretrain, PassLog, TrainFailure};
use nearmiss_core::sac::SacAgent;
use nearmiss_core::{rng_from_seed, AgentRole, ExperimentConfig};

#[derive(Parser)]
#[command(name = "nearmiss", version, about = "Near-miss adversarial training for a 2-D highway simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one role alone against autopilot opponents.
    Pretrain(PretrainArgs),
    /// Alternate BV and AV training for a number of rounds.
    Train(TrainArgs),
    /// Evaluate one AV policy against one BV policy.
    Eval(EvalArgs),
    /// Evaluate every requested round of one role against a fixed opponent.
    Sweep(SweepArgs),
    /// Convert a scenario log to per-frame CSV and print its metrics.
    Replay(ReplayArgs),
    /// Per-round aggregates of a metrics CSV, with exponential smoothing.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment config file; defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (locked for the duration of the run).
    #[arg(long)]
    out: PathBuf,
    /// Load checkpoints written under a different config.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    role: AgentRole,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Environment steps; defaults to `pretrain_steps` from the config.
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    /// Starting AV checkpoint; a fresh agent when omitted.
    #[arg(long)]
    av_ckpt: Option<PathBuf>,
    /// Starting BV checkpoint; a fresh agent when omitted.
    #[arg(long)]
    bv_ckpt: Option<PathBuf>,
    /// Rounds to run; defaults to `schedule.n_iter` from the config.
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    /// `auto` or a checkpoint path.
    #[arg(long)]
    av: String,
    /// `auto` or a checkpoint path.
    #[arg(long)]
    bv: String,
    #[arg(long, default_value_t = DEFAULT_EPISODES)]
    episodes: usize,
    /// Comma-separated evaluation seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Also write one scenario log per episode under `logs/`.
    #[arg(long)]
    logs: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    /// Role whose checkpoints vary across rounds.
    #[arg(long)]
    vary: AgentRole,
    /// Comma-separated round numbers.
    #[arg(long, value_delimiter = ',', required = true)]
    rounds: Vec<usize>,
    /// Directory written by `train`, holding `round_NNN/{av,bv}.ckpt`.
    #[arg(long)]
    train_dir: PathBuf,
    /// Opponent policy: `auto` or a checkpoint path.
    #[arg(long, default_value = "auto")]
    fixed: String,
    #[arg(long, default_value_t = DEFAULT_EPISODES)]
    episodes: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    log: PathBuf,
    /// Destination of the per-frame CSV.
    #[arg(long)]
    csv: PathBuf,
    /// Accept a log whose last line was cut off by a crash.
    #[arg(long)]
    partial: bool,
}

#[derive(Args)]
struct MetricsArgs {
    /// Directory holding `metrics.csv`, or the CSV itself.
    #[arg(long = "in")]
    input: PathBuf,
    /// Smoothing factor in (0, 1]; 1 leaves the series unchanged.
    #[arg(long, default_value_t = 1.0)]
    smooth: f64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .parse_filters(&std::env::var("NEARMISS_LOG_LEVEL").unwrap_or_else(|_| "info".into()))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Metrics(a) => cmd_metrics(a),
    }
}

/// Loads the config, locks the output directory and records the resolved
/// config there.
fn open_run(common: &Common) -> Result<(ExperimentConfig, DirLock)> {
    let cfg = match &common.config {
        Some(path) => load_config(path).with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    let lock = DirLock::acquire(&common.out)?;
    write_config(&common.out.join("config.toml"), &cfg)?;
    Ok((cfg, lock))
}

fn load_agent(path: &Path, role: AgentRole, cfg: &ExperimentConfig, force: bool) -> Result<SacAgent> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    ckpt.check_config(cfg, force).with_context(|| format!("checkpoint {}", path.display()))?;
    if ckpt.role != role {
        warn!("{} holds a {} policy, used here as {role}", path.display(), ckpt.role);
    }
    if ckpt.obs_dim != cfg.obs_dim() {
        bail!("checkpoint {} expects {} observations, config gives {}", path.display(), ckpt.obs_dim, cfg.obs_dim());
    }
    Ok(ckpt.to_agent(&cfg.sac)?)
}

fn policy(spec: &str, role: AgentRole, cfg: &ExperimentConfig, force: bool) -> Result<PolicySpec> {
    if spec == "auto" {
        return Ok(PolicySpec::Autopilot);
    }
    let agent = load_agent(Path::new(spec), role, cfg, force)?;
    Ok(PolicySpec::Actor { label: spec.to_string(), actor: Box::new(agent.actor) })
}

fn save_agent(path: &Path, role: AgentRole, round: usize, cfg: &ExperimentConfig, agent: &SacAgent) -> Result<()> {
    save_checkpoint(path, &Checkpoint::from_agent(role, round, cfg, agent))?;
    Ok(())
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    report.write_csv(BufWriter::new(File::create(dir.join("metrics.csv"))?))?;
    report.write_aggregate_csv(BufWriter::new(File::create(dir.join("aggregate.csv"))?))?;
    Ok(())
}

/// Keeps the last finite parameters of a diverged run for inspection.
fn save_failure(out: &Path, cfg: &ExperimentConfig, failure: &TrainFailure) -> Result<()> {
    let dir = out.join("failed");
    fs::create_dir_all(&dir)?;
    for (role, agent) in &failure.last_finite {
        save_agent(&dir.join(format!("{role}.ckpt")), *role, failure.round, cfg, agent)?;
    }
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let (cfg, _lock) = open_run(&a.common)?;
    let steps = a.steps.unwrap_or(cfg.pretrain_steps);
    let mut rng = rng_from_seed(a.seed);
    info!("pretraining {} for {steps} steps", a.role);
    let out = match pretrain(a.role, &cfg, steps, &mut rng) {
        Ok(out) => out,
        Err(failure) => {
            save_failure(&a.common.out, &cfg, &failure)?;
            return Err(failure.into());
        }
    };
    save_agent(&a.common.out.join(format!("{}.ckpt", a.role)), a.role, 0, &cfg, &out.agent)?;
    let mut returns = String::from("episode,return\n");
    for (i, r) in out.episode_returns.iter().enumerate() {
        writeln!(returns, "{i},{r}")?;
    }
    fs::write(a.common.out.join("returns.csv"), returns)?;
    println!("{} episodes, {} gradient steps", out.episode_returns.len(), out.grad_steps);
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (cfg, _lock) = open_run(&a.common)?;
    let mut schedule = cfg.schedule.clone();
    if let Some(rounds) = a.rounds {
        schedule.n_iter = rounds;
    }
    let mut rng = rng_from_seed(a.seed);
    let mut start = |path: &Option<PathBuf>, role| match path {
        Some(p) => load_agent(p, role, &cfg, a.common.force),
        None => Ok(SacAgent::new(cfg.obs_dim(), cfg.sac.clone(), &mut rng)),
    };
    let av = start(&a.av_ckpt, AgentRole::Av)?;
    let bv = start(&a.bv_ckpt, AgentRole::Bv)?;

    let out_dir = a.common.out.clone();
    let mut all_passes: Vec<PassLog> = Vec::new();
    let result = alternate_train(&schedule, &cfg, av, bv, &mut rng, |round, av, bv, passes| {
        let dir = out_dir.join(format!("round_{round:03}"));
        fs::create_dir_all(&dir).map_err(|e| nearmiss_core::Error::Domain(format!("{}: {e}", dir.display())))?;
        save_checkpoint(&dir.join("av.ckpt"), &Checkpoint::from_agent(AgentRole::Av, round, &cfg, av))?;
        save_checkpoint(&dir.join("bv.ckpt"), &Checkpoint::from_agent(AgentRole::Bv, round, &cfg, bv))?;
        // Rewritten every round so an interrupted run keeps its history.
        all_passes.extend_from_slice(passes);
        let file = File::create(out_dir.join("passes.csv"))
            .map_err(|e| nearmiss_core::Error::Domain(format!("passes.csv: {e}")))?;
        write_pass_logs(&all_passes, BufWriter::new(file))
    });
    match result {
        Ok(out) => {
            println!("{} rounds, {} environment steps", schedule.n_iter, out.env_steps);
            Ok(())
        }
        Err(failure) => {
            save_failure(&a.common.out, &cfg, &failure)?;
            Err(failure.into())
        }
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (cfg, _lock) = open_run(&a.common)?;
    let av = policy(&a.av, AgentRole::Av, &cfg, a.common.force)?;
    let bv = policy(&a.bv, AgentRole::Bv, &cfg, a.common.force)?;
    let episodes = run_matchup_episodes(&av, &bv, a.episodes, &a.seeds, &cfg, 0)?;
    if a.logs {
        let dir = a.common.out.join("logs");
        fs::create_dir_all(&dir)?;
        for e in &episodes {
            write_log(&dir.join(format!("seed{}_ep{:03}.jsonl", e.row.seed, e.row.episode)), &e.record)?;
        }
    }
    let report = MetricsReport { rows: episodes.into_iter().map(|e| e.row).collect() };
    write_report(&a.common.out, &report)?;
    for s in report.per_seed() {
        println!("seed {}: CPS {:.4} CPM {:.4} J_max {:.1} OBF {:.1}", s.seed, s.cps, s.cpm, s.jmax, s.obf);
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let (cfg, _lock) = open_run(&a.common)?;
    let fixed_role = match a.vary {
        AgentRole::Av => AgentRole::Bv,
        AgentRole::Bv => AgentRole::Av,
    };
    let fixed = policy(&a.fixed, fixed_role, &cfg, a.common.force)?;
    let mut available = BTreeMap::new();
    for &round in &a.rounds {
        let path = a.train_dir.join(format!("round_{round:03}")).join(format!("{}.ckpt", a.vary));
        if path.exists() {
            let agent = load_agent(&path, a.vary, &cfg, a.common.force)?;
            let label = format!("{}_round_{round}", a.vary);
            available.insert(round, PolicySpec::Actor { label, actor: Box::new(agent.actor) });
        }
    }
    let report = checkpoint_sweep(&fixed, a.vary, &a.rounds, &available, a.episodes, &a.seeds, &cfg)
        .with_context(|| format!("sweeping {}", a.train_dir.display()))?;
    write_report(&a.common.out, &report)?;
    let mut trend = String::from("seed,spearman_cps\n");
    for (seed, rho) in report.round_trend(|s| s.cps)? {
        writeln!(trend, "{seed},{rho}")?;
        println!("seed {seed}: round-vs-CPS Spearman {rho:.3}");
    }
    fs::write(a.common.out.join("trend.csv"), trend)?;
    Ok(())
}

fn cmd_replay(a: ReplayArgs) -> Result<()> {
    let record = if a.partial { read_log_prefix(&a.log)? } else { read_log(&a.log)? };
    let file = File::create(&a.csv).with_context(|| format!("creating {}", a.csv.display()))?;
    log_to_csv(&record, BufWriter::new(file))?;
    let m = nearmiss_core::eval::episode_metrics(&record)?;
    println!(
        "steps {} duration {} s distance {:.2} m collisions {} J_max {} OBF {} termination {}",
        record.steps.len(),
        m.duration,
        m.av_distance,
        m.n_collisions,
        m.j_max,
        m.obf,
        m.termination.map_or("none", |t| t.as_str())
    );
    Ok(())
}

fn cmd_metrics(a: MetricsArgs) -> Result<()> {
    let path = if a.input.is_dir() { a.input.join("metrics.csv") } else { a.input.clone() };
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let report = MetricsReport::read_csv(file).with_context(|| format!("reading {}", path.display()))?;
    let agg = report.aggregate();
    let series = |f: fn(&nearmiss_core::eval::RoundAggregate) -> f64| smooth_series(&agg.iter().map(f).collect::<Vec<_>>(), a.smooth);
    let cps = series(|r| r.cps.mean)?;
    let cpm = series(|r| r.cpm.mean)?;
    let jmax = series(|r| r.jmax.mean)?;
    let obf = series(|r| r.obf.mean)?;
    let mut out = String::from(
        "round,n_seeds,cps_mean,cps_std,cps_smoothed,cpm_mean,cpm_std,cpm_smoothed,jmax_mean,jmax_std,jmax_smoothed,obf_mean,obf_std,obf_smoothed\n",
    );
    for (i, r) in agg.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.round, r.n_seeds, r.cps.mean, r.cps.std, cps[i], r.cpm.mean, r.cpm.std, cpm[i], r.jmax.mean, r.jmax.std,
            jmax[i], r.obf.mean, r.obf.std, obf[i]
        )?;
    }
    fs::write(&a.out, out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} rounds, {} seeds", agg.len(), report.seeds().len());
    Ok(())
}
