use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fedcharge::config::RunConfig;
use fedcharge::eval_sim::{
    build_week_plan, evaluate_held_out, export_plot_data, export_training_curves, first_week_start,
    price_responsiveness, simulate_week, EvalMetrics, MeanPolicy, WEEK_HOURS,
};
use fedcharge::federation::{
    load_checkpoint, save_checkpoint, write_round_log_csv, Checkpoint, RoundLog, Trainer, TrainingData,
};
use fedcharge::neural::gradcheck::{check_networks, GradCheckOptions, NetworkShapes};
use fedcharge::price_data::{load_csv, split_train_eval, synthesize_prices, PriceSeries, PriceSplit};
use fedcharge::rng::seeded;

const CHECKPOINT_FILE: &str = "checkpoint.fck";

/// Federated soft actor-critic for EV charging and discharging.
///
/// Every tunable is a config key. `print-config` lists them all with their
/// defaults; `--set key=value` overrides any of them.
#[derive(Parser, Debug)]
#[command(name = "fedcharge", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed (fed.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (out_dir).
    #[arg(long, global = true)]
    out_dir: Option<String>,
    /// Number of agents (fed.n_agents).
    #[arg(long, global = true)]
    agents: Option<usize>,
    /// Training episodes (fed.episodes).
    #[arg(long, global = true)]
    episodes: Option<usize>,
    /// Worker threads; 0 uses one per agent (fed.workers).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Price CSV with `timestamp,price` rows (prices.csv).
    #[arg(long, global = true)]
    prices: Option<String>,
    /// Use synthetic sinusoidal prices (prices.synthetic).
    #[arg(long, global = true)]
    synthetic: bool,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run federated training and write the round log, curves and checkpoint.
    Train {
        /// Continue from this checkpoint up to the configured episode count.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also checkpoint every N episodes (0: only at the end).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Roll the trained policy out on every held-out day.
    Eval {
        /// Checkpoint to evaluate [default: <out-dir>/checkpoint.fck].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Simulate one week of trips on held-out prices.
    SimulateWeek {
        /// Checkpoint to evaluate [default: <out-dir>/checkpoint.fck].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Week start date, YYYY-MM-DD (eval.start).
        #[arg(long)]
        start: Option<String>,
    },
    /// Write a synthetic price CSV.
    SynthPrices {
        /// Output file [default: <out-dir>/prices.csv].
        #[arg(long)]
        output: Option<PathBuf>,
        /// Number of days (prices.synth_days).
        #[arg(long)]
        days: Option<usize>,
    },
    /// Compare network gradients against central finite differences.
    GradCheck {
        /// Number of consecutive seeds, starting at --seed (default 0).
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Corrupt the analytic gradient to exercise the failure path.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Print the effective configuration.
    PrintConfig,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut sets = Vec::new();
    if let Some(s) = c.seed {
        sets.push(format!("fed.seed={s}"));
    }
    if let Some(d) = &c.out_dir {
        sets.push(format!("out_dir={}", serde_json::to_string(d)?));
    }
    if let Some(n) = c.agents {
        sets.push(format!("fed.n_agents={n}"));
    }
    if let Some(n) = c.episodes {
        sets.push(format!("fed.episodes={n}"));
    }
    if let Some(n) = c.workers {
        sets.push(format!("fed.workers={n}"));
    }
    if let Some(p) = &c.prices {
        sets.push(format!("prices.csv={}", serde_json::to_string(p)?));
    }
    if c.synthetic {
        sets.push("prices.synthetic=true".into());
    }
    sets.extend(c.sets.iter().cloned());
    RunConfig::load_with(c.config.as_deref(), &sets).context("loading configuration")
}

fn load_prices(cfg: &RunConfig) -> Result<PriceSeries> {
    if let Some(path) = &cfg.prices.csv {
        return load_csv(path).with_context(|| format!("reading prices from {path}"));
    }
    if cfg.prices.synthetic {
        return Ok(synthesize_prices(&cfg.prices.synth_params()?)?);
    }
    bail!("no price source: pass --prices <csv> or --synthetic");
}

fn load_split(cfg: &RunConfig) -> Result<PriceSplit> {
    let split = split_train_eval(&load_prices(cfg)?);
    if split.train.is_empty() {
        bail!("price series has no training days");
    }
    Ok(split)
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

fn summary_line(log: &RoundLog, episodes: usize) -> String {
    let n = log.records.len() as f64;
    let mean = |f: &dyn Fn(&fedcharge::federation::AgentRecord) -> f64| log.records.iter().map(f).sum::<f64>() / n;
    format!(
        "episode {}/{} reward {:.4} price {:.4} anxiety {:.4} departure {:.4} alpha {:.4} {:.2}s",
        log.episode,
        episodes,
        mean(&|r| r.total_reward()),
        mean(&|r| r.reward.price),
        mean(&|r| r.reward.anxiety),
        mean(&|r| r.reward.departure),
        mean(&|r| r.alpha),
        log.duration.as_secs_f64(),
    )
}

fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, checkpoint_every: usize) -> Result<()> {
    let split = load_split(cfg)?;
    let out = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let data = Arc::new(TrainingData::from_split(&split)?);
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            ckpt.check_layout(&cfg.sac, &cfg.env_config(1.0))?;
            let mut t = ckpt.into_trainer(data)?;
            t.fed.episodes = cfg.fed.episodes;
            t
        }
        None => {
            let scale = match cfg.prices.scale {
                Some(s) => s,
                None => split.train_mean().context("empty training split")?,
            };
            Trainer::new(cfg.fed.clone(), cfg.sac.clone(), cfg.env_config(scale), cfg.profiles.clone(), data)?
        }
    };
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let episodes = trainer.fed.episodes;
    while !trainer.is_finished() {
        let log = trainer.run_episode()?;
        println!("{}", summary_line(log, episodes));
        if checkpoint_every > 0 && trainer.completed % checkpoint_every == 0 {
            save_checkpoint(&ckpt_path, &trainer)?;
        }
    }
    save_checkpoint(&ckpt_path, &trainer)?;
    write_file(&out.join("round_log.csv"), |w| write_round_log_csv(&trainer.logs, w))?;
    export_training_curves(&trainer.logs, out.join("training_curves.csv"))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn open_checkpoint(cfg: &RunConfig, path: Option<&Path>) -> Result<Checkpoint> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| Path::new(&cfg.out_dir).join(CHECKPOINT_FILE));
    let ckpt = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    ckpt.check_layout(&cfg.sac, &cfg.env_config(1.0))?;
    Ok(ckpt)
}

fn metrics_text(m: &EvalMetrics, corr: Option<f64>) -> String {
    let sessions = m.departure_shortfalls.len();
    let mean_short = m.departure_shortfalls.iter().sum::<f64>() / sessions.max(1) as f64;
    let max_short = m.departure_shortfalls.iter().cloned().fold(0.0, f64::max);
    let corr = corr.map(|c| format!("{c:.6}")).unwrap_or_else(|| "undefined".into());
    format!(
        "total_cost = {}\ntotal_anxiety = {}\ntotal_departure = {}\nmean_reward = {}\nsessions = {sessions}\n\
         mean_departure_shortfall = {mean_short}\nmax_departure_shortfall = {max_short}\naction_price_correlation = {corr}\n",
        m.total_cost, m.total_anxiety, m.total_departure, m.mean_reward,
    )
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let ckpt = open_checkpoint(cfg, checkpoint)?;
    let split = load_split(cfg)?;
    if split.eval.is_empty() {
        bail!("price series has no held-out days");
    }
    let segments: Vec<Arc<PriceSeries>> = split.eval.into_iter().map(Arc::new).collect();
    let mut policy = MeanPolicy::from_params(&ckpt.sac, &ckpt.env, ckpt.policy_params())?;
    let (trace, metrics) =
        evaluate_held_out(&mut policy, &ckpt.profiles, &segments, &ckpt.env, &mut seeded(cfg.eval.seed))?;
    let corr = price_responsiveness(&trace).ok();
    let out = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out)?;
    export_plot_data(&trace, out.join("eval_trace.csv"))?;
    let text = metrics_text(&metrics, corr);
    fs::write(out.join("eval_metrics.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_simulate_week(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let ckpt = open_checkpoint(cfg, checkpoint)?;
    let series = Arc::new(load_prices(cfg)?);
    let split = split_train_eval(&series);
    let start = match cfg.eval.start_time()? {
        Some(ts) => series.index_of(ts).with_context(|| format!("{ts} is not in the price series"))?,
        None => {
            let segs: Vec<Arc<PriceSeries>> = split.eval.into_iter().map(Arc::new).collect();
            let (seg, hour) = first_week_start(&segs).context("no held-out stretch covers a full week")?;
            series.index_of(segs[seg].timestamp(hour)).expect("segment comes from the series")
        }
    };
    if start + WEEK_HOURS > series.len() {
        bail!("fewer than {WEEK_HOURS} hours of prices after the start");
    }
    let mut rng = seeded(cfg.eval.seed);
    let opts = cfg.eval.week_options();
    let plans = build_week_plan(&ckpt.profiles, &mut rng, series.timestamp(start), &opts)?;
    let mut policy = MeanPolicy::from_params(&ckpt.sac, &ckpt.env, ckpt.policy_params())?;
    let (trace, metrics) =
        simulate_week(&mut policy, &plans, &ckpt.profiles, Arc::clone(&series), start, &ckpt.env, &opts, &mut rng)?;
    let corr = price_responsiveness(&trace).ok();
    let out = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out)?;
    export_plot_data(&trace, out.join("week_trace.csv"))?;
    let text = metrics_text(&metrics, corr);
    fs::write(out.join("week_metrics.txt"), &text)?;
    println!("week starting {}", series.timestamp(start));
    print!("{text}");
    Ok(())
}

fn cmd_synth_prices(cfg: &RunConfig, output: Option<&Path>, days: Option<usize>) -> Result<()> {
    let mut params = cfg.prices.synth_params()?;
    if let Some(d) = days {
        params.days = d;
    }
    let series = synthesize_prices(&params)?;
    let path = output.map(Path::to_path_buf).unwrap_or_else(|| Path::new(&cfg.out_dir).join("prices.csv"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    series.write_csv(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?)?;
    println!("wrote {} hours to {}", series.len(), path.display());
    Ok(())
}

fn cmd_grad_check(cfg: &RunConfig, first_seed: u64, seeds: u64, inject_fault: bool) -> Result<bool> {
    let shapes = NetworkShapes {
        state_dim: cfg.env_config(1.0).state_dim(),
        policy_hidden: cfg.sac.policy_hidden.clone(),
        critic_hidden: cfg.sac.critic_hidden.clone(),
        value_hidden: cfg.sac.value_hidden.clone(),
    };
    let opts = GradCheckOptions { inject_fault, ..Default::default() };
    let mut ok = true;
    for seed in first_seed..first_seed.saturating_add(seeds) {
        let report = check_networks(&shapes, seed, &opts);
        let failures = report.failures();
        println!("seed {seed}: max relative error {:.3e} over {} tensors", report.max_rel_err(), report.checks.len());
        for f in &failures {
            println!("  FAIL {}.{}: relative error {:.3e}", f.network, f.tensor, f.max_rel_err);
        }
        ok &= report.passed();
    }
    println!("{}", if ok { "gradient check passed" } else { "gradient check FAILED" });
    Ok(ok)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Train { resume, checkpoint_every } => cmd_train(&cfg, resume.as_deref(), checkpoint_every)?,
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint.as_deref())?,
        Command::SimulateWeek { checkpoint, start } => {
            let mut cfg = cfg;
            if start.is_some() {
                cfg.eval.start = start;
                cfg.eval.start_time()?;
            }
            cmd_simulate_week(&cfg, checkpoint.as_deref())?
        }
        Command::SynthPrices { output, days } => cmd_synth_prices(&cfg, output.as_deref(), days)?,
        Command::GradCheck { seeds, inject_fault } => {
            let first = cli.common.seed.unwrap_or(0);
            if !cmd_grad_check(&cfg, first, seeds, inject_fault)? {
                return Ok(ExitCode::from(1));
            }
        }
        Command::PrintConfig => print!("{}", cfg.to_text()),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
