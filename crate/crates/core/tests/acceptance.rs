//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Every criterion runs at full size. The process exits non-zero on a failed
//! criterion only when `ACCEPTANCE_STRICT=1`, so the report is always produced
//! under `cargo test`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{NaiveDate, NaiveDateTime};
use rand::Rng;

use fedcharge::eval_sim::{
    build_week_plan, evaluate_held_out, price_responsiveness, simulate_week, MeanPolicy, WeekOptions,
};
use fedcharge::ev_env::{
    anxiety_target, reward, sample_session, ChargingSession, DayType, EnvConfig, EvEnv, Location, RewardConfig,
    TimeDist, UserProfile,
};
use fedcharge::federation::{
    aggregate, load_checkpoint, save_checkpoint, write_round_log_csv, AgentRecord, AgentWorker, FedConfig, RoundLog,
    Trainer, TrainingData,
};
use fedcharge::neural::gradcheck::{check_networks, GradCheckOptions, NetworkShapes};
use fedcharge::neural::{ParamVector, TensorSpec};
use fedcharge::price_data::{split_train_eval, synthesize_prices, PriceSeries, SynthParams};
use fedcharge::rng::seeded;
use fedcharge::sac::{ReplayBuffer, SacConfig, Transition};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn synthetic(seed: u64) -> (Arc<TrainingData>, Vec<Arc<PriceSeries>>, f64) {
    let prices = synthesize_prices(&SynthParams { seed, base: 30.0, amplitude: 15.0, noise_sd: 2.0, ..Default::default() })
        .expect("valid synth params");
    let split = split_train_eval(&prices);
    let scale = split.train_mean().expect("training days");
    let data = Arc::new(TrainingData::from_split(&split).expect("training days"));
    (data, split.eval.into_iter().map(Arc::new).collect(), scale)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let sac = SacConfig::default();
    let shapes = NetworkShapes {
        state_dim: EnvConfig::default().state_dim(),
        policy_hidden: sac.policy_hidden.clone(),
        critic_hidden: sac.critic_hidden.clone(),
        value_hidden: sac.value_hidden.clone(),
    };
    let opts = GradCheckOptions { step: 1e-5, tolerance: 1e-4, ..Default::default() };
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    let mut probes = 0;
    for seed in 0..10 {
        let report = check_networks(&shapes, seed, &opts);
        worst = worst.max(report.max_rel_err());
        probes += report.checks.iter().map(|c| c.checked).sum::<usize>();
        if !report.passed() {
            failed.push(seed);
        }
    }
    let elapsed = start.elapsed();
    check(
        failed.is_empty() && worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!("10 seeds, {probes} probes, max rel err {worst:.2e} (< 1e-4), failing seeds {failed:?}, {elapsed:.1?} (< 30 s)"),
    )
}

fn reward_oracle() -> Outcome {
    // independent evaluation of the anxiety curve
    let curve = |frac: f64, d1: f64, d2: f64| d1 * ((-d2 * frac).exp() - 1.0) / ((-d2).exp() - 1.0);
    let s = ChargingSession::new(0, 10, 5.0, 0.3, 0.9, 9.0).expect("valid session");
    let at_a = anxiety_target(0, &s).expect("in session");
    let at_d = anxiety_target(10, &s).expect("in session");
    let mid = anxiety_target(5, &s).expect("in session");
    let mid_oracle = curve(0.5, 0.9, 9.0);
    let cfg = RewardConfig::default();
    let r1 = reward(&cfg, &s, 2, 0.5, 0.3, 0.2).expect("in session").total();
    let r2 = reward(&cfg, &s, 2, 0.5, 0.3, -0.1).expect("in session").total();
    let r3 = reward(&cfg, &s, 10, 0.5, 0.8, 0.0).expect("in session").total();
    // 0.9 - 0.8 rounds to 0.09999999999999998; compare with that exact difference
    let r3_oracle = -35.0 * (0.9f64 - 0.8);
    let ok = at_a.abs() <= 1e-12
        && (at_d - 0.9).abs() <= 1e-12
        && (mid - mid_oracle).abs() <= 1e-12
        && (mid - 0.8901).abs() < 1e-4
        && r1 == -0.8
        && r2 == 0.4
        && r3 == r3_oracle
        && (r3 + 3.5).abs() < 1e-12;
    check(ok, format!("target(t_a)={at_a:e} target(t_d)={at_d} mid={mid:.6}; rewards {r1}, {r2}, {r3}"))
}

fn aggregation_oracle() -> Outcome {
    let pv = |v: Vec<f64>| ParamVector::from_parts(vec![TensorSpec::new("x", &[v.len()])], v).expect("sized");
    let mut rng = seeded(5);
    let c = pv((0..257).map(|_| rng.random_range(-3.0..3.0)).collect());
    let identical = (1..=7).all(|n| aggregate(&vec![&c; n]).expect("same layout") == c);
    let hand = aggregate(&[&pv(vec![1.0, 2.0]), &pv(vec![3.0, 4.0])]).expect("same layout") == pv(vec![2.0, 3.0]);

    // N = 1 federated run against the same agent trained on its own
    let (data, _, scale) = synthetic(3);
    let env = EnvConfig { price_scale: scale, ..Default::default() };
    let sac = SacConfig { batch_size: 32, updates_per_episode: Some(8), ..Default::default() };
    let fed = FedConfig { n_agents: 1, episodes: 12, seed: 3, workers: 1, ..Default::default() };
    let profiles = UserProfile::defaults();
    let mut trainer =
        Trainer::new(fed.clone(), sac.clone(), env.clone(), profiles.clone(), Arc::clone(&data)).expect("valid setup");
    trainer.run(|_| {}).expect("training runs");
    let mut solo = AgentWorker::new(0, fed.agent_seed(0), &sac, &env, profiles[0].clone(), &data).expect("valid setup");
    let mut solo_records: Vec<AgentRecord> = Vec::new();
    for ep in 1..=fed.episodes {
        solo_records.push(solo.run_episode(ep, &data).expect("episode runs"));
    }
    let fed_records: Vec<AgentRecord> = trainer.logs.iter().flat_map(|l| l.records.clone()).collect();
    let same_log = fed_records == solo_records;
    let same_models = trainer.workers[0].agent == solo.agent;
    let same_globals = trainer.globals.as_ref().map(|g| &g.phi) == Some(solo.agent.models.policy.params());
    check(
        identical && hand && same_log && same_models && same_globals,
        format!(
            "identical inputs -> input: {identical}; [1,2],[3,4] -> [2,3]: {hand}; N=1 vs solo: logs {same_log}, agent state {same_models}, globals {same_globals}"
        ),
    )
}

fn mean_over(logs: &[RoundLog], f: fn(&AgentRecord) -> f64) -> f64 {
    let v: Vec<f64> = logs.iter().flat_map(|l| l.records.iter().map(f)).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn learning_trend() -> Outcome {
    let start = Instant::now();
    let (data, _, scale) = synthetic(0);
    let env = EnvConfig { price_scale: scale, ..Default::default() };
    let fed = FedConfig { n_agents: 3, episodes: 250, seed: 0, ..Default::default() };
    let mut trainer = Trainer::new(fed, SacConfig::default(), env, UserProfile::defaults(), data).expect("valid setup");
    trainer.run(|_| {}).expect("training runs");
    let elapsed = start.elapsed();
    let logs = &trainer.logs;
    let (first, last) = (&logs[..25], &logs[logs.len() - 25..]);
    let parts: [(&str, fn(&AgentRecord) -> f64); 3] =
        [("total", |r| r.total_reward()), ("price", |r| r.reward.price), ("anxiety", |r| r.reward.anxiety)];
    let mut ok = elapsed < Duration::from_secs(15 * 60);
    let mut detail = Vec::new();
    for (name, f) in parts {
        let (a, b) = (mean_over(first, f), mean_over(last, f));
        ok &= b > a;
        detail.push(format!("{name} {a:.3} -> {b:.3}{}", if b > a { "" } else { " (no gain)" }));
    }
    detail.push(format!("departure {:.3} -> {:.3}", mean_over(first, |r| r.reward.departure), mean_over(last, |r| r.reward.departure)));
    check(ok, format!("first/last 25 episodes: {}; {elapsed:.0?} (< 15 min)", detail.join(", ")))
}

/// Sessions that span a full day, so charge can be shifted freely in time.
fn long_idle_profile() -> UserProfile {
    let mut p = UserProfile::defaults()[0].clone();
    let s = &mut p.schedule;
    s.home_arrival = TimeDist::new(18.0, 1.0);
    s.home_departure = TimeDist::new(18.0, 1.0);
    s.office_arrival = TimeDist::new(8.0, 1.0);
    s.office_departure = TimeDist::new(32.0, 1.0);
    s.public_arrival = TimeDist::new(8.0, 1.0);
    s.public_departure = TimeDist::new(32.0, 1.0);
    p
}

fn price_response() -> Outcome {
    let mut corrs = Vec::new();
    for seed in 0..3u64 {
        let (data, eval, scale) = synthetic(seed);
        let mut env = EnvConfig { price_scale: scale, ..Default::default() };
        env.reward.sigma_x = 0.0;
        env.reward.sigma_d = 0.0;
        let profile = long_idle_profile();
        let fed = FedConfig { n_agents: 3, episodes: 250, seed, ..Default::default() };
        let sac = SacConfig::default();
        let mut trainer =
            Trainer::new(fed, sac.clone(), env.clone(), vec![profile.clone()], data).expect("valid setup");
        trainer.run(|_| {}).expect("training runs");
        let phi = &trainer.globals.as_ref().expect("aggregated").phi;
        let mut policy = MeanPolicy::from_params(&sac, &env, phi).expect("layout matches");
        let (trace, _) = evaluate_held_out(&mut policy, &[profile], &eval, &env, &mut seeded(seed + 100))
            .expect("held-out rollouts");
        corrs.push(price_responsiveness(&trace).unwrap_or(f64::NAN));
    }
    let hits = corrs.iter().filter(|&&c| c <= -0.3).count();
    check(hits >= 2, format!("action/price correlation per seed {corrs:.3?}; {hits}/3 at or below -0.3 (majority needed)"))
}

fn safety_invariants() -> Outcome {
    let prices = Arc::new(synthesize_prices(&SynthParams { days: 60, ..Default::default() }).expect("valid"));
    let env_cfg = EnvConfig { price_scale: 30.0, ..Default::default() };
    let mut env = EvEnv::new(env_cfg.clone(), Arc::clone(&prices)).expect("valid env");
    let profiles = UserProfile::defaults();
    let mut rng = seeded(21);
    let midnights: Vec<usize> = prices.midnights().into_iter().filter(|&m| m + 48 < prices.len()).collect();
    let (mut steps, mut violations, mut eta_err) = (0, 0, 0.0f64);
    while steps < 10_000 {
        let p = &profiles[steps % profiles.len()];
        let day = midnights[rng.random_range(0..midnights.len())];
        let Ok(session) = sample_session(p, &mut rng, DayType::of(prices.timestamp(day)), day, &prices) else {
            continue;
        };
        env.reset(session).expect("valid session");
        loop {
            let before = env.soc();
            // well past the rate limits in both directions
            let out = env.step(rng.random_range(-1.0..1.0)).expect("finite action");
            steps += 1;
            if !(0.0..=1.0).contains(&out.state.soc) {
                violations += 1;
            }
            eta_err = eta_err.max((out.state.soc - before - 0.98 * out.applied_action).abs());
            if out.done {
                break;
            }
        }
    }

    let start: NaiveDateTime = NaiveDate::from_ymd_opt(2017, 1, 23).expect("date").and_hms_opt(0, 0, 0).expect("time");
    let start_idx = prices.index_of(start).expect("in series");
    let mut driving_nonzero = 0;
    let mut driving_hours = 0;
    for seed in 0..5 {
        let plans = build_week_plan(&profiles, &mut seeded(seed), start, &WeekOptions::default()).expect("plans");
        let mut r = seeded(seed + 50);
        let mut random = |_: &[f64]| r.random_range(-1.0..1.0);
        let (trace, _) = simulate_week(
            &mut random,
            &plans,
            &profiles,
            Arc::clone(&prices),
            start_idx,
            &env_cfg,
            &WeekOptions::default(),
            &mut seeded(seed + 99),
        )
        .expect("week runs");
        for row in trace.rows.iter().filter(|r| r.location == Location::Driving) {
            driving_hours += 1;
            if row.action != 0.0 {
                driving_nonzero += 1;
            }
        }
        violations += trace.rows.iter().filter(|r| !(0.0..=1.0).contains(&r.soc)).count();
    }
    check(
        violations == 0 && driving_nonzero == 0 && eta_err < 1e-12,
        format!(
            "{steps} random steps and 5 random weeks: {violations} SoC violations, {driving_nonzero}/{driving_hours} driving hours with nonzero action, max |dSoC - eta*a| {eta_err:.1e}"
        ),
    )
}

fn determinism_and_resume() -> Outcome {
    let (data, _, scale) = synthetic(7);
    let env = EnvConfig { price_scale: scale, ..Default::default() };
    let fed = FedConfig { n_agents: 3, episodes: 10, seed: 7, ..Default::default() };
    let dir = tempfile::tempdir().expect("temp dir");
    let run = |episodes: usize, name: &str| -> (Trainer, Vec<u8>, Vec<u8>) {
        let fed = FedConfig { episodes, ..fed.clone() };
        let mut t = Trainer::new(fed, SacConfig::default(), env.clone(), UserProfile::defaults(), Arc::clone(&data))
            .expect("valid setup");
        t.run(|_| {}).expect("training runs");
        let path = dir.path().join(name);
        save_checkpoint(&path, &t).expect("checkpoint written");
        let mut csv = Vec::new();
        write_round_log_csv(&t.logs, &mut csv).expect("in memory");
        (t, csv, std::fs::read(&path).expect("readable"))
    };
    let (_, log_a, ckpt_a) = run(10, "a.fck");
    let (_, log_b, ckpt_b) = run(10, "b.fck");
    let same_runs = log_a == log_b && ckpt_a == ckpt_b;

    let (_, _, _) = run(6, "half.fck");
    let mut resumed = load_checkpoint(dir.path().join("half.fck"))
        .expect("loads")
        .into_trainer(Arc::clone(&data))
        .expect("restores");
    resumed.fed.episodes = 10;
    resumed.run(|_| {}).expect("training resumes");
    save_checkpoint(dir.path().join("resumed.fck"), &resumed).expect("checkpoint written");
    let mut log_r = Vec::new();
    write_round_log_csv(&resumed.logs, &mut log_r).expect("in memory");
    let ckpt_r = std::fs::read(dir.path().join("resumed.fck")).expect("readable");
    let same_resume = log_r == log_a && ckpt_r == ckpt_a;
    check(
        same_runs && same_resume,
        format!(
            "two 10-episode runs bitwise equal: {same_runs}; 6 + 4 resumed equals uninterrupted: {same_resume} ({} byte checkpoint)",
            ckpt_a.len()
        ),
    )
}

fn buffer_fifo() -> Outcome {
    let cap = 1000;
    let mut buf = ReplayBuffer::new(cap);
    let tr = |i: usize| Transition { state: vec![i as f64], action: 0.0, reward: i as f64, next_state: vec![0.0], done: false };
    for i in 0..2500 {
        buf.push(tr(i));
    }
    let held: Vec<usize> = buf.iter_ordered().map(|t| t.reward as usize).collect();
    let expected: Vec<usize> = (1500..2500).collect();
    check(
        buf.len() == cap && held == expected,
        format!("capacity {cap}, 2500 pushes: len {}, oldest {:?}, newest {:?}", buf.len(), held.first(), held.last()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient correctness", gradient_correctness),
        ("reward/anxiety oracle", reward_oracle),
        ("aggregation oracle", aggregation_oracle),
        ("learning trend", learning_trend),
        ("price responsiveness", price_response),
        ("safety invariants", safety_invariants),
        ("determinism and resume", determinism_and_resume),
        ("buffer FIFO", buffer_fifo),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {name}: {detail} [{:.1?}]", start.elapsed());
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
