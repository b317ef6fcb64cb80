//! Scripted experiment suites: training runs, the ablation grid, risk and
//! barrier diagnostics, noise sweeps, and level selection. Every run echoes
//! its config verbatim, stamps each artifact with the config and env hashes,
//! and is bit-reproducible from (config, seed).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::{
    self, delta_logit_profile, estimate_q, risk_curve, select_risk_constrained,
};
use crate::env::State;
use crate::error::{Error, Result};
use crate::guidance::{level, GuidanceLevel};
use crate::harness::config::ExperimentConfig;
use crate::harness::taskset::{generate_taskset, TaskSet};
use crate::optimizer::{train, Mode, StepMetrics, Task, TrainLog};
use crate::policy::{GuidanceContext, PolicyParams};
use crate::rollout::{exact_pass_at_k, sample_group};
use crate::Real;

/// Environment variable naming the default output root; `--out` wins.
pub const OUTPUT_ROOT_ENV: &str = "GUIDANCE_LAB_OUT";

/// Resolves the output directory: explicit flag, else the env var, else
/// `./runs`.
pub fn resolve_out_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(path) = flag {
        return path.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root),
        None => PathBuf::from("runs"),
    }
}

/// Summary of one training run, one row of `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct ModeSummary {
    pub mode: String,
    pub seed: u64,
    pub final_exact_success: f64,
    pub delta_vs_vanilla: Option<f64>,
    pub mean_trainable_fraction: f64,
}

fn artifact_header(config: &ExperimentConfig, env_hashes: &[String]) -> String {
    format!("# config_hash={}\n# env_hash={}\n", config.content_hash(), env_hashes.join(","))
}

fn env_hashes(tasks: &[Task<Real>]) -> Vec<String> {
    tasks.iter().map(|t| t.env.content_hash()).collect()
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

fn echo_config(config: &ExperimentConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    fs::write(out.join("config.toml"), config.to_toml())?;
    Ok(())
}

fn metrics_csv(config: &ExperimentConfig, hashes: &[String], metrics: &[StepMetrics]) -> String {
    let mut text = artifact_header(config, hashes);
    text.push_str("step,mode,exact_success,trainable_frac,mean_k_star,mean_reward,grad_norm,clip_frac,kl\n");
    for m in metrics {
        let k_star = m.mean_k_star.map_or(String::new(), |k| format!("{k}"));
        writeln!(
            text,
            "{},{},{},{},{},{},{},{},{}",
            m.step, m.mode, m.exact_success, m.trainable_frac, k_star, m.mean_reward,
            m.grad_norm, m.clip_frac, m.kl
        )
        .expect("write to string");
    }
    text
}

fn mean_trainable(metrics: &[StepMetrics]) -> f64 {
    if metrics.is_empty() {
        return 0.0;
    }
    metrics.iter().map(|m| m.trainable_frac).sum::<f64>() / metrics.len() as f64
}

/// Trains one mode on the config's task set and writes its artifacts
/// (metrics CSV, selection traces, final checkpoint). Returns the summary
/// plus the full log for callers that aggregate.
pub fn run_train_mode(
    config: &ExperimentConfig,
    mode: Mode,
    out: &Path,
    quiet: bool,
) -> Result<(ModeSummary, TrainLog, PolicyParams<Real>)> {
    let set = generate_taskset(config)?;
    run_train_on(config, &set, mode, out, quiet)
}

fn run_train_on(
    config: &ExperimentConfig,
    set: &TaskSet,
    mode: Mode,
    out: &Path,
    quiet: bool,
) -> Result<(ModeSummary, TrainLog, PolicyParams<Real>)> {
    ensure_dir(out)?;
    let hashes = env_hashes(&set.tasks);
    let mut train_config = config.train.clone();
    train_config.mode = mode;
    let init = PolicyParams::uniform(
        config.env.horizon,
        config.env.alphabet_size,
        config.guidance.gamma,
    )?;
    let (params, log) = train(&set.tasks, &init, &train_config, config.seed)?;

    let label = mode.label();
    let file_tag = label.replace(['(', ')'], "_");
    fs::write(
        out.join(format!("metrics_{file_tag}.csv")),
        metrics_csv(config, &hashes, &log.metrics),
    )?;
    if !log.selection_traces.is_empty() {
        let mut text = artifact_header(config, &hashes);
        for trace in &log.selection_traces {
            writeln!(text, "{}", serde_json::to_string(trace)?).expect("write to string");
        }
        fs::write(out.join(format!("selection_{file_tag}.jsonl")), text)?;
    }
    fs::write(
        out.join(format!("checkpoint_{file_tag}.json")),
        params.to_checkpoint_json(&hashes.join(","), train_config.steps as u64),
    )?;

    let final_success = log.metrics.last().map_or(0.0, |m| m.exact_success);
    if !quiet {
        println!("trained mode={label} seed={} final_exact_success={final_success:.4}", config.seed);
    }
    let summary = ModeSummary {
        mode: label,
        seed: config.seed,
        final_exact_success: final_success,
        delta_vs_vanilla: None,
        mean_trainable_fraction: mean_trainable(&log.metrics),
    };
    Ok((summary, log, params))
}

fn write_summary(out: &Path, rows: &[ModeSummary]) -> Result<()> {
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(rows)?)?;
    Ok(())
}

/// `train` subcommand: one mode, full artifacts, summary.
pub fn run_train(config: &ExperimentConfig, out: &Path, quiet: bool) -> Result<ModeSummary> {
    echo_config(config, out)?;
    let (summary, _, _) = run_train_mode(config, config.train.mode, out, quiet)?;
    write_summary(out, std::slice::from_ref(&summary))?;
    Ok(summary)
}

/// `ablate` subcommand: the ablation grid under identical seeds. Removal of
/// the adaptive search is `fixed-k`, removal of the fallback is
/// `always-guided`, removal of the mixed-policy ratio is `always-guided`
/// with the naive on-policy treatment of guided data.
pub fn run_ablate(config: &ExperimentConfig, out: &Path, quiet: bool) -> Result<Vec<ModeSummary>> {
    echo_config(config, out)?;
    let set = generate_taskset(config)?;
    let fixed = Mode::FixedK { k: config.env.horizon / 2 };
    let mut rows = Vec::new();
    let mut vanilla_success = None;
    for (mode, naive) in [
        (Mode::Vanilla, false),
        (Mode::ActGuide, false),
        (fixed, false),
        (Mode::AlwaysGuided, false),
        (Mode::AlwaysGuided, true),
        (Mode::Opsd, false),
    ] {
        let mut run_config = config.clone();
        run_config.train.source_adaptive_ratio = !naive;
        let sub = if naive { out.join("naive-ratio") } else { out.to_path_buf() };
        let (mut summary, _, _) = run_train_on(&run_config, &set, mode, &sub, quiet)?;
        if naive {
            summary.mode = format!("{}+naive-ratio", summary.mode);
        }
        if mode == Mode::Vanilla {
            vanilla_success = Some(summary.final_exact_success);
        }
        summary.delta_vs_vanilla = vanilla_success.map(|v| summary.final_exact_success - v);
        rows.push(summary);
    }
    write_summary(out, &rows)?;
    Ok(rows)
}

/// The first task's environment with a clean (un-noised) reference, the
/// subject of the diagnostic subcommands.
fn diagnostic_subject(config: &ExperimentConfig) -> Result<(Task<Real>, Vec<GuidanceLevel>)> {
    let mut clean = config.clone();
    clean.guidance.noise_ratio = 0.0;
    let set = generate_taskset(&clean)?;
    let task = set.tasks.into_iter().next().ok_or_else(|| {
        Error::InvalidConfig("diagnostics need at least one task".into())
    })?;
    let max_level = task.reference.len();
    let levels = (0..=max_level).map(|k| level(&task.reference, k)).collect::<Result<Vec<_>>>()?;
    Ok((task, levels))
}

/// `risk-curve` subcommand: per-level shift mean, risk, and its covariance
/// decomposition, as CSV.
pub fn run_risk_curve(config: &ExperimentConfig, out: &Path, quiet: bool) -> Result<PathBuf> {
    echo_config(config, out)?;
    let (task, levels) = diagnostic_subject(config)?;
    let params = PolicyParams::uniform(
        config.env.horizon,
        config.env.alphabet_size,
        config.guidance.gamma,
    )?;
    let reports =
        risk_curve(&task.env, &params, &levels, config.analysis.risk_rollouts, config.seed)?;
    let mut text = artifact_header(config, &[task.env.content_hash()]);
    text.push_str("k,mean_shift,risk,var_sum,cov_sum\n");
    for r in &reports {
        writeln!(text, "{},{},{},{},{}", r.level, r.mean_shift, r.risk, r.var_sum, r.cov_sum)
            .expect("write to string");
    }
    let path = out.join("risk_curve.csv");
    fs::write(&path, text)?;
    if !quiet {
        println!("risk curve over {} levels -> {}", reports.len(), path.display());
    }
    Ok(path)
}

/// `barrier-profile` subcommand: per-step mass, retention, Pass@K from the
/// live state, and the guidance influence profile, as CSV.
pub fn run_barrier_profile(config: &ExperimentConfig, out: &Path, quiet: bool) -> Result<PathBuf> {
    echo_config(config, out)?;
    let (task, levels) = diagnostic_subject(config)?;
    let params = PolicyParams::uniform(
        config.env.horizon,
        config.env.alphabet_size,
        config.guidance.gamma,
    )?;
    let profile = task.env.mass_profile(&params.step_distributions(&GuidanceContext::none()))?;
    let full = levels.last().expect("levels include 0");
    let guided = sample_group(&task.env, &params, Some(full), 1, task.id, config.seed)?;
    let delta = delta_logit_profile(&params, &guided.trajectories[0]);

    let mut text = artifact_header(config, &[task.env.content_hash()]);
    text.push_str("t,mass,retention,pass_at_k,delta_logit\n");
    for t in 0..=task.env.horizon() {
        let retention = match profile.retention.get(t) {
            Some(Some(r)) => format!("{r}"),
            _ => String::new(),
        };
        let pass = if t < task.env.horizon() {
            format!(
                "{}",
                exact_pass_at_k(
                    &task.env,
                    &params,
                    State { step: t, alive: true },
                    config.analysis.pass_k,
                )?
            )
        } else {
            String::new()
        };
        let dl = delta.get(t).map_or(String::new(), |d| format!("{d}"));
        writeln!(text, "{},{},{},{},{}", t, profile.mass[t], retention, pass, dl)
            .expect("write to string");
    }
    let path = out.join("barrier_profile.csv");
    fs::write(&path, text)?;
    if !quiet {
        println!("barrier profile -> {}", path.display());
    }
    Ok(path)
}

/// `noise-sweep` subcommand: trains the configured mode at 0%, 10%, and 20%
/// reference noise from one command.
pub fn run_noise_sweep(config: &ExperimentConfig, out: &Path, quiet: bool) -> Result<Vec<ModeSummary>> {
    echo_config(config, out)?;
    let mut rows = Vec::new();
    for ratio in [0.0, 0.1, 0.2] {
        let mut run_config = config.clone();
        run_config.guidance.noise_ratio = ratio;
        let sub = out.join(format!("noise_{:02}", (ratio * 100.0) as u32));
        let (mut summary, _, _) = run_train_mode(&run_config, config.train.mode, &sub, quiet)?;
        summary.mode = format!("{}@noise={ratio}", summary.mode);
        rows.push(summary);
    }
    write_summary(out, &rows)?;
    Ok(rows)
}

/// `select-level` subcommand: per-level recovery probability and risk, plus
/// the risk-constrained selection, as CSV.
pub fn run_select_level(config: &ExperimentConfig, out: &Path, quiet: bool) -> Result<Option<usize>> {
    echo_config(config, out)?;
    let (task, levels) = diagnostic_subject(config)?;
    let params = PolicyParams::uniform(
        config.env.horizon,
        config.env.alphabet_size,
        config.guidance.gamma,
    )?;
    let trials = if config.analysis.q_trials == 0 {
        analysis::hoeffding_budget(config.analysis.margin, levels.len() - 1, config.analysis.xi)?
            as usize
    } else {
        config.analysis.q_trials
    };
    let mut q_hat = Vec::with_capacity(levels.len());
    for lvl in &levels {
        q_hat.push(estimate_q(
            &task.env,
            &params,
            lvl,
            config.train.group_size,
            config.train.delta,
            trials,
            config.seed,
        )?);
    }
    let reports =
        risk_curve(&task.env, &params, &levels, config.analysis.risk_rollouts, config.seed)?;
    let r_hat: Vec<Real> = reports.iter().map(|r| r.risk).collect();
    let selected = select_risk_constrained(&q_hat, &r_hat, config.analysis.rho)?;

    let mut text = artifact_header(config, &[task.env.content_hash()]);
    text.push_str("k,q_hat,r_hat,selected\n");
    for (k, (q, r)) in q_hat.iter().zip(&r_hat).enumerate() {
        writeln!(text, "{},{},{},{}", k, q, r, selected == Some(k)).expect("write to string");
    }
    fs::write(out.join("select_level.csv"), text)?;
    if !quiet {
        match selected {
            Some(k) => println!("selected level k={k} (trials/level={trials})"),
            None => println!("no level met rho={} (trials/level={trials})", config.analysis.rho),
        }
    }
    Ok(selected)
}

/// `gen-tasks` subcommand: writes the task set as JSONL.
pub fn run_gen_tasks(config: &ExperimentConfig, out: &Path, quiet: bool) -> Result<PathBuf> {
    echo_config(config, out)?;
    let set = generate_taskset(config)?;
    let mut text = artifact_header(config, &env_hashes(&set.tasks));
    text.push_str(&set.to_jsonl());
    text.push('\n');
    let path = out.join("tasks.jsonl");
    fs::write(&path, text)?;
    if !quiet {
        println!("{} tasks -> {}", set.tasks.len(), path.display());
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::TaskMix;

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("guidance-lab-test-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    fn tiny_config() -> ExperimentConfig {
        let mut config = ExperimentConfig::default();
        config.env.horizon = 6;
        config.env.barrier_start = 2;
        config.env.medium_barrier_len = 1;
        config.env.hard_barrier_len = 2;
        config.train.steps = 5;
        config.analysis.risk_rollouts = 50;
        config.analysis.q_trials = 20;
        config
    }

    #[test]
    fn vanilla_on_easy_tasks_reaches_unit_success() {
        let mut config = tiny_config();
        config.env.easy_safe_size = config.env.alphabet_size;
        config.tasks = TaskMix { count: 2, easy: 1.0, medium: 0.0, hard: 0.0 };
        config.train.mode = Mode::Vanilla;
        let out = temp_dir("easy");
        let summary = run_train(&config, &out, true).unwrap();
        assert!((summary.final_exact_success - 1.0).abs() < 1e-9);
        assert!(out.join("config.toml").exists());
        assert!(out.join("metrics_vanilla.csv").exists());
        assert!(out.join("checkpoint_vanilla.json").exists());
        fs::remove_dir_all(&out).unwrap();
    }

    #[test]
    fn metric_csvs_are_bit_reproducible() {
        let config = tiny_config();
        let out_a = temp_dir("repro-a");
        let out_b = temp_dir("repro-b");
        run_train(&config, &out_a, true).unwrap();
        run_train(&config, &out_b, true).unwrap();
        let a = fs::read(out_a.join("metrics_actguide.csv")).unwrap();
        let b = fs::read(out_b.join("metrics_actguide.csv")).unwrap();
        assert_eq!(a, b);
        fs::remove_dir_all(&out_a).unwrap();
        fs::remove_dir_all(&out_b).unwrap();
    }

    #[test]
    fn config_echo_round_trips() {
        let config = tiny_config();
        let out = temp_dir("echo");
        run_gen_tasks(&config, &out, true).unwrap();
        let echoed = ExperimentConfig::load(&out.join("config.toml")).unwrap();
        assert_eq!(echoed, config);
        fs::remove_dir_all(&out).unwrap();
    }

    #[test]
    fn artifacts_declare_hashes_in_headers() {
        let config = tiny_config();
        let out = temp_dir("headers");
        run_risk_curve(&config, &out, true).unwrap();
        run_barrier_profile(&config, &out, true).unwrap();
        let hash = config.content_hash();
        for name in ["risk_curve.csv", "barrier_profile.csv"] {
            let text = fs::read_to_string(out.join(name)).unwrap();
            assert!(text.starts_with(&format!("# config_hash={hash}\n# env_hash=")), "{name}");
        }
        fs::remove_dir_all(&out).unwrap();
    }

    #[test]
    fn ablation_grid_emits_one_row_per_mode() {
        let mut config = tiny_config();
        config.train.steps = 3;
        let out = temp_dir("ablate");
        let rows = run_ablate(&config, &out, true).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].mode, "vanilla");
        assert_eq!(rows[0].delta_vs_vanilla, Some(0.0));
        assert!(rows.iter().skip(1).all(|r| r.delta_vs_vanilla.is_some()));
        let text = fs::read_to_string(out.join("summary.json")).unwrap();
        assert!(text.contains("always-guided+naive-ratio"));
        fs::remove_dir_all(&out).unwrap();
    }

    #[test]
    fn noise_sweep_emits_three_curves() {
        let mut config = tiny_config();
        config.train.steps = 3;
        let out = temp_dir("noise");
        let rows = run_noise_sweep(&config, &out, true).unwrap();
        assert_eq!(rows.len(), 3);
        for tag in ["noise_00", "noise_10", "noise_20"] {
            assert!(out.join(tag).join("metrics_actguide.csv").exists(), "{tag}");
        }
        fs::remove_dir_all(&out).unwrap();
    }

    #[test]
    fn select_level_writes_full_table() {
        let config = tiny_config();
        let out = temp_dir("select");
        run_select_level(&config, &out, true).unwrap();
        let text = fs::read_to_string(out.join("select_level.csv")).unwrap();
        // Header lines plus column row plus one row per level 0..=6.
        assert_eq!(text.lines().count(), 2 + 1 + 7);
        fs::remove_dir_all(&out).unwrap();
    }

    #[test]
    fn out_dir_resolution_order() {
        let explicit = PathBuf::from("/tmp/explicit");
        assert_eq!(resolve_out_dir(Some(&explicit)), explicit);
        // Without a flag the result is either the env var or the default;
        // both are non-empty.
        assert!(!resolve_out_dir(None).as_os_str().is_empty());
    }
}
