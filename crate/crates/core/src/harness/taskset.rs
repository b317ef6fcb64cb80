//! Deterministic task-set generation from difficulty presets.
//!
//! A preset fixes only the barrier structure; horizon and alphabet come from
//! the shared environment parameters, so any mix of difficulties trains one
//! policy table. The reference plan of every task is the canonical safe
//! path, validated before any noise is applied.

use serde::{Deserialize, Serialize};

use crate::env::{make_barrier_chain, BarrierChain, EnvSpec};
use crate::error::{Error, Result};
use crate::guidance::{inject_noise, ReferenceTrajectory};
use crate::harness::config::{EnvParams, ExperimentConfig};
use crate::optimizer::Task;
use crate::rng::derive_rng;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    /// No barrier: every rollout under the easy safe sets succeeds.
    Easy,
    /// One short barrier.
    Medium,
    /// One long barrier.
    Hard,
}

impl Difficulty {
    pub fn label(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

/// Instantiates the preset environment for one difficulty tier.
pub fn build_chain(difficulty: Difficulty, env: &EnvParams) -> Result<BarrierChain<Real>> {
    let barriers: Vec<(usize, usize)> = match difficulty {
        Difficulty::Easy => vec![],
        Difficulty::Medium => vec![(env.barrier_start, env.medium_barrier_len)],
        Difficulty::Hard => vec![(env.barrier_start, env.hard_barrier_len)],
    };
    make_barrier_chain(env.horizon, env.alphabet_size, env.easy_safe_size, &barriers, env.leak)
}

/// A generated dataset: tasks plus their difficulty tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSet {
    pub tasks: Vec<Task<Real>>,
    pub difficulties: Vec<Difficulty>,
}

impl TaskSet {
    /// One JSON line per task: id, difficulty, env document, reference plan.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct TaskDoc<'a> {
            id: u64,
            difficulty: &'a str,
            env_hash: String,
            env: serde_json::Value,
            reference: &'a [usize],
        }
        self.tasks
            .iter()
            .zip(&self.difficulties)
            .map(|(task, difficulty)| {
                let doc = TaskDoc {
                    id: task.id,
                    difficulty: difficulty.label(),
                    env_hash: task.env.content_hash(),
                    env: serde_json::from_str(&task.env.to_json()).expect("env document"),
                    reference: &task.reference.actions,
                };
                serde_json::to_string(&doc).expect("task serialization")
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Largest-remainder apportionment of `count` tasks over the mix.
fn apportion(count: usize, proportions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * count as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap()
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(count - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Deterministic generation from the config: the same config yields a
/// byte-identical serialized task set.
pub fn generate_taskset(config: &ExperimentConfig) -> Result<TaskSet> {
    config.validate()?;
    let mix = &config.tasks;
    let counts = apportion(mix.count, &[mix.easy, mix.medium, mix.hard]);
    let tiers = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    let mut tasks = Vec::with_capacity(mix.count);
    let mut difficulties = Vec::with_capacity(mix.count);
    let mut id = 0u64;
    for (tier, &n) in tiers.iter().zip(&counts) {
        for _ in 0..n {
            let chain = build_chain(*tier, &config.env)?;
            let reference = validated_reference(&chain.spec, chain.reference_actions.clone())?;
            let reference = if config.guidance.noise_ratio > 0.0 {
                let mut rng = derive_rng(config.seed, "task-noise", &[id]);
                inject_noise(
                    &reference,
                    config.guidance.noise_ratio,
                    config.env.alphabet_size,
                    &mut rng,
                )?
            } else {
                reference
            };
            tasks.push(Task { id, env: chain.spec, reference });
            difficulties.push(*tier);
            id += 1;
        }
    }
    Ok(TaskSet { tasks, difficulties })
}

/// Checks that the plan is a success path of the environment (pre-noise).
fn validated_reference(env: &EnvSpec<Real>, actions: Vec<usize>) -> Result<ReferenceTrajectory> {
    for (t, &a) in actions.iter().enumerate() {
        if !env.is_safe(t, a) {
            return Err(Error::InvalidEnv(format!(
                "reference action {a} at step {t} is not safe"
            )));
        }
    }
    ReferenceTrajectory::clean(actions)
}
