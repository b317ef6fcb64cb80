//! Group rollout collection under guided or unguided behavior.
//!
//! Every trajectory records, per step, the action taken, the behavior
//! log-probability under the *exact* sampling distribution (guided when a
//! recommendation was in force), and the recommendation itself, so the
//! optimizer can later rebuild source-adaptive importance ratios without
//! re-deriving contexts. Each trajectory draws from an independently derived
//! random stream keyed by (seed, task id, trajectory index), so groups are
//! reproducible and order-independent.

use serde::Serialize;

use crate::env::{EnvSpec, State};
use crate::error::{Error, Result};
use crate::guidance::GuidanceLevel;
use crate::policy::{GuidanceContext, PolicyParams};
use crate::rng::derive_rng;
use crate::scalar::Scalar;

/// Which behavior distribution produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Unguided,
    Guided { level: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<R: Scalar> {
    /// State *before* the action was taken.
    pub state: State,
    pub action: usize,
    /// Log-probability of `action` under the sampling distribution.
    pub behavior_log_prob: R,
    /// The guidance recommendation in force at this step, if any.
    pub recommended: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<R: Scalar> {
    pub steps: Vec<StepRecord<R>>,
    pub source: Source,
    pub reward: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup<R: Scalar> {
    pub task_id: u64,
    pub trajectories: Vec<Trajectory<R>>,
    /// Filled in by the optimizer once rewards are pooled.
    pub advantages: Option<Vec<R>>,
}

impl<R: Scalar> RolloutGroup<R> {
    pub fn rewards(&self) -> Vec<u8> {
        self.trajectories.iter().map(|t| t.reward).collect()
    }

    /// A group is trainable iff its rewards are not all equal.
    pub fn has_reward_contrast(&self) -> bool {
        let rewards = self.rewards();
        rewards.iter().any(|&r| r != rewards[0])
    }
}

/// Samples one full episode under the given context, starting from `start`.
fn sample_trajectory<R: Scalar, G: rand::Rng>(
    env: &EnvSpec<R>,
    params: &PolicyParams<R>,
    ctx: &GuidanceContext,
    source: Source,
    start: State,
    rng: &mut G,
) -> Result<Trajectory<R>> {
    let mut state = start;
    let mut steps = Vec::with_capacity(env.horizon() - start.step);
    for t in start.step..env.horizon() {
        let recommended = ctx.recommended_at(t);
        let action = params.sample_action(t, ctx, rng);
        let behavior_log_prob = params.log_prob(t, action, ctx);
        steps.push(StepRecord { state, action, behavior_log_prob, recommended });
        state = env.step(state, action, rng)?;
    }
    let reward = env.reward(state)?;
    Ok(Trajectory { steps, source, reward })
}

/// `N` independent trajectories under one behavior snapshot, guided by the
/// given level (or unguided when absent).
pub fn sample_group<R: Scalar>(
    env: &EnvSpec<R>,
    params_old: &PolicyParams<R>,
    guidance: Option<&GuidanceLevel>,
    group_size: usize,
    task_id: u64,
    seed: u64,
) -> Result<RolloutGroup<R>> {
    if group_size < 1 {
        return Err(Error::InvalidArgument("group size must be >= 1".into()));
    }
    let (ctx, source) = match guidance {
        Some(level) => (level.context(), Source::Guided { level: level.k() }),
        None => (GuidanceContext::none(), Source::Unguided),
    };
    let level_tag = guidance.map_or(0, |l| l.k() as u64 + 1);
    let mut trajectories = Vec::with_capacity(group_size);
    for i in 0..group_size {
        let mut rng = derive_rng(seed, "traj", &[task_id, level_tag, i as u64]);
        trajectories.push(sample_trajectory(
            env,
            params_old,
            &ctx,
            source,
            State::initial(),
            &mut rng,
        )?);
    }
    Ok(RolloutGroup { task_id, trajectories, advantages: None })
}

/// Monte-Carlo Pass@K: the fraction of `n_trials` batches of `K` unguided
/// continuations from `start` that contain at least one success.
pub fn empirical_pass_at_k<R: Scalar>(
    env: &EnvSpec<R>,
    params: &PolicyParams<R>,
    start: State,
    k: usize,
    n_trials: usize,
    seed: u64,
) -> Result<R> {
    if k < 1 || n_trials < 1 {
        return Err(Error::InvalidArgument("pass@K requires K >= 1 and n_trials >= 1".into()));
    }
    if !start.alive {
        return Ok(R::zero());
    }
    let ctx = GuidanceContext::none();
    let mut hits = 0usize;
    for trial in 0..n_trials {
        let mut rng = derive_rng(seed, "passk", &[start.step as u64, trial as u64]);
        for _ in 0..k {
            let traj = sample_trajectory(env, params, &ctx, Source::Unguided, start, &mut rng)?;
            if traj.reward == 1 {
                hits += 1;
                break;
            }
        }
    }
    Ok(R::from_f64_lossy(hits as f64 / n_trials as f64))
}

/// Exact companion: `1 − (1 − p)^K` with `p` the DP success probability of
/// the unguided policy from `start`.
pub fn exact_pass_at_k<R: Scalar>(
    env: &EnvSpec<R>,
    params: &PolicyParams<R>,
    start: State,
    k: usize,
) -> Result<R> {
    if k < 1 {
        return Err(Error::InvalidArgument("pass@K requires K >= 1".into()));
    }
    let dists = params.step_distributions(&GuidanceContext::none());
    let p = env.exact_success_from(&dists, start)?;
    Ok(R::one() - (R::one() - p).powi(k as i32))
}

/// One-line JSON record for offline trajectory dumps.
pub fn trajectory_to_json<R: Scalar>(traj: &Trajectory<R>, task_id: u64) -> String {
    #[derive(Serialize)]
    struct StepDoc {
        t: usize,
        alive: bool,
        action: usize,
        behavior_log_prob: f64,
        recommended: Option<usize>,
    }
    #[derive(Serialize)]
    struct TrajDoc {
        task_id: u64,
        source: Source,
        reward: u8,
        steps: Vec<StepDoc>,
    }
    let doc = TrajDoc {
        task_id,
        source: traj.source,
        reward: traj.reward,
        steps: traj
            .steps
            .iter()
            .map(|s| StepDoc {
                t: s.state.step,
                alive: s.state.alive,
                action: s.action,
                behavior_log_prob: s.behavior_log_prob.to_f64_lossy(),
                recommended: s.recommended,
            })
            .collect(),
    };
    serde_json::to_string(&doc).expect("trajectory serialization")
}
