//! Mixed-policy optimization: group advantages, the clipped surrogate with
//! source-adaptive importance ratios, on-policy self-distillation, and the
//! adaptive minimal-intervention training loop with its baselines.

use serde::{Deserialize, Serialize};

use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::guidance::{
    self, fallback_trigger, GuidanceLevel, ReferenceTrajectory, SelectionResult,
};
use crate::policy::{GuidanceContext, PolicyParams};
use crate::rng::derive_rng;
use crate::rollout::{sample_group, RolloutGroup, Source, StepRecord};
use crate::scalar::Scalar;

/// Gradient over the logit table, same `T x A` shape as the parameters.
pub type Gradient<R> = Vec<Vec<R>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    MeanCentered,
    StdNormalized,
}

/// How advantages are pooled when a task has both unguided and guided
/// rollouts: jointly over the merged group (default) or per source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantagePooling {
    Joint,
    PerSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plain group RL: no guidance at all.
    Vanilla,
    /// Full adaptive minimal-intervention training.
    ActGuide,
    /// Guidance at a constant level on fallback (no binary search).
    FixedK { k: usize },
    /// A guided group at the full level every step, regardless of unguided
    /// success (the fallback-removal ablation).
    AlwaysGuided,
    /// On-policy self-distillation toward the guided teacher, alternating
    /// with plain group-RL steps.
    Opsd,
}

impl Mode {
    pub fn label(&self) -> String {
        match self {
            Mode::Vanilla => "vanilla".into(),
            Mode::ActGuide => "actguide".into(),
            Mode::FixedK { k } => format!("fixed-k({k})"),
            Mode::AlwaysGuided => "always-guided".into(),
            Mode::Opsd => "opsd".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Scalar", deserialize = "R: Scalar"))]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig<R: Scalar> {
    /// Tasks sampled per training step.
    pub minibatch_size: usize,
    /// Rollouts per group (per source).
    pub group_size: usize,
    /// Clip radius ε of the surrogate.
    pub clip: R,
    /// KL penalty coefficient β against the frozen reference policy.
    pub kl_coeff: R,
    /// Learning rate η (tabular scale; far larger than LLM-scale values).
    pub learning_rate: R,
    /// Number of training steps S.
    pub steps: usize,
    /// Group-success threshold δ.
    pub delta: R,
    /// Probe budget for the level search; 0 means `ceil(log2 K) + 2`.
    pub budget: usize,
    /// Maximum guidance level K; 0 means the full reference length.
    pub max_level: usize,
    pub advantage_mode: AdvantageMode,
    pub advantage_pooling: AdvantagePooling,
    pub mode: Mode,
    /// When false, guided rollouts are treated as genuinely on-policy under
    /// their own guided distribution: both ratio sides condition on the
    /// recommendation, so the update improves the guided policy instead of
    /// the unguided one. This is the mixed-policy-removal ablation; it
    /// removes the unguided numerator that drives internalization.
    pub source_adaptive_ratio: bool,
    /// Re-probe the selected level once and log disagreement.
    pub reverify_k_star: bool,
}

impl<R: Scalar> Default for TrainConfig<R> {
    fn default() -> Self {
        TrainConfig {
            minibatch_size: 1,
            group_size: 8,
            clip: R::from_f64_lossy(0.2),
            kl_coeff: R::from_f64_lossy(0.001),
            learning_rate: R::from_f64_lossy(10.0),
            steps: 200,
            delta: R::from_f64_lossy(0.5),
            budget: 0,
            max_level: 0,
            advantage_mode: AdvantageMode::MeanCentered,
            advantage_pooling: AdvantagePooling::Joint,
            mode: Mode::ActGuide,
            source_adaptive_ratio: true,
            reverify_k_star: false,
        }
    }
}

impl<R: Scalar> TrainConfig<R> {
    pub fn validate(&self) -> Result<()> {
        if self.minibatch_size < 1 {
            return Err(Error::InvalidConfig("minibatch_size must be >= 1".into()));
        }
        if self.group_size < 2 {
            return Err(Error::InvalidConfig("group_size must be >= 2 for advantage contrast".into()));
        }
        if self.clip <= R::zero() {
            return Err(Error::InvalidConfig("clip must be > 0".into()));
        }
        if self.kl_coeff < R::zero() {
            return Err(Error::InvalidConfig("kl_coeff must be >= 0".into()));
        }
        if self.learning_rate <= R::zero() {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        let delta = self.delta.to_f64_lossy();
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::InvalidConfig("delta must be in (0, 1]".into()));
        }
        if let Mode::FixedK { k } = self.mode {
            if k < 1 {
                return Err(Error::InvalidConfig("fixed-k level must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Scalar diagnostics from one parameter update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport<R: Scalar> {
    pub surrogate: R,
    pub kl: R,
    pub grad_norm: R,
    /// True when at least one group in the batch had reward contrast.
    pub trainable: bool,
    /// Fraction of tokens on which the clipped (constant) branch was
    /// strictly selected, i.e. the token contributed zero gradient.
    pub clip_fraction: R,
}

/// Group-based advantages from binary rewards.
pub fn compute_advantages<R: Scalar>(rewards: &[u8], mode: AdvantageMode) -> Result<Vec<R>> {
    if rewards.is_empty() {
        return Err(Error::InvalidArgument("advantages of an empty group".into()));
    }
    let n = R::from_f64_lossy(rewards.len() as f64);
    let vals: Vec<R> = rewards.iter().map(|&r| R::from_f64_lossy(f64::from(r))).collect();
    let mean = vals.iter().copied().sum::<R>() / n;
    let centered: Vec<R> = vals.iter().map(|&v| v - mean).collect();
    match mode {
        AdvantageMode::MeanCentered => Ok(centered),
        AdvantageMode::StdNormalized => {
            let var = centered.iter().map(|&c| c * c).sum::<R>() / n;
            if var == R::zero() {
                // Degenerate all-equal group: no update signal.
                return Ok(vec![R::zero(); rewards.len()]);
            }
            let std = var.sqrt();
            Ok(centered.into_iter().map(|c| c / std).collect())
        }
    }
}

/// The importance ratio for one recorded token. Source-adaptive semantics:
/// the numerator is always the current *unguided* probability, while the
/// denominator is the behavior probability of the rollout's source
/// distribution. With `source_adaptive` off, guided tokens use the guided
/// distribution on both sides (the naive on-policy treatment).
pub fn mixed_ratio<R: Scalar>(
    params: &PolicyParams<R>,
    params_old: &PolicyParams<R>,
    step: &StepRecord<R>,
    source: Source,
    source_adaptive: bool,
) -> R {
    let t = step.state.step;
    let (num_rec, denom_rec) = ratio_contexts(step, source, source_adaptive);
    let numerator = params.log_probs_at(t, num_rec)[step.action];
    let denominator = params_old.log_probs_at(t, denom_rec)[step.action];
    (numerator - denominator).exp()
}

/// Recommendations conditioning the ratio's (numerator, denominator).
fn ratio_contexts<R: Scalar>(
    step: &StepRecord<R>,
    source: Source,
    source_adaptive: bool,
) -> (Option<usize>, Option<usize>) {
    match source {
        Source::Guided { .. } if source_adaptive => (None, step.recommended),
        Source::Guided { .. } => (step.recommended, step.recommended),
        Source::Unguided => (None, None),
    }
}

fn zero_gradient<R: Scalar>(params: &PolicyParams<R>) -> Gradient<R> {
    vec![vec![R::zero(); params.alphabet_size()]; params.horizon()]
}

fn grad_norm<R: Scalar>(grad: &Gradient<R>) -> R {
    grad.iter().flatten().map(|&g| g * g).sum::<R>().sqrt()
}

fn check_finite<R: Scalar>(grad: &Gradient<R>, what: &str) -> Result<()> {
    if grad.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("{what} gradient")));
    }
    Ok(())
}

/// Value of the mixed clipped surrogate (token-normalized) minus the KL
/// penalty, for a batch of groups with advantages already attached. This is
/// the scalar the analytic gradient below differentiates; tests compare the
/// two by central finite differences.
pub fn mixed_objective_value<R: Scalar>(
    params: &PolicyParams<R>,
    groups: &[RolloutGroup<R>],
    params_old: &PolicyParams<R>,
    params_ref: &PolicyParams<R>,
    config: &TrainConfig<R>,
) -> Result<R> {
    let mut total = R::zero();
    for group in groups {
        let advantages = group
            .advantages
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("group advantages not computed".into()))?;
        let token_count: usize = group.trajectories.iter().map(|t| t.steps.len()).sum();
        let token_norm = R::one() / R::from_f64_lossy(token_count as f64);
        let group_norm = R::one() / R::from_f64_lossy(group.trajectories.len() as f64);

        let mut surrogate = R::zero();
        let mut kl = R::zero();
        for (traj, &adv) in group.trajectories.iter().zip(advantages) {
            for step in &traj.steps {
                let ratio =
                    mixed_ratio(params, params_old, step, traj.source, config.source_adaptive_ratio);
                let clipped = ratio.min(R::one() + config.clip).max(R::one() - config.clip);
                surrogate = surrogate + (ratio * adv).min(clipped * adv);
                if step.state.alive {
                    kl = kl + params.kl_at_step(params_ref, step.state.step, &GuidanceContext::none());
                }
            }
        }
        total = total + surrogate * token_norm - config.kl_coeff * kl * group_norm;
    }
    Ok(total / R::from_f64_lossy(groups.len() as f64))
}

/// Analytic gradient of [`mixed_objective_value`] with respect to the logit
/// table, plus update diagnostics. Tokens on which the clipped constant
/// branch is selected contribute zero gradient; the KL penalty is
/// differentiated exactly per visited live state.
pub fn mixed_objective_grad<R: Scalar>(
    params: &PolicyParams<R>,
    groups: &[RolloutGroup<R>],
    params_old: &PolicyParams<R>,
    params_ref: &PolicyParams<R>,
    config: &TrainConfig<R>,
) -> Result<(Gradient<R>, UpdateReport<R>)> {
    let mut grad = zero_gradient(params);
    let batch_norm = R::one() / R::from_f64_lossy(groups.len() as f64);
    let mut clipped_tokens = 0usize;
    let mut total_tokens = 0usize;
    let mut kl_total = R::zero();
    let mut trainable = false;
    let none_ctx = GuidanceContext::none();

    for group in groups {
        let advantages = group
            .advantages
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("group advantages not computed".into()))?;
        if group.has_reward_contrast() {
            trainable = true;
        }
        let token_count: usize = group.trajectories.iter().map(|t| t.steps.len()).sum();
        let token_norm = R::from_f64_lossy(token_count as f64).recip();
        let group_norm = R::from_f64_lossy(group.trajectories.len() as f64).recip();

        for (traj, &adv) in group.trajectories.iter().zip(advantages) {
            for step in &traj.steps {
                total_tokens += 1;
                let t = step.state.step;
                let ratio =
                    mixed_ratio(params, params_old, step, traj.source, config.source_adaptive_ratio);
                let clipped = ratio.min(R::one() + config.clip).max(R::one() - config.clip);
                if ratio * adv <= clipped * adv {
                    // Unclipped branch active: d(r·Â)/dθ = Â · r · ∇log(numerator),
                    // where the numerator's conditioning follows the ratio
                    // semantics (unguided, or guided in the naive ablation).
                    let coeff = adv * ratio * token_norm * batch_norm;
                    if coeff != R::zero() {
                        let (num_rec, _) =
                            ratio_contexts(step, traj.source, config.source_adaptive_ratio);
                        let probs = params.probs_at(t, num_rec);
                        for (a, p) in probs.iter().enumerate() {
                            let indicator = if a == step.action { R::one() } else { R::zero() };
                            grad[t][a] = grad[t][a] + coeff * (indicator - *p);
                        }
                    }
                } else {
                    clipped_tokens += 1;
                }

                if step.state.alive && config.kl_coeff > R::zero() {
                    // d KL(π_θ || π_ref)/dθ_a = π_θ(a)·[(log π_θ(a) − log π_ref(a)) − KL].
                    let lp = params.log_probs_at(t, None);
                    let lref = params_ref.log_probs_at(t, None);
                    let kl: R = lp.iter().zip(&lref).map(|(&p, &q)| p.exp() * (p - q)).sum();
                    kl_total = kl_total + kl * group_norm * batch_norm;
                    let coeff = config.kl_coeff * group_norm * batch_norm;
                    for a in 0..lp.len() {
                        let d = lp[a].exp() * ((lp[a] - lref[a]) - kl);
                        grad[t][a] = grad[t][a] - coeff * d;
                    }
                } else if step.state.alive {
                    let kl = params.kl_at_step(params_ref, t, &none_ctx);
                    kl_total = kl_total + kl * group_norm * batch_norm;
                }
            }
        }
    }

    check_finite(&grad, "mixed objective")?;
    let surrogate = mixed_objective_value(params, groups, params_old, params_ref, config)?;
    let report = UpdateReport {
        surrogate,
        kl: kl_total,
        grad_norm: grad_norm(&grad),
        trainable,
        clip_fraction: if total_tokens == 0 {
            R::zero()
        } else {
            R::from_f64_lossy(clipped_tokens as f64 / total_tokens as f64)
        },
    };
    Ok((grad, report))
}

/// Value of the self-distillation loss: mean per-token KL from the
/// stop-gradient guided teacher `π_old(·|s, g)` to the unguided student
/// `π_θ(·|s)`, averaged over trajectories.
pub fn opsd_loss<R: Scalar>(
    params: &PolicyParams<R>,
    params_old: &PolicyParams<R>,
    group: &RolloutGroup<R>,
    guidance: &GuidanceContext,
) -> Result<R> {
    if group.trajectories.is_empty() {
        return Err(Error::InvalidArgument("self-distillation on an empty group".into()));
    }
    let mut total = R::zero();
    for traj in &group.trajectories {
        let token_norm = R::from_f64_lossy(traj.steps.len() as f64).recip();
        for step in &traj.steps {
            let t = step.state.step;
            let teacher = params_old.log_probs_at(t, guidance.recommended_at(t));
            let student = params.log_probs_at(t, None);
            let kl: R = teacher.iter().zip(&student).map(|(&q, &p)| q.exp() * (q - p)).sum();
            total = total + kl * token_norm;
        }
    }
    Ok(total / R::from_f64_lossy(group.trajectories.len() as f64))
}

/// Gradient of [`opsd_loss`] with respect to the student logits (descent
/// direction: subtract `η` times this from θ). Per visited step row the
/// derivative is `π_θ(·|s) − π_old(·|s, g)`.
pub fn opsd_grad<R: Scalar>(
    params: &PolicyParams<R>,
    params_old: &PolicyParams<R>,
    group: &RolloutGroup<R>,
    guidance: &GuidanceContext,
) -> Result<Gradient<R>> {
    if group.trajectories.is_empty() {
        return Err(Error::InvalidArgument("self-distillation on an empty group".into()));
    }
    let mut grad = zero_gradient(params);
    let traj_norm = R::from_f64_lossy(group.trajectories.len() as f64).recip();
    for traj in &group.trajectories {
        let token_norm = R::from_f64_lossy(traj.steps.len() as f64).recip();
        for step in &traj.steps {
            let t = step.state.step;
            let teacher = params_old.probs_at(t, guidance.recommended_at(t));
            let student = params.probs_at(t, None);
            let coeff = token_norm * traj_norm;
            for a in 0..student.len() {
                grad[t][a] = grad[t][a] + coeff * (student[a] - teacher[a]);
            }
        }
    }
    check_finite(&grad, "self-distillation")?;
    Ok(grad)
}

/// One (environment, reference plan) training task.
#[derive(Debug, Clone, PartialEq)]
pub struct Task<R: Scalar> {
    pub id: u64,
    pub env: EnvSpec<R>,
    pub reference: ReferenceTrajectory,
}

/// Per-step metric record of the training loop; becomes one CSV row.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub step: usize,
    pub mode: String,
    /// Mean exact unguided success over all tasks (DP, not Monte-Carlo).
    pub exact_success: f64,
    /// Fraction of this step's groups with reward contrast.
    pub trainable_frac: f64,
    /// Mean selected level over tasks that ran the search this step.
    pub mean_k_star: Option<f64>,
    pub mean_reward: f64,
    pub grad_norm: f64,
    pub clip_frac: f64,
    pub kl: f64,
}

/// One level-selection event, logged as a JSONL record.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionTrace {
    pub step: usize,
    pub task_id: u64,
    pub evaluated_levels: Vec<usize>,
    pub outcomes: Vec<bool>,
    pub k_star: Option<usize>,
    pub budget_used: usize,
    pub reverified_agreed: Option<bool>,
}

impl SelectionTrace {
    fn from_result(step: usize, task_id: u64, result: &SelectionResult) -> Self {
        SelectionTrace {
            step,
            task_id,
            evaluated_levels: result.evaluations.keys().copied().collect(),
            outcomes: result.evaluations.values().copied().collect(),
            k_star: result.k_star,
            budget_used: result.budget_used,
            reverified_agreed: result.reverified_agreed,
        }
    }
}

/// Everything `train` produces besides the final parameters.
#[derive(Debug)]
pub struct TrainLog {
    pub metrics: Vec<StepMetrics>,
    pub selection_traces: Vec<SelectionTrace>,
}

fn attach_advantages<R: Scalar>(
    group: &mut RolloutGroup<R>,
    split_at: Option<usize>,
    config: &TrainConfig<R>,
) -> Result<()> {
    let rewards = group.rewards();
    let advantages = match (config.advantage_pooling, split_at) {
        (AdvantagePooling::PerSource, Some(n)) if n < rewards.len() => {
            let mut advs = compute_advantages::<R>(&rewards[..n], config.advantage_mode)?;
            advs.extend(compute_advantages::<R>(&rewards[n..], config.advantage_mode)?);
            advs
        }
        _ => compute_advantages::<R>(&rewards, config.advantage_mode)?,
    };
    group.advantages = Some(advantages);
    Ok(())
}

/// The full training loop. Executes `config.steps` updates; per step it
/// samples a minibatch of tasks, collects unguided groups, applies the
/// configured guidance policy (fallback + search, fixed level, always-on,
/// none, or distillation), pools advantages, and takes one gradient step.
pub fn train<R: Scalar>(
    tasks: &[Task<R>],
    init_params: &PolicyParams<R>,
    config: &TrainConfig<R>,
    seed: u64,
) -> Result<(PolicyParams<R>, TrainLog)> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidConfig("training requires at least one task".into()));
    }
    for task in tasks {
        if task.env.horizon() != init_params.horizon()
            || task.env.alphabet_size() != init_params.alphabet_size()
        {
            return Err(Error::InvalidConfig(format!(
                "task {} shape does not match the policy parameters",
                task.id
            )));
        }
    }

    let mut params = init_params.clone();
    let params_ref = init_params.clone();
    let mut metrics = Vec::with_capacity(config.steps);
    let mut selection_traces = Vec::new();
    let mut minibatch_rng = derive_rng(seed, "minibatch", &[]);

    for step_idx in 0..config.steps {
        let params_old = params.clone();
        let minibatch: Vec<&Task<R>> = (0..config.minibatch_size)
            .map(|_| {
                use rand::Rng;
                &tasks[minibatch_rng.gen_range(0..tasks.len())]
            })
            .collect();

        let mut groups: Vec<RolloutGroup<R>> = Vec::with_capacity(minibatch.len());
        let mut k_stars: Vec<usize> = Vec::new();
        let step_seed = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(step_idx as u64 + 1));

        for task in &minibatch {
            let max_level = if config.max_level == 0 {
                task.reference.len().min(task.env.horizon())
            } else {
                config.max_level.min(task.reference.len())
            };
            let budget =
                if config.budget == 0 { guidance::default_budget(max_level) } else { config.budget };

            let mut group =
                sample_group(&task.env, &params_old, None, config.group_size, task.id, step_seed)?;
            let mut split = None;

            let guide_level: Option<GuidanceLevel> = match config.mode {
                Mode::Vanilla | Mode::Opsd => None,
                Mode::AlwaysGuided => Some(guidance::level(&task.reference, max_level)?),
                Mode::FixedK { k } => {
                    if fallback_trigger(&group.rewards(), config.delta)? {
                        Some(guidance::level(&task.reference, k.min(max_level))?)
                    } else {
                        None
                    }
                }
                Mode::ActGuide => {
                    if fallback_trigger(&group.rewards(), config.delta)? {
                        let mut probe_counter = 0u64;
                        let oracle = |k: usize| -> bool {
                            probe_counter += 1;
                            let lvl = guidance::level(&task.reference, k).expect("level in range");
                            let probe = sample_group(
                                &task.env,
                                &params_old,
                                Some(&lvl),
                                config.group_size,
                                task.id,
                                // Fresh stream per probe, distinct from the
                                // training groups of this step.
                                step_seed ^ (0xabcd_0000 + probe_counter),
                            )
                            .expect("probe rollout");
                            fallback_trigger(&probe.rewards(), config.delta)
                                .map(|failed| !failed)
                                .expect("non-empty probe group")
                        };
                        let result = guidance::find_min_level_opts(
                            oracle,
                            max_level,
                            budget,
                            config.reverify_k_star,
                        )?;
                        selection_traces.push(SelectionTrace::from_result(
                            step_idx, task.id, &result,
                        ));
                        if let Some(k) = result.k_star {
                            k_stars.push(k);
                        }
                        result.k_star.map(|k| guidance::level(&task.reference, k)).transpose()?
                    } else {
                        None
                    }
                }
            };

            if let Some(level) = guide_level {
                let guided = sample_group(
                    &task.env,
                    &params_old,
                    Some(&level),
                    config.group_size,
                    task.id,
                    step_seed ^ 0x5151_0000,
                )?;
                split = Some(group.trajectories.len());
                group.trajectories.extend(guided.trajectories);
            }

            attach_advantages(&mut group, split, config)?;
            groups.push(group);
        }

        // One gradient step per collected batch.
        let report = if matches!(config.mode, Mode::Opsd) && step_idx % 2 == 1 {
            // Distillation step: unguided rollouts toward the full-level
            // guided teacher.
            let mut total_grad = zero_gradient(&params);
            for (task, group) in minibatch.iter().zip(&groups) {
                let max_level = task.reference.len().min(task.env.horizon());
                let teacher_ctx = guidance::level(&task.reference, max_level)?.context();
                let g = opsd_grad(&params, &params_old, group, &teacher_ctx)?;
                for (row, grow) in total_grad.iter_mut().zip(&g) {
                    for (x, gx) in row.iter_mut().zip(grow) {
                        *x = *x + *gx;
                    }
                }
            }
            let scale = R::from_f64_lossy(minibatch.len() as f64).recip();
            for row in &mut total_grad {
                for x in row.iter_mut() {
                    *x = *x * scale;
                }
            }
            // Descent on the distillation loss.
            params.apply_update(&total_grad, -config.learning_rate)?;
            UpdateReport {
                surrogate: R::zero(),
                kl: R::zero(),
                grad_norm: grad_norm(&total_grad),
                trainable: groups.iter().any(|g| g.has_reward_contrast()),
                clip_fraction: R::zero(),
            }
        } else {
            let (grad, report) =
                mixed_objective_grad(&params, &groups, &params_old, &params_ref, config)?;
            // Ascent on the mixed objective.
            params.apply_update(&grad, config.learning_rate)?;
            report
        };

        let exact_success = {
            let dists = params.step_distributions(&GuidanceContext::none());
            let mut total = 0.0;
            for task in tasks {
                total += task.env.exact_success(&dists)?.to_f64_lossy();
            }
            total / tasks.len() as f64
        };
        let trainable_frac = groups.iter().filter(|g| g.has_reward_contrast()).count() as f64
            / groups.len() as f64;
        let mean_reward = {
            let (sum, count) = groups.iter().fold((0u64, 0u64), |(s, c), g| {
                (s + g.rewards().iter().map(|&r| u64::from(r)).sum::<u64>(),
                 c + g.trajectories.len() as u64)
            });
            sum as f64 / count as f64
        };
        let mean_k_star = if k_stars.is_empty() {
            None
        } else {
            Some(k_stars.iter().sum::<usize>() as f64 / k_stars.len() as f64)
        };

        metrics.push(StepMetrics {
            step: step_idx,
            mode: config.mode.label(),
            exact_success,
            trainable_frac,
            mean_k_star,
            mean_reward,
            grad_norm: report.grad_norm.to_f64_lossy(),
            clip_frac: report.clip_fraction.to_f64_lossy(),
            kl: report.kl.to_f64_lossy(),
        });
    }

    Ok((params, TrainLog { metrics, selection_traces }))
}
