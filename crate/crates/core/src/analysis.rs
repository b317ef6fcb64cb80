//! Measurement machinery: guidance influence profiles, barrier repair,
//! off-policy risk with its covariance decomposition, recovery probability
//! estimation, risk-constrained level selection, and the sample budget that
//! makes the empirical selection rule reliable.

use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::guidance::GuidanceLevel;
use crate::policy::{GuidanceContext, PolicyParams};
use crate::rollout::{sample_group, RolloutGroup, Trajectory};
use crate::scalar::Scalar;

/// How the per-step guided/unguided logit difference vector is collapsed to
/// a scalar. The guidance bonus touches a single entry, so max-abs is the
/// natural default; mean-abs is available for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaAggregation {
    MaxAbs,
    MeanAbs,
}

/// Per-step guidance influence along a guided trajectory: the aggregated
/// absolute difference between guided and unguided logits at each visited
/// state. Steps beyond the guidance prefix are exactly zero.
pub fn delta_logit_profile<R: Scalar>(
    params: &PolicyParams<R>,
    trajectory: &Trajectory<R>,
) -> Vec<R> {
    delta_logit_profile_with(params, trajectory, DeltaAggregation::MaxAbs)
}

pub fn delta_logit_profile_with<R: Scalar>(
    params: &PolicyParams<R>,
    trajectory: &Trajectory<R>,
    aggregation: DeltaAggregation,
) -> Vec<R> {
    trajectory
        .steps
        .iter()
        .map(|step| {
            let t = step.state.step;
            let guided = params.logits_at(t, step.recommended);
            let plain = params.logits_at(t, None);
            let diffs = guided.iter().zip(&plain).map(|(&g, &p)| (g - p).abs());
            match aggregation {
                DeltaAggregation::MaxAbs => diffs.fold(R::zero(), R::max),
                DeltaAggregation::MeanAbs => {
                    diffs.sum::<R>() / R::from_f64_lossy(plain.len() as f64)
                }
            }
        })
        .collect()
}

/// The log-ratio of guided to unguided visiting mass just past a barrier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierRepair<R: Scalar> {
    /// `log(M_guided / M_unguided)` at `barrier_end`; `+∞` when the
    /// unguided mass is exactly zero (see `undefined`).
    pub log_ratio: R,
    /// True when the unguided mass vanished, making the ratio undefined;
    /// the sentinel value is reported rather than clamped.
    pub undefined: bool,
}

/// Barrier-repair benefit `B_k`: both masses come from exact DP passes
/// under the guided and unguided step distributions.
pub fn barrier_repair<R: Scalar>(
    env: &EnvSpec<R>,
    params: &PolicyParams<R>,
    level: &GuidanceLevel,
    barrier_end: usize,
) -> Result<BarrierRepair<R>> {
    if barrier_end > env.horizon() {
        return Err(Error::InvalidArgument(format!(
            "barrier end {barrier_end} past horizon {}",
            env.horizon()
        )));
    }
    let guided = env.mass_profile(&params.step_distributions(&level.context()))?;
    let unguided = env.mass_profile(&params.step_distributions(&GuidanceContext::none()))?;
    let m_g = guided.mass[barrier_end];
    let m_u = unguided.mass[barrier_end];
    if m_u == R::zero() {
        return Ok(BarrierRepair { log_ratio: R::infinity(), undefined: true });
    }
    Ok(BarrierRepair { log_ratio: (m_g / m_u).ln(), undefined: false })
}

/// Off-policy risk of one guidance level: samples of the cumulative
/// log-ratio shift, their mean, the sample variance (the risk itself), and
/// the exact algebraic split into per-step variances plus twice the pairwise
/// covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskReport<R: Scalar> {
    pub level: usize,
    pub shift_samples: Vec<R>,
    pub mean_shift: R,
    /// Unbiased sample variance of the cumulative shift.
    pub risk: R,
    /// Sum of unbiased per-step shift variances.
    pub var_sum: R,
    /// Twice the sum of unbiased pairwise covariances.
    pub cov_sum: R,
}

impl<R: Scalar> RiskReport<R> {
    /// Relative error of the decomposition identity
    /// `risk = var_sum + cov_sum` on this sample.
    pub fn decomposition_error(&self) -> R {
        let lhs = self.risk;
        let rhs = self.var_sum + self.cov_sum;
        let denom = lhs.abs().max(rhs.abs()).max(R::from_f64_lossy(1e-30));
        (lhs - rhs).abs() / denom
    }
}

/// Samples `n_rollouts` guided rollouts at `level` and measures the
/// distribution shift `L_k(τ) = Σ_j log[π(z_j|s_j) / π(z_j|s_j, g_k)]`.
pub fn risk_report<R: Scalar>(
    env: &EnvSpec<R>,
    params: &PolicyParams<R>,
    level: &GuidanceLevel,
    n_rollouts: usize,
    seed: u64,
) -> Result<RiskReport<R>> {
    if n_rollouts < 2 {
        return Err(Error::InvalidArgument("risk estimation needs >= 2 rollouts".into()));
    }
    let guidance = if level.k() == 0 { None } else { Some(level) };
    let group = sample_group(env, params, guidance, n_rollouts, level.k() as u64, seed)?;

    // Per-rollout per-step shift matrix.
    let horizon = env.horizon();
    let mut shifts = vec![vec![R::zero(); horizon]; n_rollouts];
    for (i, traj) in group.trajectories.iter().enumerate() {
        for step in &traj.steps {
            let t = step.state.step;
            let unguided = params.log_prob(t, step.action, &GuidanceContext::none());
            // behavior_log_prob is the guided sampling log-probability.
            shifts[i][t] = unguided - step.behavior_log_prob;
        }
    }

    let n = R::from_f64_lossy(n_rollouts as f64);
    let totals: Vec<R> = shifts.iter().map(|row| row.iter().copied().sum()).collect();
    let mean_shift = totals.iter().copied().sum::<R>() / n;
    let unbiased = (n - R::one()).recip();
    let risk = totals.iter().map(|&s| (s - mean_shift) * (s - mean_shift)).sum::<R>() * unbiased;

    let step_means: Vec<R> = (0..horizon)
        .map(|t| shifts.iter().map(|row| row[t]).sum::<R>() / n)
        .collect();
    let mut var_sum = R::zero();
    let mut cov_sum = R::zero();
    for t in 0..horizon {
        for u in t..horizon {
            let cov = shifts
                .iter()
                .map(|row| (row[t] - step_means[t]) * (row[u] - step_means[u]))
                .sum::<R>()
                * unbiased;
            if t == u {
                var_sum = var_sum + cov;
            } else {
                cov_sum = cov_sum + cov + cov;
            }
        }
    }

    Ok(RiskReport { level: level.k(), shift_samples: totals, mean_shift, risk, var_sum, cov_sum })
}

/// One report per requested level, with per-level derived seeds.
pub fn risk_curve<R: Scalar>(
    env: &EnvSpec<R>,
    params: &PolicyParams<R>,
    levels: &[GuidanceLevel],
    n_rollouts: usize,
    seed: u64,
) -> Result<Vec<RiskReport<R>>> {
    levels
        .iter()
        .map(|level| risk_report(env, params, level, n_rollouts, seed ^ (level.k() as u64 + 1)))
        .collect()
}

/// Per-level guidance utility `J_k = B_k − λ R_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityCurve<R: Scalar> {
    pub benefit: Vec<R>,
    pub risk: Vec<R>,
    pub utility: Vec<R>,
    pub lambda: R,
    /// Index of the maximal utility (first maximum on ties).
    pub argmax: usize,
}

pub fn utility_curve<R: Scalar>(benefit: &[R], risk: &[R], lambda: R) -> Result<UtilityCurve<R>> {
    if benefit.len() != risk.len() {
        return Err(Error::InvalidArgument("benefit/risk length mismatch".into()));
    }
    if benefit.is_empty() {
        return Err(Error::InvalidArgument("empty utility curve".into()));
    }
    if lambda < R::zero() {
        return Err(Error::InvalidArgument("lambda must be >= 0".into()));
    }
    let utility: Vec<R> = benefit.iter().zip(risk).map(|(&b, &r)| b - lambda * r).collect();
    let argmax = utility
        .iter()
        .enumerate()
        .fold((0usize, R::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0;
    Ok(UtilityCurve { benefit: benefit.to_vec(), risk: risk.to_vec(), utility, lambda, argmax })
}

/// Monte-Carlo estimate of the group recovery probability `Q_k`: the
/// fraction of independent size-`N` guided groups containing a success.
pub fn estimate_q<R: Scalar>(
    env: &EnvSpec<R>,
    params_old: &PolicyParams<R>,
    level: &GuidanceLevel,
    group_size: usize,
    delta: R,
    trial_count: usize,
    seed: u64,
) -> Result<R> {
    if trial_count < 1 {
        return Err(Error::InvalidArgument("trial_count must be >= 1".into()));
    }
    let guidance = if level.k() == 0 { None } else { Some(level) };
    let mut hits = 0usize;
    for trial in 0..trial_count {
        let group = sample_group(
            env,
            params_old,
            guidance,
            group_size,
            level.k() as u64,
            seed ^ (0x9e37_79b9u64.wrapping_mul(trial as u64 + 1)),
        )?;
        let max = group.rewards().into_iter().max().unwrap_or(0);
        if R::from_f64_lossy(f64::from(max)) >= delta {
            hits += 1;
        }
    }
    Ok(R::from_f64_lossy(hits as f64 / trial_count as f64))
}

/// Exact companion of [`estimate_q`]: `1 − (1 − p_k)^N` with `p_k` from DP
/// under the guided step distributions.
pub fn exact_group_recovery<R: Scalar>(
    env: &EnvSpec<R>,
    params: &PolicyParams<R>,
    level: &GuidanceLevel,
    group_size: usize,
) -> Result<R> {
    let p = env.exact_success(&params.step_distributions(&level.context()))?;
    Ok(R::one() - (R::one() - p).powi(group_size as i32))
}

/// The empirical risk-constrained selection rule: the smallest level whose
/// estimated recovery probability clears `ρ`. Under monotone risk this is
/// the risk-constrained optimum.
pub fn select_risk_constrained<R: Scalar>(
    q_hat: &[R],
    r_hat: &[R],
    rho: R,
) -> Result<Option<usize>> {
    if q_hat.len() != r_hat.len() {
        return Err(Error::InvalidArgument("Q/R length mismatch".into()));
    }
    Ok(q_hat.iter().position(|&q| q >= rho))
}

/// Trials per level sufficient for the empirical rule to recover the true
/// minimal feasible level with probability `1 − ξ`, given a margin `Δ`
/// around the target: `ceil((1 / 2Δ²) · ln(2(K+1)/ξ))`.
pub fn hoeffding_budget(margin: f64, max_level: usize, xi: f64) -> Result<u64> {
    if !(margin > 0.0 && margin <= 0.5) {
        return Err(Error::InvalidArgument(format!("margin must be in (0, 0.5], got {margin}")));
    }
    if !(xi > 0.0 && xi < 1.0) {
        return Err(Error::InvalidArgument(format!("xi must be in (0, 1), got {xi}")));
    }
    let bound = (2.0 * (max_level as f64 + 1.0) / xi).ln() / (2.0 * margin * margin);
    Ok(bound.ceil() as u64)
}

/// Fraction of rollout groups with nonzero reward variance, i.e. groups
/// that provide an effective learning signal.
pub fn trainable_fraction<R: Scalar>(groups: &[RolloutGroup<R>]) -> Result<R> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("trainable fraction of no groups".into()));
    }
    let n = groups.iter().filter(|g| g.has_reward_contrast()).count();
    Ok(R::from_f64_lossy(n as f64 / groups.len() as f64))
}

/// Spearman rank correlation, with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs two equal-length series".into()));
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite values"));
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                out[k] = avg;
            }
            i = j + 1;
        }
        out
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..xs.len() {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("spearman of a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::make_barrier_chain;
    use crate::guidance::{level, ReferenceTrajectory};
    use crate::rng::derive_rng;
    use approx::assert_abs_diff_eq;

    fn hard_setup(gamma: f64) -> (crate::env::BarrierChain<f64>, PolicyParams<f64>, ReferenceTrajectory) {
        let chain = make_barrier_chain(12, 8, 6, &[(4, 4)], 0.0).unwrap();
        let params = PolicyParams::uniform(12, 8, gamma).unwrap();
        let reference = ReferenceTrajectory::clean(chain.reference_actions.clone()).unwrap();
        (chain, params, reference)
    }

    #[test]
    fn delta_logit_is_gamma_inside_prefix_zero_after() {
        let (chain, params, reference) = hard_setup(4.0);
        let g6 = level(&reference, 6).unwrap();
        let group = sample_group(&chain.spec, &params, Some(&g6), 1, 0, 1).unwrap();
        let profile = delta_logit_profile(&params, &group.trajectories[0]);
        for (t, v) in profile.iter().enumerate() {
            let expect = if t < 6 { 4.0 } else { 0.0 };
            assert_abs_diff_eq!(*v, expect, epsilon = 1e-15);
        }
        // Zero strength: profile identically zero.
        let flat = PolicyParams::<f64>::uniform(12, 8, 0.0).unwrap();
        let group0 = sample_group(&chain.spec, &flat, Some(&g6), 1, 0, 1).unwrap();
        assert!(delta_logit_profile(&flat, &group0.trajectories[0]).iter().all(|&v| v == 0.0));
        // Mean-abs aggregation divides the single-entry bonus by A.
        let mean = delta_logit_profile_with(&params, &group.trajectories[0], DeltaAggregation::MeanAbs);
        assert_abs_diff_eq!(mean[0], 4.0 / 8.0, epsilon = 1e-15);
    }

    #[test]
    fn barrier_repair_zero_at_level_zero_and_zero_gamma() {
        let (chain, params, reference) = hard_setup(4.0);
        let b0 = barrier_repair(&chain.spec, &params, &level(&reference, 0).unwrap(), 8).unwrap();
        assert_eq!(b0.log_ratio, 0.0);
        assert!(!b0.undefined);
        let flat = PolicyParams::<f64>::uniform(12, 8, 0.0).unwrap();
        for k in 0..=12 {
            let b = barrier_repair(&chain.spec, &flat, &level(&reference, k).unwrap(), 8).unwrap();
            assert_eq!(b.log_ratio, 0.0);
        }
    }

    #[test]
    fn barrier_repair_dp_vs_monte_carlo() {
        let (chain, params, reference) = hard_setup(4.0);
        let full = level(&reference, 12).unwrap();
        let repair = barrier_repair(&chain.spec, &params, &full, 8).unwrap();
        assert!(repair.log_ratio > 0.0);

        // MC oracle: alive fractions at step 8 under both behaviors. With
        // leak = 0 the visiting mass equals the live probability.
        let n = 40_000usize;
        let alive_frac = |ctx: &GuidanceContext, tag: u64| -> f64 {
            let mut alive = 0usize;
            for i in 0..n {
                let mut rng = derive_rng(500 + tag, "mc-mass", &[i as u64]);
                let mut state = crate::env::State::initial();
                for t in 0..8 {
                    let a = params.sample_action(t, ctx, &mut rng);
                    state = chain.spec.step(state, a, &mut rng).unwrap();
                }
                alive += usize::from(state.alive);
            }
            alive as f64 / n as f64
        };
        let mc_g = alive_frac(&full.context(), 0);
        let mc_u = alive_frac(&GuidanceContext::none(), 1);
        let dp_g = chain.spec.mass_profile(&params.step_distributions(&full.context())).unwrap().mass[8];
        let dp_u = chain
            .spec
            .mass_profile(&params.step_distributions(&GuidanceContext::none()))
            .unwrap()
            .mass[8];
        for (mc, dp) in [(mc_g, dp_g), (mc_u, dp_u)] {
            let sigma = (dp * (1.0 - dp) / n as f64).sqrt();
            assert!((mc - dp).abs() <= 3.0 * sigma + 1e-12, "mc {mc} dp {dp}");
        }
    }

    #[test]
    fn barrier_repair_undefined_when_unguided_mass_zero() {
        let chain = make_barrier_chain::<f64>(3, 2, 1, &[(1, 1)], 0.0).unwrap();
        // Put all unguided mass on the unsafe action at the barrier step.
        let unsafe_action = 1 - chain.reference_actions[1];
        let mut logits = vec![vec![0.0; 2]; 3];
        // Large enough that the safe action's probability underflows to 0.
        logits[1][unsafe_action] = 800.0;
        let params = PolicyParams::new(logits, 4.0).unwrap();
        let reference = ReferenceTrajectory::clean(chain.reference_actions.clone()).unwrap();
        let repair = barrier_repair(&chain.spec, &params, &level(&reference, 3).unwrap(), 2).unwrap();
        assert!(repair.undefined);
        assert!(repair.log_ratio.is_infinite());
    }

    #[test]
    fn risk_zero_at_level_zero_and_zero_gamma() {
        let (chain, params, reference) = hard_setup(4.0);
        let r0 = risk_report(&chain.spec, &params, &level(&reference, 0).unwrap(), 64, 3).unwrap();
        assert!(r0.shift_samples.iter().all(|&s| s == 0.0));
        assert_eq!(r0.risk, 0.0);
        let flat = PolicyParams::<f64>::uniform(12, 8, 0.0).unwrap();
        for k in [1, 6, 12] {
            let r = risk_report(&chain.spec, &flat, &level(&reference, k).unwrap(), 32, 3).unwrap();
            assert!(r.shift_samples.iter().all(|&s| s.abs() < 1e-12));
        }
    }

    #[test]
    fn risk_decomposition_identity() {
        let (chain, params, reference) = hard_setup(4.0);
        for k in [1, 4, 8, 12] {
            let r = risk_report(&chain.spec, &params, &level(&reference, k).unwrap(), 200, 7).unwrap();
            assert!(r.decomposition_error() < 1e-9, "level {k}: {}", r.decomposition_error());
        }
    }

    #[test]
    fn risk_rises_with_level() {
        let (chain, params, reference) = hard_setup(4.0);
        let levels: Vec<_> = (0..=12).map(|k| level(&reference, k).unwrap()).collect();
        let curve = risk_curve(&chain.spec, &params, &levels, 1000, 21).unwrap();
        let ks: Vec<f64> = (0..=12).map(f64::from).collect();
        let risks: Vec<f64> = curve.iter().map(|r| r.risk).collect();
        let rho = spearman(&ks, &risks).unwrap();
        assert!(rho > 0.9, "spearman {rho}");
    }

    #[test]
    fn bootstrap_interval_shrinks_with_sample_size() {
        let (chain, params, reference) = hard_setup(4.0);
        let lvl = level(&reference, 8).unwrap();
        // Bootstrap oracle: resample the shift totals, take the spread of
        // the resampled variances.
        let bootstrap_width = |n_rollouts: usize| -> f64 {
            let report = risk_report(&chain.spec, &params, &lvl, n_rollouts, 9).unwrap();
            let samples = &report.shift_samples;
            let mut rng = derive_rng(13, "bootstrap", &[n_rollouts as u64]);
            use rand::Rng;
            let mut vars: Vec<f64> = (0..400)
                .map(|_| {
                    let re: Vec<f64> =
                        (0..samples.len()).map(|_| samples[rng.gen_range(0..samples.len())]).collect();
                    let m = re.iter().sum::<f64>() / re.len() as f64;
                    re.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / (re.len() - 1) as f64
                })
                .collect();
            vars.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vars[389] - vars[9] // ~95% interval width
        };
        let wide = bootstrap_width(100);
        let narrow = bootstrap_width(800);
        assert!(narrow < wide, "narrow {narrow} wide {wide}");
    }

    #[test]
    fn utility_curve_arithmetic() {
        let b = [0.0, 0.0, 5.0, 5.1];
        let r = [0.0, 1.0, 2.0, 10.0];
        let curve = utility_curve(&b, &r, 1.0f64).unwrap();
        let expect = [0.0, -1.0, 3.0, -4.9];
        for (u, e) in curve.utility.iter().zip(&expect) {
            assert_abs_diff_eq!(*u, *e, epsilon = 1e-12);
        }
        assert_eq!(curve.argmax, 2);
        // λ = 0 maximizes benefit; huge λ minimizes risk.
        assert_eq!(utility_curve(&b, &r, 0.0f64).unwrap().argmax, 3);
        assert_eq!(utility_curve(&b, &r, 1e9f64).unwrap().argmax, 0);
        assert!(utility_curve(&b, &r[..3], 1.0f64).is_err());
    }

    #[test]
    fn q_estimates_track_exact() {
        // No-barrier env: every level recovers with certainty.
        let easy = make_barrier_chain::<f64>(4, 4, 4, &[], 0.0).unwrap();
        let params = PolicyParams::uniform(4, 4, 4.0).unwrap();
        let reference = ReferenceTrajectory::clean(easy.reference_actions.clone()).unwrap();
        for k in 0..=4 {
            let lvl = level(&reference, k).unwrap();
            let q = estimate_q(&easy.spec, &params, &lvl, 4, 0.5, 20, 3).unwrap();
            assert_eq!(q, 1.0);
        }

        // Moderate env: MC within a 99% binomial band of the exact value.
        let chain = make_barrier_chain::<f64>(6, 4, 3, &[(2, 2)], 0.0).unwrap();
        let params = PolicyParams::uniform(6, 4, 2.0).unwrap();
        let reference = ReferenceTrajectory::clean(chain.reference_actions.clone()).unwrap();
        let trials = 800;
        for k in [0, 2, 4, 6] {
            let lvl = level(&reference, k).unwrap();
            let exact = exact_group_recovery(&chain.spec, &params, &lvl, 4).unwrap();
            let q = estimate_q(&chain.spec, &params, &lvl, 4, 0.5, trials, 31 + k as u64).unwrap();
            let sigma = (exact * (1.0 - exact) / trials as f64).sqrt();
            assert!((q - exact).abs() <= 2.576 * sigma + 1e-9, "k {k}: q {q} exact {exact}");
        }
    }

    #[test]
    fn selection_rule_examples() {
        let q = [0.1, 0.4, 0.8, 0.95];
        let r = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(select_risk_constrained(&q, &r, 0.7f64).unwrap(), Some(2));
        assert_eq!(select_risk_constrained(&q, &r, 0.99f64).unwrap(), None);
    }

    #[test]
    fn minimal_feasible_level_is_risk_optimal_on_monotone_instances() {
        use rand::Rng;
        let mut rng = derive_rng(77, "prop1", &[]);
        let mut checked = 0;
        for _ in 0..500 {
            let levels = rng.gen_range(2..=20);
            let mut q: Vec<f64> = (0..levels).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut r: Vec<f64> = (0..levels).map(|_| rng.gen_range(0.0..5.0)).collect();
            q.sort_by(|a, b| a.partial_cmp(b).unwrap());
            r.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let rho = rng.gen_range(0.0..1.0);
            let selected = select_risk_constrained(&q, &r, rho).unwrap();
            // Exhaustive feasibility scan.
            let feasible: Vec<usize> = (0..levels).filter(|&k| q[k] >= rho).collect();
            match selected {
                None => assert!(feasible.is_empty()),
                Some(k) => {
                    let min_risk = feasible.iter().map(|&j| r[j]).fold(f64::INFINITY, f64::min);
                    assert!(r[k] <= min_risk, "selected risk {} vs optimum {min_risk}", r[k]);
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn hoeffding_budget_closed_forms() {
        assert_eq!(hoeffding_budget(0.1, 8, 0.05).unwrap(), 295);
        assert_eq!(hoeffding_budget(0.5, 1, 0.5).unwrap(), 5);
        // Halving the margin quadruples the bound (before ceiling).
        let full = (2.0 * 9.0 / 0.05f64).ln();
        let coarse = full / (2.0 * 0.1 * 0.1);
        let fine = full / (2.0 * 0.05 * 0.05);
        assert_abs_diff_eq!(fine / coarse, 4.0, epsilon = 1e-12);
        assert!(hoeffding_budget(0.0, 8, 0.05).is_err());
        assert!(hoeffding_budget(0.1, 8, 1.5).is_err());
    }

    #[test]
    fn trainable_fraction_counts_contrast() {
        let (chain, params, _) = hard_setup(0.0);
        let make = |rewards: &[u8]| -> RolloutGroup<f64> {
            let mut g = sample_group(&chain.spec, &params, None, rewards.len(), 0, 1).unwrap();
            for (t, &r) in g.trajectories.iter_mut().zip(rewards) {
                t.reward = r;
            }
            g
        };
        let groups: Vec<RolloutGroup<f64>> = vec![
            make(&[0, 0, 0]),
            make(&[1, 0, 0]),
            make(&[1, 1, 1]),
            make(&[0, 1, 1]),
            make(&[0, 0, 0]),
        ];
        assert_abs_diff_eq!(trainable_fraction(&groups).unwrap(), 0.4, epsilon = 1e-15);
        assert!(trainable_fraction::<f64>(&[]).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[2.0, 4.0, 9.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 4.0, 1.0]).unwrap(), -1.0, epsilon = 1e-12);
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
    }
}
