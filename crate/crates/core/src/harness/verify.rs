//! The acceptance suite: every mechanism of the artifact checked against an
//! independent oracle (exhaustive DP, finite differences, closed forms, or
//! Monte-Carlo confidence bands), each with a pinned tolerance. The CLI
//! `verify` subcommand and the acceptance test target both run these.

use std::time::Instant;

use rand::Rng;

use crate::analysis::{hoeffding_budget, risk_curve, spearman};
use crate::env::{make_barrier_chain, BarrierChain, State};
use crate::guidance::{default_budget, find_min_level, level};
use crate::harness::config::{ExperimentConfig, TaskMix};
use crate::harness::experiment::run_train_mode;
use crate::harness::taskset::generate_taskset;
use crate::optimizer::{
    compute_advantages, mixed_objective_value, mixed_ratio, opsd_grad, opsd_loss, AdvantageMode,
    Mode, TrainConfig,
};
use crate::policy::{GuidanceContext, PolicyParams};
use crate::rng::derive_rng;
use crate::rollout::{exact_pass_at_k, sample_group, RolloutGroup, Source};
use crate::Real;

/// Outcome of one acceptance check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: String,
    pub tolerance: String,
    pub runtime_secs: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} {:<28} measured={} tolerance={} runtime={:.2}s",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.runtime_secs
        )
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Additive corruption injected into one analytic gradient entry; the
    /// gradient-fidelity check must fail when this is non-zero (the
    /// negative control of the suite).
    pub gradient_corruption: f64,
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

pub fn render_report(results: &[CheckResult]) -> String {
    let mut out: String = results.iter().map(|r| r.line() + "\n").collect();
    let failed = results.iter().filter(|r| !r.passed).count();
    let total_secs: f64 = results.iter().map(|r| r.runtime_secs).sum();
    out.push_str(&format!(
        "{} of {} checks passed in {total_secs:.1}s\n",
        results.len() - failed,
        results.len()
    ));
    out
}

/// Runs all twelve checks in order.
pub fn verify_suite(options: &VerifyOptions) -> Vec<CheckResult> {
    vec![
        check_barrier_stall(),
        check_internalization(),
        check_telescoping(),
        check_mass_bound(),
        check_risk_monotonicity(),
        check_level_search_equivalence(),
        check_min_level_risk_optimality(),
        check_recovery_identification(),
        check_gradient_fidelity(options.gradient_corruption),
        check_ratio_semantics(),
        check_ablation_ordering(),
        check_noise_robustness(),
    ]
}

fn timed(name: &str, tolerance: &str, f: impl FnOnce() -> (bool, String)) -> CheckResult {
    let start = Instant::now();
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f));
    let (passed, measured) = match outcome {
        Ok(v) => v,
        Err(_) => (false, "panicked".into()),
    };
    CheckResult {
        name: name.into(),
        passed,
        measured,
        tolerance: tolerance.into(),
        runtime_secs: start.elapsed().as_secs_f64(),
    }
}

fn hard_config(seed: u64) -> ExperimentConfig {
    // Defaults already describe the hard tier: T=12, A=8, easy safe size 6,
    // barrier over steps 4..8.
    let mut config = ExperimentConfig::default();
    config.seed = seed;
    config
}

fn final_success(config: &ExperimentConfig, mode: Mode, tag: &str) -> f64 {
    let out = std::env::temp_dir().join(format!(
        "guidance-lab-verify-{tag}-{}-{}",
        config.seed,
        std::process::id()
    ));
    let (summary, _, _) = run_train_mode(config, mode, &out, true).expect("training run");
    let _ = std::fs::remove_dir_all(&out);
    summary.final_exact_success
}

/// A sparse-reward barrier blocks plain group RL: unguided Pass@8 is below
/// 1e-3 at init, and 200 vanilla steps leave almost every group untrainable
/// and the policy unsuccessful.
pub fn check_barrier_stall() -> CheckResult {
    timed(
        "barrier-stall",
        "pass@8<1e-3, trainable<1%, success<0.01",
        || {
            let config = hard_config(0);
            let set = generate_taskset(&config).expect("taskset");
            let env = &set.tasks[0].env;
            let params = PolicyParams::<Real>::uniform(12, 8, 4.0).unwrap();
            let pass8 = exact_pass_at_k(env, &params, State::initial(), 8).unwrap();

            let out = std::env::temp_dir()
                .join(format!("guidance-lab-verify-stall-{}", std::process::id()));
            let (summary, log, _) =
                run_train_mode(&config, Mode::Vanilla, &out, true).expect("vanilla run");
            let _ = std::fs::remove_dir_all(&out);
            let trainable = log.metrics.iter().map(|m| m.trainable_frac).sum::<f64>()
                / log.metrics.len() as f64;
            let passed =
                pass8 < 1e-3 && trainable < 0.01 && summary.final_exact_success < 0.01;
            (
                passed,
                format!(
                    "pass@8={pass8:.3e} trainable={trainable:.4} success={:.4}",
                    summary.final_exact_success
                ),
            )
        },
    )
}

/// Adaptive guidance internalizes: on the hard env the guided run beats
/// vanilla by at least 0.5 absolute exact success on every seed.
pub fn check_internalization() -> CheckResult {
    timed("internalization", ">=0.5 improvement on all 3 seeds", || {
        let mut worst = f64::INFINITY;
        let mut parts = Vec::new();
        for seed in 0..3u64 {
            let mut config = hard_config(seed);
            config.train.steps = 500;
            let guided = final_success(&config, Mode::ActGuide, "int-a");
            let vanilla = final_success(&config, Mode::Vanilla, "int-v");
            let diff = guided - vanilla;
            worst = worst.min(diff);
            parts.push(format!("seed{seed}:{guided:.3}-{vanilla:.3}"));
        }
        (worst >= 0.5, format!("min_diff={worst:.3} [{}]", parts.join(" ")))
    })
}

fn random_chain<G: Rng>(rng: &mut G, max_horizon: usize) -> BarrierChain<Real> {
    let t = rng.gen_range(2..=max_horizon);
    let a = rng.gen_range(2..=5);
    let easy = rng.gen_range(1..=a);
    let barriers: Vec<(usize, usize)> = if rng.gen_bool(0.7) {
        let len = rng.gen_range(1..=t.min(2));
        let start = rng.gen_range(0..=t - len);
        vec![(start, len)]
    } else {
        vec![]
    };
    let leak = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..0.3) };
    make_barrier_chain(t, a, easy, &barriers, leak).expect("random chain")
}

fn random_params<G: Rng>(rng: &mut G, t: usize, a: usize, gamma: Real) -> PolicyParams<Real> {
    let logits: Vec<Vec<Real>> =
        (0..t).map(|_| (0..a).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
    PolicyParams::new(logits, gamma).expect("random params")
}

/// The telescoping identity `M_v = M_u · ∏ κ̄_t` on random (env, policy)
/// pairs, wherever every retention factor along the span is defined.
pub fn check_telescoping() -> CheckResult {
    timed("telescoping-identity", "rel err < 1e-12", || {
        let mut rng = derive_rng(100, "telescope", &[]);
        let mut max_err: f64 = 0.0;
        for _ in 0..100 {
            let chain = random_chain(&mut rng, 8);
            let t = chain.spec.horizon();
            let a = chain.spec.alphabet_size();
            let params = random_params(&mut rng, t, a, 0.0);
            let profile = chain
                .spec
                .mass_profile(&params.step_distributions(&GuidanceContext::none()))
                .unwrap();
            for u in 0..=t {
                for v in u + 1..=t {
                    let Some(product) = (u..v)
                        .map(|s| profile.retention[s])
                        .try_fold(1.0, |acc, r| r.map(|r| acc * r))
                    else {
                        continue;
                    };
                    let lhs = profile.mass[v];
                    let rhs = profile.mass[u] * product;
                    let denom = lhs.abs().max(rhs.abs()).max(1e-300);
                    max_err = max_err.max((lhs - rhs).abs() / denom);
                }
            }
        }
        (max_err < 1e-12, format!("max_rel_err={max_err:.3e}"))
    })
}

/// Eventual success is bounded by the horizon mass: Monte-Carlo success of
/// any policy stays within 3σ above `M_T` on random pairs.
pub fn check_mass_bound() -> CheckResult {
    timed("mass-upper-bound", "mc <= M_T + 3 sigma, 50 pairs", || {
        let mut rng = derive_rng(101, "mass-bound", &[]);
        let n = 10_000usize;
        let mut worst_z = f64::NEG_INFINITY;
        for pair in 0..50u64 {
            let chain = random_chain(&mut rng, 8);
            let t = chain.spec.horizon();
            let a = chain.spec.alphabet_size();
            let params = random_params(&mut rng, t, a, 0.0);
            let profile = chain
                .spec
                .mass_profile(&params.step_distributions(&GuidanceContext::none()))
                .unwrap();
            let m_t = profile.mass[t];
            let group = sample_group(&chain.spec, &params, None, n, pair, 202).unwrap();
            let mc = group.rewards().iter().map(|&r| f64::from(r)).sum::<f64>() / n as f64;
            let sigma = (m_t * (1.0 - m_t) / n as f64).sqrt();
            let z = if sigma > 0.0 { (mc - m_t) / sigma } else { (mc - m_t) / 1e-12 };
            worst_z = worst_z.max(z);
        }
        (worst_z <= 3.0, format!("max_z={worst_z:.2}"))
    })
}

/// Off-policy risk rises with the guidance level, and every empirical risk
/// report satisfies the covariance decomposition identity.
pub fn check_risk_monotonicity() -> CheckResult {
    timed("risk-monotonicity", "spearman>0.9, decomposition<1e-9", || {
        let chain = make_barrier_chain::<Real>(12, 8, 6, &[(4, 4)], 0.0).unwrap();
        let params = PolicyParams::uniform(12, 8, 4.0).unwrap();
        let reference =
            crate::guidance::ReferenceTrajectory::clean(chain.reference_actions.clone()).unwrap();
        let levels: Vec<_> = (0..=12).map(|k| level(&reference, k).unwrap()).collect();
        let reports = risk_curve(&chain.spec, &params, &levels, 1000, 105).unwrap();
        let ks: Vec<f64> = (0..=12).map(f64::from).collect();
        let risks: Vec<f64> = reports.iter().map(|r| r.risk).collect();
        let rho = spearman(&ks, &risks).unwrap();
        let max_decomp =
            reports.iter().map(|r| r.decomposition_error()).fold(0.0f64, f64::max);
        (
            rho > 0.9 && max_decomp < 1e-9,
            format!("spearman={rho:.3} max_decomp={max_decomp:.2e}"),
        )
    })
}

/// The budgeted binary search returns exactly the linear-scan minimum on
/// deterministic monotone profiles.
pub fn check_level_search_equivalence() -> CheckResult {
    timed("level-search-equivalence", "200/200 equal, budget<=log2K+2", || {
        let mut rng = derive_rng(106, "search-eq", &[]);
        let mut agree = 0usize;
        let mut budget_ok = true;
        for _ in 0..200 {
            let max_level = rng.gen_range(1..=64);
            let first_true = rng.gen_range(1..=max_level + 1);
            let oracle = |k: usize| k >= first_true;
            let budget = default_budget(max_level);
            let result = find_min_level(oracle, max_level, budget).unwrap();
            let linear = (1..=max_level).find(|&k| oracle(k));
            if result.k_star == linear {
                agree += 1;
            }
            budget_ok &= result.budget_used <= budget;
        }
        (agree == 200 && budget_ok, format!("agree={agree}/200 budget_ok={budget_ok}"))
    })
}

/// On monotone (Q, R) instances the minimal feasible level attains the
/// minimum risk over the feasible set.
pub fn check_min_level_risk_optimality() -> CheckResult {
    timed("min-level-risk-optimality", "500/500 optimal", || {
        let mut rng = derive_rng(107, "prop-opt", &[]);
        let mut optimal = 0usize;
        for _ in 0..500 {
            let levels = rng.gen_range(2..=20);
            let mut q: Vec<f64> = (0..levels).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut r: Vec<f64> = (0..levels).map(|_| rng.gen_range(0.0..5.0)).collect();
            q.sort_by(|a, b| a.partial_cmp(b).unwrap());
            r.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let rho = rng.gen_range(0.0..1.0);
            let selected = crate::analysis::select_risk_constrained(&q, &r, rho).unwrap();
            let feasible: Vec<usize> = (0..levels).filter(|&k| q[k] >= rho).collect();
            let ok = match selected {
                None => feasible.is_empty(),
                Some(k) => {
                    let min_risk =
                        feasible.iter().map(|&j| r[j]).fold(f64::INFINITY, f64::min);
                    r[k] <= min_risk
                }
            };
            if ok {
                optimal += 1;
            }
        }
        (optimal == 500, format!("optimal={optimal}/500"))
    })
}

/// With the Hoeffding trial budget at margin 0.1 the empirical selection
/// rule recovers the true minimal sufficient level in at least 95% of
/// experiments (rejection threshold 93% for binomial slack).
pub fn check_recovery_identification() -> CheckResult {
    timed("recovery-identification", ">=93% of 500 recover k*", || {
        let max_level = 8usize;
        let rho = 0.5f64;
        let margin = 0.1f64;
        let trials = hoeffding_budget(margin, max_level, 0.05).unwrap() as usize;
        assert_eq!(trials, 295);
        let mut rng = derive_rng(108, "corollary", &[]);
        let mut recovered = 0usize;
        for _ in 0..500 {
            let k_true = rng.gen_range(0..=max_level);
            let q_true: Vec<f64> = (0..=max_level)
                .map(|k| if k < k_true { rho - margin } else { rho + margin })
                .collect();
            let mut selected = None;
            for (k, &q) in q_true.iter().enumerate() {
                let hits = (0..trials).filter(|_| rng.gen_bool(q)).count();
                if hits as f64 / trials as f64 >= rho {
                    selected = Some(k);
                    break;
                }
            }
            if selected == Some(k_true) {
                recovered += 1;
            }
        }
        let rate = recovered as f64 / 500.0;
        (rate >= 0.93, format!("rate={rate:.3} trials/level={trials}"))
    })
}

/// A random small training instance: one merged unguided+guided group with
/// joint advantages, sampled under `params_old`.
fn random_instance<G: Rng>(
    rng: &mut G,
) -> (BarrierChain<Real>, PolicyParams<Real>, RolloutGroup<Real>, GuidanceContext) {
    let chain = random_chain(rng, 4);
    let t = chain.spec.horizon();
    let a = chain.spec.alphabet_size();
    let gamma = rng.gen_range(1.0..5.0);
    let params_old = random_params(rng, t, a, gamma);
    let reference =
        crate::guidance::ReferenceTrajectory::clean(chain.reference_actions.clone()).unwrap();
    let k = rng.gen_range(1..=t);
    let lvl = level(&reference, k).unwrap();
    let seed = rng.gen::<u64>();
    let mut group = sample_group(&chain.spec, &params_old, None, 3, 0, seed).unwrap();
    let guided = sample_group(&chain.spec, &params_old, Some(&lvl), 3, 0, seed ^ 0xffff).unwrap();
    group.trajectories.extend(guided.trajectories);
    let advantages =
        compute_advantages::<Real>(&group.rewards(), AdvantageMode::MeanCentered).unwrap();
    group.advantages = Some(advantages);
    (chain, params_old, group, lvl.context())
}

fn perturbed(params: &PolicyParams<Real>, t: usize, a: usize, h: f64) -> PolicyParams<Real> {
    let mut logits: Vec<Vec<Real>> = params.logit_table().to_vec();
    logits[t][a] += h;
    PolicyParams::new(logits, params.guidance_strength()).unwrap()
}

/// Analytic gradients of both objectives match central finite differences
/// on random small instances.
pub fn check_gradient_fidelity(corruption: f64) -> CheckResult {
    timed("gradient-fidelity", "max rel err < 1e-5 over 100 instances", || {
        let h = 1e-5;
        let mut rng = derive_rng(109, "grad-fd", &[]);
        let mut max_err: f64 = 0.0;
        for i in 0..100 {
            let (chain, params_old, group, teacher_ctx) = random_instance(&mut rng);
            let t = chain.spec.horizon();
            let a = chain.spec.alphabet_size();
            let params = random_params(&mut rng, t, a, params_old.guidance_strength());
            let params_ref = random_params(&mut rng, t, a, params_old.guidance_strength());
            let mut config = TrainConfig::<Real>::default();
            // Cover both ratio semantics, including the naive ablation.
            config.source_adaptive_ratio = i % 2 == 0;
            let groups = std::slice::from_ref(&group);

            let (mut grad, _) = crate::optimizer::mixed_objective_grad(
                &params, groups, &params_old, &params_ref, &config,
            )
            .unwrap();
            if i == 0 {
                grad[0][0] += corruption;
            }
            for ti in 0..t {
                for ai in 0..a {
                    let plus = mixed_objective_value(
                        &perturbed(&params, ti, ai, h), groups, &params_old, &params_ref, &config,
                    )
                    .unwrap();
                    let minus = mixed_objective_value(
                        &perturbed(&params, ti, ai, -h), groups, &params_old, &params_ref, &config,
                    )
                    .unwrap();
                    let fd = (plus - minus) / (2.0 * h);
                    let denom = fd.abs().max(grad[ti][ai].abs()).max(1e-4);
                    max_err = max_err.max((fd - grad[ti][ai]).abs() / denom);
                }
            }

            let mut dgrad = opsd_grad(&params, &params_old, &group, &teacher_ctx).unwrap();
            if i == 0 {
                dgrad[0][0] += corruption;
            }
            for ti in 0..t {
                for ai in 0..a {
                    let plus = opsd_loss(
                        &perturbed(&params, ti, ai, h), &params_old, &group, &teacher_ctx,
                    )
                    .unwrap();
                    let minus = opsd_loss(
                        &perturbed(&params, ti, ai, -h), &params_old, &group, &teacher_ctx,
                    )
                    .unwrap();
                    let fd = (plus - minus) / (2.0 * h);
                    let denom = fd.abs().max(dgrad[ti][ai].abs()).max(1e-4);
                    max_err = max_err.max((fd - dgrad[ti][ai]).abs() / denom);
                }
            }
        }
        (max_err < 1e-5, format!("max_rel_err={max_err:.3e}"))
    })
}

/// At θ = θ_old, unguided importance ratios are identically 1 and guided
/// ratios equal the closed-form softmax probability ratios.
pub fn check_ratio_semantics() -> CheckResult {
    timed("ratio-semantics", "abs err < 1e-12 at theta=theta_old", || {
        let mut rng = derive_rng(110, "ratio", &[]);
        let mut max_err: f64 = 0.0;
        for _ in 0..50 {
            let (_, params_old, group, _) = random_instance(&mut rng);
            let params = params_old.clone();
            for traj in &group.trajectories {
                for step in &traj.steps {
                    let ratio = mixed_ratio(&params, &params_old, step, traj.source, true);
                    let expected = match (traj.source, step.recommended) {
                        (Source::Guided { .. }, Some(rec)) => {
                            let t = step.state.step;
                            let unguided = params_old.probs_at(t, None)[step.action];
                            let guided = params_old.probs_at(t, Some(rec))[step.action];
                            unguided / guided
                        }
                        _ => 1.0,
                    };
                    max_err = max_err.max((ratio - expected).abs());
                }
            }
        }
        (max_err < 1e-12, format!("max_abs_err={max_err:.3e}"))
    })
}

/// Ablation ordering on a mixed-difficulty task set: adaptive guidance is
/// at least as good as the best fixed level, which is at least as good as
/// always-on guidance with the naive on-policy ratio, in 2 of 3 seeds.
pub fn check_ablation_ordering() -> CheckResult {
    timed("ablation-ordering", "actguide>=fixed-k(best)>=naive within 0.01, 2/3 seeds", || {
        let seeds = [0u64, 1, 2];
        let fixed_ks = [3usize, 6, 9, 12];
        // Near the plateau the adaptive and best-fixed arms converge to the
        // same success level; a 0.01 tie margin absorbs residual
        // convergence-speed differences while still separating the naive
        // ratio arm, which sits 0.05+ lower.
        let tie = 0.01;

        let base = |seed: u64| {
            let mut config = hard_config(seed);
            config.tasks = TaskMix { count: 4, easy: 0.25, medium: 0.25, hard: 0.5 };
            config.train.steps = 800;
            config
        };

        let act: Vec<f64> =
            seeds.iter().map(|&s| final_success(&base(s), Mode::ActGuide, "abl-a")).collect();
        let naive: Vec<f64> = seeds
            .iter()
            .map(|&s| {
                let mut config = base(s);
                config.train.source_adaptive_ratio = false;
                final_success(&config, Mode::AlwaysGuided, "abl-n")
            })
            .collect();
        // One fixed level chosen by mean final success across seeds.
        let mut fixed: Vec<Vec<f64>> = Vec::new();
        for &k in &fixed_ks {
            fixed.push(
                seeds
                    .iter()
                    .map(|&s| final_success(&base(s), Mode::FixedK { k }, "abl-f"))
                    .collect(),
            );
        }
        let best_idx = (0..fixed_ks.len())
            .max_by(|&i, &j| {
                let mi: f64 = fixed[i].iter().sum();
                let mj: f64 = fixed[j].iter().sum();
                mi.partial_cmp(&mj).unwrap()
            })
            .unwrap();
        let best_fixed = &fixed[best_idx];

        let ordered = (0..seeds.len())
            .filter(|&i| act[i] >= best_fixed[i] - tie && best_fixed[i] >= naive[i] - tie)
            .count();
        (
            ordered >= 2,
            format!(
                "ordered_seeds={ordered}/3 act={act:.3?} fixed_k{}={best_fixed:.3?} naive={naive:.3?}",
                fixed_ks[best_idx]
            ),
        )
    })
}

/// Ten percent reference noise costs at most 0.1 absolute final success on
/// the medium tier, per seed.
pub fn check_noise_robustness() -> CheckResult {
    timed("noise-robustness", "degradation <= 0.1 on 3 seeds", || {
        let mut worst: f64 = f64::NEG_INFINITY;
        let mut parts = Vec::new();
        for seed in 0..3u64 {
            let mut config = hard_config(seed);
            config.tasks = TaskMix { count: 1, easy: 0.0, medium: 1.0, hard: 0.0 };
            config.train.steps = 500;
            let clean = final_success(&config, Mode::ActGuide, "noise-c");
            config.guidance.noise_ratio = 0.1;
            let noised = final_success(&config, Mode::ActGuide, "noise-n");
            let degradation = clean - noised;
            worst = worst.max(degradation);
            parts.push(format!("seed{seed}:{clean:.3}->{noised:.3}"));
        }
        (worst <= 0.1, format!("max_degradation={worst:.3} [{}]", parts.join(" ")))
    })
}
