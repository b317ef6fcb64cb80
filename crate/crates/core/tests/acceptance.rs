//! Acceptance gate: the twelve primary criteria of the laboratory, each
//! exercised through the same check functions the `verify` CLI subcommand
//! runs. Every test prints its PASS/FAIL line (with the measured value and
//! the pinned tolerance) before asserting, so `cargo test -- --nocapture`
//! doubles as an acceptance report. A negative control at the end confirms
//! the gradient-fidelity check actually detects a corrupted gradient.

use guidance_lab::harness::verify::{self, CheckResult};

fn gate(result: CheckResult) {
    println!("{}", result.line());
    assert!(result.passed, "{}", result.line());
}

/// Criterion 1: a sparse-reward barrier stalls plain group RL — near-zero
/// Pass@8 at init, untrainable groups, and no learned success.
#[test]
fn acceptance_01_barrier_stall() {
    gate(verify::check_barrier_stall());
}

/// Criterion 2: adaptive guidance internalizes — the unguided policy of the
/// guided learner beats vanilla by at least 0.5 exact success on every seed.
#[test]
fn acceptance_02_internalization() {
    gate(verify::check_internalization());
}

/// Criterion 3: the mass telescoping identity holds to near machine
/// precision on random environment/policy pairs.
#[test]
fn acceptance_03_telescoping_identity() {
    gate(verify::check_telescoping());
}

/// Criterion 4: Monte-Carlo success never exceeds the terminal mass bound
/// beyond sampling noise.
#[test]
fn acceptance_04_mass_upper_bound() {
    gate(verify::check_mass_bound());
}

/// Criterion 5: distribution-shift risk grows with guidance level and its
/// variance/covariance decomposition is exact.
#[test]
fn acceptance_05_risk_monotonicity() {
    gate(verify::check_risk_monotonicity());
}

/// Criterion 6: binary search returns the same level as linear scan on
/// monotone profiles, within the probe budget.
#[test]
fn acceptance_06_level_search_equivalence() {
    gate(verify::check_level_search_equivalence());
}

/// Criterion 7: on monotone instances the minimal succeeding level is also
/// the risk-optimal one.
#[test]
fn acceptance_07_min_level_risk_optimality() {
    gate(verify::check_min_level_risk_optimality());
}

/// Criterion 8: the Hoeffding-budgeted estimator recovers the smallest
/// level whose group success clears the threshold.
#[test]
fn acceptance_08_recovery_identification() {
    gate(verify::check_recovery_identification());
}

/// Criterion 9: analytic gradients of the mixed clipped objective match
/// central finite differences across random instances and both ratio
/// semantics.
#[test]
fn acceptance_09_gradient_fidelity() {
    gate(verify::check_gradient_fidelity(0.0));
}

/// Criterion 10: importance ratios take their closed-form values at
/// theta = theta_old for every source/setting combination.
#[test]
fn acceptance_10_ratio_semantics() {
    gate(verify::check_ratio_semantics());
}

/// Criterion 11: the ablation grid orders as adaptive >= best fixed level
/// >= naive ratio (within the pinned tie margin) on most seeds.
#[test]
fn acceptance_11_ablation_ordering() {
    gate(verify::check_ablation_ordering());
}

/// Criterion 12: 10% reference noise costs at most 0.1 final success.
#[test]
fn acceptance_12_noise_robustness() {
    gate(verify::check_noise_robustness());
}

/// Negative control: corrupting one analytic gradient entry must flip the
/// gradient-fidelity check to FAIL, proving the oracle comparison is live.
#[test]
fn negative_control_gradient_corruption_is_detected() {
    let result = verify::check_gradient_fidelity(1e-2);
    println!("{}", result.line());
    assert!(!result.passed, "corrupted gradient went undetected: {}", result.line());
}
