//! Synthetic barrier-chain environments with exact reachability oracles.
//!
//! An episode is `T` steps over an action alphabet of size `A`. Each step has
//! a non-empty set of safe actions; taking an unsafe action kills the episode
//! (dead is absorbing) and a binary reward is paid iff the final state is
//! still alive. A "barrier" is a run of consecutive steps whose safe set is a
//! singleton: a near-uniform policy loses a factor of `1/A` of its remaining
//! success mass at every such step.
//!
//! Because the live state at step `t` is unique, everything the diagnostics
//! need — the success ceiling `Ψ(s)`, the per-step visiting mass `M_t`, the
//! retention ratios `κ̄_t`, and the exact policy success probability — is
//! computable in closed form by a short forward/backward pass.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Retention threshold below which a step is flagged as part of a barrier.
pub const DEFAULT_BARRIER_THRESHOLD: f64 = 0.3;

/// A finite-horizon sparse-reward environment with explicit safe-action sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Scalar", deserialize = "R: Scalar"))]
pub struct EnvSpec<R: Scalar> {
    version: u32,
    horizon: usize,
    alphabet_size: usize,
    safe_sets: Vec<BTreeSet<usize>>,
    leak: R,
}

/// Episode state: the step index plus a liveness flag. Dead is absorbing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct State {
    pub step: usize,
    pub alive: bool,
}

impl State {
    pub fn initial() -> Self {
        State { step: 0, alive: true }
    }
}

/// Per-step visiting mass `M_t`, retention ratios `κ̄_t`, and the detected
/// low-retention intervals under a fixed policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachabilityProfile<R: Scalar> {
    /// `M_0..M_T` (length `T + 1`).
    pub mass: Vec<R>,
    /// `κ̄_t = M_{t+1} / M_t`; `None` where `M_t = 0` (the ratio is
    /// undefined there, not zero).
    pub retention: Vec<Option<R>>,
    /// Maximal runs of steps with defined retention below the threshold,
    /// as `(start, length)` pairs.
    pub barrier_intervals: Vec<(usize, usize)>,
    /// True when the mass hits exactly zero somewhere along the horizon.
    pub degenerate: bool,
}

/// A barrier-chain instance together with its canonical safe path, which
/// doubles as the ground-truth reference plan for guidance.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierChain<R: Scalar> {
    pub spec: EnvSpec<R>,
    /// The canonical safe action at every step (a guaranteed success path).
    pub reference_actions: Vec<usize>,
    /// Barrier intervals used during construction, as `(start, length)`.
    pub barriers: Vec<(usize, usize)>,
}

impl<R: Scalar> EnvSpec<R> {
    pub fn new(
        horizon: usize,
        alphabet_size: usize,
        safe_sets: Vec<BTreeSet<usize>>,
        leak: R,
    ) -> Result<Self> {
        if horizon < 1 {
            return Err(Error::InvalidEnv("horizon must be >= 1".into()));
        }
        if alphabet_size < 2 {
            return Err(Error::InvalidEnv("alphabet size must be >= 2".into()));
        }
        if safe_sets.len() != horizon {
            return Err(Error::InvalidEnv(format!(
                "expected {} safe sets, got {}",
                horizon,
                safe_sets.len()
            )));
        }
        for (t, set) in safe_sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::InvalidEnv(format!("safe set at step {t} is empty")));
            }
            if set.iter().any(|&a| a >= alphabet_size) {
                return Err(Error::InvalidEnv(format!(
                    "safe set at step {t} contains an out-of-range action"
                )));
            }
        }
        let leak_f = leak.to_f64_lossy();
        if !(0.0..1.0).contains(&leak_f) {
            return Err(Error::InvalidEnv(format!("leak must be in [0, 1), got {leak_f}")));
        }
        Ok(EnvSpec { version: 1, horizon, alphabet_size, safe_sets, leak })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn leak(&self) -> R {
        self.leak
    }

    pub fn safe_set(&self, t: usize) -> &BTreeSet<usize> {
        &self.safe_sets[t]
    }

    pub fn is_safe(&self, t: usize, action: usize) -> bool {
        self.safe_sets[t].contains(&action)
    }

    /// One environment transition. Deterministic when `leak = 0`; otherwise
    /// a surviving step additionally passes a `Bernoulli(1 - leak)` draw
    /// from the caller's stream.
    pub fn step<G: rand::Rng>(&self, state: State, action: usize, rng: &mut G) -> Result<State> {
        if state.step >= self.horizon {
            return Err(Error::InvalidArgument(format!(
                "step called at t={} with horizon {}",
                state.step, self.horizon
            )));
        }
        if action >= self.alphabet_size {
            return Err(Error::InvalidArgument(format!(
                "action {} out of range [0, {})",
                action, self.alphabet_size
            )));
        }
        let mut alive = state.alive && self.is_safe(state.step, action);
        if alive && self.leak > R::zero() {
            let u: f64 = rng.gen();
            alive = u >= self.leak.to_f64_lossy();
        }
        Ok(State { step: state.step + 1, alive })
    }

    /// Binary outcome reward: 1 iff the episode reached the horizon alive.
    pub fn reward(&self, final_state: State) -> Result<u8> {
        if final_state.step != self.horizon {
            return Err(Error::InvalidArgument(format!(
                "reward requires a full {}-step trajectory, got t={}",
                self.horizon, final_state.step
            )));
        }
        Ok(u8::from(final_state.alive))
    }

    /// `Ψ(s)`: the best success probability achievable from `s` by any
    /// continuation policy, computed by backward induction.
    pub fn psi(&self, state: State) -> R {
        if !state.alive {
            return R::zero();
        }
        let survive = R::one() - self.leak;
        let mut value = R::one();
        for t in (state.step..self.horizon).rev() {
            // All safe actions are equivalent for the optimal continuation.
            let best = self.safe_sets[t].iter().map(|_| survive * value).fold(R::zero(), R::max);
            value = best;
        }
        value
    }

    fn check_policy_shape(&self, policy: &[Vec<R>]) -> Result<()> {
        if policy.len() != self.horizon {
            return Err(Error::InvalidArgument(format!(
                "policy has {} step distributions, horizon is {}",
                policy.len(),
                self.horizon
            )));
        }
        for (t, dist) in policy.iter().enumerate() {
            if dist.len() != self.alphabet_size {
                return Err(Error::InvalidArgument(format!(
                    "step {t} distribution has {} entries, alphabet is {}",
                    dist.len(),
                    self.alphabet_size
                )));
            }
        }
        Ok(())
    }

    /// Probability mass the policy puts on safe actions at step `t`.
    fn safe_mass(&self, policy: &[Vec<R>], t: usize) -> R {
        self.safe_sets[t].iter().map(|&a| policy[t][a]).sum()
    }

    /// Exact forward propagation of `M_t = E[Ψ(s_t)]` under a per-step
    /// policy given as live-state action distributions.
    pub fn mass_profile(&self, policy: &[Vec<R>]) -> Result<ReachabilityProfile<R>> {
        self.mass_profile_with_threshold(policy, R::from_f64_lossy(DEFAULT_BARRIER_THRESHOLD))
    }

    pub fn mass_profile_with_threshold(
        &self,
        policy: &[Vec<R>],
        barrier_threshold: R,
    ) -> Result<ReachabilityProfile<R>> {
        self.check_policy_shape(policy)?;
        let survive = R::one() - self.leak;

        // psi_alive[t] = Ψ(alive at t) = (1 - leak)^(T - t)
        let mut psi_alive = vec![R::one(); self.horizon + 1];
        for t in (0..self.horizon).rev() {
            psi_alive[t] = survive * psi_alive[t + 1];
        }

        let mut live = vec![R::zero(); self.horizon + 1];
        live[0] = R::one();
        for t in 0..self.horizon {
            live[t + 1] = live[t] * self.safe_mass(policy, t) * survive;
        }

        let mass: Vec<R> = (0..=self.horizon).map(|t| live[t] * psi_alive[t]).collect();
        let mut retention = Vec::with_capacity(self.horizon);
        for t in 0..self.horizon {
            if mass[t] > R::zero() {
                retention.push(Some(mass[t + 1] / mass[t]));
            } else {
                retention.push(None);
            }
        }
        let degenerate = mass.iter().any(|m| *m == R::zero());

        let mut barrier_intervals = Vec::new();
        let mut run_start: Option<usize> = None;
        for t in 0..self.horizon {
            let low = matches!(retention[t], Some(r) if r < barrier_threshold);
            match (low, run_start) {
                (true, None) => run_start = Some(t),
                (false, Some(s)) => {
                    barrier_intervals.push((s, t - s));
                    run_start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = run_start {
            barrier_intervals.push((s, self.horizon - s));
        }

        Ok(ReachabilityProfile { mass, retention, barrier_intervals, degenerate })
    }

    /// Exact success probability `P(Y = 1)` of the policy, by the same
    /// forward recursion. Equals `M_T` for every leak (mass at the horizon
    /// is exactly the live probability).
    pub fn exact_success(&self, policy: &[Vec<R>]) -> Result<R> {
        self.exact_success_from(policy, State::initial())
    }

    /// Success probability conditioned on an arbitrary start state.
    pub fn exact_success_from(&self, policy: &[Vec<R>], state: State) -> Result<R> {
        self.check_policy_shape(policy)?;
        if !state.alive {
            return Ok(R::zero());
        }
        let survive = R::one() - self.leak;
        let mut p = R::one();
        for t in state.step..self.horizon {
            p = p * self.safe_mass(policy, t) * survive;
        }
        Ok(p)
    }

    /// Canonical versioned JSON document for hashing and persistence.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("env serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: EnvSpec<R> = serde_json::from_str(text)?;
        // Re-validate: hand-edited documents must obey the same invariants.
        EnvSpec::new(spec.horizon, spec.alphabet_size, spec.safe_sets, spec.leak)
    }

    /// Hex SHA-256 of the canonical JSON document; stamps logs/checkpoints.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Builds a barrier chain: `easy_safe_size` safe actions everywhere except
/// the given `(start, length)` intervals, which get singleton safe sets.
/// The canonical safe action at step `t` is `t mod easy_safe_size`, so the
/// reference plan varies across steps.
pub fn make_barrier_chain<R: Scalar>(
    horizon: usize,
    alphabet_size: usize,
    easy_safe_size: usize,
    barrier_intervals: &[(usize, usize)],
    leak: R,
) -> Result<BarrierChain<R>> {
    if easy_safe_size < 1 || easy_safe_size > alphabet_size {
        return Err(Error::InvalidEnv(format!(
            "easy_safe_size must be in [1, {alphabet_size}], got {easy_safe_size}"
        )));
    }
    let mut covered = vec![false; horizon];
    for &(start, len) in barrier_intervals {
        if len == 0 {
            return Err(Error::InvalidEnv("barrier interval has zero length".into()));
        }
        if start + len > horizon {
            return Err(Error::InvalidEnv(format!(
                "barrier interval ({start}, {len}) extends past the horizon {horizon}"
            )));
        }
        for t in start..start + len {
            if covered[t] {
                return Err(Error::InvalidEnv("barrier intervals overlap".into()));
            }
            covered[t] = true;
        }
    }

    let mut safe_sets = Vec::with_capacity(horizon);
    let mut reference_actions = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let canonical = t % easy_safe_size;
        reference_actions.push(canonical);
        if covered[t] {
            safe_sets.push(BTreeSet::from([canonical]));
        } else {
            safe_sets.push((0..easy_safe_size).collect());
        }
    }
    let spec = EnvSpec::new(horizon, alphabet_size, safe_sets, leak)?;
    let mut barriers = barrier_intervals.to_vec();
    barriers.sort_unstable();
    Ok(BarrierChain { spec, reference_actions, barriers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_policy(t: usize, a: usize) -> Vec<Vec<f64>> {
        vec![vec![1.0 / a as f64; a]; t]
    }

    #[test]
    fn no_barrier_chain_all_actions_safe() {
        let chain = make_barrier_chain::<f64>(4, 4, 4, &[], 0.0).unwrap();
        for t in 0..4 {
            assert_eq!(chain.spec.safe_set(t).len(), 4);
        }
        let p = chain.spec.exact_success(&uniform_policy(4, 4)).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn hard_chain_shapes() {
        let chain = make_barrier_chain::<f64>(12, 8, 6, &[(4, 4)], 0.0).unwrap();
        for t in 0..12 {
            let expect = if (4..8).contains(&t) { 1 } else { 6 };
            assert_eq!(chain.spec.safe_set(t).len(), expect, "step {t}");
        }
    }

    #[test]
    fn all_barrier_uniform_success() {
        let chain = make_barrier_chain::<f64>(3, 2, 1, &[(0, 3)], 0.0).unwrap();
        let p = chain.spec.exact_success(&uniform_policy(3, 2)).unwrap();
        assert_abs_diff_eq!(p, 0.125, epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(make_barrier_chain::<f64>(4, 4, 0, &[], 0.0).is_err());
        assert!(make_barrier_chain::<f64>(4, 4, 4, &[(0, 2), (1, 2)], 0.0).is_err());
        assert!(make_barrier_chain::<f64>(4, 4, 4, &[(3, 2)], 0.0).is_err());
        assert!(make_barrier_chain::<f64>(4, 4, 4, &[(0, 0)], 0.0).is_err());
    }

    #[test]
    fn step_transitions() {
        let chain = make_barrier_chain::<f64>(3, 2, 1, &[(0, 3)], 0.0).unwrap();
        let env = &chain.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s0 = State::initial();
        let safe = chain.reference_actions[0];
        let alive = env.step(s0, safe, &mut rng).unwrap();
        assert!(alive.alive);
        let dead = env.step(s0, 1 - safe, &mut rng).unwrap();
        assert!(!dead.alive);
        // Dead is absorbing, even under safe actions.
        let still_dead = env.step(dead, chain.reference_actions[1], &mut rng).unwrap();
        assert!(!still_dead.alive);
        // Contract violations.
        assert!(env.step(s0, 5, &mut rng).is_err());
        assert!(env.step(State { step: 3, alive: true }, 0, &mut rng).is_err());
    }

    #[test]
    fn reward_is_final_liveness() {
        let chain = make_barrier_chain::<f64>(2, 2, 2, &[], 0.0).unwrap();
        let env = &chain.spec;
        assert_eq!(env.reward(State { step: 2, alive: true }).unwrap(), 1);
        assert_eq!(env.reward(State { step: 2, alive: false }).unwrap(), 0);
        assert!(env.reward(State { step: 1, alive: true }).is_err());
    }

    #[test]
    fn psi_values() {
        let chain = make_barrier_chain::<f64>(5, 3, 2, &[(2, 1)], 0.0).unwrap();
        for t in 0..=5 {
            assert_eq!(chain.spec.psi(State { step: t, alive: true }), 1.0);
            assert_eq!(chain.spec.psi(State { step: t, alive: false }), 0.0);
        }
        // Backward-induction oracle: Ψ(alive, T-2) = (1 - leak)^2.
        let leaky = make_barrier_chain::<f64>(5, 3, 2, &[], 0.1).unwrap();
        let v = leaky.spec.psi(State { step: 3, alive: true });
        assert_abs_diff_eq!(v, 0.81, epsilon = 1e-12);
    }

    #[test]
    fn retention_under_uniform_policy() {
        let chain = make_barrier_chain::<f64>(12, 8, 6, &[(4, 4)], 0.0).unwrap();
        let profile = chain.spec.mass_profile(&uniform_policy(12, 8)).unwrap();
        for t in 0..12 {
            let expect = if (4..8).contains(&t) { 1.0 / 8.0 } else { 6.0 / 8.0 };
            assert_abs_diff_eq!(profile.retention[t].unwrap(), expect, epsilon = 1e-12);
        }
        // Exact DP product: M_T = 0.75^8 * 0.125^4.
        let expected = 0.75f64.powi(8) * 0.125f64.powi(4);
        assert_abs_diff_eq!(profile.mass[12], expected, epsilon = 1e-18);
        assert_eq!(profile.barrier_intervals, vec![(4, 4)]);
        assert!(!profile.degenerate);
    }

    #[test]
    fn full_safe_sets_give_unit_retention() {
        let chain = make_barrier_chain::<f64>(4, 4, 4, &[], 0.0).unwrap();
        let profile = chain.spec.mass_profile(&uniform_policy(4, 4)).unwrap();
        for t in 0..4 {
            assert_eq!(profile.retention[t], Some(1.0));
        }
    }

    #[test]
    fn zero_mass_is_flagged_not_fabricated() {
        let chain = make_barrier_chain::<f64>(3, 2, 1, &[(1, 1)], 0.0).unwrap();
        // Policy that puts zero mass on the barrier's safe action.
        let unsafe_action = 1 - chain.reference_actions[1];
        let mut policy = uniform_policy(3, 2);
        policy[1] = vec![0.0; 2];
        policy[1][unsafe_action] = 1.0;
        let profile = chain.spec.mass_profile(&policy).unwrap();
        assert!(profile.degenerate);
        assert_eq!(profile.retention[1], Some(0.0));
        assert_eq!(profile.retention[2], None);
        assert_eq!(profile.mass[2], 0.0);
    }

    /// Independent oracle: success probability by exhaustive enumeration of
    /// all A^T action sequences weighted by the policy.
    fn brute_force_success(env: &EnvSpec<f64>, policy: &[Vec<f64>]) -> f64 {
        let t = env.horizon();
        let a = env.alphabet_size();
        let survive_all = (1.0 - env.leak()).powi(t as i32);
        let mut total = 0.0;
        let n_seq = (a as u64).pow(t as u32);
        for mut code in 0..n_seq {
            let mut prob = 1.0;
            let mut all_safe = true;
            for step in 0..t {
                let action = (code % a as u64) as usize;
                code /= a as u64;
                prob *= policy[step][action];
                all_safe &= env.is_safe(step, action);
            }
            if all_safe {
                total += prob * survive_all;
            }
        }
        total
    }

    #[test]
    fn dp_matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..30 {
            use rand::Rng;
            let t = rng.gen_range(1..=6);
            let a = rng.gen_range(2..=4);
            let easy = rng.gen_range(1..=a);
            let barrier: Vec<(usize, usize)> = if t >= 2 && rng.gen_bool(0.7) {
                let len = rng.gen_range(1..=t.min(3));
                let start = rng.gen_range(0..=t - len);
                vec![(start, len)]
            } else {
                vec![]
            };
            let leak = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..0.3) };
            let chain = make_barrier_chain::<f64>(t, a, easy, &barrier, leak).unwrap();
            let policy: Vec<Vec<f64>> = (0..t)
                .map(|_| {
                    let raw: Vec<f64> = (0..a).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|x| x / s).collect()
                })
                .collect();
            let dp = chain.spec.exact_success(&policy).unwrap();
            let brute = brute_force_success(&chain.spec, &policy);
            assert_abs_diff_eq!(dp, brute, epsilon = 1e-10);
            let _ = trial;
        }
    }

    #[test]
    fn leaky_success_below_mass_bound() {
        let chain = make_barrier_chain::<f64>(6, 4, 3, &[(2, 2)], 0.05).unwrap();
        let policy = uniform_policy(6, 4);
        let profile = chain.spec.mass_profile(&policy).unwrap();
        let success = chain.spec.exact_success(&policy).unwrap();
        assert!(success <= profile.mass[6] + 1e-15);
    }

    #[test]
    fn json_round_trip_and_hash_stability() {
        let chain = make_barrier_chain::<f64>(12, 8, 6, &[(4, 4)], 0.0).unwrap();
        let text = chain.spec.to_json();
        let back = EnvSpec::<f64>::from_json(&text).unwrap();
        assert_eq!(back, chain.spec);
        assert_eq!(back.content_hash(), chain.spec.content_hash());
        let other = make_barrier_chain::<f64>(12, 8, 6, &[(4, 3)], 0.0).unwrap();
        assert_ne!(other.spec.content_hash(), chain.spec.content_hash());
    }
}
