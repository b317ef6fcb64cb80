//! The ordered guidance family and the minimal-intervention selector.
//!
//! A reference trajectory induces prefixes `g_0 ≺ g_1 ≺ … ≺ g_K`; the
//! selector finds the smallest level whose guided rollout group recovers
//! reward, by binary search under a probe budget, invoked only as a
//! fallback when the whole unguided group fails.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::policy::GuidanceContext;
use crate::scalar::Scalar;

/// Where a reference plan came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Provenance {
    Clean,
    /// Noised by random insertions at the given ratio.
    Noised(f64),
}

/// A reference action plan (the canonical success path of a task, possibly
/// corrupted by noise injection).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub actions: Vec<usize>,
    pub provenance: Provenance,
}

impl ReferenceTrajectory {
    pub fn clean(actions: Vec<usize>) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::InvalidArgument("reference trajectory must be non-empty".into()));
        }
        Ok(ReferenceTrajectory { actions, provenance: Provenance::Clean })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Guidance level `g_k`: the first `k` actions of a reference plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuidanceLevel {
    k: usize,
    prefix: Vec<usize>,
}

impl GuidanceLevel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn prefix(&self) -> &[usize] {
        &self.prefix
    }

    pub fn context(&self) -> GuidanceContext {
        GuidanceContext::from_prefix(self.prefix.clone())
    }
}

/// The prefix family member `g_k`; `k = 0` is the empty (unguided) context.
pub fn level(reference: &ReferenceTrajectory, k: usize) -> Result<GuidanceLevel> {
    if k > reference.len() {
        return Err(Error::InvalidArgument(format!(
            "guidance level {k} exceeds plan length {}",
            reference.len()
        )));
    }
    Ok(GuidanceLevel { k, prefix: reference.actions[..k].to_vec() })
}

/// Inserts `ceil(ratio * L)` uniformly random actions at uniformly random
/// positions, preserving the original relative order. Positional consumption
/// by the policy therefore misaligns recommendations after each insertion.
pub fn inject_noise<G: Rng>(
    reference: &ReferenceTrajectory,
    ratio: f64,
    alphabet_size: usize,
    rng: &mut G,
) -> Result<ReferenceTrajectory> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("noise ratio must be in [0, 1), got {ratio}")));
    }
    let n_insert = (ratio * reference.len() as f64).ceil() as usize;
    let mut actions = reference.actions.clone();
    for _ in 0..n_insert {
        let pos = rng.gen_range(0..=actions.len());
        let action = rng.gen_range(0..alphabet_size);
        actions.insert(pos, action);
    }
    Ok(ReferenceTrajectory { actions, provenance: Provenance::Noised(ratio) })
}

/// Outcome of the minimal-level search.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Lowest level observed to succeed, when the search bracketed one.
    pub k_star: Option<usize>,
    /// Level -> observed group-success indicator, for every probe spent.
    pub evaluations: BTreeMap<usize, bool>,
    /// Number of oracle invocations (memoized repeats are free).
    pub budget_used: usize,
    /// When re-verification ran: whether the fresh probe agreed.
    pub reverified_agreed: Option<bool>,
}

/// Recommended probe budget for a `K`-level family: `ceil(log2 K) + 2`.
pub fn default_budget(max_level: usize) -> usize {
    let log2 = if max_level <= 1 { 0 } else { (max_level as f64).log2().ceil() as usize };
    log2 + 2
}

/// Binary search for the smallest succeeding level in `[1, K]`, treating the
/// oracle as monotone. A success at `k` shrinks the upper bound, a failure
/// raises the lower bound. Returns no level when `K` itself fails or when
/// the budget runs out before the bracket closes.
pub fn find_min_level<F: FnMut(usize) -> bool>(
    oracle: F,
    max_level: usize,
    budget: usize,
) -> Result<SelectionResult> {
    find_min_level_opts(oracle, max_level, budget, false)
}

/// As [`find_min_level`], optionally re-probing the returned level once with
/// a fresh group to surface violations of the monotonicity assumption. The
/// extra probe is recorded in `budget_used` but does not change `k_star`.
pub fn find_min_level_opts<F: FnMut(usize) -> bool>(
    mut oracle: F,
    max_level: usize,
    budget: usize,
    reverify: bool,
) -> Result<SelectionResult> {
    if budget < 1 {
        return Err(Error::InvalidArgument("search budget must be >= 1".into()));
    }
    if max_level < 1 {
        return Err(Error::InvalidArgument("max guidance level must be >= 1".into()));
    }

    fn probe<F: FnMut(usize) -> bool>(
        k: usize,
        evaluations: &mut BTreeMap<usize, bool>,
        used: &mut usize,
        oracle: &mut F,
    ) -> bool {
        if let Some(&v) = evaluations.get(&k) {
            return v;
        }
        *used += 1;
        let v = oracle(k);
        evaluations.insert(k, v);
        v
    }

    let mut evaluations: BTreeMap<usize, bool> = BTreeMap::new();
    let mut used = 0usize;
    let mut lo = 1usize;
    let mut hi = max_level;
    let mut exhausted = false;
    while lo < hi {
        if used >= budget {
            exhausted = true;
            break;
        }
        let mid = lo + (hi - lo) / 2;
        if probe(mid, &mut evaluations, &mut used, &mut oracle) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }

    let k_star = if exhausted {
        None
    } else {
        match evaluations.get(&lo).copied() {
            Some(true) => Some(lo),
            Some(false) => None,
            None if used < budget => {
                probe(lo, &mut evaluations, &mut used, &mut oracle).then_some(lo)
            }
            None => None,
        }
    };

    let reverified_agreed = match (reverify, k_star) {
        (true, Some(k)) => {
            used += 1;
            Some(oracle(k))
        }
        _ => None,
    };

    Ok(SelectionResult { k_star, evaluations, budget_used: used, reverified_agreed })
}

/// Fallback trigger: guidance is invoked only when the whole unguided group
/// failed, i.e. `max reward < δ`.
pub fn fallback_trigger<R: Scalar>(unguided_rewards: &[u8], delta: R) -> Result<bool> {
    if unguided_rewards.is_empty() {
        return Err(Error::InvalidArgument("fallback trigger on empty group".into()));
    }
    let max = unguided_rewards.iter().copied().max().unwrap();
    Ok(R::from_f64_lossy(f64::from(max)) < delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn reference(actions: &[usize]) -> ReferenceTrajectory {
        ReferenceTrajectory::clean(actions.to_vec()).unwrap()
    }

    #[test]
    fn level_prefixes() {
        let r = reference(&[2, 0, 1]);
        let g0 = level(&r, 0).unwrap();
        assert!(g0.context().is_empty());
        let g2 = level(&r, 2).unwrap();
        assert_eq!(g2.prefix(), &[2, 0]);
        assert_eq!(g2.context().recommended_at(0), Some(2));
        assert_eq!(g2.context().recommended_at(1), Some(0));
        assert_eq!(g2.context().recommended_at(2), None);
        let g3 = level(&r, 3).unwrap();
        assert_eq!(g3.prefix(), &[2, 0, 1]);
        assert!(level(&r, 4).is_err());
    }

    #[test]
    fn prefix_family_is_monotone() {
        let r = reference(&[3, 1, 4, 1, 5]);
        for k in 0..r.len() {
            let shorter = level(&r, k).unwrap();
            let longer = level(&r, k + 1).unwrap();
            assert_eq!(&longer.prefix()[..k], shorter.prefix());
        }
    }

    #[test]
    fn noise_zero_is_identity() {
        let r = reference(&[1, 2, 3]);
        let mut rng = derive_rng(0, "noise", &[]);
        let out = inject_noise(&r, 0.0, 8, &mut rng).unwrap();
        assert_eq!(out.actions, r.actions);
        assert_eq!(out.provenance, Provenance::Noised(0.0));
    }

    #[test]
    fn noise_length_is_ceiling() {
        let r = reference(&[0; 10]);
        let mut rng = derive_rng(1, "noise", &[]);
        let out = inject_noise(&r, 0.1, 4, &mut rng).unwrap();
        assert_eq!(out.len(), 11);
    }

    fn is_subsequence(needle: &[usize], haystack: &[usize]) -> bool {
        let mut it = haystack.iter();
        needle.iter().all(|n| it.any(|h| h == n))
    }

    #[test]
    fn noise_preserves_plan_as_subsequence() {
        use rand::Rng;
        let mut rng = derive_rng(2, "noise", &[]);
        for _ in 0..1000 {
            let len = rng.gen_range(1..20);
            let a = rng.gen_range(2..8);
            let actions: Vec<usize> = (0..len).map(|_| rng.gen_range(0..a)).collect();
            let r = reference(&actions);
            let ratio = rng.gen_range(0.0..0.99);
            let out = inject_noise(&r, ratio, a, &mut rng).unwrap();
            assert!(is_subsequence(&actions, &out.actions));
        }
    }

    #[test]
    fn search_finds_minimum_of_step_pattern() {
        // k = 1..5 -> F F T T T
        let result = find_min_level(|k| k >= 3, 5, default_budget(5)).unwrap();
        assert_eq!(result.k_star, Some(3));
        // Every evaluated level below k* failed, and k* succeeded.
        for (&k, &ok) in &result.evaluations {
            assert_eq!(ok, k >= 3);
        }
    }

    #[test]
    fn search_reports_absent_when_all_fail() {
        let result = find_min_level(|_| false, 8, default_budget(8)).unwrap();
        assert_eq!(result.k_star, None);
        assert!(result.budget_used <= default_budget(8));
    }

    #[test]
    fn search_handles_single_level() {
        assert_eq!(find_min_level(|_| true, 1, 1).unwrap().k_star, Some(1));
        assert_eq!(find_min_level(|_| false, 1, 1).unwrap().k_star, None);
    }

    #[test]
    fn search_rejects_zero_budget() {
        assert!(find_min_level(|_| true, 4, 0).is_err());
    }

    #[test]
    fn search_matches_linear_scan_on_random_monotone_profiles() {
        use rand::Rng;
        let mut rng = derive_rng(3, "profiles", &[]);
        for _ in 0..200 {
            let max_level = rng.gen_range(1..=64);
            // Threshold beyond max_level means "all fail".
            let first_true = rng.gen_range(1..=max_level + 1);
            let oracle = |k: usize| k >= first_true;
            let budget = default_budget(max_level);
            let result = find_min_level(oracle, max_level, budget).unwrap();
            let linear = (1..=max_level).find(|&k| oracle(k));
            assert_eq!(result.k_star, linear);
            assert!(result.budget_used <= budget);
        }
    }

    #[test]
    fn search_exhausts_budget_without_bracketing() {
        // Budget of 1 cannot bracket over 64 levels.
        let result = find_min_level(|k| k >= 40, 64, 1).unwrap();
        assert_eq!(result.k_star, None);
        assert_eq!(result.budget_used, 1);
    }

    #[test]
    fn reverify_reports_disagreement() {
        // Stochastic oracle: first probe of any level succeeds, repeats fail.
        let mut seen = std::collections::BTreeSet::new();
        let result = find_min_level_opts(|k| seen.insert(k), 4, default_budget(4), true).unwrap();
        assert!(result.k_star.is_some());
        assert_eq!(result.reverified_agreed, Some(false));
    }

    #[test]
    fn fallback_trigger_cases() {
        assert!(fallback_trigger(&[0, 0, 0, 0], 0.5f64).unwrap());
        assert!(!fallback_trigger(&[0, 1, 0], 0.5f64).unwrap());
        assert!(!fallback_trigger(&[1, 1, 1], 0.5f64).unwrap());
        assert!(fallback_trigger::<f64>(&[], 0.5).is_err());
    }
}
