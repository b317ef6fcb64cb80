//! Guidance-conditioned tabular softmax policy.
//!
//! One logit table serves both modes: the unguided distribution at step `t`
//! is `softmax(θ[t])`, and conditioning on a guidance context adds a fixed
//! bonus `γ` to the recommended action's logit before the softmax. `γ` is a
//! hyperparameter, never a gradient target, so internalization can only
//! happen through the shared `θ`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-step action recommendations: the first `k` steps of a reference plan.
/// An empty context is the unguided mode.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GuidanceContext {
    recommended: Vec<usize>,
}

impl GuidanceContext {
    pub fn none() -> Self {
        GuidanceContext { recommended: Vec::new() }
    }

    pub fn from_prefix(prefix: Vec<usize>) -> Self {
        GuidanceContext { recommended: prefix }
    }

    /// The recommended action at step `t`, when the prefix covers it.
    pub fn recommended_at(&self, t: usize) -> Option<usize> {
        self.recommended.get(t).copied()
    }

    pub fn len(&self) -> usize {
        self.recommended.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recommended.is_empty()
    }
}

/// Tabular policy parameters: a `T x A` logit table plus the fixed guidance
/// conditioning strength.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<R: Scalar> {
    logits: Vec<Vec<R>>,
    guidance_strength: R,
}

/// Checkpoint document; `theta` is row-major `T x A`.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    env_hash: String,
    guidance_strength: f64,
    step_count: u64,
    horizon: usize,
    alphabet_size: usize,
    theta: Vec<f64>,
}

impl<R: Scalar> PolicyParams<R> {
    /// All-zero logits (uniform policy at every step).
    pub fn uniform(horizon: usize, alphabet_size: usize, guidance_strength: R) -> Result<Self> {
        Self::new(vec![vec![R::zero(); alphabet_size]; horizon], guidance_strength)
    }

    pub fn new(logits: Vec<Vec<R>>, guidance_strength: R) -> Result<Self> {
        if logits.is_empty() || logits[0].is_empty() {
            return Err(Error::InvalidArgument("empty logit table".into()));
        }
        let a = logits[0].len();
        for (t, row) in logits.iter().enumerate() {
            if row.len() != a {
                return Err(Error::InvalidArgument(format!("ragged logit row at step {t}")));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("logit row at step {t}")));
            }
        }
        if !guidance_strength.is_finite() || guidance_strength < R::zero() {
            return Err(Error::InvalidArgument(
                "guidance strength must be finite and non-negative".into(),
            ));
        }
        Ok(PolicyParams { logits, guidance_strength })
    }

    pub fn horizon(&self) -> usize {
        self.logits.len()
    }

    pub fn alphabet_size(&self) -> usize {
        self.logits[0].len()
    }

    pub fn guidance_strength(&self) -> R {
        self.guidance_strength
    }

    pub fn logit_table(&self) -> &[Vec<R>] {
        &self.logits
    }

    /// In-place additive update `θ += scale * delta`; errors on non-finite
    /// results so corruption never propagates silently.
    pub fn apply_update(&mut self, delta: &[Vec<R>], scale: R) -> Result<()> {
        if delta.len() != self.horizon() {
            return Err(Error::InvalidArgument("update shape mismatch".into()));
        }
        for (row, drow) in self.logits.iter_mut().zip(delta) {
            if drow.len() != row.len() {
                return Err(Error::InvalidArgument("update shape mismatch".into()));
            }
            for (x, d) in row.iter_mut().zip(drow) {
                *x = *x + scale * *d;
                if !x.is_finite() {
                    return Err(Error::NonFinite("parameter update produced a non-finite logit".into()));
                }
            }
        }
        Ok(())
    }

    /// Logits at step `t` with an optional recommended action: `θ[t]` plus
    /// `γ` on the recommended entry.
    pub fn logits_at(&self, t: usize, recommended: Option<usize>) -> Vec<R> {
        let mut row = self.logits[t].clone();
        if let Some(r) = recommended {
            row[r] = row[r] + self.guidance_strength;
        }
        row
    }

    pub fn logits_in(&self, t: usize, ctx: &GuidanceContext) -> Vec<R> {
        self.logits_at(t, ctx.recommended_at(t))
    }

    /// Log-softmax of the (possibly guided) step logits.
    pub fn log_probs_at(&self, t: usize, recommended: Option<usize>) -> Vec<R> {
        log_softmax(&self.logits_at(t, recommended))
    }

    pub fn log_prob(&self, t: usize, action: usize, ctx: &GuidanceContext) -> R {
        self.log_probs_at(t, ctx.recommended_at(t))[action]
    }

    pub fn probs_at(&self, t: usize, recommended: Option<usize>) -> Vec<R> {
        self.log_probs_at(t, recommended).iter().map(|lp| lp.exp()).collect()
    }

    /// The full per-step action distributions under a fixed context; this is
    /// the policy representation the environment DP oracles consume.
    pub fn step_distributions(&self, ctx: &GuidanceContext) -> Vec<Vec<R>> {
        (0..self.horizon()).map(|t| self.probs_at(t, ctx.recommended_at(t))).collect()
    }

    /// Categorical draw from the (possibly guided) step distribution.
    pub fn sample_action<G: Rng>(&self, t: usize, ctx: &GuidanceContext, rng: &mut G) -> usize {
        let probs = self.probs_at(t, ctx.recommended_at(t));
        let u = R::from_f64_lossy(rng.gen::<f64>());
        let mut acc = R::zero();
        for (a, p) in probs.iter().enumerate() {
            acc = acc + *p;
            if u < acc {
                return a;
            }
        }
        probs.len() - 1
    }

    /// `∂ log π(action | t, ctx) / ∂ θ[t, ·] = 1[a = action] − π(a)`.
    /// Rows other than `t` have zero gradient; `γ` is not a target.
    pub fn grad_log_prob(&self, t: usize, action: usize, ctx: &GuidanceContext) -> Vec<R> {
        let probs = self.probs_at(t, ctx.recommended_at(t));
        probs
            .iter()
            .enumerate()
            .map(|(a, p)| if a == action { R::one() - *p } else { -*p })
            .collect()
    }

    /// Exact categorical KL between two parameter sets' step distributions
    /// under a shared context.
    pub fn kl_at_step(&self, other: &PolicyParams<R>, t: usize, ctx: &GuidanceContext) -> R {
        let rec = ctx.recommended_at(t);
        kl_categorical(&self.log_probs_at(t, rec), &other.log_probs_at(t, rec))
    }

    /// Entropy of the step distribution.
    pub fn entropy_at_step(&self, t: usize, ctx: &GuidanceContext) -> R {
        let lp = self.log_probs_at(t, ctx.recommended_at(t));
        -lp.iter().map(|l| l.exp() * *l).sum::<R>()
    }

    /// Versioned JSON checkpoint, θ row-major at double precision.
    pub fn to_checkpoint_json(&self, env_hash: &str, step_count: u64) -> String {
        let doc = Checkpoint {
            version: 1,
            env_hash: env_hash.to_string(),
            guidance_strength: self.guidance_strength.to_f64_lossy(),
            step_count,
            horizon: self.horizon(),
            alphabet_size: self.alphabet_size(),
            theta: self.logits.iter().flatten().map(|x| x.to_f64_lossy()).collect(),
        };
        serde_json::to_string(&doc).expect("checkpoint serialization")
    }

    /// Parses a checkpoint; returns the params plus (env_hash, step_count).
    pub fn from_checkpoint_json(text: &str) -> Result<(Self, String, u64)> {
        let doc: Checkpoint = serde_json::from_str(text)?;
        if doc.theta.len() != doc.horizon * doc.alphabet_size {
            return Err(Error::Serialization("checkpoint theta length mismatch".into()));
        }
        let logits = doc
            .theta
            .chunks(doc.alphabet_size)
            .map(|row| row.iter().map(|&x| R::from_f64_lossy(x)).collect())
            .collect();
        let params = PolicyParams::new(logits, R::from_f64_lossy(doc.guidance_strength))?;
        Ok((params, doc.env_hash, doc.step_count))
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax<R: Scalar>(logits: &[R]) -> Vec<R> {
    let max = logits.iter().cloned().fold(R::neg_infinity(), R::max);
    let sum_exp: R = logits.iter().map(|&x| (x - max).exp()).sum();
    let log_z = max + sum_exp.ln();
    logits.iter().map(|&x| x - log_z).collect()
}

/// Exact categorical KL from log-probability vectors: `Σ p (log p − log q)`.
pub fn kl_categorical<R: Scalar>(log_p: &[R], log_q: &[R]) -> R {
    log_p.iter().zip(log_q).map(|(&lp, &lq)| lp.exp() * (lp - lq)).sum()
}
