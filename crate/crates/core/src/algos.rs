//! Loss functions and advantage estimators.
//!
//! Differentiable losses are built on a [`Tape`] from scalar log-probability
//! nodes (one per generated token) so that the same code serves training and
//! finite-difference checks. Advantages and targets are plain numbers and are
//! never differentiated through.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor, Var, LOG_FLOOR};

#[derive(Debug, Error)]
pub enum AlgoError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

type Result<T> = std::result::Result<T, AlgoError>;

/// Which way the per-token KL penalty is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `D(pi_old || pi_theta)`, expectation under the frozen policy.
    OldNew,
    /// `D(pi_theta || pi_old)`.
    NewOld,
}

impl KlDirection {
    pub fn name(self) -> &'static str {
        match self {
            KlDirection::OldNew => "old_new",
            KlDirection::NewOld => "new_old",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "old_new" => Some(KlDirection::OldNew),
            "new_old" => Some(KlDirection::NewOld),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub kl_beta: f64,
    pub value_coef: f64,
    /// Thought-span weight of the mixed log-probability.
    pub thought_lambda: f64,
    pub loo_k: usize,
    pub normalize_advantages: bool,
    pub kl_direction: KlDirection,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            kl_beta: 0.05,
            value_coef: 0.15,
            thought_lambda: 0.3,
            loo_k: 4,
            normalize_advantages: true,
            kl_direction: KlDirection::OldNew,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AlgoError::Config(m.to_string()));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.thought_lambda) {
            return bad("thought_lambda must lie in [0, 1]");
        }
        if self.loo_k < 2 {
            return bad("loo_k must be >= 2");
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return bad("kl_beta must be >= 0");
        }
        if !(self.value_coef >= 0.0 && self.value_coef.is_finite()) {
            return bad("value_coef must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    pub advantages: Vec<f64>,
    pub targets: Vec<f64>,
}

/// Generalized advantage estimation over one contiguous segment.
///
/// `bootstrap_value` is V(s_T) for a segment cut before a terminal step; it
/// is ignored when the last step is terminal.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<AdvantageSet> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(AlgoError::Shape(format!(
            "compute_gae: rewards {n}, values {}, dones {}",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok(AdvantageSet {
        advantages: adv,
        targets,
    })
}

/// `(A - mean) / (std + 1e-8)` with population std.
pub fn normalize_advantages(adv: &[f64]) -> Result<Vec<f64>> {
    if adv.len() < 2 {
        return Err(AlgoError::Shape("normalize_advantages needs at least 2 entries".into()));
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    Ok(adv.iter().map(|a| (a - mean) / denom).collect())
}

/// `A * clip(r)` with the clip side chosen by the sign of `A`; equal to
/// `min(r A, clip(r, 1-eps, 1+eps) A)` including its gradient.
pub fn clipped_objective(tape: &mut Tape, ratio: Var, advantage: f64, eps: f64) -> Var {
    let clipped = if advantage >= 0.0 {
        tape.clip(ratio, f64::NEG_INFINITY, 1.0 + eps)
    } else {
        tape.clip(ratio, 1.0 - eps, f64::INFINITY)
    };
    tape.scale(clipped, advantage)
}

/// `exp(logp_new - logp_old)` as a tape node.
pub fn ratio(tape: &mut Tape, logp_new: Var, logp_old: f64) -> Var {
    let d = tape.add_scalar(logp_new, -logp_old);
    tape.exp(d)
}

/// Token-level clipped surrogate, negated: per step, the mean over its tokens;
/// then the mean over steps.
pub fn vldac_policy_loss(
    tape: &mut Tape,
    logp_new: &[Vec<Var>],
    logp_old: &[Vec<f64>],
    advantages: &[f64],
    eps: f64,
) -> Result<Var> {
    check_steps("vldac_policy_loss", logp_new.len(), logp_old.len(), advantages.len())?;
    let mut per_step = Vec::with_capacity(logp_new.len());
    for ((new, old), &a) in logp_new.iter().zip(logp_old).zip(advantages) {
        if new.is_empty() || new.len() != old.len() {
            return Err(AlgoError::Shape(format!(
                "vldac_policy_loss: token group of {} new vs {} old",
                new.len(),
                old.len()
            )));
        }
        let mut terms = Vec::with_capacity(new.len());
        for (&lp, &lo) in new.iter().zip(old) {
            let r = ratio(tape, lp, lo);
            terms.push(clipped_objective(tape, r, a, eps));
        }
        let s = tape.add_all(&terms)?;
        per_step.push(tape.scale(s, 1.0 / new.len() as f64));
    }
    let total = tape.add_all(&per_step)?;
    Ok(tape.scale(total, -1.0 / per_step.len() as f64))
}

/// Mean over steps of `0.5 (V - target)^2`.
pub fn value_loss(tape: &mut Tape, values: &[Var], targets: &[f64]) -> Result<Var> {
    if values.len() != targets.len() || values.is_empty() {
        return Err(AlgoError::Shape(format!(
            "value_loss: {} values vs {} targets",
            values.len(),
            targets.len()
        )));
    }
    let mut terms = Vec::with_capacity(values.len());
    for (&v, &t) in values.iter().zip(targets) {
        let d = tape.add_scalar(v, -t);
        let sq = tape.mul(d, d)?;
        terms.push(tape.sum(sq));
    }
    let s = tape.add_all(&terms)?;
    Ok(tape.scale(s, 0.5 / values.len() as f64))
}

/// Mean over token positions of the KL between the frozen and live
/// next-token distributions. `new_probs` are `[1, V]` probability nodes.
pub fn kl_penalty(tape: &mut Tape, new_probs: &[Var], old_dists: &[Vec<f64>], direction: KlDirection) -> Result<Var> {
    if new_probs.len() != old_dists.len() || new_probs.is_empty() {
        return Err(AlgoError::Shape(format!(
            "kl_penalty: {} positions vs {} frozen distributions",
            new_probs.len(),
            old_dists.len()
        )));
    }
    let mut terms = Vec::with_capacity(new_probs.len());
    for (&q, p) in new_probs.iter().zip(old_dists) {
        let shape = tape.shape(q).to_vec();
        if tape.value(q).len() != p.len() {
            return Err(AlgoError::Shape(format!(
                "kl_penalty: distribution length {} vs {}",
                tape.value(q).len(),
                p.len()
            )));
        }
        let log_q = tape.log(q);
        let term = match direction {
            KlDirection::OldNew => {
                // sum p log p - sum p log q
                let entropy_part: f64 = p.iter().map(|&x| if x > 0.0 { x * x.max(LOG_FLOOR).ln() } else { 0.0 }).sum();
                let pc = tape.constant(shape, p.clone())?;
                let cross = tape.mul(pc, log_q)?;
                let cross = tape.sum(cross);
                let neg = tape.scale(cross, -1.0);
                tape.add_scalar(neg, entropy_part)
            }
            KlDirection::NewOld => {
                let log_p: Vec<f64> = p.iter().map(|&x| -x.max(LOG_FLOOR).ln()).collect();
                let lp = tape.constant(shape, log_p)?;
                let diff = tape.add(log_q, lp)?;
                let prod = tape.mul(q, diff)?;
                tape.sum(prod)
            }
        };
        terms.push(term);
    }
    let s = tape.add_all(&terms)?;
    Ok(tape.scale(s, 1.0 / new_probs.len() as f64))
}

/// Plain-number KL for reporting and tests.
pub fn kl_value(p_old: &[f64], q_new: &[f64], direction: KlDirection) -> f64 {
    let (a, b) = match direction {
        KlDirection::OldNew => (p_old, q_new),
        KlDirection::NewOld => (q_new, p_old),
    };
    a.iter()
        .zip(b)
        .map(|(&x, &y)| if x > 0.0 { x * (x.max(LOG_FLOOR).ln() - y.max(LOG_FLOOR).ln()) } else { 0.0 })
        .sum()
}

/// `L_policy + beta KL + alpha L_value`; absent terms contribute nothing.
pub fn total_loss(tape: &mut Tape, policy: Var, kl: Option<Var>, value: Option<Var>, alpha: f64, beta: f64) -> Result<Var> {
    let mut acc = policy;
    if let Some(k) = kl {
        let k = tape.scale(k, beta);
        acc = tape.add(acc, k)?;
    }
    if let Some(v) = value {
        let v = tape.scale(v, alpha);
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// `lambda * sum(thought) + sum(action)` as a tape node.
pub fn rl4vlm_mixed_logprob(tape: &mut Tape, thought: &[Var], action: &[Var], lambda: f64) -> Result<Var> {
    let mut terms = Vec::with_capacity(thought.len() + action.len());
    for &t in thought {
        terms.push(tape.scale(t, lambda));
    }
    terms.extend_from_slice(action);
    if terms.is_empty() {
        return Err(AlgoError::Shape("rl4vlm_mixed_logprob: no tokens".into()));
    }
    Ok(tape.add_all(&terms)?)
}

/// Plain-number form of [`rl4vlm_mixed_logprob`].
pub fn mixed_logprob(logp_thought: f64, logp_action: f64, lambda: f64) -> f64 {
    lambda * logp_thought + logp_action
}

/// Step-level clipped surrogate on mixed log-probabilities, negated and
/// averaged over steps.
pub fn rl4vlm_policy_loss(tape: &mut Tape, mixed_new: &[Var], mixed_old: &[f64], advantages: &[f64], eps: f64) -> Result<Var> {
    check_steps("rl4vlm_policy_loss", mixed_new.len(), mixed_old.len(), advantages.len())?;
    let mut terms = Vec::with_capacity(mixed_new.len());
    for ((&lp, &lo), &a) in mixed_new.iter().zip(mixed_old).zip(advantages) {
        let r = ratio(tape, lp, lo);
        terms.push(clipped_objective(tape, r, a, eps));
    }
    let s = tape.add_all(&terms)?;
    Ok(tape.scale(s, -1.0 / terms.len() as f64))
}

/// Leave-one-out advantages `K/(K-1) (R_i - mean R)`.
pub fn loo_advantages(returns: &[f64]) -> Result<Vec<f64>> {
    let k = returns.len();
    if k < 2 {
        return Err(AlgoError::Config(format!("leave-one-out needs K >= 2, got {k}")));
    }
    let kf = k as f64;
    let mean = returns.iter().sum::<f64>() / kf;
    let mut adv: Vec<f64> = returns.iter().map(|r| kf / (kf - 1.0) * (r - mean)).collect();
    // The last entry absorbs rounding so the group sums to exactly zero.
    let rest: f64 = adv[..k - 1].iter().sum();
    adv[k - 1] = -rest;
    Ok(adv)
}

/// One-step TD targets `r + gamma V_target(s') (1 - done)`.
pub fn td0_targets(rewards: &[f64], next_values: &[f64], dones: &[bool], gamma: f64) -> Result<Vec<f64>> {
    if rewards.len() != next_values.len() || rewards.len() != dones.len() {
        return Err(AlgoError::Shape(format!(
            "td0_targets: rewards {}, next values {}, dones {}",
            rewards.len(),
            next_values.len(),
            dones.len()
        )));
    }
    Ok(rewards
        .iter()
        .zip(next_values)
        .zip(dones)
        .map(|((r, v), &d)| if d { *r } else { r + gamma * v })
        .collect())
}

/// `target <- (1 - tau) target + tau live`, elementwise.
pub fn polyak_update(target: &mut [Tensor], live: &[&Tensor], tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(AlgoError::Config(format!("tau must lie in (0, 1], got {tau}")));
    }
    if target.len() != live.len() {
        return Err(AlgoError::Shape(format!("polyak_update: {} vs {} tensors", target.len(), live.len())));
    }
    for (t, l) in target.iter_mut().zip(live) {
        if t.shape() != l.shape() {
            return Err(AlgoError::Shape(format!(
                "polyak_update: {:?} vs {:?}",
                t.shape(),
                l.shape()
            )));
        }
        for (x, &y) in t.data_mut().iter_mut().zip(l.data()) {
            *x = if tau == 1.0 { y } else { (1.0 - tau) * *x + tau * y };
        }
    }
    Ok(())
}

fn check_steps(op: &str, a: usize, b: usize, c: usize) -> Result<()> {
    if a == 0 || a != b || a != c {
        return Err(AlgoError::Shape(format!("{op}: {a} new, {b} old, {c} advantages")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalars(tape: &mut Tape, xs: &[f64]) -> Vec<Var> {
        xs.iter()
            .map(|&x| {
                let t = Tensor::scalar(x).with_grad();
                tape.leaf(&t)
            })
            .collect()
    }

    #[test]
    fn gae_examples() {
        let a = compute_gae(&[1.0], &[0.0], &[true], 0.0, 0.99, 0.95).unwrap();
        assert_eq!(a.advantages, vec![1.0]);
        assert_eq!(a.targets, vec![1.0]);
        let a = compute_gae(&[0.0, 0.0, 1.0], &[0.0; 3], &[false, false, true], 0.0, 1.0, 1.0).unwrap();
        assert_eq!(a.advantages, vec![1.0, 1.0, 1.0]);
        let a = compute_gae(&[0.0, 1.0], &[0.5, 0.2], &[false, true], 0.0, 0.99, 0.95).unwrap();
        assert!((a.advantages[0] - 0.4504).abs() < 5e-5);
        assert!((a.advantages[1] - 0.8).abs() < 1e-12);
        assert!((a.targets[0] - 0.9504).abs() < 5e-5);
        assert!((a.targets[1] - 1.0).abs() < 1e-12);
        assert!(compute_gae(&[0.0], &[0.0, 1.0], &[true], 0.0, 0.9, 0.9).is_err());
    }

    #[test]
    fn gae_bootstraps_truncated_tail() {
        let a = compute_gae(&[0.0], &[0.0], &[false], 2.0, 0.5, 1.0).unwrap();
        assert_eq!(a.advantages, vec![1.0]);
    }

    #[test]
    fn policy_loss_examples() {
        let mut tape = Tape::new();
        let lp = scalars(&mut tape, &[1.5f64.ln()]);
        let l = vldac_policy_loss(&mut tape, &[lp], &[vec![0.0]], &[1.0], 0.2).unwrap();
        assert!((tape.scalar_value(l) + 1.2).abs() < 1e-12);

        let mut tape = Tape::new();
        let a = scalars(&mut tape, &[-0.3, -1.0]);
        let b = scalars(&mut tape, &[-2.0]);
        let l = vldac_policy_loss(&mut tape, &[a, b], &[vec![-0.3, -1.0], vec![-2.0]], &[0.5, 1.5], 0.2).unwrap();
        assert!((tape.scalar_value(l) + 1.0).abs() < 1e-12);

        let mut tape = Tape::new();
        assert!(vldac_policy_loss(&mut tape, &[vec![]], &[vec![]], &[1.0], 0.2).is_err());
    }

    #[test]
    fn zero_advantage_gives_zero_gradient() {
        let mut tape = Tape::new();
        let lp = scalars(&mut tape, &[-0.7, -0.1]);
        let l = vldac_policy_loss(&mut tape, &[lp.clone()], &[vec![-0.5, -0.5]], &[0.0], 0.2).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);
        tape.backward(l, None).unwrap();
        for v in lp {
            assert_eq!(tape.grad(v).unwrap(), &[0.0]);
        }
    }

    #[test]
    fn clip_dead_zone() {
        for (lp_new, adv) in [(0.5f64, 1.0), (-0.5, -1.0)] {
            let mut tape = Tape::new();
            let lp = scalars(&mut tape, &[lp_new]);
            let l = vldac_policy_loss(&mut tape, &[lp.clone()], &[vec![0.0]], &[adv], 0.2).unwrap();
            tape.backward(l, None).unwrap();
            assert_eq!(tape.grad(lp[0]).unwrap(), &[0.0]);
        }
        // inside the trust region the gradient is live
        let mut tape = Tape::new();
        let lp = scalars(&mut tape, &[0.05]);
        let l = vldac_policy_loss(&mut tape, &[lp.clone()], &[vec![0.0]], &[1.0], 0.2).unwrap();
        tape.backward(l, None).unwrap();
        assert!(tape.grad(lp[0]).unwrap()[0] < 0.0);
    }

    #[test]
    fn value_loss_examples() {
        let mut tape = Tape::new();
        let v = scalars(&mut tape, &[1.0]);
        let l = value_loss(&mut tape, &v, &[0.0]).unwrap();
        assert_eq!(tape.scalar_value(l), 0.5);
        let mut tape = Tape::new();
        let v = scalars(&mut tape, &[0.3, -0.2]);
        let l1 = value_loss(&mut tape, &v, &[0.1, 0.4]).unwrap();
        let v2 = scalars(&mut tape, &[0.5, -0.8]);
        let l2 = value_loss(&mut tape, &v2, &[0.1, 0.4]).unwrap();
        assert!((tape.scalar_value(l2) - 4.0 * tape.scalar_value(l1)).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let old = vec![0.75, 0.25];
        let mut tape = Tape::new();
        let q = tape.leaf(&Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap().with_grad());
        let k = kl_penalty(&mut tape, &[q], &[old.clone()], KlDirection::OldNew).unwrap();
        assert!((tape.scalar_value(k) - 0.1308).abs() < 5e-5);
        assert!((kl_value(&old, &[0.5, 0.5], KlDirection::OldNew) - tape.scalar_value(k)).abs() < 1e-15);

        let mut tape = Tape::new();
        let q = tape.leaf(&Tensor::new(vec![1, 2], old.clone()).unwrap().with_grad());
        let k = kl_penalty(&mut tape, &[q], &[old.clone()], KlDirection::NewOld).unwrap();
        assert!(tape.scalar_value(k).abs() < 1e-15);
    }

    #[test]
    fn total_loss_example() {
        let mut tape = Tape::new();
        let p = tape.scalar(1.0);
        let k = tape.scalar(2.0);
        let v = tape.scalar(3.0);
        let l = total_loss(&mut tape, p, Some(k), Some(v), 0.15, 0.05).unwrap();
        assert!((tape.scalar_value(l) - 1.55).abs() < 1e-12);
        let l0 = total_loss(&mut tape, p, Some(k), Some(v), 0.0, 0.0).unwrap();
        assert_eq!(tape.scalar_value(l0), 1.0);
    }

    #[test]
    fn mixed_logprob_examples() {
        assert!((mixed_logprob(-2.0, -1.0, 0.35) + 1.70).abs() < 1e-12);
        assert_eq!(mixed_logprob(-2.0, -1.0, 1.0), -3.0);
        assert_eq!(mixed_logprob(-2.0, -1.0, 0.0), -1.0);
        let mut tape = Tape::new();
        let t = scalars(&mut tape, &[-1.5, -0.5]);
        let a = scalars(&mut tape, &[-1.0]);
        let m = rl4vlm_mixed_logprob(&mut tape, &t, &a, 0.35).unwrap();
        assert!((tape.scalar_value(m) + 1.70).abs() < 1e-12);
    }

    #[test]
    fn loo_examples() {
        assert_eq!(loo_advantages(&[1.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        let a = loo_advantages(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-15);
        for x in &a[1..] {
            assert!((x + 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(a.iter().sum::<f64>(), 0.0);
        assert_eq!(loo_advantages(&[0.3; 4]).unwrap(), vec![0.0; 4]);
        assert!(matches!(loo_advantages(&[1.0]), Err(AlgoError::Config(_))));
    }

    #[test]
    fn td_examples() {
        let t = td0_targets(&[1.0, 0.0, 0.7], &[5.0, 0.5, 0.9], &[true, false, false], 0.99).unwrap();
        assert_eq!(t[0], 1.0);
        assert!((t[1] - 0.495).abs() < 1e-15);
        let t = td0_targets(&[0.7], &[0.9], &[false], 0.0).unwrap();
        assert_eq!(t[0], 0.7);
    }

    #[test]
    fn polyak_examples() {
        let mut tgt = vec![Tensor::zeros(vec![2])];
        let live = Tensor::new(vec![2], vec![2.0, 2.0]).unwrap();
        polyak_update(&mut tgt, &[&live], 0.5).unwrap();
        assert_eq!(tgt[0].data(), &[1.0, 1.0]);
        polyak_update(&mut tgt, &[&live], 1.0).unwrap();
        assert_eq!(tgt[0].data(), live.data());
        let bad = Tensor::zeros(vec![3]);
        assert!(polyak_update(&mut tgt, &[&bad], 0.5).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_advantages(&[2.0, 2.0, 2.0]).unwrap(), vec![0.0; 3]);
        let n = normalize_advantages(&[1.0, 5.0, -2.0, 0.5]).unwrap();
        let mean = n.iter().sum::<f64>() / 4.0;
        let std = (n.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
        assert!(n[1] > n[0] && n[0] > n[3] && n[3] > n[2]);
    }

    #[test]
    fn config_ranges() {
        let mut c = PpoConfig::default();
        assert!(c.validate().is_ok());
        c.clip_eps = 1.5;
        assert!(c.validate().is_err());
    }
}
