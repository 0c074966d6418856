//! Group-relative advantages and the KL-regularized policy-gradient step.

use crate::error::{Error, Result};
use crate::policy::{Gradient, PolicyTable, Rollout};
use crate::rewards::{self, RewardSpec};
use crate::tasks::{self, TaskPrompt};

pub const DEFAULT_STD_GUARD: f64 = 1e-8;

/// Standardizes rewards within a group: `(r - mean) / std`, population std.
///
/// Returns all zeros when the std is at or below `std_guard`.
pub fn group_advantages(shaped: &[f64], std_guard: f64) -> Result<Vec<f64>> {
    if shaped.len() < 2 {
        return Err(Error::invalid(format!(
            "group needs at least 2 rewards, got {}",
            shaped.len()
        )));
    }
    if !(std_guard > 0.0) {
        return Err(Error::invalid("std_guard must be positive"));
    }
    let (mean, std) = mean_std(shaped);
    if std <= std_guard {
        return Ok(vec![0.0; shaped.len()]);
    }
    Ok(shaped.iter().map(|r| (r - mean) / std).collect())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// G rollouts for one task with their scores.
#[derive(Debug, Clone)]
pub struct Group {
    pub task: TaskPrompt,
    pub rollouts: Vec<Rollout>,
    pub correct: Vec<bool>,
    pub confidence: Vec<f64>,
    pub shaped: Vec<f64>,
    pub advantages: Vec<f64>,
    pub degenerate: bool,
}

impl Group {
    /// Verifies, scores and normalizes a set of rollouts for `task`.
    pub fn build(
        task: TaskPrompt,
        rollouts: Vec<Rollout>,
        spec: RewardSpec,
        std_guard: f64,
    ) -> Result<Self> {
        let correct: Vec<bool> = rollouts.iter().map(|r| tasks::verify(&task, r)).collect();
        let confidence = rollouts
            .iter()
            .map(rewards::confidence)
            .collect::<Result<Vec<_>>>()?;
        Self::from_scores(task, rollouts, correct, confidence, spec, std_guard)
    }

    /// Rescores the same rollouts under another reward spec.
    pub fn rescore(&self, spec: RewardSpec, std_guard: f64) -> Result<Self> {
        Self::from_scores(
            self.task,
            self.rollouts.clone(),
            self.correct.clone(),
            self.confidence.clone(),
            spec,
            std_guard,
        )
    }

    fn from_scores(
        task: TaskPrompt,
        rollouts: Vec<Rollout>,
        correct: Vec<bool>,
        confidence: Vec<f64>,
        spec: RewardSpec,
        std_guard: f64,
    ) -> Result<Self> {
        let shaped = correct
            .iter()
            .zip(&confidence)
            .map(|(&c, &s)| rewards::shape_reward(spec, c, s))
            .collect::<Result<Vec<_>>>()?;
        let advantages = group_advantages(&shaped, std_guard)?;
        let degenerate = mean_std(&shaped).1 <= std_guard;
        Ok(Self {
            task,
            rollouts,
            correct,
            confidence,
            shaped,
            advantages,
            degenerate,
        })
    }

    pub fn size(&self) -> usize {
        self.rollouts.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub group_size: usize,
    pub batch_tasks: usize,
    pub learning_rate: f64,
    pub kl_coeff: f64,
    pub reward_spec: RewardSpec,
    pub max_len: usize,
    pub steps: usize,
    pub seed: u64,
    pub std_guard: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 7,
            batch_tasks: 16,
            learning_rate: 20.0,
            kl_coeff: 0.005,
            reward_spec: RewardSpec::ConfClip {
                epsilon: rewards::DEFAULT_EPSILON,
            },
            max_len: 6,
            steps: 300,
            seed: 0,
            std_guard: DEFAULT_STD_GUARD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.group_size < 2 {
            return fail(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.batch_tasks < 1 {
            return fail("batch_tasks must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return fail(format!("kl_coeff must be finite and >= 0, got {}", self.kl_coeff));
        }
        if self.max_len < 1 {
            return fail("max_len must be >= 1".into());
        }
        if !(self.std_guard > 0.0) {
            return fail(format!("std_guard must be positive, got {}", self.std_guard));
        }
        self.reward_spec
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub mean_advantage: f64,
    pub degenerate_groups: usize,
}

/// Builds the ascent direction of
/// `(1/N) sum_i A_i log pi(y_i | x) - beta * (1/N) sum_i KL_i`,
/// where `N` counts every rollout and `KL_i` is the exact KL to the reference
/// summed over the contexts rollout `i` visited.
pub fn policy_gradient(
    policy: &PolicyTable,
    reference: &PolicyTable,
    groups: &[Group],
    kl_coeff: f64,
) -> Result<Gradient> {
    let n: usize = groups.iter().map(Group::size).sum();
    if n == 0 {
        return Err(Error::invalid("no rollouts to learn from"));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Gradient::new();
    for group in groups {
        for (rollout, &adv) in group.rollouts.iter().zip(&group.advantages) {
            if adv != 0.0 {
                policy.accumulate_grad_logprob(&group.task, &rollout.tokens, adv * inv_n, &mut grad)?;
            }
            if kl_coeff > 0.0 {
                policy.accumulate_grad_kl(
                    reference,
                    &group.task,
                    &rollout.tokens,
                    -kl_coeff * inv_n,
                    &mut grad,
                )?;
            }
        }
    }
    Ok(grad)
}

/// One plain gradient-ascent update from a batch of on-policy groups.
pub fn policy_gradient_step(
    policy: &mut PolicyTable,
    reference: &PolicyTable,
    groups: &[Group],
    config: &TrainConfig,
) -> Result<StepStats> {
    if groups.is_empty() {
        return Err(Error::invalid("policy_gradient_step needs at least one group"));
    }
    let version = policy.version();
    if let Some(stale) = groups
        .iter()
        .flat_map(|g| &g.rollouts)
        .find(|r| r.policy_version != version)
    {
        return Err(Error::invalid(format!(
            "off-policy rollout: generated by version {}, policy is at {version}",
            stale.policy_version
        )));
    }
    let grad = policy_gradient(policy, reference, groups, config.kl_coeff)?;
    if !grad.is_finite() {
        return Err(Error::NonFinite {
            step: version as usize,
            detail: "policy gradient contains NaN or infinity".into(),
        });
    }
    let n: usize = groups.iter().map(Group::size).sum();
    let mean_advantage =
        groups.iter().flat_map(|g| &g.advantages).sum::<f64>() / n as f64;
    let stats = StepStats {
        grad_norm: grad.norm(),
        mean_advantage,
        degenerate_groups: groups.iter().filter(|g| g.degenerate).count(),
    };
    policy.apply_update(&grad, config.learning_rate);
    Ok(stats)
}

/// Fraction of groups whose rewards carried no spread.
pub fn degenerate_fraction(groups: &[Group]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::invalid("degenerate_fraction of an empty batch"));
    }
    Ok(groups.iter().filter(|g| g.degenerate).count() as f64 / groups.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Vocab;
    use crate::tasks::{Op, Tier};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn advantage_examples() {
        let expected = [1.7321, -0.5774, -0.5774, -0.5774];
        let a = group_advantages(&[1.0, 0.0, 0.0, 0.0], 1e-8).unwrap();
        assert!(close(&a, &expected, 1e-4));
        assert_eq!(group_advantages(&[1.0; 4], 1e-8).unwrap(), vec![0.0; 4]);
        let b = group_advantages(&[-0.1, -0.9, -0.9, -0.9], 1e-8).unwrap();
        assert!(close(&b, &expected, 1e-4));
        assert!(b[0] > 0.0);
    }

    #[test]
    fn advantage_errors() {
        assert!(group_advantages(&[1.0], 1e-8).is_err());
        assert!(group_advantages(&[1.0, 0.0], 0.0).is_err());
    }

    fn rollout(tokens: Vec<u16>, policy: &PolicyTable, task: &TaskPrompt) -> Rollout {
        let mut lps = Vec::new();
        for i in 0..tokens.len() {
            let ctx = policy.context(task, &tokens[..i]);
            lps.push(policy.log_probs(&ctx)[usize::from(tokens[i])]);
        }
        Rollout {
            terminated: tokens.last() == Some(&policy.vocab().eos()),
            tokens,
            token_logprobs: lps,
            eos: policy.vocab().eos(),
            policy_version: policy.version(),
        }
    }

    fn setup() -> (PolicyTable, TaskPrompt) {
        let policy = PolicyTable::new(Vocab::with_trailing_eos(4).unwrap(), 2, 0.0).unwrap();
        let task = TaskPrompt::new(0, 1, 1, Op::Add, 3, Tier::Easy).unwrap();
        (policy, task)
    }

    #[test]
    fn degenerate_groups_leave_parameters_untouched() {
        let (mut policy, task) = setup();
        let reference = policy.clone();
        let rollouts = vec![rollout(vec![2, 3], &policy, &task); 4];
        let g = Group::build(task, rollouts, RewardSpec::Binary01, 1e-8).unwrap();
        assert!(g.degenerate);
        let before = policy.clone();
        let cfg = TrainConfig::default();
        let stats = policy_gradient_step(&mut policy, &reference, &[g], &cfg).unwrap();
        assert_eq!(stats.degenerate_groups, 1);
        assert_eq!(stats.grad_norm, 0.0);
        for (ctx, row) in policy.stored_rows() {
            assert_eq!(row, before.logits(ctx).as_slice());
        }
    }

    #[test]
    fn positive_advantage_raises_logprob() {
        let (mut policy, task) = setup();
        let reference = policy.clone();
        let good = rollout(vec![2, 3], &policy, &task);
        let bad = rollout(vec![0, 3], &policy, &task);
        let g = Group::build(task, vec![good.clone(), bad], RewardSpec::Binary01, 1e-8).unwrap();
        assert!(g.advantages[0] > 0.0);
        let cfg = TrainConfig {
            kl_coeff: 0.0,
            learning_rate: 0.5,
            ..TrainConfig::default()
        };
        let before = policy.sequence_logprob(&task, &good.tokens).unwrap();
        policy_gradient_step(&mut policy, &reference, &[g], &cfg).unwrap();
        assert!(policy.sequence_logprob(&task, &good.tokens).unwrap() > before);
    }

    #[test]
    fn stale_rollouts_are_rejected() {
        let (mut policy, task) = setup();
        let reference = policy.clone();
        let rs = vec![rollout(vec![2, 3], &policy, &task), rollout(vec![1, 3], &policy, &task)];
        let g = Group::build(task, rs, RewardSpec::Binary01, 1e-8).unwrap();
        policy.apply_update(&Gradient::new(), 1.0);
        let err = policy_gradient_step(&mut policy, &reference, &[g], &TrainConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn degenerate_fraction_examples() {
        let (policy, task) = setup();
        let same = vec![rollout(vec![2, 3], &policy, &task); 4];
        let mixed = vec![
            rollout(vec![2, 3], &policy, &task),
            rollout(vec![1, 3], &policy, &task),
        ];
        let all = Group::build(task, same, RewardSpec::Binary01, 1e-8).unwrap();
        let some = Group::build(task, mixed, RewardSpec::Binary01, 1e-8).unwrap();
        assert_eq!(degenerate_fraction(&[all.clone(), all.clone()]).unwrap(), 1.0);
        assert_eq!(degenerate_fraction(&[some.clone(), some.clone()]).unwrap(), 0.0);
        assert_eq!(degenerate_fraction(&[all, some]).unwrap(), 0.5);
        assert!(degenerate_fraction(&[]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            group_size: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
