//! Brute-force ground truth for the Monte-Carlo machinery.
//!
//! Everything here recomputes softmax rows straight from the raw logits and
//! walks every generable response, so it shares no arithmetic with the
//! policy's sampling, log-prob or gradient code paths.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::policy::{ContextKey, Gradient, PolicyTable, Token, Vocab};
use crate::rewards::{self, RewardSpec};
use crate::tasks::{self, Op, TaskPrompt, Tier};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnumerationBudget {
    pub max_len: usize,
    pub max_paths: u64,
}

impl EnumerationBudget {
    pub fn new(max_len: usize, max_paths: u64) -> Self {
        Self { max_len, max_paths }
    }

    /// Refuses when `V^max_len` exceeds the cap.
    pub fn admit(&self, vocab: Vocab) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::invalid("enumeration max_len must be at least 1"));
        }
        let required = (vocab.size() as u128).saturating_pow(self.max_len as u32);
        if required > u128::from(self.max_paths) {
            return Err(Error::BudgetExceeded {
                required,
                cap: self.max_paths,
            });
        }
        Ok(())
    }
}

/// One complete response with its exact probability and score inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PathOutcome {
    pub tokens: Vec<Token>,
    pub prob: f64,
    pub correct: bool,
    pub confidence: f64,
    /// `(context, token)` pairs visited, in generation order.
    pub steps: Vec<(ContextKey, Token)>,
}

/// Plain softmax of a context's raw logit row.
pub fn softmax_row(policy: &PolicyTable, ctx: &ContextKey) -> Vec<f64> {
    let logits = policy.logits(ctx);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Every response of length `<= max_len`: EOS-terminated ones plus the
/// truncated ones of exactly `max_len` tokens.
pub fn enumerate_paths(
    policy: &PolicyTable,
    task: &TaskPrompt,
    budget: EnumerationBudget,
) -> Result<Vec<PathOutcome>> {
    let vocab = policy.vocab();
    budget.admit(vocab)?;
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut probs = Vec::new();
    dfs(policy, task, budget.max_len, &mut tokens, &mut probs, &mut out);
    Ok(out)
}

fn dfs(
    policy: &PolicyTable,
    task: &TaskPrompt,
    max_len: usize,
    tokens: &mut Vec<Token>,
    probs: &mut Vec<f64>,
    out: &mut Vec<PathOutcome>,
) {
    let eos = policy.vocab().eos();
    let ctx = ContextKey::new(task.key(), tokens, policy.context_order());
    let row = softmax_row(policy, &ctx);
    for (t, &p) in row.iter().enumerate() {
        let t = t as Token;
        tokens.push(t);
        probs.push(p);
        if t == eos || tokens.len() == max_len {
            let prob: f64 = probs.iter().product();
            let confidence = probs.iter().product::<f64>().powf(1.0 / probs.len() as f64);
            let steps = (0..tokens.len())
                .map(|i| {
                    (
                        ContextKey::new(task.key(), &tokens[..i], policy.context_order()),
                        tokens[i],
                    )
                })
                .collect();
            out.push(PathOutcome {
                tokens: tokens.clone(),
                prob,
                correct: t == eos && tasks::verify_tokens(task, tokens, eos),
                confidence,
                steps,
            });
        } else {
            dfs(policy, task, max_len, tokens, probs, out);
        }
        tokens.pop();
        probs.pop();
    }
}

pub fn path_mass(paths: &[PathOutcome]) -> f64 {
    paths.iter().map(|p| p.prob).sum()
}

/// Exact `E[shaped reward]` under the policy for one task.
pub fn brute_force_expected_reward(
    policy: &PolicyTable,
    task: &TaskPrompt,
    spec: RewardSpec,
    budget: EnumerationBudget,
) -> Result<f64> {
    expected_value_with(policy, task, budget, |correct, s| {
        rewards::shape_reward(spec, correct, s)
    })
}

/// Exact expectation of an arbitrary `(correct, confidence)` score.
pub fn expected_value_with(
    policy: &PolicyTable,
    task: &TaskPrompt,
    budget: EnumerationBudget,
    score: impl Fn(bool, f64) -> Result<f64>,
) -> Result<f64> {
    let paths = enumerate_paths(policy, task, budget)?;
    let mut total = 0.0;
    for path in &paths {
        if path.prob > 0.0 {
            total += path.prob * score(path.correct, path.confidence)?;
        }
    }
    Ok(total)
}

/// Exact gradient of [`brute_force_expected_reward`] with respect to the
/// logits.
///
/// The shaped reward depends on the logits through the confidence, so each
/// path contributes `p * (r + r'(s) * s / |y|) * grad log p`: the score
/// term plus the pathwise term through `s = p^(1/|y|)`.
pub fn exact_policy_gradient(
    policy: &PolicyTable,
    task: &TaskPrompt,
    spec: RewardSpec,
    budget: EnumerationBudget,
) -> Result<Gradient> {
    exact_gradient_with(policy, task, budget, |correct, s| {
        Ok((
            rewards::shape_reward(spec, correct, s)?,
            rewards::shape_reward_ds(spec, correct, s),
        ))
    })
}

/// Exact gradient for a score given as `(value, d value / d confidence)`.
pub fn exact_gradient_with(
    policy: &PolicyTable,
    task: &TaskPrompt,
    budget: EnumerationBudget,
    score: impl Fn(bool, f64) -> Result<(f64, f64)>,
) -> Result<Gradient> {
    let paths = enumerate_paths(policy, task, budget)?;
    let width = policy.vocab().size();
    let mut grad = Gradient::new();
    for path in &paths {
        if path.prob == 0.0 {
            continue;
        }
        let (value, dvalue) = score(path.correct, path.confidence)?;
        let len = path.tokens.len() as f64;
        let weight = path.prob * (value + dvalue * path.confidence / len);
        if weight == 0.0 {
            continue;
        }
        for (ctx, tok) in &path.steps {
            let row = softmax_row(policy, ctx);
            let g = grad.row_mut(ctx, width);
            for (b, p) in row.iter().enumerate() {
                let onehot = if b == usize::from(*tok) { 1.0 } else { 0.0 };
                g[b] += weight * (onehot - p);
            }
        }
    }
    Ok(grad)
}

/// Coordinates whose finite differences would straddle a clip kink: every
/// `(context, token)` on a path whose confidence lies within `margin` of
/// `1 - epsilon`.
pub fn clip_kink_coords(
    policy: &PolicyTable,
    task: &TaskPrompt,
    spec: RewardSpec,
    budget: EnumerationBudget,
    margin: f64,
) -> Result<BTreeSet<(ContextKey, Token)>> {
    let mut out = BTreeSet::new();
    let RewardSpec::ConfClip { epsilon } = spec else {
        return Ok(out);
    };
    let vocab = policy.vocab();
    for path in enumerate_paths(policy, task, budget)? {
        if (path.confidence - (1.0 - epsilon)).abs() < margin {
            for (ctx, _) in &path.steps {
                for b in vocab.tokens() {
                    out.insert((ctx.clone(), b));
                }
            }
        }
    }
    Ok(out)
}

/// Central differences `(f(theta + h e) - f(theta - h e)) / 2h`.
pub fn finite_diff_grad(
    f: impl Fn(&PolicyTable) -> f64,
    policy: &PolicyTable,
    coords: &[(ContextKey, Token)],
    h: f64,
) -> Result<Vec<f64>> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::invalid(format!("step size {h} outside [1e-7, 1e-3]")));
    }
    let mut work = policy.clone();
    Ok(coords
        .iter()
        .map(|(ctx, tok)| {
            let base = work.logit(ctx, *tok);
            work.set_logit(ctx, *tok, base + h);
            let plus = f(&work);
            work.set_logit(ctx, *tok, base - h);
            let minus = f(&work);
            work.set_logit(ctx, *tok, base);
            (plus - minus) / (2.0 * h)
        })
        .collect())
}

/// Greedy path correctness, decoded from raw softmax rows.
pub fn greedy_path_correct(policy: &PolicyTable, task: &TaskPrompt, max_len: usize) -> bool {
    let eos = policy.vocab().eos();
    let mut tokens = Vec::new();
    while tokens.len() < max_len {
        let ctx = ContextKey::new(task.key(), &tokens, policy.context_order());
        let row = softmax_row(policy, &ctx);
        let mut best = 0;
        for (t, p) in row.iter().enumerate() {
            if *p > row[best] {
                best = t;
            }
        }
        tokens.push(best as Token);
        if best as Token == eos {
            return tasks::verify_tokens(task, &tokens, eos);
        }
    }
    false
}

/// Relative error with a floor on the denominator so that near-zero entries
/// are compared absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Fills every context reachable within `max_len` tokens with logits drawn
/// uniformly from `[-scale, scale]`.
pub fn random_policy<R: Rng + ?Sized>(
    vocab: Vocab,
    context_order: usize,
    task: &TaskPrompt,
    max_len: usize,
    scale: f64,
    rng: &mut R,
) -> Result<PolicyTable> {
    let mut policy = PolicyTable::new(vocab, context_order, 0.0)?;
    let mut frontier: Vec<Vec<Token>> = vec![Vec::new()];
    let mut seen = BTreeSet::new();
    while let Some(prefix) = frontier.pop() {
        let ctx = ContextKey::new(task.key(), &prefix, context_order);
        if seen.insert(ctx.clone()) {
            for t in vocab.tokens() {
                policy.set_logit(&ctx, t, rng.gen_range(-scale..=scale));
            }
        }
        if prefix.len() + 1 < max_len {
            for t in vocab.tokens().filter(|&t| t != vocab.eos()) {
                let mut next = prefix.clone();
                next.push(t);
                frontier.push(next);
            }
        }
    }
    Ok(policy)
}

/// Summary of a gradient-check sweep.
#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub checks: usize,
    pub skipped: usize,
    pub worst_logprob: f64,
    pub worst_expected: f64,
    pub failures: Vec<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn worst(&self) -> f64 {
        self.worst_logprob.max(self.worst_expected)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub tolerance: f64,
    pub step: f64,
    /// Test hook: perturbs the analytic gradients so the check must fail.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-5,
            step: 1e-5,
            corrupt: false,
        }
    }
}

/// Random-instance sweep comparing analytic gradients against central
/// differences.
///
/// Each trial checks `grad_logprob` on a random sequence under a random
/// policy, and `exact_policy_gradient` of one reward variant (cycling
/// through all five) against differences of the enumerated expectation.
pub fn run_gradcheck(seed: u64, trials: usize, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport::default();
    let specs = RewardSpec::all_variants(rewards::DEFAULT_EPSILON);
    for trial in 0..trials {
        // sequence log-prob on the reference-sized vocabulary
        let modulus = 10u8;
        let vocab = Vocab::with_trailing_eos(usize::from(modulus) + 1)?;
        let task = random_task(&mut rng, modulus);
        let len = rng.gen_range(1..=6usize);
        let policy = random_policy(vocab, 2, &task, len, 3.0, &mut rng)?;
        let tokens: Vec<Token> = (0..len)
            .map(|i| {
                if i + 1 == len && rng.gen_bool(0.5) {
                    vocab.eos()
                } else {
                    rng.gen_range(0..vocab.eos())
                }
            })
            .collect();
        let mut analytic = policy.grad_logprob(&task, &tokens)?;
        if opts.corrupt {
            analytic.scale(1.01);
        }
        let coords: Vec<(ContextKey, Token)> =
            analytic.entries().map(|(c, t, _)| (c.clone(), t)).collect();
        let numeric = finite_diff_grad(
            |p| p.sequence_logprob(&task, &tokens).expect("valid tokens"),
            &policy,
            &coords,
            opts.step,
        )?;
        let mut worst = 0.0f64;
        for ((ctx, tok), num) in coords.iter().zip(&numeric) {
            worst = worst.max(relative_error(analytic.get(ctx, *tok), *num));
        }
        report.checks += coords.len();
        report.worst_logprob = report.worst_logprob.max(worst);
        if worst > opts.tolerance {
            report.failures.push(format!(
                "trial {trial}: grad_logprob task {} tokens {tokens:?} rel err {worst:.3e}",
                task.key()
            ));
        }

        // exact expected-reward gradient on a small vocabulary
        let spec = specs[trial % specs.len()];
        let modulus = rng.gen_range(2..=4u8);
        let vocab = Vocab::with_trailing_eos(usize::from(modulus) + 1)?;
        let task = random_task(&mut rng, modulus);
        let max_len = rng.gen_range(2..=3usize);
        let budget = EnumerationBudget::new(max_len, 1_000_000);
        let policy = random_policy(vocab, 2, &task, max_len, 2.0, &mut rng)?;
        let mut analytic = exact_policy_gradient(&policy, &task, spec, budget)?;
        if opts.corrupt {
            analytic.scale(1.01);
        }
        let skip = clip_kink_coords(&policy, &task, spec, budget, 10.0 * opts.step)?;
        let all: Vec<(ContextKey, Token)> = policy
            .stored_rows()
            .flat_map(|(c, _)| vocab.tokens().map(move |t| (c.clone(), t)))
            .collect();
        let coords: Vec<_> = all.into_iter().filter(|c| !skip.contains(c)).collect();
        report.skipped += skip.len();
        let numeric = finite_diff_grad(
            |p| brute_force_expected_reward(p, &task, spec, budget).expect("budget admitted"),
            &policy,
            &coords,
            opts.step,
        )?;
        let mut worst = 0.0f64;
        for ((ctx, tok), num) in coords.iter().zip(&numeric) {
            worst = worst.max(relative_error(analytic.get(ctx, *tok), *num));
        }
        report.checks += coords.len();
        report.worst_expected = report.worst_expected.max(worst);
        if worst > opts.tolerance {
            report.failures.push(format!(
                "trial {trial}: exact_policy_gradient {spec} task {} max_len {max_len} rel err {worst:.3e}",
                task.key()
            ));
        }
    }
    Ok(report)
}

fn random_task<R: Rng + ?Sized>(rng: &mut R, modulus: u8) -> TaskPrompt {
    let tier = if rng.gen_bool(0.5) { Tier::Easy } else { Tier::Hard };
    let op = if tier == Tier::Easy { Op::Add } else { Op::Mul };
    let a = rng.gen_range(0..modulus);
    let b = rng.gen_range(0..modulus);
    TaskPrompt::new(0, a, b, op, modulus, tier).expect("operands below modulus")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn easy(a: u8, b: u8, m: u8) -> TaskPrompt {
        TaskPrompt::new(0, a, b, Op::Add, m, Tier::Easy).unwrap()
    }

    #[test]
    fn budget_refuses_large_enumerations() {
        let vocab = Vocab::with_trailing_eos(11).unwrap();
        assert!(EnumerationBudget::new(6, 1_000_000).admit(vocab).is_err());
        assert!(EnumerationBudget::new(5, 1_000_000).admit(vocab).is_ok());
        let policy = PolicyTable::new(vocab, 2, 0.0).unwrap();
        match enumerate_paths(&policy, &easy(1, 2, 10), EnumerationBudget::new(7, 10)) {
            Err(Error::BudgetExceeded { required, cap }) => {
                assert_eq!(required, 11u128.pow(7));
                assert_eq!(cap, 10);
            }
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn path_count_and_mass() {
        let vocab = Vocab::with_trailing_eos(4).unwrap();
        let policy = PolicyTable::new(vocab, 2, 0.0).unwrap();
        let paths = enumerate_paths(&policy, &easy(1, 1, 3), EnumerationBudget::new(3, 100)).unwrap();
        // 1 + 3 EOS-terminated, then 9 * 4 at the cap
        assert_eq!(paths.len(), 1 + 3 + 36);
        assert!((path_mass(&paths) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_binary_expected_reward_closed_form() {
        // V = 11, max_len = 2: correct paths are [r, EOS] only.
        let vocab = Vocab::with_trailing_eos(11).unwrap();
        let policy = PolicyTable::new(vocab, 2, 0.0).unwrap();
        let task = easy(2, 3, 10);
        let e = brute_force_expected_reward(
            &policy,
            &task,
            RewardSpec::Binary01,
            EnumerationBudget::new(2, 1000),
        )
        .unwrap();
        assert!((e - 1.0 / 121.0).abs() < 1e-15);
    }

    #[test]
    fn saturated_policy_expectation_is_correct_branch() {
        let vocab = Vocab::with_trailing_eos(4).unwrap();
        let mut policy = PolicyTable::new(vocab, 2, 0.0).unwrap();
        let task = easy(1, 1, 3);
        let ans = task.answer()[0];
        policy.set_logit(&policy.context(&task, &[]), ans, 60.0);
        policy.set_logit(&policy.context(&task, &[ans]), vocab.eos(), 60.0);
        let budget = EnumerationBudget::new(3, 1000);
        for spec in RewardSpec::all_variants(0.2) {
            let v = rewards::shape_reward(spec, true, 1.0).unwrap();
            let e = brute_force_expected_reward(&policy, &task, spec, budget).unwrap();
            assert!((e - v).abs() < 1e-9, "{spec}: {e} vs {v}");
        }
    }

    #[test]
    fn zero_score_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let task = easy(1, 2, 3);
        let vocab = Vocab::with_trailing_eos(4).unwrap();
        let policy = random_policy(vocab, 2, &task, 3, 2.0, &mut rng).unwrap();
        let g = exact_gradient_with(&policy, &task, EnumerationBudget::new(3, 100), |_, _| {
            Ok((0.0, 0.0))
        })
        .unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn binary_gradient_favors_answer_token() {
        let vocab = Vocab::with_trailing_eos(4).unwrap();
        let policy = PolicyTable::new(vocab, 2, 0.0).unwrap();
        let task = easy(2, 2, 3);
        let g = exact_policy_gradient(&policy, &task, RewardSpec::Binary01, EnumerationBudget::new(2, 100))
            .unwrap();
        let root = policy.context(&task, &[]);
        let ans = task.answer()[0];
        assert!(g.get(&root, ans) > 0.0);
        for t in vocab.tokens().filter(|&t| t != ans) {
            assert!(g.get(&root, t) < 0.0);
        }
    }

    #[test]
    fn finite_diff_of_constant_is_zero() {
        let vocab = Vocab::with_trailing_eos(3).unwrap();
        let policy = PolicyTable::new(vocab, 1, 0.0).unwrap();
        let task = easy(0, 1, 2);
        let ctx = policy.context(&task, &[]);
        let d = finite_diff_grad(|_| 3.5, &policy, &[(ctx.clone(), 0), (ctx, 2)], 1e-5).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-9));
        assert!(finite_diff_grad(|_| 0.0, &policy, &[], 1e-2).is_err());
    }

    #[test]
    fn gradcheck_small_sweep_passes_and_corruption_fails() {
        let ok = run_gradcheck(11, 10, GradcheckOptions::default()).unwrap();
        assert!(ok.passed(), "{:?}", ok.failures);
        assert!(ok.checks > 0);
        let bad = run_gradcheck(
            11,
            2,
            GradcheckOptions {
                corrupt: true,
                ..GradcheckOptions::default()
            },
        )
        .unwrap();
        assert!(!bad.passed());
        let none = run_gradcheck(11, 0, GradcheckOptions::default()).unwrap();
        assert_eq!(none.checks, 0);
        assert!(none.passed());
    }
}
