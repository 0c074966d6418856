//! The experiment loop: sample, verify, shape, normalize, update, record.

mod checkpoint;
pub mod experiments;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::{checkpoint_text, load_checkpoint, save_checkpoint};

use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport, MetricsFormat, MetricsRecord, MetricsWriter};
use crate::optim::{self, Group, TrainConfig};
use crate::policy::{PolicyTable, Rollout, Token, Vocab};
use crate::rewards;
use crate::tasks::{self, TaskPrompt, TaskSuite};

/// Supervised pre-training applied before RL; see [`warm_start`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Warmup {
    pub steps: usize,
    pub answer_lr: f64,
    pub distractor_lr: f64,
}

impl Warmup {
    pub const NONE: Warmup = Warmup {
        steps: 0,
        answer_lr: 0.0,
        distractor_lr: 0.0,
    };
}

/// Shape of the initial policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub context_order: usize,
    pub default_logit: f64,
    pub warmup: Warmup,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 11,
            context_order: 2,
            default_logit: 0.0,
            warmup: Warmup::NONE,
        }
    }
}

impl PolicyConfig {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::with_trailing_eos(self.vocab_size)
    }

    /// The blank table, before any warm start.
    pub fn build(&self) -> Result<PolicyTable> {
        PolicyTable::new(self.vocab()?, self.context_order, self.default_logit)
    }

    /// The blank table warm-started on `suite`.
    pub fn build_base(&self, suite: &TaskSuite) -> Result<PolicyTable> {
        let mut p = self.build()?;
        warm_start(&mut p, suite, &self.warmup)?;
        Ok(p)
    }
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone)]
pub struct ExperimentManifest {
    pub config: TrainConfig,
    pub policy: PolicyConfig,
    pub suite: TaskSuite,
    pub eval_suite: TaskSuite,
    pub metrics_path: Option<PathBuf>,
    pub format: MetricsFormat,
    /// Evaluate every this many steps (0 = only after the last step).
    pub eval_every: usize,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
}

impl ExperimentManifest {
    pub fn new(config: TrainConfig, policy: PolicyConfig, suite: TaskSuite, eval_suite: TaskSuite) -> Self {
        Self {
            config,
            policy,
            suite,
            eval_suite,
            metrics_path: None,
            format: MetricsFormat::Csv,
            eval_every: 0,
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let vocab = self.policy.vocab().map_err(|e| Error::Config(e.to_string()))?;
        if self.suite.is_empty() {
            return Err(Error::Config("training suite is empty".into()));
        }
        if self.eval_suite.is_empty() {
            return Err(Error::Config("evaluation suite is empty".into()));
        }
        for t in self.suite.tasks.iter().chain(&self.eval_suite.tasks) {
            // digits 0..m-1 must sit below the EOS id
            if usize::from(t.modulus) >= vocab.size() {
                return Err(Error::Config(format!(
                    "vocabulary of size {} cannot hold the {} digits of modulus {}",
                    vocab.size(),
                    t.modulus,
                    t.modulus
                )));
            }
        }
        let train_ids: std::collections::BTreeSet<u32> =
            self.suite.tasks.iter().map(|t| t.prompt_id).collect();
        if let Some(t) = self.eval_suite.tasks.iter().find(|t| train_ids.contains(&t.prompt_id)) {
            return Err(Error::Config(format!(
                "prompt id {} appears in both training and evaluation suites",
                t.prompt_id
            )));
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub policy: PolicyTable,
    pub reference: PolicyTable,
    pub records: Vec<MetricsRecord>,
    pub final_eval: EvalReport,
    /// Groups of the last step, kept for paired re-scoring.
    pub last_groups: Vec<Group>,
}

/// Greedy-decodes every task once.
pub fn evaluate(policy: &PolicyTable, suite: &TaskSuite, max_len: usize) -> Result<EvalReport> {
    if suite.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty suite"));
    }
    let mut correct = 0usize;
    let (mut len, mut conf) = (0.0, 0.0);
    for task in &suite.tasks {
        let r = policy.greedy_decode(task, max_len);
        correct += usize::from(tasks::verify(task, &r));
        len += r.length() as f64;
        conf += rewards::confidence(&r)?;
    }
    let n = suite.len() as f64;
    Ok(EvalReport {
        accuracy: correct as f64 / n,
        mean_length: len / n,
        mean_confidence: conf / n,
    })
}

/// Derives an independent stream seed from a base seed and a path of indices.
pub(crate) fn stream_seed(seed: u64, path: &[u64]) -> u64 {
    // splitmix64 finalizer applied per component
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in path {
        h = h.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Samples `batch_tasks` tasks and `group_size` rollouts each from the
/// current policy, then scores them. Rollouts are generated in parallel with
/// per-rollout seeds, so the result does not depend on thread count.
pub fn collect_groups(
    policy: &PolicyTable,
    suite: &TaskSuite,
    config: &TrainConfig,
    step: usize,
) -> Result<Vec<Group>> {
    let mut picker = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, &[step as u64, 0]));
    let picked: Vec<TaskPrompt> = (0..config.batch_tasks)
        .map(|_| suite.tasks[picker.gen_range(0..suite.len())])
        .collect();
    picked
        .par_iter()
        .enumerate()
        .map(|(slot, task)| {
            let rollouts: Vec<Rollout> = (0..config.group_size)
                .map(|g| {
                    let seed = stream_seed(config.seed, &[step as u64, 1, slot as u64, g as u64]);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    policy.sample_rollout(task, &mut rng, config.max_len)
                })
                .collect();
            Group::build(*task, rollouts, config.reward_spec, config.std_guard)
        })
        .collect()
}

/// Runs the full training loop described by `manifest`.
pub fn run_training(manifest: &ExperimentManifest) -> Result<TrainOutcome> {
    manifest.validate()?;
    let policy = manifest.policy.build_base(&manifest.suite)?;
    run_training_from(manifest, policy)
}

/// Like [`run_training`], starting from a given policy. The reference for
/// the KL penalty is a frozen copy of `initial`.
pub fn run_training_from(manifest: &ExperimentManifest, initial: PolicyTable) -> Result<TrainOutcome> {
    run_training_observed(manifest, initial, |_, _| Ok(()))
}

/// Like [`run_training_from`], calling `observe(step, groups)` on every
/// step's scored rollouts before they are used for the update.
pub fn run_training_observed<F>(manifest: &ExperimentManifest, initial: PolicyTable, mut observe: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, &[Group]) -> Result<()>,
{
    manifest.validate()?;
    let cfg = &manifest.config;
    let mut writer = match &manifest.metrics_path {
        Some(path) => Some(MetricsWriter::create(path, manifest.format)?),
        None => None,
    };
    let reference = initial.clone();
    let mut policy = initial;
    let mut records = Vec::with_capacity(cfg.steps);
    let mut last_groups = Vec::new();
    for step in 0..cfg.steps {
        let groups = collect_groups(&policy, &manifest.suite, cfg, step)?;
        observe(step, &groups)?;
        let stats = match optim::policy_gradient_step(&mut policy, &reference, &groups, cfg) {
            Ok(stats) => stats,
            Err(Error::NonFinite { detail, .. }) => {
                let mut detail = format!("{detail}; policy version {}", policy.version());
                // the update was refused, so this is the last good state
                if let Some(path) = &manifest.checkpoint_path {
                    let dump = path.with_extension("nonfinite.tsv");
                    save_checkpoint(&policy, &dump)?;
                    detail.push_str(&format!("; state dumped to {}", dump.display()));
                }
                return Err(Error::NonFinite { step, detail });
            }
            Err(e) => return Err(e),
        };
        debug_assert!(stats.grad_norm.is_finite());
        let last = step + 1 == cfg.steps;
        let eval_now = last || (manifest.eval_every > 0 && (step + 1) % manifest.eval_every == 0);
        let eval = if eval_now {
            Some(evaluate(&policy, &manifest.eval_suite, cfg.max_len)?)
        } else {
            None
        };
        let rec = metrics::record(step, &groups, eval.as_ref())?;
        if let Some(w) = writer.as_mut() {
            w.write(&rec)?;
        }
        records.push(rec);
        if let Some(path) = &manifest.checkpoint_path {
            if manifest.checkpoint_every > 0 && (step + 1) % manifest.checkpoint_every == 0 {
                save_checkpoint(&policy, path)?;
            }
        }
        last_groups = groups;
    }
    if let Some(path) = &manifest.checkpoint_path {
        save_checkpoint(&policy, path)?;
    }
    let final_eval = evaluate(&policy, &manifest.eval_suite, cfg.max_len)?;
    Ok(TrainOutcome {
        policy,
        reference,
        records,
        final_eval,
        last_groups,
    })
}

/// Teacher-forced warm start that turns a blank table into a "base model".
///
/// Each round takes one ascent step on
/// `answer_lr * log pi(answer, EOS) + distractor_lr * log pi(distractor, EOS)`
/// summed over the suite. A positive `distractor_lr` gives a base model that
/// is partly competent and partly confident in a plausible wrong answer.
pub fn warm_start(policy: &mut PolicyTable, suite: &TaskSuite, warmup: &Warmup) -> Result<()> {
    let eos: Token = policy.vocab().eos();
    for _ in 0..warmup.steps {
        let mut grad = crate::policy::Gradient::new();
        for task in &suite.tasks {
            policy.accumulate_grad_logprob(task, &task.reference_response(eos), warmup.answer_lr, &mut grad)?;
            if warmup.distractor_lr != 0.0 {
                let mut d = task.distractor();
                d.push(eos);
                policy.accumulate_grad_logprob(task, &d, warmup.distractor_lr, &mut grad)?;
            }
        }
        policy.apply_update(&grad, 1.0);
    }
    // the warm start is not a training step
    policy.set_version(0);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::RewardSpec;
    use crate::tasks::{gen_task_suite, gen_task_suite_from, Regime};

    fn manifest(regime: Regime, steps: usize, spec: RewardSpec) -> ExperimentManifest {
        let suite = gen_task_suite(regime, 16, 10, 3).unwrap();
        let eval = gen_task_suite_from(regime, 16, 10, 4, 1000).unwrap();
        let cfg = TrainConfig {
            steps,
            reward_spec: spec,
            batch_tasks: 4,
            ..TrainConfig::default()
        };
        ExperimentManifest::new(cfg, PolicyConfig::default(), suite, eval)
    }

    #[test]
    fn zero_steps_returns_initial_policy() {
        let out = run_training(&manifest(Regime::Easy, 0, RewardSpec::Binary01)).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.policy, PolicyConfig::default().build().unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let m = manifest(Regime::Mixed, 5, RewardSpec::ConfClip { epsilon: 0.2 });
        let a = run_training(&m).unwrap();
        let b = run_training(&m).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.reference, PolicyConfig::default().build().unwrap());
        assert_eq!(a.policy.version(), 5);
    }

    #[test]
    fn saturated_correct_policy_evaluates_perfectly() {
        let suite = gen_task_suite(Regime::Mixed, 12, 10, 9).unwrap();
        let mut p = PolicyConfig::default().build().unwrap();
        let eos = p.vocab().eos();
        for task in &suite.tasks {
            let resp = task.reference_response(eos);
            for i in 0..resp.len() {
                let ctx = p.context(task, &resp[..i]);
                p.set_logit(&ctx, resp[i], 80.0);
            }
        }
        let rep = evaluate(&p, &suite, 6).unwrap();
        assert_eq!(rep.accuracy, 1.0);
        assert!((rep.mean_confidence - 1.0).abs() < 1e-9);
    }

    #[test]
    fn overlapping_prompt_ids_are_rejected() {
        let mut m = manifest(Regime::Easy, 1, RewardSpec::Binary01);
        m.eval_suite = m.suite.clone();
        assert!(run_training(&m).is_err());
    }

    #[test]
    fn small_vocab_for_modulus_is_rejected() {
        let mut m = manifest(Regime::Easy, 1, RewardSpec::Binary01);
        m.policy.vocab_size = 10;
        assert!(m.validate().is_err());
    }

    #[test]
    fn warmup_raises_answer_probability() {
        let suite = gen_task_suite(Regime::Hard, 4, 10, 1).unwrap();
        let mut p = PolicyConfig::default().build().unwrap();
        let task = suite.tasks[0];
        let resp = task.reference_response(p.vocab().eos());
        let before = p.sequence_logprob(&task, &resp).unwrap();
        let w = Warmup {
            steps: 3,
            answer_lr: 0.5,
            distractor_lr: 1.0,
        };
        warm_start(&mut p, &suite, &w).unwrap();
        assert!(p.sequence_logprob(&task, &resp).unwrap() > before);
        assert_eq!(p.version(), 0);
        let mut d = task.distractor();
        d.push(p.vocab().eos());
        assert!(p.sequence_logprob(&task, &d).unwrap() > p.sequence_logprob(&task, &resp).unwrap());
    }
}
