//! The three headline comparisons: baseline vs ConfClip on mixed tasks,
//! clipped vs unclipped confidence reward on hard tasks, and degenerate
//! groups under binary vs clipped reward on the same rollouts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{run_training, run_training_observed, stream_seed, EvalReport, TrainOutcome};
use crate::config::ConfigFile;
use crate::error::{Error, Result};
use crate::metrics::{moving_average, MetricsRecord};
use crate::optim::Group;
use crate::policy::PolicyTable;
use crate::rewards::{self, RewardSpec};
use crate::tasks::{Regime, TaskSuite};

/// Smoothing window for the reported correctness curves.
pub const MA_WINDOW: usize = 5;

/// Shortest run for which the collapse comparison is meaningful.
pub const MIN_COLLAPSE_STEPS: usize = 100;

/// Samples per task when measuring a final policy's mean confidence.
const CONFIDENCE_SAMPLES: usize = 16;

/// Outcome of one arm of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub reward: String,
    pub records: Vec<MetricsRecord>,
    pub final_eval: EvalReport,
    /// Mean confidence of responses sampled from the final policy over the
    /// evaluation suite.
    pub final_confidence: f64,
    /// Trailing moving average of the correctness reward at the last step.
    pub final_correctness_ma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub steps: usize,
    pub treatment: RunSummary,
    pub control: RunSummary,
    /// `treatment.final_confidence / control.final_confidence`.
    pub confidence_ratio: f64,
}

impl ComparisonReport {
    pub fn summary_line(&self) -> String {
        format!(
            "{} conf={:.4} acc={:.4} | {} conf={:.4} acc={:.4} | confidence_ratio={:.2}",
            self.treatment.reward,
            self.treatment.final_confidence,
            self.treatment.final_eval.accuracy,
            self.control.reward,
            self.control.final_confidence,
            self.control.final_eval.accuracy,
            self.confidence_ratio
        )
    }
}

/// Mean confidence of `samples` sampled responses per task, with a fixed
/// sampling seed so the measurement is a pure function of the policy.
pub fn sampled_confidence(policy: &PolicyTable, suite: &TaskSuite, max_len: usize, samples: usize) -> Result<f64> {
    if suite.is_empty() || samples == 0 {
        return Err(Error::invalid("sampled confidence needs tasks and samples"));
    }
    let mut total = 0.0;
    for (i, task) in suite.tasks.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(0x5EED, &[i as u64]));
        for _ in 0..samples {
            total += rewards::confidence(&policy.sample_rollout(task, &mut rng, max_len))?;
        }
    }
    Ok(total / (suite.len() * samples) as f64)
}

fn summarize(cfg: &ConfigFile, out: &TrainOutcome) -> Result<RunSummary> {
    let acc: Vec<f64> = out.records.iter().map(|r| r.correctness_reward_plot).collect();
    let final_correctness_ma = moving_average(&acc, MA_WINDOW).last().copied().unwrap_or(0.0);
    Ok(RunSummary {
        reward: cfg.reward_spec()?.to_string(),
        records: out.records.clone(),
        final_eval: out.final_eval,
        final_confidence: sampled_confidence(&out.policy, &cfg.eval_suite()?, cfg.run.max_len, CONFIDENCE_SAMPLES)?,
        final_correctness_ma,
    })
}

fn with_reward(base: &ConfigFile, spec: RewardSpec) -> ConfigFile {
    let mut cfg = base.clone();
    cfg.reward.variant = spec.name().to_string();
    if let RewardSpec::ConfClip { epsilon } = spec {
        cfg.reward.epsilon = epsilon;
    }
    cfg
}

/// Trains `base` twice, once per reward, with everything else identical.
pub fn compare(base: &ConfigFile, treatment: RewardSpec, control: RewardSpec) -> Result<ComparisonReport> {
    let mut arms = Vec::with_capacity(2);
    for spec in [treatment, control] {
        let cfg = with_reward(base, spec);
        let out = run_training(&cfg.manifest()?)?;
        arms.push(summarize(&cfg, &out)?);
    }
    let control = arms.pop().expect("two arms");
    let treatment = arms.pop().expect("two arms");
    Ok(ComparisonReport {
        seed: base.run.seed,
        steps: base.run.steps,
        confidence_ratio: treatment.final_confidence / control.final_confidence,
        treatment,
        control,
    })
}

/// Settings for the hard-regime collapse comparison: a larger vocabulary
/// and a base model that is partly confident in a wrong answer.
pub fn collapse_config(seed: u64, steps: usize) -> ConfigFile {
    let mut cfg = ConfigFile::default();
    cfg.task.regime = Regime::Hard;
    cfg.task.n = 16;
    cfg.policy.vocab_size = 64;
    cfg.policy.warmup_steps = 1;
    cfg.policy.warmup_lr = 1.5;
    cfg.policy.warmup_distractor_lr = 2.0;
    cfg.run.seed = seed;
    cfg.run.steps = steps;
    cfg
}

/// ConfClip(0.2) against the unclipped ConfSign on the hard regime.
pub fn run_collapse_demo(seed: u64, steps: usize) -> Result<ComparisonReport> {
    run_collapse_demo_with(&collapse_config(seed, steps))
}

pub fn run_collapse_demo_with(base: &ConfigFile) -> Result<ComparisonReport> {
    if base.run.steps < MIN_COLLAPSE_STEPS {
        return Err(Error::invalid(format!(
            "collapse demo needs at least {MIN_COLLAPSE_STEPS} steps, got {}",
            base.run.steps
        )));
    }
    compare(base, RewardSpec::conf_clip(0.2)?, RewardSpec::ConfSign)
}

/// Settings for the mixed-regime stability comparison.
pub fn stability_config(seed: u64, steps: usize) -> ConfigFile {
    let mut cfg = ConfigFile::default();
    cfg.task.regime = Regime::Mixed;
    cfg.run.seed = seed;
    cfg.run.steps = steps;
    cfg
}

/// ConfClip(0.2) against the Binary01 baseline on the mixed regime.
pub fn run_stability_comparison(seed: u64, steps: usize) -> Result<ComparisonReport> {
    compare(&stability_config(seed, steps), RewardSpec::conf_clip(0.2)?, RewardSpec::Binary01)
}

/// Batch accuracy at which the degenerate-group study takes its snapshot.
pub const SOLVED_ACCURACY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegenerateReport {
    /// First step whose batch accuracy reached [`SOLVED_ACCURACY`].
    pub solved_step: usize,
    /// Batch accuracy at `solved_step`.
    pub solved_accuracy: f64,
    /// Groups pooled from that step to the end of the run.
    pub groups: usize,
    /// Baseline accuracy over the pooled rollouts.
    pub accuracy: f64,
    pub binary_fraction: f64,
    pub clipped_fraction: f64,
}

/// Settings for the degenerate-group study.
pub fn degenerate_config(seed: u64, steps: usize) -> ConfigFile {
    let mut cfg = ConfigFile::default();
    cfg.task.regime = Regime::Easy;
    cfg.reward.variant = "Binary01".into();
    cfg.run.seed = seed;
    cfg.run.steps = steps;
    cfg
}

/// Trains the Binary01 baseline and, from the first step whose batch
/// accuracy reaches [`SOLVED_ACCURACY`] onwards, scores every group both as
/// Binary01 and as ConfClip(0.2), pooling the fraction of groups that carry
/// no gradient under each.
pub fn run_degenerate_study(seed: u64, steps: usize) -> Result<DegenerateReport> {
    run_degenerate_study_with(&degenerate_config(seed, steps))
}

pub fn run_degenerate_study_with(cfg: &ConfigFile) -> Result<DegenerateReport> {
    let m = cfg.manifest()?;
    let clip = RewardSpec::conf_clip(0.2)?;
    let guard = cfg.optim.std_guard;
    let mut solved_step = None;
    let mut solved_accuracy = 0.0;
    let (mut groups, mut binary, mut clipped, mut correct, mut total) = (0usize, 0usize, 0usize, 0usize, 0usize);
    run_training_observed(&m, cfg.policy_config().build_base(&m.suite)?, |step, batch| {
        let n: usize = batch.iter().map(Group::size).sum();
        let c: usize = batch.iter().map(|g| g.correct.iter().filter(|&&x| x).count()).sum();
        if solved_step.is_none() && c as f64 >= SOLVED_ACCURACY * n as f64 {
            solved_step = Some(step);
            solved_accuracy = c as f64 / n as f64;
        }
        if solved_step.is_some() {
            for g in batch {
                binary += usize::from(g.rescore(RewardSpec::Binary01, guard)?.degenerate);
                clipped += usize::from(g.rescore(clip, guard)?.degenerate);
            }
            groups += batch.len();
            correct += c;
            total += n;
        }
        Ok(())
    })?;
    let solved_step = solved_step.ok_or_else(|| {
        Error::invalid(format!(
            "baseline never reached batch accuracy {SOLVED_ACCURACY} in {} steps",
            cfg.run.steps
        ))
    })?;
    Ok(DegenerateReport {
        solved_step,
        solved_accuracy,
        groups,
        accuracy: correct as f64 / total as f64,
        binary_fraction: binary as f64 / groups as f64,
        clipped_fraction: clipped as f64 / groups as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapse_demo_rejects_short_runs() {
        assert!(run_collapse_demo(0, MIN_COLLAPSE_STEPS - 1).is_err());
    }

    #[test]
    fn comparison_arms_share_length() {
        let mut cfg = stability_config(1, 6);
        cfg.task.n = 8;
        let rep = compare(&cfg, RewardSpec::conf_clip(0.2).unwrap(), RewardSpec::Binary01).unwrap();
        assert_eq!(rep.treatment.records.len(), 6);
        assert_eq!(rep.control.records.len(), 6);
        assert!(rep.confidence_ratio.is_finite());
        assert_eq!(rep.treatment.reward, "ConfClip(eps=0.2)");
    }
}
