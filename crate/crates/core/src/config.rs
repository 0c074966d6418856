//! TOML experiment configuration.
//!
//! ```toml
//! [policy]
//! V = 11
//! context_order = 2
//!
//! [task]
//! regime = "mixed"
//! n = 64
//!
//! [reward]
//! variant = "ConfClip"
//! epsilon = 0.2
//!
//! [optim]
//! G = 7
//! kl_coeff = 0.005
//!
//! [run]
//! steps = 300
//! metrics_path = "metrics.csv"
//! ```
//!
//! Every key is optional and defaults to the value shown by
//! `ConfigFile::default()`. Unknown sections or keys are rejected. Any key can
//! be overridden from the command line with `section.key=value`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsFormat;
use crate::optim::{TrainConfig, DEFAULT_STD_GUARD};
use crate::rewards::{RewardSpec, DEFAULT_EPSILON};
use crate::tasks::{gen_task_suite, gen_task_suite_from, Regime, TaskSuite};
use crate::trainer::{ExperimentManifest, PolicyConfig, Warmup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    /// Vocabulary size; the last id is EOS.
    #[serde(rename = "V")]
    pub vocab_size: usize,
    pub context_order: usize,
    pub default_logit: f64,
    /// Rounds of supervised warm start before RL (0 = start from the blank table).
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    /// Weight of the distractor answer during warm start.
    pub warmup_distractor_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub regime: Regime,
    pub n: usize,
    pub modulus: u8,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub variant: String,
    /// Only read by ConfClip.
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    /// Rollouts per task.
    #[serde(rename = "G")]
    pub group_size: usize,
    pub batch_tasks: usize,
    pub learning_rate: f64,
    pub kl_coeff: f64,
    pub std_guard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub steps: usize,
    pub max_len: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics_path: Option<PathBuf>,
    /// `csv` or `jsonl`.
    pub format: String,
    /// Greedy evaluation every this many steps (0 = final step only).
    pub eval_every: usize,
    /// Checkpoint every this many steps (0 = end of run only).
    pub checkpoint_every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub policy: PolicySection,
    pub task: TaskSection,
    pub reward: RewardSection,
    pub optim: OptimSection,
    pub run: RunSection,
}

impl Default for PolicySection {
    fn default() -> Self {
        let p = PolicyConfig::default();
        Self {
            vocab_size: p.vocab_size,
            context_order: p.context_order,
            default_logit: p.default_logit,
            warmup_steps: p.warmup.steps,
            warmup_lr: p.warmup.answer_lr,
            warmup_distractor_lr: p.warmup.distractor_lr,
        }
    }
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            regime: Regime::Mixed,
            n: 64,
            modulus: 10,
            seed: 0,
        }
    }
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            variant: "ConfClip".into(),
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl Default for OptimSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            group_size: t.group_size,
            batch_tasks: t.batch_tasks,
            learning_rate: t.learning_rate,
            kl_coeff: t.kl_coeff,
            std_guard: DEFAULT_STD_GUARD,
        }
    }
}

impl Default for RunSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            max_len: t.max_len,
            seed: t.seed,
            metrics_path: None,
            format: "csv".into(),
            eval_every: 0,
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // Anything that is not a TOML literal is taken as a bare string, so
    // `reward.variant=ConfSign` works without quoting.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, &[])
    }

    /// Parses `text` after applying `section.key=value` overrides.
    pub fn parse_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        for ov in overrides {
            let (path, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not of the form section.key=value")))?;
            let (section, key) = path
                .trim()
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override key `{path}` must be section.key")))?;
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(sec) = entry else {
                return Err(Error::Config(format!("`{section}` is not a section")));
            };
            sec.insert(key.to_string(), parse_value(raw.trim()));
        }
        let cfg: ConfigFile = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_with(&text, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn reward_spec(&self) -> Result<RewardSpec> {
        RewardSpec::from_parts(&self.reward.variant, self.reward.epsilon)
            .map_err(|e| Error::Config(format!("reward.variant/epsilon: {e}")))
    }

    pub fn format(&self) -> Result<MetricsFormat> {
        self.run
            .format
            .parse()
            .map_err(|e: Error| Error::Config(format!("run.format: {e}")))
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let p = &self.policy;
        PolicyConfig {
            vocab_size: p.vocab_size,
            context_order: p.context_order,
            default_logit: p.default_logit,
            warmup: Warmup {
                steps: p.warmup_steps,
                answer_lr: p.warmup_lr,
                distractor_lr: p.warmup_distractor_lr,
            },
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            group_size: self.optim.group_size,
            batch_tasks: self.optim.batch_tasks,
            learning_rate: self.optim.learning_rate,
            kl_coeff: self.optim.kl_coeff,
            reward_spec: self.reward_spec()?,
            max_len: self.run.max_len,
            steps: self.run.steps,
            seed: self.run.seed,
            std_guard: self.optim.std_guard,
        })
    }

    /// The training suite.
    pub fn suite(&self) -> Result<TaskSuite> {
        let t = &self.task;
        gen_task_suite(t.regime, t.n, t.modulus, t.seed).map_err(|e| Error::Config(format!("task: {e}")))
    }

    /// The evaluation suite: the training problems posed again under fresh
    /// prompt ids, `n..2n`.
    pub fn eval_suite(&self) -> Result<TaskSuite> {
        let t = &self.task;
        gen_task_suite_from(t.regime, t.n, t.modulus, t.seed, t.n as u32)
            .map_err(|e| Error::Config(format!("task: {e}")))
    }

    /// Checks every field, naming the offending key on failure.
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: String| Err(Error::Config(format!("{key}: {msg}")));
        let p = &self.policy;
        if p.vocab_size <= usize::from(self.task.modulus) {
            return fail(
                "policy.V",
                format!("must exceed task.modulus ({}), got {}", self.task.modulus, p.vocab_size),
            );
        }
        if p.vocab_size > usize::from(u16::MAX) {
            return fail("policy.V", format!("must be at most {}, got {}", u16::MAX, p.vocab_size));
        }
        if !p.default_logit.is_finite() {
            return fail("policy.default_logit", "must be finite".into());
        }
        if !p.warmup_lr.is_finite() || !p.warmup_distractor_lr.is_finite() {
            return fail("policy.warmup_lr", "warm-start rates must be finite".into());
        }
        let t = &self.task;
        if t.n == 0 {
            return fail("task.n", "must be positive".into());
        }
        if t.regime == Regime::Mixed && t.n < 2 {
            return fail("task.n", "the mixed regime needs at least 2 tasks".into());
        }
        if !(2..=crate::tasks::MAX_MODULUS).contains(&t.modulus) {
            return fail(
                "task.modulus",
                format!("must lie in 2..={}, got {}", crate::tasks::MAX_MODULUS, t.modulus),
            );
        }
        self.reward_spec()?;
        let o = &self.optim;
        if o.group_size < 2 {
            return fail("optim.G", format!("must be >= 2, got {}", o.group_size));
        }
        if o.batch_tasks == 0 {
            return fail("optim.batch_tasks", "must be positive".into());
        }
        if !(o.learning_rate.is_finite() && o.learning_rate >= 0.0) {
            return fail("optim.learning_rate", format!("must be finite and >= 0, got {}", o.learning_rate));
        }
        if !(o.kl_coeff.is_finite() && o.kl_coeff >= 0.0) {
            return fail("optim.kl_coeff", format!("must be finite and >= 0, got {}", o.kl_coeff));
        }
        if !(o.std_guard.is_finite() && o.std_guard > 0.0) {
            return fail("optim.std_guard", format!("must be positive, got {}", o.std_guard));
        }
        if self.run.max_len == 0 {
            return fail("run.max_len", "must be positive".into());
        }
        self.format()?;
        Ok(())
    }

    pub fn manifest(&self) -> Result<ExperimentManifest> {
        let mut m = ExperimentManifest::new(
            self.train_config()?,
            self.policy_config(),
            self.suite()?,
            self.eval_suite()?,
        );
        m.metrics_path = self.run.metrics_path.clone();
        m.format = self.format()?;
        m.eval_every = self.run.eval_every;
        m.checkpoint_every = self.run.checkpoint_every;
        m.checkpoint_path = self.run.checkpoint_path.clone();
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ConfigFile::parse("").unwrap();
        assert_eq!(cfg, ConfigFile::default());
        assert_eq!(cfg.optim.group_size, 7);
        assert_eq!(cfg.optim.kl_coeff, 0.005);
        assert_eq!(cfg.reward.epsilon, 0.2);
        assert_eq!(cfg.reward_spec().unwrap(), RewardSpec::ConfClip { epsilon: 0.2 });
    }

    #[test]
    fn round_trip() {
        let mut cfg = ConfigFile::default();
        cfg.run.metrics_path = Some("out/m.csv".into());
        cfg.optim.learning_rate = 0.1 + 0.2;
        cfg.task.regime = Regime::Hard;
        let back = ConfigFile::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = ConfigFile::parse("[optim]\nlearning_rat = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        let err = ConfigFile::parse("[optimizer]\n").unwrap_err();
        assert!(err.to_string().contains("optimizer"), "{err}");
    }

    #[test]
    fn overrides_apply_and_name_bad_keys() {
        let cfg = ConfigFile::parse_with(
            "[run]\nsteps = 5\n",
            &["run.steps=0".into(), "reward.variant=Binary01".into(), "optim.G=4".into()],
        )
        .unwrap();
        assert_eq!(cfg.run.steps, 0);
        assert_eq!(cfg.reward_spec().unwrap(), RewardSpec::Binary01);
        assert_eq!(cfg.optim.group_size, 4);

        let err = ConfigFile::parse_with("", &["optim.G=1".into()]).unwrap_err();
        assert!(err.to_string().contains("optim.G"), "{err}");
        let err = ConfigFile::parse_with("", &["reward.epsilon=1.5".into()]).unwrap_err();
        assert!(err.to_string().contains("reward"), "{err}");
        assert!(ConfigFile::parse_with("", &["steps=3".into()]).is_err());
        assert!(ConfigFile::parse_with("", &["run.bogus=3".into()]).is_err());
    }

    #[test]
    fn eval_suite_reposes_training_problems() {
        let cfg = ConfigFile::default();
        let (train, eval) = (cfg.suite().unwrap(), cfg.eval_suite().unwrap());
        for (a, b) in train.tasks.iter().zip(&eval.tasks) {
            assert_eq!(a.key(), b.key());
            assert_ne!(a.prompt_id, b.prompt_id);
        }
        cfg.manifest().unwrap();
    }
}
