//! Synthetic modular-arithmetic tasks with a programmatic verifier.
//!
//! Easy tasks ask for `(a + b) mod m` as a single digit. Hard tasks ask for
//! the product `a * b` written in base `m` as two digits (carry, then
//! residue), so an untrained policy has to hit two specific tokens in a row
//! before emitting EOS.
//!
//! Answers are read from the tail of the response: the last answer-sized
//! group of tokens before EOS. Any tokens before that group are free, so
//! response length can vary without changing correctness.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Rollout, Token};

/// Largest supported modulus; keeps the digit vocabulary at ten tokens.
pub const MAX_MODULUS: u8 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Add,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Easy,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Easy,
    Hard,
    Mixed,
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Op::Add => "add",
            Op::Mul => "mul",
        })
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Easy => "easy",
            Tier::Hard => "hard",
        })
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Easy => "easy",
            Regime::Hard => "hard",
            Regime::Mixed => "mixed",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Regime::Easy),
            "hard" => Ok(Regime::Hard),
            "mixed" => Ok(Regime::Mixed),
            other => Err(Error::invalid(format!("unknown regime `{other}`"))),
        }
    }
}

/// The problem a prompt poses, independent of its id.
///
/// Policy contexts are keyed by this rather than by `prompt_id`, so two
/// prompts posing the same problem share parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskKey {
    pub op: Op,
    pub a: u8,
    pub b: u8,
    pub modulus: u8,
    pub tier: Tier,
}

impl fmt::Display for TaskKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}:{}:{}",
            self.op, self.a, self.b, self.modulus, self.tier
        )
    }
}

impl FromStr for TaskKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::invalid(format!("malformed task key `{s}`"));
        if parts.len() != 5 {
            return Err(bad());
        }
        let op = match parts[0] {
            "add" => Op::Add,
            "mul" => Op::Mul,
            _ => return Err(bad()),
        };
        let tier = match parts[4] {
            "easy" => Tier::Easy,
            "hard" => Tier::Hard,
            _ => return Err(bad()),
        };
        let num = |p: &str| p.parse::<u8>().map_err(|_| bad());
        let key = TaskKey {
            op,
            a: num(parts[1])?,
            b: num(parts[2])?,
            modulus: num(parts[3])?,
            tier,
        };
        if key.modulus == 0 || key.modulus > MAX_MODULUS || key.a >= key.modulus || key.b >= key.modulus
        {
            return Err(bad());
        }
        Ok(key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPrompt {
    pub prompt_id: u32,
    pub operands: (u8, u8),
    pub op: Op,
    pub modulus: u8,
    pub tier: Tier,
}

impl TaskPrompt {
    pub fn new(prompt_id: u32, a: u8, b: u8, op: Op, modulus: u8, tier: Tier) -> Result<Self> {
        if modulus == 0 || modulus > MAX_MODULUS {
            return Err(Error::invalid(format!(
                "modulus must be in 1..={MAX_MODULUS}, got {modulus}"
            )));
        }
        if a >= modulus || b >= modulus {
            return Err(Error::invalid(format!(
                "operands ({a}, {b}) must be below modulus {modulus}"
            )));
        }
        Ok(Self {
            prompt_id,
            operands: (a, b),
            op,
            modulus,
            tier,
        })
    }

    pub fn key(&self) -> TaskKey {
        TaskKey {
            op: self.op,
            a: self.operands.0,
            b: self.operands.1,
            modulus: self.modulus,
            tier: self.tier,
        }
    }

    fn value(&self) -> u32 {
        let (a, b) = (u32::from(self.operands.0), u32::from(self.operands.1));
        match self.op {
            Op::Add => a + b,
            Op::Mul => a * b,
        }
    }

    /// Digit tokens of the ground-truth answer, without the trailing EOS.
    pub fn answer(&self) -> Vec<Token> {
        let m = u32::from(self.modulus);
        let v = self.value();
        match self.tier {
            Tier::Easy => vec![(v % m) as Token],
            // v < m^2, so the carry is a single digit.
            Tier::Hard => vec![((v / m) % m) as Token, (v % m) as Token],
        }
    }

    /// A plausible wrong answer in the same format: the result of the other
    /// operator, so `a * b` is answered with `a + b` and vice versa.
    pub fn distractor(&self) -> Vec<Token> {
        let swapped = TaskPrompt {
            op: match self.op {
                Op::Add => Op::Mul,
                Op::Mul => Op::Add,
            },
            ..*self
        };
        let mut out = swapped.answer();
        if out == self.answer() {
            // both operators agree (e.g. 2+2, 2*2); shift the last digit
            let last = out.len() - 1;
            out[last] = (out[last] + 1) % Token::from(self.modulus);
        }
        out
    }

    /// Canonical shortest verifying response: the answer followed by EOS.
    pub fn reference_response(&self, eos: Token) -> Vec<Token> {
        let mut out = self.answer();
        out.push(eos);
        out
    }
}

/// Checks whether a response token sequence answers the task.
///
/// The sequence must end with `eos`, and the tokens immediately before it
/// must equal the answer digits.
pub fn verify_tokens(task: &TaskPrompt, tokens: &[Token], eos: Token) -> bool {
    let Some((&last, body)) = tokens.split_last() else {
        return false;
    };
    if last != eos {
        return false;
    }
    let answer = task.answer();
    body.len() >= answer.len() && body[body.len() - answer.len()..] == answer[..]
}

/// Verifies a sampled or decoded rollout. Truncated rollouts never verify.
pub fn verify(task: &TaskPrompt, rollout: &Rollout) -> bool {
    rollout.terminated && verify_tokens(task, &rollout.tokens, rollout.eos)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub tasks: Vec<TaskPrompt>,
    pub regime: Regime,
    pub seed: u64,
}

/// Generates a reproducible suite with prompt ids `0..n`.
pub fn gen_task_suite(regime: Regime, n: usize, modulus: u8, seed: u64) -> Result<TaskSuite> {
    gen_task_suite_from(regime, n, modulus, seed, 0)
}

/// Like [`gen_task_suite`], numbering prompts from `first_id`. Used to build
/// evaluation suites whose ids are disjoint from a training suite.
pub fn gen_task_suite_from(
    regime: Regime,
    n: usize,
    modulus: u8,
    seed: u64,
    first_id: u32,
) -> Result<TaskSuite> {
    if n == 0 {
        return Err(Error::invalid("task suite size must be at least 1"));
    }
    if regime == Regime::Mixed && n < 2 {
        return Err(Error::invalid("a mixed suite needs at least 2 tasks"));
    }
    if !(2..=MAX_MODULUS).contains(&modulus) {
        return Err(Error::invalid(format!(
            "modulus must be in 2..={MAX_MODULUS}, got {modulus}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tiers: Vec<Tier> = (0..n)
        .map(|_| match regime {
            Regime::Easy => Tier::Easy,
            Regime::Hard => Tier::Hard,
            Regime::Mixed => {
                if rng.gen_bool(0.5) {
                    Tier::Easy
                } else {
                    Tier::Hard
                }
            }
        })
        .collect();
    if regime == Regime::Mixed && tiers.iter().all(|t| *t == tiers[0]) {
        let flipped = match tiers[0] {
            Tier::Easy => Tier::Hard,
            Tier::Hard => Tier::Easy,
        };
        tiers[n - 1] = flipped;
    }
    // Problems are drawn without replacement within a tier until its m*m
    // operand pairs run out; duplicates would share policy rows.
    let pool = usize::from(modulus) * usize::from(modulus);
    let mut used: [BTreeSet<(u8, u8)>; 2] = [BTreeSet::new(), BTreeSet::new()];
    let tasks = tiers
        .into_iter()
        .enumerate()
        .map(|(i, tier)| {
            let seen = &mut used[tier as usize];
            if seen.len() == pool {
                seen.clear();
            }
            let (a, b) = loop {
                let pair = (rng.gen_range(0..modulus), rng.gen_range(0..modulus));
                if seen.insert(pair) {
                    break pair;
                }
            };
            let op = match tier {
                Tier::Easy => Op::Add,
                Tier::Hard => Op::Mul,
            };
            TaskPrompt::new(first_id + i as u32, a, b, op, modulus, tier)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskSuite {
        tasks,
        regime,
        seed,
    })
}

impl TaskSuite {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Writes the suite as JSON lines: one header line with the regime and
    /// seed, then one line per task.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let header = serde_json::json!({ "regime": self.regime, "seed": self.seed });
        writeln!(out, "{header}").map_err(|e| Error::io(path, e))?;
        for task in &self.tasks {
            let line = serde_json::to_string(task).expect("task serializes");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let bad = |line: usize, msg: String| Error::invalid(format!("{}:{line}: {msg}", path.display()));
        let header = lines
            .next()
            .ok_or_else(|| bad(1, "empty suite file".into()))?
            .map_err(|e| Error::io(path, e))?;
        let header: serde_json::Value =
            serde_json::from_str(&header).map_err(|e| bad(1, e.to_string()))?;
        let regime: Regime = serde_json::from_value(header["regime"].clone())
            .map_err(|e| bad(1, e.to_string()))?;
        let seed = header["seed"]
            .as_u64()
            .ok_or_else(|| bad(1, "missing seed".into()))?;
        let mut tasks = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: TaskPrompt = serde_json::from_str(&line).map_err(|e| bad(i + 2, e.to_string()))?;
            let t = TaskPrompt::new(t.prompt_id, t.operands.0, t.operands.1, t.op, t.modulus, t.tier)
                .map_err(|e| bad(i + 2, e.to_string()))?;
            tasks.push(t);
        }
        Ok(TaskSuite {
            tasks,
            regime,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rollout(tokens: Vec<Token>, terminated: bool) -> Rollout {
        let n = tokens.len();
        Rollout {
            tokens,
            token_logprobs: vec![-1.0; n],
            terminated,
            eos: 10,
            policy_version: 0,
        }
    }

    #[test]
    fn verify_examples() {
        let task = TaskPrompt::new(0, 2, 3, Op::Add, 10, Tier::Easy).unwrap();
        assert!(verify(&task, &rollout(vec![5, 10], true)));
        assert!(!verify(&task, &rollout(vec![4, 10], true)));
        assert!(!verify(&task, &rollout(vec![5, 5, 5], false)));
        // free tokens before the final answer group
        assert!(verify(&task, &rollout(vec![7, 1, 5, 10], true)));
        assert!(!verify(&task, &rollout(vec![10], true)));
    }

    #[test]
    fn hard_answer_is_base_m_product() {
        let task = TaskPrompt::new(0, 7, 8, Op::Mul, 10, Tier::Hard).unwrap();
        assert_eq!(task.answer(), vec![5, 6]);
        assert!(verify(&task, &rollout(vec![5, 6, 10], true)));
        assert!(!verify(&task, &rollout(vec![6, 10], true)));
        let small = TaskPrompt::new(0, 2, 3, Op::Mul, 10, Tier::Hard).unwrap();
        assert_eq!(small.answer(), vec![0, 6]);
    }

    #[test]
    fn suite_is_deterministic() {
        let a = gen_task_suite(Regime::Easy, 10, 10, 7).unwrap();
        let b = gen_task_suite(Regime::Easy, 10, 10, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.tasks.iter().all(|t| t.tier == Tier::Easy));
        let c = gen_task_suite(Regime::Easy, 10, 10, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mixed_suite_has_both_tiers() {
        let s = gen_task_suite(Regime::Mixed, 20, 10, 1).unwrap();
        assert!(s.tasks.iter().any(|t| t.tier == Tier::Easy));
        assert!(s.tasks.iter().any(|t| t.tier == Tier::Hard));
        for seed in 0..50 {
            let s = gen_task_suite(Regime::Mixed, 2, 10, seed).unwrap();
            assert_ne!(s.tasks[0].tier, s.tasks[1].tier);
        }
    }

    #[test]
    fn suite_errors() {
        assert!(gen_task_suite(Regime::Easy, 0, 10, 1).is_err());
        assert!(gen_task_suite(Regime::Mixed, 1, 10, 1).is_err());
        assert!(gen_task_suite(Regime::Easy, 3, 11, 1).is_err());
        assert!(TaskPrompt::new(0, 10, 1, Op::Add, 10, Tier::Easy).is_err());
    }

    #[test]
    fn prompt_ids_unique_and_offset() {
        let s = gen_task_suite_from(Regime::Hard, 5, 10, 3, 100).unwrap();
        let ids: Vec<u32> = s.tasks.iter().map(|t| t.prompt_id).collect();
        assert_eq!(ids, vec![100, 101, 102, 103, 104]);
    }

    #[test]
    fn task_key_text_round_trip() {
        let task = TaskPrompt::new(4, 3, 9, Op::Mul, 10, Tier::Hard).unwrap();
        let text = task.key().to_string();
        assert_eq!(text, "mul:3:9:10:hard");
        assert_eq!(text.parse::<TaskKey>().unwrap(), task.key());
        assert!("mul:3:19:10:hard".parse::<TaskKey>().is_err());
    }

    #[test]
    fn suite_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("suite.jsonl");
        let s = gen_task_suite(Regime::Mixed, 12, 7, 5).unwrap();
        s.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert_eq!(TaskSuite::read_jsonl(&path).unwrap(), s);
    }

    #[test]
    fn problems_are_distinct_until_the_pool_runs_out() {
        let suite = gen_task_suite(Regime::Hard, 40, 10, 0).unwrap();
        let keys: BTreeSet<TaskKey> = suite.tasks.iter().map(TaskPrompt::key).collect();
        assert_eq!(keys.len(), 40);
        // 2*2 = 4 distinct pairs; 6 tasks must repeat some
        let small = gen_task_suite(Regime::Easy, 6, 2, 0).unwrap();
        let keys: BTreeSet<TaskKey> = small.tasks.iter().map(TaskPrompt::key).collect();
        assert_eq!(keys.len(), 4);
    }
}
