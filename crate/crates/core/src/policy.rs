//! Tabular autoregressive softmax policy.
//!
//! Each context is the task's problem key plus the last `context_order`
//! generated tokens. A context owns one row of `V` logits; rows that were
//! never written read `default_logit` everywhere, so an empty table is the
//! uniform policy.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tasks::{TaskKey, TaskPrompt};

pub type Token = u16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
    eos: Token,
}

impl Vocab {
    pub fn new(size: usize, eos: Token) -> Result<Self> {
        if size < 2 {
            return Err(Error::invalid(format!(
                "vocabulary needs at least 2 tokens, got {size}"
            )));
        }
        if usize::from(eos) >= size {
            return Err(Error::invalid(format!(
                "eos token {eos} outside vocabulary of size {size}"
            )));
        }
        if size > usize::from(Token::MAX) {
            return Err(Error::invalid(format!("vocabulary of size {size} too large")));
        }
        Ok(Self { size, eos })
    }

    /// Vocabulary whose last token is EOS.
    pub fn with_trailing_eos(size: usize) -> Result<Self> {
        let eos = size
            .checked_sub(1)
            .and_then(|e| Token::try_from(e).ok())
            .ok_or_else(|| Error::invalid(format!("bad vocabulary size {size}")))?;
        Self::new(size, eos)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> Token {
        self.eos
    }

    pub fn tokens(&self) -> impl Iterator<Item = Token> {
        (0..self.size).map(|t| t as Token)
    }

    fn check(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| usize::from(t) >= self.size) {
            Some(t) => Err(Error::invalid(format!(
                "token {t} outside vocabulary of size {}",
                self.size
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContextKey {
    pub task: TaskKey,
    pub prefix: Vec<Token>,
}

impl ContextKey {
    /// Builds the key for `generated` so far, keeping only the last `order`
    /// tokens.
    pub fn new(task: TaskKey, generated: &[Token], order: usize) -> Self {
        let start = generated.len().saturating_sub(order);
        Self {
            task,
            prefix: generated[start..].to_vec(),
        }
    }
}

impl fmt::Display for ContextKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|", self.task)?;
        if self.prefix.is_empty() {
            return f.write_str("-");
        }
        for (i, t) in self.prefix.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for ContextKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (task, prefix) = s
            .split_once('|')
            .ok_or_else(|| Error::invalid(format!("malformed context key `{s}`")))?;
        let task = task.parse()?;
        let prefix = if prefix == "-" {
            Vec::new()
        } else {
            prefix
                .split('.')
                .map(|t| {
                    t.parse::<Token>()
                        .map_err(|_| Error::invalid(format!("malformed context key `{s}`")))
                })
                .collect::<Result<_>>()?
        };
        Ok(Self { task, prefix })
    }
}

/// One generated response with the log-probabilities recorded while sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub tokens: Vec<Token>,
    pub token_logprobs: Vec<f64>,
    /// True when the response ended with EOS, false when cut at `max_len`.
    pub terminated: bool,
    pub eos: Token,
    /// Parameter version of the policy that produced this rollout.
    pub policy_version: u64,
}

impl Rollout {
    pub fn length(&self) -> usize {
        self.tokens.len()
    }

    pub fn logprob(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }
}

/// Sparse gradient over policy logits, one dense row per touched context.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    rows: BTreeMap<ContextKey, Vec<f64>>,
}

impl Gradient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, ctx: &ContextKey, token: Token) -> f64 {
        self.rows
            .get(ctx)
            .map_or(0.0, |row| row[usize::from(token)])
    }

    pub fn row(&self, ctx: &ContextKey) -> Option<&[f64]> {
        self.rows.get(ctx).map(Vec::as_slice)
    }

    pub(crate) fn row_mut(&mut self, ctx: &ContextKey, width: usize) -> &mut Vec<f64> {
        if !self.rows.contains_key(ctx) {
            self.rows.insert(ctx.clone(), vec![0.0; width]);
        }
        self.rows.get_mut(ctx).expect("row just inserted")
    }

    pub fn rows(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// All `(context, token, value)` entries in key order.
    pub fn entries(&self) -> impl Iterator<Item = (&ContextKey, Token, f64)> {
        self.rows
            .iter()
            .flat_map(|(k, row)| row.iter().enumerate().map(move |(t, &v)| (k, t as Token, v)))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (ctx, row) in &other.rows {
            let dst = self.row_mut(ctx, row.len());
            for (d, s) in dst.iter_mut().zip(row) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.rows.values_mut() {
            row.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &Gradient) -> f64 {
        self.rows
            .iter()
            .filter_map(|(ctx, row)| other.rows.get(ctx).map(|o| (row, o)))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.rows.values().flatten().all(|v| v.is_finite())
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Log-softmax of a logit row, computed with the max-shift trick.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    vocab: Vocab,
    context_order: usize,
    default_logit: f64,
    rows: BTreeMap<ContextKey, Vec<f64>>,
    version: u64,
}

impl PolicyTable {
    pub fn new(vocab: Vocab, context_order: usize, default_logit: f64) -> Result<Self> {
        if !default_logit.is_finite() {
            return Err(Error::invalid("default_logit must be finite"));
        }
        Ok(Self {
            vocab,
            context_order,
            default_logit,
            rows: BTreeMap::new(),
            version: 0,
        })
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn context_order(&self) -> usize {
        self.context_order
    }

    pub fn default_logit(&self) -> f64 {
        self.default_logit
    }

    /// Number of parameter updates applied so far.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn context(&self, task: &TaskPrompt, generated: &[Token]) -> ContextKey {
        ContextKey::new(task.key(), generated, self.context_order)
    }

    /// Stored rows in key order. Contexts not listed read `default_logit`.
    pub fn stored_rows(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn logits(&self, ctx: &ContextKey) -> Vec<f64> {
        self.rows
            .get(ctx)
            .cloned()
            .unwrap_or_else(|| vec![self.default_logit; self.vocab.size])
    }

    pub fn logit(&self, ctx: &ContextKey, token: Token) -> f64 {
        self.rows
            .get(ctx)
            .map_or(self.default_logit, |row| row[usize::from(token)])
    }

    pub fn set_logit(&mut self, ctx: &ContextKey, token: Token, value: f64) {
        let width = self.vocab.size;
        let default = self.default_logit;
        self.rows
            .entry(ctx.clone())
            .or_insert_with(|| vec![default; width])[usize::from(token)] = value;
    }

    pub fn log_probs(&self, ctx: &ContextKey) -> Vec<f64> {
        match self.rows.get(ctx) {
            Some(row) => log_softmax(row),
            None => vec![-(self.vocab.size as f64).ln(); self.vocab.size],
        }
    }

    pub fn probs(&self, ctx: &ContextKey) -> Vec<f64> {
        self.log_probs(ctx).into_iter().map(f64::exp).collect()
    }

    /// Samples one response, stopping at EOS or after `max_len` tokens.
    pub fn sample_rollout<R: Rng + ?Sized>(
        &self,
        task: &TaskPrompt,
        rng: &mut R,
        max_len: usize,
    ) -> Rollout {
        self.generate(task, max_len, |logp| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (t, lp) in logp.iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    return t;
                }
            }
            // u landed in the rounding slack above the cumulative sum
            logp.iter()
                .rposition(|lp| lp.exp() > 0.0)
                .unwrap_or(logp.len() - 1)
        })
    }

    /// Argmax decoding; ties go to the smallest token id.
    pub fn greedy_decode(&self, task: &TaskPrompt, max_len: usize) -> Rollout {
        self.generate(task, max_len, |logp| {
            let mut best = 0;
            for (t, lp) in logp.iter().enumerate() {
                if *lp > logp[best] {
                    best = t;
                }
            }
            best
        })
    }

    fn generate(
        &self,
        task: &TaskPrompt,
        max_len: usize,
        mut pick: impl FnMut(&[f64]) -> usize,
    ) -> Rollout {
        let max_len = max_len.max(1);
        let eos = self.vocab.eos;
        let mut tokens = Vec::with_capacity(max_len);
        let mut token_logprobs = Vec::with_capacity(max_len);
        let mut terminated = false;
        while tokens.len() < max_len {
            let ctx = self.context(task, &tokens);
            let logp = self.log_probs(&ctx);
            let t = pick(&logp);
            tokens.push(t as Token);
            token_logprobs.push(logp[t]);
            if t as Token == eos {
                terminated = true;
                break;
            }
        }
        Rollout {
            tokens,
            token_logprobs,
            terminated,
            eos,
            policy_version: self.version,
        }
    }

    /// Visits each generation step of `tokens`, handing over the context and
    /// its log-probabilities.
    fn walk(
        &self,
        task: &TaskPrompt,
        tokens: &[Token],
        mut visit: impl FnMut(&ContextKey, &[f64], Token),
    ) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("token sequence is empty"));
        }
        self.vocab.check(tokens)?;
        for (i, &tok) in tokens.iter().enumerate() {
            let ctx = self.context(task, &tokens[..i]);
            let logp = self.log_probs(&ctx);
            visit(&ctx, &logp, tok);
        }
        Ok(())
    }

    /// Sum of per-token log-probabilities of `tokens` given `task`.
    pub fn sequence_logprob(&self, task: &TaskPrompt, tokens: &[Token]) -> Result<f64> {
        let mut total = 0.0;
        self.walk(task, tokens, |_, logp, tok| total += logp[usize::from(tok)])?;
        Ok(total)
    }

    /// Gradient of [`Self::sequence_logprob`] with respect to the logits.
    pub fn grad_logprob(&self, task: &TaskPrompt, tokens: &[Token]) -> Result<Gradient> {
        let mut grad = Gradient::new();
        self.accumulate_grad_logprob(task, tokens, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// `grad += weight * d/dtheta log pi(tokens | task)`.
    pub fn accumulate_grad_logprob(
        &self,
        task: &TaskPrompt,
        tokens: &[Token],
        weight: f64,
        grad: &mut Gradient,
    ) -> Result<()> {
        let width = self.vocab.size;
        self.walk(task, tokens, |ctx, logp, tok| {
            let row = grad.row_mut(ctx, width);
            for (b, (g, lp)) in row.iter_mut().zip(logp).enumerate() {
                let indicator = if b == usize::from(tok) { 1.0 } else { 0.0 };
                *g += weight * (indicator - lp.exp());
            }
        })
    }

    /// Summed categorical KL(self || reference) over the contexts visited
    /// while generating `tokens`.
    pub fn kl_to_reference(
        &self,
        reference: &PolicyTable,
        task: &TaskPrompt,
        tokens: &[Token],
    ) -> Result<f64> {
        self.check_compatible(reference)?;
        let mut total = 0.0;
        self.walk(task, tokens, |ctx, logp, _| {
            let ref_logp = reference.log_probs(ctx);
            total += categorical_kl(logp, &ref_logp);
        })?;
        Ok(total)
    }

    /// `grad += weight * d/dtheta KL(self || reference)` over visited contexts.
    pub fn accumulate_grad_kl(
        &self,
        reference: &PolicyTable,
        task: &TaskPrompt,
        tokens: &[Token],
        weight: f64,
        grad: &mut Gradient,
    ) -> Result<()> {
        self.check_compatible(reference)?;
        let width = self.vocab.size;
        self.walk(task, tokens, |ctx, logp, _| {
            let ref_logp = reference.log_probs(ctx);
            let kl = categorical_kl(logp, &ref_logp);
            let row = grad.row_mut(ctx, width);
            for ((g, lp), lq) in row.iter_mut().zip(logp).zip(&ref_logp) {
                *g += weight * lp.exp() * ((lp - lq) - kl);
            }
        })
    }

    fn check_compatible(&self, other: &PolicyTable) -> Result<()> {
        if self.vocab != other.vocab || self.context_order != other.context_order {
            return Err(Error::invalid(
                "policies differ in vocabulary or context order",
            ));
        }
        Ok(())
    }

    /// Gradient-ascent update `theta += lr * grad`. Bumps the version.
    pub fn apply_update(&mut self, grad: &Gradient, lr: f64) {
        if lr != 0.0 {
            let width = self.vocab.size;
            let default = self.default_logit;
            for (ctx, g) in grad.rows() {
                let row = self
                    .rows
                    .entry(ctx.clone())
                    .or_insert_with(|| vec![default; width]);
                for (theta, dg) in row.iter_mut().zip(g) {
                    *theta += lr * dg;
                }
            }
        }
        self.version += 1;
    }

    /// Returns a copy with every stored logit multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.default_logit *= factor;
        for row in out.rows.values_mut() {
            row.iter_mut().for_each(|l| *l *= factor);
        }
        out
    }

    pub(crate) fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    pub(crate) fn insert_row(&mut self, ctx: ContextKey, row: Vec<f64>) {
        self.rows.insert(ctx, row);
    }
}

fn categorical_kl(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter()
        .zip(logq)
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum::<f64>()
        .max(0.0)
}
