//! Sorted, line-delimited policy dumps.
//!
//! ```text
//! # confclip-policy vocab=11 eos=10 context_order=2 default_logit=0 version=300
//! add:2:3:10:easy|-<TAB>5<TAB>1.25
//! ```
//!
//! One tab-separated line per stored `(context, token, logit)`, in
//! context-key order then token order. Logits use Rust's shortest round-trip
//! float formatting, so a dump reloads bit-for-bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::{ContextKey, PolicyTable, Token, Vocab};

const MAGIC: &str = "# confclip-policy";

pub fn checkpoint_text(policy: &PolicyTable) -> String {
    let vocab = policy.vocab();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{MAGIC} vocab={} eos={} context_order={} default_logit={} version={}",
        vocab.size(),
        vocab.eos(),
        policy.context_order(),
        policy.default_logit(),
        policy.version()
    );
    for (ctx, row) in policy.stored_rows() {
        for (tok, logit) in row.iter().enumerate() {
            let _ = writeln!(out, "{ctx}\t{tok}\t{logit}");
        }
    }
    out
}

pub fn save_checkpoint(policy: &PolicyTable, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_text(policy)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text, path)
}

pub(crate) fn parse_checkpoint(text: &str, path: &Path) -> Result<PolicyTable> {
    let bad = |line: usize, msg: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "empty file"))?;
    let fields = header
        .strip_prefix(MAGIC)
        .ok_or_else(|| bad(1, "missing header"))?;
    let mut kv = BTreeMap::new();
    for part in fields.split_whitespace() {
        let (k, v) = part.split_once('=').ok_or_else(|| bad(1, "malformed header field"))?;
        kv.insert(k, v);
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(1, &format!("header lacks `{k}`")));
    let size: usize = get("vocab")?.parse().map_err(|_| bad(1, "bad vocab"))?;
    let eos: Token = get("eos")?.parse().map_err(|_| bad(1, "bad eos"))?;
    let order: usize = get("context_order")?.parse().map_err(|_| bad(1, "bad context_order"))?;
    let default: f64 = get("default_logit")?.parse().map_err(|_| bad(1, "bad default_logit"))?;
    let version: u64 = get("version")?.parse().map_err(|_| bad(1, "bad version"))?;
    let vocab = Vocab::new(size, eos).map_err(|e| bad(1, &e.to_string()))?;
    let mut policy = PolicyTable::new(vocab, order, default).map_err(|e| bad(1, &e.to_string()))?;

    let mut rows: BTreeMap<ContextKey, Vec<Option<f64>>> = BTreeMap::new();
    let mut last_line_of: BTreeMap<ContextKey, usize> = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(ctx), Some(tok), Some(logit), None) = (cols.next(), cols.next(), cols.next(), cols.next())
        else {
            return Err(bad(lineno, "expected 3 tab-separated columns"));
        };
        let ctx: ContextKey = ctx.parse().map_err(|e: Error| bad(lineno, &e.to_string()))?;
        if ctx.prefix.len() > order {
            return Err(bad(lineno, "context prefix longer than context order"));
        }
        let tok: usize = tok.parse().map_err(|_| bad(lineno, "bad token id"))?;
        if tok >= size {
            return Err(bad(lineno, "token id outside vocabulary"));
        }
        let logit: f64 = logit.parse().map_err(|_| bad(lineno, "bad logit"))?;
        if !logit.is_finite() {
            return Err(bad(lineno, "non-finite logit"));
        }
        let row = rows.entry(ctx.clone()).or_insert_with(|| vec![None; size]);
        if row[tok].replace(logit).is_some() {
            return Err(bad(lineno, "duplicate entry"));
        }
        last_line_of.insert(ctx, lineno);
    }
    for (ctx, row) in rows {
        if row.iter().any(Option::is_none) {
            let line = last_line_of[&ctx];
            return Err(bad(line, &format!("context {ctx} has an incomplete row")));
        }
        policy.insert_row(ctx, row.into_iter().map(|v| v.expect("checked")).collect());
    }
    policy.set_version(version);
    Ok(policy)
}
