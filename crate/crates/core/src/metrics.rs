//! Per-step training aggregates and their CSV / JSONL emission.
//!
//! `correctness_reward_plot` counts a wrong answer as 0 whatever the reward
//! variant, so curves from different shapers share one axis. The actual
//! training signal is kept separately in `shaped_reward_mean`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{self, Group};

pub const CSV_HEADER: [&str; 7] = [
    "step",
    "correctness_reward_plot",
    "shaped_reward_mean",
    "confidence_mean",
    "response_length_mean",
    "degenerate_fraction",
    "accuracy_eval",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub correctness_reward_plot: f64,
    pub shaped_reward_mean: f64,
    pub confidence_mean: f64,
    pub response_length_mean: f64,
    pub degenerate_fraction: f64,
    pub accuracy_eval: Option<f64>,
}

/// Greedy-decoding evaluation summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_length: f64,
    pub mean_confidence: f64,
}

pub fn record(step: usize, groups: &[Group], eval: Option<&EvalReport>) -> Result<MetricsRecord> {
    if groups.is_empty() {
        return Err(Error::invalid("cannot record metrics for an empty batch"));
    }
    let mut n = 0usize;
    let mut correct = 0usize;
    let (mut shaped, mut conf, mut len) = (0.0, 0.0, 0.0);
    for g in groups {
        for i in 0..g.size() {
            n += 1;
            correct += usize::from(g.correct[i]);
            shaped += g.shaped[i];
            conf += g.confidence[i];
            len += g.rollouts[i].length() as f64;
        }
    }
    let n_f = n as f64;
    Ok(MetricsRecord {
        step,
        correctness_reward_plot: correct as f64 / n_f,
        shaped_reward_mean: shaped / n_f,
        confidence_mean: conf / n_f,
        response_length_mean: len / n_f,
        degenerate_fraction: optim::degenerate_fraction(groups)?,
        accuracy_eval: eval.map(|e| e.accuracy),
    })
}

/// Trailing moving average; the first `window - 1` entries average the
/// available prefix.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..series.len())
        .map(|i| {
            let start = (i + 1).saturating_sub(window);
            let slice = &series[start..=i];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricsFormat {
    Csv,
    Jsonl,
}

impl FromStr for MetricsFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(MetricsFormat::Csv),
            "jsonl" => Ok(MetricsFormat::Jsonl),
            other => Err(Error::invalid(format!("unknown metrics format `{other}`"))),
        }
    }
}

/// Rounds to 6 significant digits; the result prints in its shortest form.
pub fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

fn render(x: f64) -> String {
    let r = round_sig6(x);
    if r == 0.0 {
        // avoid "-0"
        "0".to_string()
    } else {
        r.to_string()
    }
}

/// Streams records to disk, flushing after each one so an interrupted run
/// leaves a valid prefix.
pub struct MetricsWriter {
    path: PathBuf,
    format: MetricsFormat,
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Creates (truncates) the file and writes the CSV header.
    pub fn create(path: &Path, format: MetricsFormat) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            format,
            out: BufWriter::new(file),
        };
        if format == MetricsFormat::Csv {
            let header = CSV_HEADER.join(",");
            w.write_line(&header)?;
        }
        Ok(w)
    }

    /// Opens an existing file for appending; no header is written.
    pub fn append(path: &Path, format: MetricsFormat) -> Result<Self> {
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            format,
            out: BufWriter::new(file),
        })
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        let line = match self.format {
            MetricsFormat::Csv => {
                let fields = [
                    r.step.to_string(),
                    render(r.correctness_reward_plot),
                    render(r.shaped_reward_mean),
                    render(r.confidence_mean),
                    render(r.response_length_mean),
                    render(r.degenerate_fraction),
                    r.accuracy_eval.map(render).unwrap_or_default(),
                ];
                let mut w = csv::WriterBuilder::new()
                    .has_headers(false)
                    .terminator(csv::Terminator::Any(b'\n'))
                    .from_writer(Vec::new());
                w.write_record(&fields).expect("in-memory csv write");
                let bytes = w.into_inner().expect("in-memory csv flush");
                String::from_utf8(bytes)
                    .expect("ascii csv")
                    .trim_end()
                    .to_string()
            }
            MetricsFormat::Jsonl => {
                let rounded = MetricsRecord {
                    step: r.step,
                    correctness_reward_plot: round_sig6(r.correctness_reward_plot),
                    shaped_reward_mean: round_sig6(r.shaped_reward_mean),
                    confidence_mean: round_sig6(r.confidence_mean),
                    response_length_mean: round_sig6(r.response_length_mean),
                    degenerate_fraction: round_sig6(r.degenerate_fraction),
                    accuracy_eval: r.accuracy_eval.map(round_sig6),
                };
                serde_json::to_string(&rounded).expect("record serializes")
            }
        };
        self.write_line(&line)
    }
}

pub fn emit(records: &[MetricsRecord], path: &Path, format: MetricsFormat) -> Result<()> {
    let mut w = MetricsWriter::create(path, format)?;
    for r in records {
        w.write(r)?;
    }
    Ok(())
}

/// Reads a file written by [`emit`] or [`MetricsWriter`].
pub fn read_metrics(path: &Path, format: MetricsFormat) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: String| Error::invalid(format!("{}:{line}: {msg}", path.display()));
    match format {
        MetricsFormat::Csv => {
            let mut rdr = csv::Reader::from_reader(file);
            let headers = rdr.headers().map_err(|e| bad(1, e.to_string()))?.clone();
            if headers.iter().ne(CSV_HEADER.iter().copied()) {
                return Err(bad(1, format!("unexpected header {headers:?}")));
            }
            let mut out = Vec::new();
            for (i, row) in rdr.records().enumerate() {
                let line = i + 2;
                let row = row.map_err(|e| bad(line, e.to_string()))?;
                let num = |idx: usize| -> Result<f64> {
                    row[idx].parse().map_err(|_| bad(line, format!("bad number `{}`", &row[idx])))
                };
                out.push(MetricsRecord {
                    step: row[0].parse().map_err(|_| bad(line, "bad step".into()))?,
                    correctness_reward_plot: num(1)?,
                    shaped_reward_mean: num(2)?,
                    confidence_mean: num(3)?,
                    response_length_mean: num(4)?,
                    degenerate_fraction: num(5)?,
                    accuracy_eval: if row[6].is_empty() { None } else { Some(num(6)?) },
                });
            }
            Ok(out)
        }
        MetricsFormat::Jsonl => BufReader::new(file)
            .lines()
            .enumerate()
            .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
            .map(|(i, l)| {
                let l = l.map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&l).map_err(|e| bad(i + 1, e.to_string()))
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Group;
    use crate::policy::Rollout;
    use crate::rewards::RewardSpec;
    use crate::tasks::{Op, TaskPrompt, Tier};

    fn rollout(tokens: Vec<u16>, lp: f64) -> Rollout {
        let n = tokens.len();
        Rollout {
            terminated: tokens.last() == Some(&10),
            tokens,
            token_logprobs: vec![lp; n],
            eos: 10,
            policy_version: 0,
        }
    }

    fn task() -> TaskPrompt {
        TaskPrompt::new(0, 2, 3, Op::Add, 10, Tier::Easy).unwrap()
    }

    #[test]
    fn all_correct_batch() {
        let g = Group::build(task(), vec![rollout(vec![5, 10], -0.1); 3], RewardSpec::Binary01, 1e-8)
            .unwrap();
        let r = record(0, &[g], None).unwrap();
        assert_eq!(r.correctness_reward_plot, 1.0);
        assert_eq!(r.degenerate_fraction, 1.0);
        assert_eq!(r.response_length_mean, 2.0);
        assert!(record(0, &[], None).is_err());
    }

    #[test]
    fn wrong_batch_under_conf_sign() {
        let lp = 0.4f64.ln();
        let g = Group::build(task(), vec![rollout(vec![4, 10], lp); 4], RewardSpec::ConfSign, 1e-8)
            .unwrap();
        let r = record(3, &[g], None).unwrap();
        assert!((r.shaped_reward_mean + 0.4).abs() < 1e-12);
        assert_eq!(r.correctness_reward_plot, 0.0);
        assert!((r.confidence_mean - 0.4).abs() < 1e-12);
    }

    #[test]
    fn plot_reward_is_rollout_accuracy() {
        let half = Group::build(
            task(),
            vec![rollout(vec![5, 10], -0.1), rollout(vec![1, 10], -0.1)],
            RewardSpec::ConfClip { epsilon: 0.2 },
            1e-8,
        )
        .unwrap();
        let full = Group::build(task(), vec![rollout(vec![5, 10], -0.1); 2], RewardSpec::Binary01, 1e-8)
            .unwrap();
        let r = record(1, &[half, full], None).unwrap();
        assert_eq!(r.correctness_reward_plot, 0.75);
    }

    #[test]
    fn moving_average_examples() {
        let s = [0.3, 0.1, 0.7, 0.2];
        assert_eq!(moving_average(&s, 1), s.to_vec());
        let m = moving_average(&[0.0, 0.0, 0.0, 0.0, 1.0], 5);
        assert!((m[4] - 0.2).abs() < 1e-15);
        assert_eq!(moving_average(&[2.5; 7], 3), vec![2.5; 7]);
        let warm = moving_average(&[1.0, 3.0, 5.0], 5);
        assert_eq!(warm, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn sig6_rendering() {
        assert_eq!(render(0.123456789), "0.123457");
        assert_eq!(render(1234567.0), "1234570");
        assert_eq!(render(-0.0), "0");
        assert_eq!(render(1.0), "1");
    }

    fn sample_records() -> Vec<MetricsRecord> {
        (0..4)
            .map(|i| MetricsRecord {
                step: i,
                correctness_reward_plot: i as f64 / 7.0,
                shaped_reward_mean: -0.3333333333 * i as f64,
                confidence_mean: 0.09090909 + i as f64 * 0.1,
                response_length_mean: 1.0 + i as f64 / 3.0,
                degenerate_fraction: 0.0625 * i as f64,
                accuracy_eval: if i % 2 == 0 { Some(0.5 + i as f64 / 9.0) } else { None },
            })
            .collect()
    }

    #[test]
    fn emit_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let records = sample_records();
        for format in [MetricsFormat::Csv, MetricsFormat::Jsonl] {
            let path = dir.path().join(format!("m.{format:?}"));
            emit(&records, &path, format).unwrap();
            let text = std::fs::read_to_string(&path).unwrap();
            let header = usize::from(format == MetricsFormat::Csv);
            assert_eq!(text.lines().count(), records.len() + header);
            let back = read_metrics(&path, format).unwrap();
            assert_eq!(back.len(), records.len());
            for (a, b) in records.iter().zip(&back) {
                assert_eq!(a.step, b.step);
                assert_eq!(round_sig6(a.confidence_mean), b.confidence_mean);
                assert_eq!(round_sig6(a.shaped_reward_mean), b.shaped_reward_mean);
                assert_eq!(a.accuracy_eval.map(round_sig6), b.accuracy_eval);
            }
        }
    }

    #[test]
    fn empty_emission() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("m.csv");
        emit(&[], &csv_path, MetricsFormat::Csv).unwrap();
        assert_eq!(std::fs::read_to_string(&csv_path).unwrap(), CSV_HEADER.join(",") + "\n");
        let jsonl = dir.path().join("m.jsonl");
        emit(&[], &jsonl, MetricsFormat::Jsonl).unwrap();
        assert!(std::fs::read_to_string(&jsonl).unwrap().is_empty());
    }

    #[test]
    fn append_keeps_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let records = sample_records();
        emit(&records[..2], &path, MetricsFormat::Csv).unwrap();
        let mut w = MetricsWriter::append(&path, MetricsFormat::Csv).unwrap();
        for r in &records[2..] {
            w.write(r).unwrap();
        }
        assert_eq!(read_metrics(&path, MetricsFormat::Csv).unwrap().len(), 4);
    }

    #[test]
    fn unwritable_path_names_the_path() {
        let err = emit(&[], Path::new("/nonexistent-dir/x.csv"), MetricsFormat::Csv).unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/x.csv"));
    }
}
