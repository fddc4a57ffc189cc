//! Metric records, printed one per line as `key=value` pairs.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Quality {
    Top1(f64),
    Perplexity(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub split: Split,
    /// Mean cross-entropy in nats.
    pub loss: f64,
    pub quality: Quality,
    pub seconds: f64,
}

impl MetricRecord {
    /// The same record without wall-clock time, for determinism comparisons.
    pub fn timeless(mut self) -> Self {
        self.seconds = 0.0;
        self
    }
}

// `{:?}` on f64 prints the shortest string that parses back to the same bits.
impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} split={} loss={:?}", self.step, self.split.as_str(), self.loss)?;
        match self.quality {
            Quality::Top1(a) => write!(f, " top1={a:?}")?,
            Quality::Perplexity(p) => write!(f, " ppl={p:?}")?,
        }
        write!(f, " seconds={:.3}", self.seconds)
    }
}

impl FromStr for MetricRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = |m: &str| Error::Input(format!("metric line {line:?}: {m}"));
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad("bad number"));
        let (mut step, mut split, mut loss, mut quality, mut seconds) = (None, None, None, None, None);
        for pair in line.split_whitespace() {
            let (k, v) = pair.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            match k {
                "step" => step = Some(v.parse::<usize>().map_err(|_| bad("bad step"))?),
                "split" => {
                    split = Some(match v {
                        "train" => Split::Train,
                        "val" => Split::Val,
                        _ => return Err(bad("unknown split")),
                    })
                }
                "loss" => loss = Some(num(v)?),
                "top1" => quality = Some(Quality::Top1(num(v)?)),
                "ppl" => quality = Some(Quality::Perplexity(num(v)?)),
                "seconds" => seconds = Some(num(v)?),
                _ => {}
            }
        }
        Ok(Self {
            step: step.ok_or_else(|| bad("missing step"))?,
            split: split.ok_or_else(|| bad("missing split"))?,
            loss: loss.ok_or_else(|| bad("missing loss"))?,
            quality: quality.ok_or_else(|| bad("missing top1/ppl"))?,
            seconds: seconds.unwrap_or(0.0),
        })
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn top1(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let hits = rows.iter().zip(labels).filter(|(r, &l)| argmax(r) == l).count();
    hits as f64 / rows.len() as f64
}

/// `exp` of the mean per-token cross-entropy in nats.
pub fn perplexity(total_nll: f64, tokens: usize) -> f64 {
    (total_nll / tokens as f64).exp()
}
