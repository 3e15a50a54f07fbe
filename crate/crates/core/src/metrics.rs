//! Edit distance and recognition metrics: CER, SER and CER@TopN.

use std::fmt;

use crate::error::{Error, Result};

/// Unit-cost edit distance between two sequences.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character-level edit distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    edit_distance(&a, &b)
}

/// Edit distance normalized by the ground-truth length. An empty ground truth
/// scores 0 against an empty hypothesis and 1 otherwise.
pub fn cer(gt: &str, hyp: &str) -> f64 {
    let n = gt.chars().count();
    if n == 0 {
        return if hyp.is_empty() { 0.0 } else { 1.0 };
    }
    levenshtein(gt, hyp) as f64 / n as f64
}

/// Ground truth with ranked candidate transcripts, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub truth: String,
    pub candidates: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Total edits of the top candidate over total ground-truth characters.
    pub cer: f64,
    /// Mean of per-line CERs.
    pub mean_line_cer: f64,
    /// Fraction of lines whose top candidate is not exact.
    pub ser: f64,
    /// `cer_at_top_n[k]` uses the best of the first `k + 1` candidates.
    pub cer_at_top_n: Vec<f64>,
    pub sequences: usize,
    pub characters: usize,
    pub edits: usize,
}

impl MetricsReport {
    /// Aggregates scored lines; CER@TopN is reported for `N = 1..=top_n`.
    pub fn from_scored(lines: &[Scored], top_n: usize) -> Result<Self> {
        if lines.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let top_n = top_n.max(1);
        let mut characters = 0;
        let mut edits = 0;
        let mut line_cer = 0.0;
        let mut wrong = 0;
        let mut top_edits = vec![0usize; top_n];
        let mut empty_lines = vec![0.0; top_n];
        for line in lines {
            let gt: Vec<char> = line.truth.chars().collect();
            let top = line.candidates.first().map(String::as_str).unwrap_or("");
            let e = levenshtein(&line.truth, top);
            line_cer += cer(&line.truth, top);
            wrong += usize::from(e > 0);
            let mut best = usize::MAX;
            let mut best_empty = f64::MAX;
            for k in 0..top_n {
                let cand = line.candidates.get(k).or(line.candidates.last());
                let cand = cand.map(String::as_str).unwrap_or("");
                let c: Vec<char> = cand.chars().collect();
                best = best.min(edit_distance(&gt, &c));
                best_empty = best_empty.min(cer(&line.truth, cand));
                if !gt.is_empty() {
                    top_edits[k] += best;
                }
                empty_lines[k] += best_empty;
            }
            if !gt.is_empty() {
                characters += gt.len();
                edits += e;
            }
        }
        let n = lines.len() as f64;
        let ratio = |e: usize, fallback: f64| {
            if characters > 0 {
                e as f64 / characters as f64
            } else {
                fallback
            }
        };
        let mean_line_cer = line_cer / n;
        let cer_at_top_n = if characters > 0 {
            top_edits.into_iter().map(|e| ratio(e, 0.0)).collect()
        } else {
            empty_lines.iter().map(|s| s / n).collect()
        };
        Ok(MetricsReport {
            cer: ratio(edits, mean_line_cer),
            mean_line_cer,
            ser: wrong as f64 / n,
            cer_at_top_n,
            sequences: lines.len(),
            characters,
            edits,
        })
    }

    /// Machine-readable `key=value` lines.
    pub fn key_values(&self) -> Vec<String> {
        let mut out = vec![
            format!("cer={:?}", self.cer),
            format!("mean_line_cer={:?}", self.mean_line_cer),
            format!("ser={:?}", self.ser),
        ];
        for (k, v) in self.cer_at_top_n.iter().enumerate() {
            out.push(format!("cer_at_top{}={:?}", k + 1, v));
        }
        out.push(format!("sequences={}", self.sequences));
        out.push(format!("characters={}", self.characters));
        out.push(format!("edits={}", self.edits));
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>10}", "metric", "value")?;
        writeln!(f, "{:<16} {:>9.3}%", "CER", 100.0 * self.cer)?;
        writeln!(f, "{:<16} {:>9.3}%", "mean line CER", 100.0 * self.mean_line_cer)?;
        writeln!(f, "{:<16} {:>9.3}%", "SER", 100.0 * self.ser)?;
        for (k, v) in self.cer_at_top_n.iter().enumerate() {
            writeln!(f, "{:<16} {:>9.3}%", format!("CER@Top{}", k + 1), 100.0 * v)?;
        }
        write!(
            f,
            "{} sequences, {} characters, {} edits",
            self.sequences, self.characters, self.edits
        )
    }
}
