//! Caption-quality metrics: corpus BLEU, ROUGE-N, ROUGE-L and exact-match METEOR.
//!
//! All scores live on the [0, 1] scale. Display scaling (x100) is applied only
//! when rendering reports.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::read_caption_corpus;
use crate::error::{Error, Result};

/// Lowercased tokens with no empty entries.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    /// Builds a sequence from already-normalized tokens. Empty tokens are dropped
    /// and the rest are lowercased.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        TokenSequence(
            tokens
                .into_iter()
                .map(|t| t.as_ref().to_lowercase())
                .filter(|t| !t.is_empty())
                .collect(),
        )
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Splits on every character that is not a letter, digit or apostrophe, after
/// lowercasing.
pub fn tokenize_for_metrics(text: &str) -> TokenSequence {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    TokenSequence(tokens)
}

/// One candidate with its references.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionPair {
    pub candidate: TokenSequence,
    pub references: Vec<TokenSequence>,
}

impl CaptionPair {
    pub fn new(candidate: TokenSequence, references: Vec<TokenSequence>) -> Self {
        CaptionPair {
            candidate,
            references,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuOptions {
    pub max_n: usize,
    /// Replace zero corpus precisions by `1 / (2 * candidate n-gram count)`.
    pub smoothing: bool,
}

impl Default for BleuOptions {
    fn default() -> Self {
        BleuOptions {
            max_n: 4,
            smoothing: false,
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for window in tokens.windows(n) {
        *counts.entry(window).or_insert(0) += 1;
    }
    counts
}

fn ngram_total(len: usize, n: usize) -> usize {
    (len + 1).saturating_sub(n)
}

/// Corpus-level BLEU with clipped counts pooled over all pairs.
pub fn bleu_corpus(pairs: &[CaptionPair], options: BleuOptions) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("BLEU needs at least one pair".into()));
    }
    if options.max_n == 0 {
        return Err(Error::InvalidInput("BLEU max_n must be >= 1".into()));
    }
    let mut matched = vec![0usize; options.max_n];
    let mut totals = vec![0usize; options.max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for (idx, pair) in pairs.iter().enumerate() {
        if pair.references.is_empty() {
            return Err(Error::InvalidInput(format!(
                "pair {idx} has no references"
            )));
        }
        let cand = pair.candidate.tokens();
        cand_len += cand.len();
        // closest reference length, shorter wins ties
        let closest = pair
            .references
            .iter()
            .map(TokenSequence::len)
            .min_by_key(|&r| (r.abs_diff(cand.len()), r))
            .unwrap_or(0);
        ref_len += closest;

        for n in 1..=options.max_n {
            let cand_counts = ngram_counts(cand, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for reference in &pair.references {
                for (gram, count) in ngram_counts(reference.tokens(), n) {
                    let slot = max_ref.entry(gram).or_insert(0);
                    *slot = (*slot).max(count);
                }
            }
            let clipped: usize = cand_counts
                .iter()
                .map(|(gram, &count)| count.min(max_ref.get(gram).copied().unwrap_or(0)))
                .sum();
            matched[n - 1] += clipped;
            totals[n - 1] += ngram_total(cand.len(), n);
        }
    }

    if cand_len == 0 {
        return Ok(0.0);
    }

    let mut log_sum = 0.0;
    for n in 0..options.max_n {
        let precision = if matched[n] > 0 {
            matched[n] as f64 / totals[n] as f64
        } else if options.smoothing && totals[n] > 0 {
            1.0 / (2.0 * totals[n] as f64)
        } else {
            return Ok(0.0);
        };
        log_sum += precision.ln();
    }
    let geo_mean = (log_sum / options.max_n as f64).exp();
    let brevity = (1.0 - ref_len as f64 / cand_len as f64).exp().min(1.0);
    Ok((geo_mean * brevity).clamp(0.0, 1.0))
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn rouge_n_single(candidate: &[String], reference: &[String], n: usize) -> f64 {
    let cand_total = ngram_total(candidate.len(), n);
    let ref_total = ngram_total(reference.len(), n);
    if cand_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let ref_counts = ngram_counts(reference, n);
    let overlap: usize = ngram_counts(candidate, n)
        .iter()
        .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    f1(
        overlap as f64 / cand_total as f64,
        overlap as f64 / ref_total as f64,
    )
}

/// ROUGE-N F1 against the best-scoring reference.
pub fn rouge_n(candidate: &TokenSequence, references: &[TokenSequence], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    references
        .iter()
        .map(|r| rouge_n_single(candidate.tokens(), r.tokens(), n))
        .fold(0.0, f64::max)
}

/// Length of the longest common subsequence, two-row DP.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 against the best-scoring reference.
pub fn rouge_l(candidate: &TokenSequence, references: &[TokenSequence]) -> f64 {
    let cand = candidate.tokens();
    references
        .iter()
        .map(|r| {
            let reference = r.tokens();
            if cand.is_empty() || reference.is_empty() {
                return 0.0;
            }
            let l = lcs_len(cand, reference) as f64;
            f1(l / cand.len() as f64, l / reference.len() as f64)
        })
        .fold(0.0, f64::max)
}

/// Greedy exact alignment: each candidate token, left to right, takes the first
/// unused reference position with the same surface form.
fn align_exact(candidate: &[String], reference: &[String]) -> Vec<Option<usize>> {
    let mut used = vec![false; reference.len()];
    candidate
        .iter()
        .map(|tok| {
            let pos = reference
                .iter()
                .enumerate()
                .position(|(j, r)| !used[j] && r == tok)?;
            used[pos] = true;
            Some(pos)
        })
        .collect()
}

fn meteor_single(candidate: &[String], reference: &[String]) -> f64 {
    let alignment = align_exact(candidate, reference);
    let matches = alignment.iter().flatten().count();
    if matches == 0 {
        return 0.0;
    }
    // a chunk continues while both sides advance by exactly one position
    let mut chunks = 0usize;
    let mut prev: Option<(usize, usize)> = None;
    for (i, aligned) in alignment.iter().enumerate() {
        match aligned {
            Some(j) => {
                let continues = matches!(prev, Some((pi, pj)) if pi + 1 == i && pj + 1 == *j);
                if !continues {
                    chunks += 1;
                }
                prev = Some((i, *j));
            }
            None => prev = None,
        }
    }
    let m = matches as f64;
    let precision = m / candidate.len() as f64;
    let recall = m / reference.len() as f64;
    let f_mean = 10.0 * precision * recall / (recall + 9.0 * precision);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    f_mean * (1.0 - penalty)
}

/// METEOR with exact surface matching only; best score over references.
pub fn meteor(candidate: &TokenSequence, references: &[TokenSequence]) -> f64 {
    references
        .iter()
        .map(|r| meteor_single(candidate.tokens(), r.tokens()))
        .fold(0.0, f64::max)
}

/// The five caption metrics for one corpus, on the [0, 1] scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub meteor: f64,
    pub pair_count: usize,
}

impl MetricReport {
    /// Metric name/value rows in report order.
    pub fn rows(&self) -> [(&'static str, f64); 5] {
        [
            ("BLEU", self.bleu),
            ("ROUGE-1", self.rouge1),
            ("ROUGE-2", self.rouge2),
            ("ROUGE-L", self.rouge_l),
            ("METEOR", self.meteor),
        ]
    }

    pub fn to_csv(&self, scale: f64) -> String {
        let mut out = String::from("metric,value\n");
        for (name, value) in self.rows() {
            out.push_str(&format!("{name},{:.6}\n", value * scale));
        }
        out
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>10}", "metric", "value")?;
        for (name, value) in self.rows() {
            writeln!(f, "{name:<8} {value:>10.4}")?;
        }
        write!(f, "{:<8} {:>10}", "pairs", self.pair_count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    pub bleu: BleuOptions,
}

/// Corpus BLEU plus per-pair means of ROUGE-1/2/L and METEOR.
pub fn evaluate_pairs(pairs: &[CaptionPair], options: EvalOptions) -> Result<MetricReport> {
    let bleu = bleu_corpus(pairs, options.bleu)?;
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(&CaptionPair) -> f64| pairs.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        bleu,
        rouge1: mean(&|p| rouge_n(&p.candidate, &p.references, 1)),
        rouge2: mean(&|p| rouge_n(&p.candidate, &p.references, 2)),
        rouge_l: mean(&|p| rouge_l(&p.candidate, &p.references)),
        meteor: mean(&|p| meteor(&p.candidate, &p.references)),
        pair_count: pairs.len(),
    })
}

/// Loads a caption-corpus JSONL file and scores it.
pub fn evaluate_caption_file(path: &Path, options: EvalOptions) -> Result<MetricReport> {
    let records = read_caption_corpus(path)?;
    if records.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: caption corpus is empty",
            path.display()
        )));
    }
    let pairs: Vec<CaptionPair> = records
        .iter()
        .map(|r| {
            CaptionPair::new(
                tokenize_for_metrics(&r.candidate),
                r.references.iter().map(|s| tokenize_for_metrics(s)).collect(),
            )
        })
        .collect();
    if let Some(rec) = records.iter().find(|r| r.references.is_empty()) {
        return Err(Error::InvalidInput(format!(
            "{}: pair {} has no references",
            path.display(),
            rec.id
        )));
    }
    evaluate_pairs(&pairs, options)
}
