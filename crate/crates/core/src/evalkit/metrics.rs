//! Response-quality metrics against human references.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use crate::error::{Error, Result};

/// Splits text for n-gram metrics: each CJK character is a token, runs of
/// other alphanumerics form one (lowercased) token, other punctuation marks
/// are tokens of their own, whitespace separates.
pub fn tokenize_for_metrics(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<String>| {
        if !word.is_empty() {
            out.push(std::mem::take(word).to_lowercase());
        }
    };
    for c in text.chars() {
        if c.is_whitespace() {
            flush(&mut word, &mut out);
        } else if is_cjk(c) {
            flush(&mut word, &mut out);
            out.push(c.to_string());
        } else if c.is_alphanumeric() || c == '\'' {
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            out.push(c.to_string());
        }
    }
    flush(&mut word, &mut out);
    out
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF | 0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x20000..=0x2FA1F)
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Sentence-level, single-reference BLEU up to order `n`: geometric mean of
/// clipped n-gram precisions for orders 1..=n times the brevity penalty
/// `exp(1 - r/c)` when the candidate is shorter. Orders the candidate is
/// too short to contain are left out of the mean.
pub fn bleu_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidInput("BLEU order must be at least 1".into()));
    }
    if reference.is_empty() {
        return Err(Error::InvalidInput("empty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for k in 1..=n.min(candidate.len()) {
        let cand = ngram_counts(candidate, k);
        let refc = ngram_counts(reference, k);
        let clipped: usize = cand
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        let total = candidate.len() + 1 - k;
        log_sum += (clipped as f64 / total as f64).ln();
        orders += 1;
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * (log_sum / f64::from(orders)).exp())
}

/// Bag-of-characters F1, whitespace ignored.
pub fn char_f1(candidate: &str, reference: &str) -> Result<f64> {
    let chars = |s: &str| -> HashMap<char, usize> {
        let mut m = HashMap::new();
        for c in s.chars().filter(|c| !c.is_whitespace()) {
            *m.entry(c).or_insert(0) += 1;
        }
        m
    };
    let refc = chars(reference);
    if refc.is_empty() {
        return Err(Error::InvalidInput("empty reference".into()));
    }
    let cand = chars(candidate);
    if cand.is_empty() {
        return Ok(0.0);
    }
    let overlap: usize = cand
        .iter()
        .map(|(ch, &n)| n.min(refc.get(ch).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return Ok(0.0);
    }
    let precision = overlap as f64 / cand.values().sum::<usize>() as f64;
    let recall = overlap as f64 / refc.values().sum::<usize>() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Distinct n-grams over all n-grams in a set of responses.
pub fn distinct_n<T: Eq + Hash>(responses: &[Vec<T>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidInput("n-gram order must be at least 1".into()));
    }
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for g in r.windows(n) {
            unique.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidInput(format!("responses contain no {n}-grams")));
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Corpus-level report for paired predictions and references.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GenerationReport {
    pub n: usize,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub f1: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
}

/// Averages sentence BLEU and F1 over pairs; DISTINCT is over all predictions.
pub fn evaluate_generation(predictions: &[String], references: &[String]) -> Result<GenerationReport> {
    if predictions.len() != references.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let pred_tokens: Vec<Vec<String>> = predictions.iter().map(|p| tokenize_for_metrics(p)).collect();
    let mut sums = [0.0; 3];
    for ((p, p_tokens), r) in predictions.iter().zip(&pred_tokens).zip(references) {
        let r_tokens = tokenize_for_metrics(r);
        sums[0] += bleu_n(p_tokens, &r_tokens, 1)?;
        sums[1] += bleu_n(p_tokens, &r_tokens, 2)?;
        sums[2] += char_f1(p, r)?;
    }
    let n = predictions.len() as f64;
    Ok(GenerationReport {
        n: predictions.len(),
        bleu_1: sums[0] / n,
        bleu_2: sums[1] / n,
        f1: sums[2] / n,
        distinct_1: distinct_n(&pred_tokens, 1).unwrap_or(0.0),
        distinct_2: distinct_n(&pred_tokens, 2).unwrap_or(0.0),
        perplexity: None,
    })
}
