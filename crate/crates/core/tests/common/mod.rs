//! Brute-force reference implementations and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;

use ltm_core::encoder::{Embedding, ScoredExample};
use ltm_core::memory::MemoryStore;
use ltm_core::{PersonaSentence, PersonaSource, Speaker};

/// Occurrences of `gram` in `tokens`, by direct scan.
fn occurrences<T: PartialEq>(tokens: &[T], gram: &[T]) -> usize {
    if gram.len() > tokens.len() {
        return 0;
    }
    (0..=tokens.len() - gram.len()).filter(|&i| &tokens[i..i + gram.len()] == gram).count()
}

pub fn bleu_oracle<T: PartialEq>(cand: &[T], reference: &[T], n: usize) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut precisions = Vec::new();
    for k in 1..=n {
        if cand.len() < k {
            break;
        }
        let mut matched = 0;
        for i in 0..=cand.len() - k {
            let g = &cand[i..i + k];
            let first = (0..i).all(|j| &cand[j..j + k] != g);
            if first {
                matched += occurrences(cand, g).min(occurrences(reference, g));
            }
        }
        precisions.push(matched as f64 / (cand.len() - k + 1) as f64);
    }
    if precisions.contains(&0.0) {
        return 0.0;
    }
    let geo = precisions.iter().product::<f64>().powf(1.0 / precisions.len() as f64);
    let (c, r) = (cand.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * geo
}

pub fn f1_oracle(cand: &str, reference: &str) -> f64 {
    let c: Vec<char> = cand.chars().filter(|c| !c.is_whitespace()).collect();
    let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    if c.is_empty() {
        return 0.0;
    }
    let mut used = vec![false; r.len()];
    let mut tp = 0;
    for ch in &c {
        if let Some(j) = (0..r.len()).find(|&j| !used[j] && r[j] == *ch) {
            used[j] = true;
            tp += 1;
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / c.len() as f64;
    let rc = tp as f64 / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

pub fn distinct_oracle<T: PartialEq>(responses: &[Vec<T>], n: usize) -> f64 {
    let grams: Vec<&[T]> = responses.iter().flat_map(|r| r.windows(n)).collect();
    let unique = (0..grams.len()).filter(|&i| (0..i).all(|j| grams[j] != grams[i])).count();
    unique as f64 / grams.len() as f64
}

pub fn auc_oracle(examples: &[ScoredExample]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for ex in examples {
        for p in &ex.positives {
            for n in &ex.negatives {
                pairs += 1.0;
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// A hit when fewer than `k` negatives score at least as high as the best positive.
pub fn recall_oracle(examples: &[ScoredExample], k: usize) -> f64 {
    let hits = examples
        .iter()
        .filter(|ex| {
            let best = ex.positives.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            ex.negatives.iter().filter(|&&n| n >= best).count() < k
        })
        .count();
    hits as f64 / examples.len() as f64
}

pub fn cosine_oracle(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Top-k by cosine over every entry (ties to the earlier slot), then the threshold.
pub fn read_oracle(store: &MemoryStore, query: &[f32], k: usize, threshold: f64) -> Vec<(String, f64)> {
    let mut scored: Vec<(usize, f64)> = store
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| (i, cosine_oracle(query, e.embedding.as_slice())))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored
        .into_iter()
        .take(k)
        .filter(|&(_, s)| s >= threshold)
        .map(|(i, s)| (store.entries()[i].persona.id.clone(), s))
        .collect()
}

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Embedding {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        if v.iter().any(|x| *x != 0.0) {
            return Embedding::new(v).unwrap();
        }
    }
}

pub fn persona(id: impl Into<String>, owner: Speaker, text: impl Into<String>) -> PersonaSentence {
    PersonaSentence::new(id, owner, text, PersonaSource::Seeded, 0, "s").unwrap()
}

/// Random token list over a small alphabet so n-grams repeat.
pub fn random_tokens(rng: &mut impl Rng, max_len: usize) -> Vec<String> {
    let len = rng.gen_range(1..=max_len);
    (0..len).map(|_| ["a", "b", "c", "d", "我", "你"][rng.gen_range(0..6)].to_string()).collect()
}

pub fn random_scored(rng: &mut impl Rng) -> ScoredExample {
    let level = |rng: &mut dyn rand::RngCore| f64::from(rng.gen_range(0..8u8)) / 8.0;
    ScoredExample {
        positives: (0..rng.gen_range(1..=3)).map(|_| level(rng)).collect(),
        negatives: (0..rng.gen_range(1..=8)).map(|_| level(rng)).collect(),
    }
}
