//! Context and persona encoders, cosine similarity, the triplet margin
//! objective, and retriever evaluation (AUC, recall@k).

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::config::LossOrientation;
use crate::corpus::CorpusDialogue;
use crate::error::{BackendError, BackendErrorKind, Error, Result};
use crate::types::{DialogueContext, PersonaSentence, Speaker, Utterance};

/// A dense vector with its Euclidean norm cached.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    vector: Vec<f32>,
    norm: f64,
}

impl Embedding {
    pub fn new(vector: Vec<f32>) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::InvalidInput("embedding has no components".into()));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("embedding has non-finite components".into()));
        }
        let norm = vector.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        Ok(Self { vector, norm })
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.vector
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// `<a, b> / (|a| |b|)`, clamped to [-1, 1].
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    if a.norm == 0.0 || b.norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(&a.vector, &b.vector) / (a.norm * b.norm)).clamp(-1.0, 1.0))
}

/// Which tower of a dual encoder to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodeRole {
    Context,
    Persona,
}

/// A context/persona dual encoder. A single model may serve both roles.
pub trait EncoderPort: Send + Sync {
    /// Stable identifier; stored in snapshots so embeddings are never mixed across models.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn encode(&self, role: EncodeRole, texts: &[&str]) -> std::result::Result<Vec<Embedding>, BackendError>;
}

impl<T: EncoderPort + ?Sized> EncoderPort for std::sync::Arc<T> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn encode(&self, role: EncodeRole, texts: &[&str]) -> std::result::Result<Vec<Embedding>, BackendError> {
        (**self).encode(role, texts)
    }
}

/// Encodes `texts` and checks the reply shape.
pub fn encode_checked(
    encoder: &dyn EncoderPort,
    role: EncodeRole,
    texts: &[&str],
) -> Result<Vec<Embedding>> {
    let out = encoder.encode(role, texts)?;
    if out.len() != texts.len() {
        return Err(BackendError::new(
            "encoder",
            BackendErrorKind::Malformed,
            format!("expected {} vectors, got {}", texts.len(), out.len()),
        )
        .into());
    }
    if let Some(bad) = out.iter().find(|e| e.dim() != encoder.dim()) {
        return Err(Error::DimensionMismatch {
            expected: encoder.dim(),
            found: bad.dim(),
        });
    }
    Ok(out)
}

/// Character n-gram (n = 1..=3) feature hashing with raw counts, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(chars: &[char]) -> u64 {
    let mut h = FNV_OFFSET;
    let mut buf = [0u8; 4];
    for c in chars {
        for &b in c.encode_utf8(&mut buf).as_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(Self { dim })
    }

    pub fn embed(&self, text: &str) -> Embedding {
        let normalized: Vec<char> = text
            .to_lowercase()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .chars()
            .collect();
        let mut counts = vec![0f64; self.dim];
        for n in 1..=3 {
            for gram in normalized.windows(n) {
                counts[(fnv1a(gram) % self.dim as u64) as usize] += 1.0;
            }
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        let vector = if norm == 0.0 {
            vec![0.0; self.dim]
        } else {
            counts.iter().map(|c| (c / norm) as f32).collect()
        };
        Embedding::new(vector).expect("finite by construction")
    }
}

impl EncoderPort for HashingEmbedder {
    fn id(&self) -> String {
        format!("char-ngram-hash-1to3-d{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, _role: EncodeRole, texts: &[&str]) -> std::result::Result<Vec<Embedding>, BackendError> {
        Ok(texts.iter().map(|t| self.embed(t)).collect())
    }
}

/// The text the context encoder sees: utterances joined by newlines, cut to
/// the most recent `window` characters.
pub fn context_query_text(context: &DialogueContext, window: usize) -> String {
    let joined = context
        .utterances()
        .iter()
        .map(|u| u.text.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    let n = joined.chars().count();
    if n <= window {
        joined
    } else {
        joined.chars().skip(n - window).collect()
    }
}

pub fn embed_context(context: &DialogueContext, encoder: &dyn EncoderPort, window: usize) -> Result<Embedding> {
    if context.is_empty() {
        return Err(Error::InvalidInput("cannot encode an empty context".into()));
    }
    let text = context_query_text(context, window);
    Ok(encode_checked(encoder, EncodeRole::Context, &[text.as_str()])?.remove(0))
}

pub fn embed_persona(persona: &PersonaSentence, encoder: &dyn EncoderPort) -> Result<Embedding> {
    if persona.text.trim().is_empty() {
        return Err(Error::InvalidInput("cannot encode an empty persona".into()));
    }
    Ok(encode_checked(encoder, EncodeRole::Persona, &[persona.text.as_str()])?.remove(0))
}

/// Triplet hinge in the configured orientation.
pub fn triplet_hinge_oriented(sim_pos: f64, sim_neg: f64, alpha: f64, orientation: LossOrientation) -> f64 {
    match orientation {
        LossOrientation::Canonical => (sim_neg - sim_pos + alpha).max(0.0),
        LossOrientation::AsPrinted => (sim_pos - sim_neg + alpha).max(0.0),
    }
}

/// `max(sim_neg - sim_pos + alpha, 0)`.
pub fn triplet_hinge(sim_pos: f64, sim_neg: f64, alpha: f64) -> f64 {
    triplet_hinge_oriented(sim_pos, sim_neg, alpha, LossOrientation::Canonical)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingExample {
    pub context: DialogueContext,
    pub positives: Vec<PersonaSentence>,
    pub negatives: Vec<PersonaSentence>,
}

/// One example per bot turn whose response, or the user utterance right
/// before it, is grounded in at least one persona. The context is every turn
/// before the bot response; negatives are the remaining declared personas.
pub fn mine_ranking_examples(dialogue: &CorpusDialogue) -> Vec<RankingExample> {
    let declared = dialogue.declared_personas();
    let mut out = Vec::new();
    for (i, turn) in dialogue.turns.iter().enumerate() {
        if turn.speaker != Speaker::Bot || i == 0 {
            continue;
        }
        let mut grounded: HashSet<&str> = turn.grounded_persona_ids.iter().map(String::as_str).collect();
        let prev = &dialogue.turns[i - 1];
        if prev.speaker == Speaker::User {
            grounded.extend(prev.grounded_persona_ids.iter().map(String::as_str));
        }
        if grounded.is_empty() {
            continue;
        }
        let utterances = dialogue.turns[..i]
            .iter()
            .enumerate()
            .map(|(j, t)| Utterance {
                speaker: t.speaker,
                text: t.text.clone(),
                turn_index: j as u32,
            })
            .collect();
        let context = DialogueContext::from_utterances(
            dialogue.dialogue_id.clone(),
            dialogue.dialogue_id.clone(),
            utterances,
        )
        .expect("indices increase");
        let (positives, negatives) = declared
            .iter()
            .map(|p| p.to_sentence(&dialogue.dialogue_id))
            .partition(|p| grounded.contains(p.id.as_str()));
        out.push(RankingExample {
            context,
            positives,
            negatives,
        });
    }
    out
}

/// Scores of one example's candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredExample {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankerReport {
    pub n_examples: usize,
    pub n_pairs: usize,
    pub auc: f64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
}

/// Pooled Mann-Whitney AUC over every within-example (positive, negative)
/// pair; ties earn half credit.
pub fn pooled_auc(examples: &[ScoredExample]) -> Result<f64> {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for ex in examples {
        let mut neg = ex.negatives.clone();
        neg.sort_by(f64::total_cmp);
        for &p in &ex.positives {
            let below = neg.partition_point(|&n| n < p);
            let not_above = neg.partition_point(|&n| n <= p);
            wins += below as f64 + 0.5 * (not_above - below) as f64;
        }
        pairs += ex.positives.len() * neg.len();
    }
    if pairs == 0 {
        return Err(Error::InvalidInput("no (positive, negative) pairs to score".into()));
    }
    Ok(wins / pairs as f64)
}

/// Fraction of examples with a positive among the `k` best-scored
/// candidates. Ties rank negatives first.
pub fn recall_at_k(examples: &[ScoredExample], k: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("no examples to score".into()));
    }
    let hits = examples
        .iter()
        .filter(|ex| {
            let mut ranked: Vec<(f64, bool)> = ex
                .positives
                .iter()
                .map(|&s| (s, true))
                .chain(ex.negatives.iter().map(|&s| (s, false)))
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            ranked.iter().take(k).any(|&(_, pos)| pos)
        })
        .count();
    Ok(hits as f64 / examples.len() as f64)
}

pub fn ranking_report(scored: &[ScoredExample]) -> Result<RankerReport> {
    if scored.is_empty() {
        return Err(Error::InvalidInput("no ranking examples".into()));
    }
    if let Some(i) = scored
        .iter()
        .position(|e| e.positives.is_empty() || e.negatives.is_empty())
    {
        return Err(Error::InvalidInput(format!(
            "example {i} needs at least one positive and one negative"
        )));
    }
    Ok(RankerReport {
        n_examples: scored.len(),
        n_pairs: scored.iter().map(|e| e.positives.len() * e.negatives.len()).sum(),
        auc: pooled_auc(scored)?,
        recall_at_1: recall_at_k(scored, 1)?,
        recall_at_5: recall_at_k(scored, 5)?,
    })
}

/// Scores every candidate by cosine(E_c(context), E_p(persona)).
pub fn score_examples(
    examples: &[RankingExample],
    encoder: &dyn EncoderPort,
    window: usize,
) -> Result<Vec<ScoredExample>> {
    examples
        .iter()
        .map(|ex| {
            let query = embed_context(&ex.context, encoder, window)?;
            let score = |ps: &[PersonaSentence]| -> Result<Vec<f64>> {
                if ps.is_empty() {
                    return Ok(Vec::new());
                }
                let texts: Vec<&str> = ps.iter().map(|p| p.text.as_str()).collect();
                encode_checked(encoder, EncodeRole::Persona, &texts)?
                    .iter()
                    .map(|e| cosine(&query, e))
                    .collect()
            };
            Ok(ScoredExample {
                positives: score(&ex.positives)?,
                negatives: score(&ex.negatives)?,
            })
        })
        .collect()
}

pub fn evaluate_ranker(
    examples: &[RankingExample],
    encoder: &dyn EncoderPort,
    window: usize,
) -> Result<RankerReport> {
    ranking_report(&score_examples(examples, encoder, window)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusTurn;
    use proptest::prelude::*;

    fn emb(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let v = emb(&[0.3, -1.2, 2.0]);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(), 0.0);
        let neg = emb(&[-0.3, 1.2, -2.0]);
        assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(cosine(&emb(&[0.0, 0.0]), &v), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(cosine(&emb(&[0.0, 0.0, 0.0]), &v), Err(Error::ZeroNorm)));
    }

    #[test]
    fn hashing_embedder_is_deterministic_unit_norm() {
        let e = HashingEmbedder::default();
        let a = e.embed("我是一名画家");
        let b = e.embed("我是一名画家");
        assert_eq!(a, b);
        assert_eq!(a.dim(), 256);
        assert!((a.norm() - 1.0).abs() < 1e-6);
        assert!((cosine(&a, &b).unwrap() - 1.0).abs() < 1e-9);
        assert!(cosine(&a, &e.embed("今天天气不错")).unwrap() < 0.5);
    }

    #[test]
    fn empty_context_rejected() {
        let ctx = DialogueContext::new("s", "e");
        assert!(embed_context(&ctx, &HashingEmbedder::default(), 384).is_err());
    }

    #[test]
    fn context_window_keeps_tail() {
        let mut ctx = DialogueContext::new("s", "e");
        ctx.say(Speaker::User, "abcdef").unwrap();
        ctx.say(Speaker::Bot, "ghij").unwrap();
        assert_eq!(context_query_text(&ctx, 100), "abcdef\nghij");
        assert_eq!(context_query_text(&ctx, 6), "f\nghij");
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(triplet_hinge(0.9, 0.3, 0.2), 0.0);
        assert!((triplet_hinge(0.5, 0.5, 0.2) - 0.2).abs() < 1e-15);
        assert!((triplet_hinge(0.3, 0.9, 0.2) - 0.8).abs() < 1e-15);
        assert!((triplet_hinge_oriented(0.9, 0.3, 0.2, LossOrientation::AsPrinted) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn hinge_subgradient_matches_finite_difference() {
        let h = 1e-6;
        let (pos, neg, alpha) = (0.4, 0.5, 0.2);
        let d = (triplet_hinge(pos + h, neg, alpha) - triplet_hinge(pos - h, neg, alpha)) / (2.0 * h);
        assert!((d + 1.0).abs() < 1e-6);
        let d = (triplet_hinge(0.9 + h, 0.1, alpha) - triplet_hinge(0.9 - h, 0.1, alpha)) / (2.0 * h);
        assert_eq!(d, 0.0);
    }

    fn annotated() -> CorpusDialogue {
        let t = |sp, text: &str, ids: &[&str]| CorpusTurn {
            speaker: sp,
            text: text.into(),
            grounded_persona_ids: ids.iter().map(|s| s.to_string()).collect(),
            is_persona_sentence: None,
        };
        CorpusDialogue {
            dialogue_id: "d".into(),
            bot_personas: vec!["p1".into(), "p2".into(), "p3".into()],
            user_personas_seen: vec!["u-a".into(), "u-b".into()],
            user_personas_unseen: vec![],
            turns: vec![
                t(Speaker::User, "hi", &[]),
                t(Speaker::Bot, "hello", &["B3"]),
                t(Speaker::User, "what now", &[]),
                t(Speaker::Bot, "nothing", &[]),
                t(Speaker::User, "tell me", &[]),
                t(Speaker::Bot, "both", &["B1", "U2"]),
            ],
        }
    }

    #[test]
    fn mining_examples() {
        let ex = mine_ranking_examples(&annotated());
        assert_eq!(ex.len(), 2);
        let ids = |v: &[PersonaSentence]| v.iter().map(|p| p.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&ex[0].positives), vec!["B3"]);
        assert_eq!(ids(&ex[0].negatives), vec!["B1", "B2", "U1", "U2"]);
        assert_eq!(ex[0].context.len(), 1);
        assert_eq!(ids(&ex[1].positives), vec!["B1", "U2"]);
        assert_eq!(ex[1].positives[1].owner, Speaker::User);
        assert_eq!(ex[1].context.len(), 5);
    }

    #[test]
    fn user_grounding_counts_toward_positives() {
        let mut d = annotated();
        d.turns[2].grounded_persona_ids = vec!["U1".into()];
        let ex = mine_ranking_examples(&d);
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[1].positives[0].id, "U1");
    }

    fn scored(p: &[f64], n: &[f64]) -> ScoredExample {
        ScoredExample {
            positives: p.to_vec(),
            negatives: n.to_vec(),
        }
    }

    #[test]
    fn ranker_metric_examples() {
        let r = ranking_report(&[scored(&[0.9, 0.8], &[0.1, 0.2])]).unwrap();
        assert_eq!((r.auc, r.recall_at_1), (1.0, 1.0));
        let r = ranking_report(&[scored(&[0.5], &[0.5, 0.5])]).unwrap();
        assert_eq!(r.auc, 0.5);
        let r = ranking_report(&[scored(&[0.8], &[0.9, 0.1])]).unwrap();
        assert_eq!((r.auc, r.recall_at_1, r.recall_at_5), (0.5, 0.0, 1.0));
        assert!(ranking_report(&[]).is_err());
        assert!(ranking_report(&[scored(&[0.8], &[])]).is_err());
    }

    #[test]
    fn evaluate_ranker_end_to_end() {
        let mut d = annotated();
        d.bot_personas[0] = "I love painting landscapes".into();
        d.turns[4].text = "do you still love painting landscapes".into();
        let ex = mine_ranking_examples(&d);
        let report = evaluate_ranker(&ex[1..], &HashingEmbedder::default(), 384).unwrap();
        assert_eq!(report.n_examples, 1);
        assert_eq!(report.recall_at_1, 1.0);
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in proptest::collection::vec(-5.0f32..5.0, 8),
            b in proptest::collection::vec(-5.0f32..5.0, 8),
            scale in 0.01f32..100.0,
        ) {
            let (ea, eb) = (emb(&a), emb(&b));
            prop_assume!(ea.norm() > 1e-3 && eb.norm() > 1e-3);
            let ab = cosine(&ea, &eb).unwrap();
            prop_assert_eq!(ab, cosine(&eb, &ea).unwrap());
            let scaled = emb(&a.iter().map(|x| x * scale).collect::<Vec<_>>());
            prop_assert!((cosine(&scaled, &eb).unwrap() - ab).abs() < 1e-5);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn hinge_zero_iff_margin_met(p in -1.0f64..1.0, n in -1.0f64..1.0, alpha in 0.0f64..1.0) {
            let h = triplet_hinge(p, n, alpha);
            prop_assert!(h >= 0.0);
            prop_assert_eq!(h == 0.0, p >= n + alpha);
        }

        #[test]
        fn self_similarity_is_one(s in "\\PC{1,40}") {
            prop_assume!(!s.trim().is_empty());
            let e = HashingEmbedder::default();
            let v = e.embed(&s);
            prop_assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-9);
        }
    }
}
