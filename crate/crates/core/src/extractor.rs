//! Persona extraction: split an utterance into clauses at punctuation,
//! classify each clause, and keep the positives as persona sentences.

use serde::{Deserialize, Serialize};

use crate::error::{BackendError, BackendErrorKind, Error, Result};
use crate::types::{PersonaSentence, PersonaSource, Utterance};

/// Clause boundaries: Chinese and ASCII sentence punctuation.
pub const CLAUSE_DELIMITERS: [char; 10] = ['，', '。', '！', '？', '；', ',', '.', '!', '?', ';'];

pub fn is_delimiter(c: char) -> bool {
    CLAUSE_DELIMITERS.contains(&c)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clause {
    pub text: String,
    pub parent_turn: u32,
    /// Half-open range of char (Unicode scalar) offsets into the utterance text.
    pub char_span: (usize, usize),
}

/// Splits at every delimiter, trims surrounding whitespace, and drops empty
/// pieces. Everything outside the returned spans is delimiters or whitespace.
pub fn segment_clauses(utterance: &Utterance) -> Vec<Clause> {
    segment_text(&utterance.text)
        .into_iter()
        .map(|(text, span)| Clause {
            text,
            parent_turn: utterance.turn_index,
            char_span: span,
        })
        .collect()
}

pub fn segment_text(text: &str) -> Vec<(String, (usize, usize))> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    for end in 0..=chars.len() {
        if end < chars.len() && !is_delimiter(chars[end]) {
            continue;
        }
        let mut lo = start;
        let mut hi = end;
        while lo < hi && chars[lo].is_whitespace() {
            lo += 1;
        }
        while hi > lo && chars[hi - 1].is_whitespace() {
            hi -= 1;
        }
        if lo < hi {
            out.push((chars[lo..hi].iter().collect(), (lo, hi)));
        }
        start = end + 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonaLabel {
    Persona,
    NotPersona,
}

impl PersonaLabel {
    pub fn is_persona(self) -> bool {
        self == PersonaLabel::Persona
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            PersonaLabel::Persona
        } else {
            PersonaLabel::NotPersona
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierVerdict {
    pub label: PersonaLabel,
    pub confidence: f64,
}

impl ClassifierVerdict {
    pub fn new(label: PersonaLabel, confidence: f64) -> Self {
        Self {
            label,
            confidence: confidence.clamp(0.0, 1.0),
        }
    }
}

/// Anything that can label text spans as persona / not persona.
pub trait ClassifierPort: Send + Sync {
    fn classify_batch(&self, texts: &[&str]) -> std::result::Result<Vec<ClassifierVerdict>, BackendError>;
}

impl<T: ClassifierPort + ?Sized> ClassifierPort for std::sync::Arc<T> {
    fn classify_batch(&self, texts: &[&str]) -> std::result::Result<Vec<ClassifierVerdict>, BackendError> {
        (**self).classify_batch(texts)
    }
}

/// Labels every input as a persona. Stores all history, i.e. memory without extraction.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantClassifier;

impl ClassifierPort for ConstantClassifier {
    fn classify_batch(&self, texts: &[&str]) -> std::result::Result<Vec<ClassifierVerdict>, BackendError> {
        Ok(texts
            .iter()
            .map(|_| ClassifierVerdict::new(PersonaLabel::Persona, 1.0))
            .collect())
    }
}

const ZH_CUES: &[&str] = &[
    "是", "喜欢", "爱", "讨厌", "住", "在", "工作", "职业", "养", "有", "毕业", "来自", "岁",
    "叫", "当", "做", "学", "读", "会", "梦想", "想成为", "擅长", "从事", "出生", "结婚",
];
const EN_FIRST_PERSON: &[&str] = &["i", "i'm", "im", "my", "i've", "ive", "me"];
const EN_CONTRACTED: &[&str] = &["i'm", "im", "i've", "ive", "my"];
const EN_SECOND_PERSON: &[&str] = &["you", "your", "you're", "yours"];
const EN_CUES: &[&str] = &[
    "am", "like", "love", "enjoy", "hate", "have", "work", "live", "own", "grew", "study",
    "studied", "was", "born", "favorite", "favourite", "name", "is", "play", "prefer", "got",
];

/// Deterministic cue-word classifier: a clause is a persona when it speaks
/// in the first person with a self-description cue (copula, preference,
/// occupation, residence, possession) and does not address the listener.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexiconClassifier;

impl LexiconClassifier {
    pub fn classify(&self, text: &str) -> ClassifierVerdict {
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower
            .split(|c: char| !(c.is_alphanumeric() || c == '\''))
            .filter(|w| !w.is_empty())
            .collect();
        let has = |set: &[&str]| words.iter().any(|w| set.contains(w));

        let addresses_listener = lower.contains('你') || lower.contains('您') || has(EN_SECOND_PERSON);
        let zh_first = lower.contains('我');
        let en_first = has(EN_FIRST_PERSON);
        if !zh_first && !en_first {
            return ClassifierVerdict::new(PersonaLabel::NotPersona, 1.0);
        }
        if addresses_listener {
            return ClassifierVerdict::new(PersonaLabel::NotPersona, 0.8);
        }
        let trimmed = lower.trim_end();
        let zh_question = trimmed.ends_with('吗') || trimmed.ends_with('呢');
        let zh_cue = zh_first
            && !zh_question
            && lower
                .split('我')
                .skip(1)
                .any(|after| ZH_CUES.iter().any(|cue| after.contains(cue)));
        let en_cue = en_first && (has(EN_CUES) || has(EN_CONTRACTED));
        if zh_cue || en_cue {
            ClassifierVerdict::new(PersonaLabel::Persona, 1.0)
        } else {
            ClassifierVerdict::new(PersonaLabel::NotPersona, 0.6)
        }
    }
}

impl ClassifierPort for LexiconClassifier {
    fn classify_batch(&self, texts: &[&str]) -> std::result::Result<Vec<ClassifierVerdict>, BackendError> {
        Ok(texts.iter().map(|t| self.classify(t)).collect())
    }
}

pub fn classify_clause(clause: &Clause, classifier: &dyn ClassifierPort) -> Result<ClassifierVerdict> {
    let mut verdicts = classifier.classify_batch(&[clause.text.as_str()])?;
    if verdicts.len() != 1 {
        return Err(BackendError::new(
            "classifier",
            BackendErrorKind::Malformed,
            format!("expected 1 verdict, got {}", verdicts.len()),
        )
        .into());
    }
    Ok(verdicts.remove(0))
}

/// Persona id for the `clause_idx`-th clause of an utterance.
pub fn extracted_persona_id(utterance: &Utterance, session_id: &str, clause_idx: usize) -> String {
    format!(
        "{}-{}-t{}-c{}",
        utterance.speaker, session_id, utterance.turn_index, clause_idx
    )
}

/// Segments, classifies all clauses in one batch, and returns the positive
/// clauses in order, owned by the utterance's speaker.
pub fn extract_personas(
    utterance: &Utterance,
    session_id: &str,
    classifier: &dyn ClassifierPort,
) -> Result<Vec<PersonaSentence>> {
    let clauses = segment_clauses(utterance);
    if clauses.is_empty() {
        return Ok(Vec::new());
    }
    let texts: Vec<&str> = clauses.iter().map(|c| c.text.as_str()).collect();
    let verdicts = classifier.classify_batch(&texts)?;
    if verdicts.len() != clauses.len() {
        return Err(BackendError::new(
            "classifier",
            BackendErrorKind::Malformed,
            format!("expected {} verdicts, got {}", clauses.len(), verdicts.len()),
        )
        .into());
    }
    Ok(clauses
        .into_iter()
        .zip(verdicts)
        .enumerate()
        .filter(|(_, (_, v))| v.label.is_persona())
        .map(|(i, (clause, _))| PersonaSentence {
            id: extracted_persona_id(utterance, session_id, i),
            owner: utterance.speaker,
            text: clause.text,
            source: PersonaSource::Extracted,
            created_at_turn: i64::from(utterance.turn_index),
            session_id: session_id.to_string(),
        })
        .collect())
}

pub const ENSEMBLE_SIZE: usize = 5;
pub const ENSEMBLE_MIN_POSITIVE: usize = 2;

/// Ensemble relabeling rule: positive when at least two of the five models say so.
pub fn aggregate_votes(votes: &[bool]) -> Result<bool> {
    if votes.len() != ENSEMBLE_SIZE {
        return Err(Error::InvalidInput(format!(
            "expected {ENSEMBLE_SIZE} votes, got {}",
            votes.len()
        )));
    }
    Ok(votes.iter().filter(|&&v| v).count() >= ENSEMBLE_MIN_POSITIVE)
}

/// Second-stage training labels: human annotations win, the rest of the
/// pool is labeled by ensemble vote.
pub fn relabel_pool(
    human: &[(String, bool)],
    pool: &[(String, Vec<bool>)],
) -> Result<Vec<(String, bool)>> {
    let known: std::collections::HashMap<&str, bool> =
        human.iter().map(|(t, l)| (t.as_str(), *l)).collect();
    let mut out: Vec<(String, bool)> = human.to_vec();
    for (text, votes) in pool {
        let voted = aggregate_votes(votes)?;
        if !known.contains_key(text.as_str()) {
            out.push((text.clone(), voted));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn evaluate_classifier(predictions: &[bool], gold: &[bool]) -> Result<ClassificationReport> {
    if predictions.len() != gold.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidInput("no predictions to evaluate".into()));
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0, 0, 0, 0);
    for (&p, &g) in predictions.iter().zip(gold) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
        correct += usize::from(p == g);
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ClassificationReport {
        accuracy: ratio(correct, predictions.len()),
        precision,
        recall,
        f1,
    })
}
