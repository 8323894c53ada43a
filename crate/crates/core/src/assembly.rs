//! Generator input assembly: role-tagged persona blocks followed by the
//! dialogue context, each held to its token budget.

use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::error::{BackendError, BackendErrorKind, Error, Result};
use crate::memory::Hit;
use crate::types::{DialogueContext, Speaker};

pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;
    /// The last `max` tokens of `text`.
    fn keep_tail(&self, text: &str, max: usize) -> String;
}

/// One token per Unicode scalar value.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharTokenizer;

impl Tokenizer for CharTokenizer {
    fn count(&self, text: &str) -> usize {
        text.chars().count()
    }

    fn keep_tail(&self, text: &str, max: usize) -> String {
        let n = text.chars().count();
        text.chars().skip(n.saturating_sub(max)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    BotPersona,
    UserPersona,
    Context,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    /// 0 = bot, 1 = user.
    pub role_id: u8,
    pub text: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationReport {
    /// Ids of retrieved personas left out for lack of budget.
    pub dropped_user_personas: Vec<String>,
    pub dropped_bot_personas: Vec<String>,
    /// Turn indexes of context utterances removed, oldest first.
    pub dropped_context_turns: Vec<u32>,
    /// Turn index of an utterance kept only in part.
    pub cut_context_turn: Option<u32>,
}

impl TruncationReport {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledInput {
    pub segments: Vec<Segment>,
    pub total_tokens: usize,
    pub truncation_report: TruncationReport,
}

impl AssembledInput {
    pub fn tokens_of(&self, kind: SegmentKind) -> usize {
        self.segments
            .iter()
            .filter(|s| s.kind == kind)
            .map(|s| s.token_count)
            .sum()
    }

    pub fn segments_of(&self, kind: SegmentKind) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(move |s| s.kind == kind)
    }

    /// Flat text rendering, one segment per line.
    pub fn render(&self) -> String {
        self.segments
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn to_request(&self, max_response_tokens: usize) -> GenerationRequest {
        GenerationRequest {
            segments: self
                .segments
                .iter()
                .map(|s| WireSegment {
                    kind: s.kind,
                    role_id: s.role_id,
                    text: s.text.clone(),
                })
                .collect(),
            max_response_tokens,
        }
    }

    pub fn from_request(req: &GenerationRequest, tokenizer: &dyn Tokenizer) -> Self {
        let segments: Vec<Segment> = req
            .segments
            .iter()
            .map(|w| Segment {
                kind: w.kind,
                role_id: w.role_id,
                text: w.text.clone(),
                token_count: tokenizer.count(&w.text),
            })
            .collect();
        Self {
            total_tokens: segments.iter().map(|s| s.token_count).sum(),
            segments,
            truncation_report: TruncationReport::default(),
        }
    }
}

fn persona_text(cfg: &EngineConfig, owner: Speaker, text: &str) -> String {
    if !cfg.role_tokens {
        return text.to_string();
    }
    let literal = match owner {
        Speaker::Bot => &cfg.bot_role_token,
        Speaker::User => &cfg.user_role_token,
    };
    format!("{literal} {text}")
}

/// Admits personas best-first until the next one would overflow `budget`;
/// that one and everything scored lower are dropped.
fn admit_personas(
    hits: &[Hit],
    owner: Speaker,
    budget: usize,
    cfg: &EngineConfig,
    tokenizer: &dyn Tokenizer,
) -> (Vec<Segment>, Vec<String>) {
    let mut ordered: Vec<&Hit> = hits.iter().collect();
    ordered.sort_by(|a, b| b.score.total_cmp(&a.score));
    let kind = match owner {
        Speaker::Bot => SegmentKind::BotPersona,
        Speaker::User => SegmentKind::UserPersona,
    };
    let mut used = 0;
    let mut admitted = Vec::new();
    let mut dropped = Vec::new();
    for hit in ordered {
        let text = persona_text(cfg, owner, &hit.persona.text);
        let n = tokenizer.count(&text);
        if dropped.is_empty() && used + n <= budget {
            used += n;
            admitted.push(Segment {
                kind,
                role_id: owner.role_id(),
                text,
                token_count: n,
            });
        } else {
            dropped.push(hit.persona.id.clone());
        }
    }
    (admitted, dropped)
}

/// Bot personas, then user personas, then the context, each within its
/// budget. Context loses its oldest turns first; the latest utterance is
/// always kept, cut to its last tokens if it alone exceeds the budget.
pub fn assemble(
    context: &DialogueContext,
    user_hits: &[Hit],
    bot_hits: &[Hit],
    cfg: &EngineConfig,
    tokenizer: &dyn Tokenizer,
) -> AssembledInput {
    let mut report = TruncationReport::default();
    let (mut segments, dropped) = admit_personas(bot_hits, Speaker::Bot, cfg.budget_bot_persona, cfg, tokenizer);
    report.dropped_bot_personas = dropped;
    let (user_segments, dropped) = admit_personas(user_hits, Speaker::User, cfg.budget_user_persona, cfg, tokenizer);
    report.dropped_user_personas = dropped;
    segments.extend(user_segments);

    let utterances = context.utterances();
    let mut kept = Vec::new();
    let mut used = 0;
    for (i, u) in utterances.iter().enumerate().rev() {
        let n = tokenizer.count(&u.text);
        if used + n <= cfg.budget_context {
            used += n;
            kept.push(Segment {
                kind: SegmentKind::Context,
                role_id: u.speaker.role_id(),
                text: u.text.clone(),
                token_count: n,
            });
            continue;
        }
        if kept.is_empty() {
            let text = tokenizer.keep_tail(&u.text, cfg.budget_context);
            let n = tokenizer.count(&text);
            kept.push(Segment {
                kind: SegmentKind::Context,
                role_id: u.speaker.role_id(),
                text,
                token_count: n,
            });
            report.cut_context_turn = Some(u.turn_index);
        }
        report.dropped_context_turns = utterances[..i].iter().map(|u| u.turn_index).collect();
        if report.cut_context_turn.is_none() {
            report.dropped_context_turns.push(u.turn_index);
        }
        break;
    }
    kept.reverse();
    segments.extend(kept);
    AssembledInput {
        total_tokens: segments.iter().map(|s| s.token_count).sum(),
        segments,
        truncation_report: report,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireSegment {
    pub kind: SegmentKind,
    pub role_id: u8,
    pub text: String,
}

/// Generator request body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub segments: Vec<WireSegment>,
    pub max_response_tokens: usize,
}

/// Generator response body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
}

pub trait GeneratorPort: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> std::result::Result<GenerationResponse, BackendError>;
}

impl<T: GeneratorPort + ?Sized> GeneratorPort for std::sync::Arc<T> {
    fn generate(&self, request: &GenerationRequest) -> std::result::Result<GenerationResponse, BackendError> {
        (**self).generate(request)
    }
}

/// Calls the generator and checks the reply.
pub fn generate(
    input: &AssembledInput,
    generator: &dyn GeneratorPort,
    max_response_tokens: usize,
) -> Result<GenerationResponse> {
    let response = generator.generate(&input.to_request(max_response_tokens))?;
    let malformed = |m: &str| Error::Backend(BackendError::new("generator", BackendErrorKind::Malformed, m));
    if response.text.trim().is_empty() {
        return Err(malformed("empty response text"));
    }
    if let Some(lp) = &response.token_logprobs {
        if lp.iter().any(|x| !x.is_finite() || *x > 0.0) {
            return Err(malformed("token log-probabilities must be finite and <= 0"));
        }
    }
    Ok(response)
}

/// Deterministic generator: mentions the best user persona when one was
/// retrieved, otherwise answers with a fixed prompt to continue.
#[derive(Debug, Clone)]
pub struct StubGenerator {
    user_role_token: String,
}

pub const STUB_FALLBACK: &str = "嗯，说来听听。";

impl StubGenerator {
    pub fn new(cfg: &EngineConfig) -> Self {
        Self {
            user_role_token: cfg.user_role_token.clone(),
        }
    }
}

impl Default for StubGenerator {
    fn default() -> Self {
        Self::new(&EngineConfig::default())
    }
}

impl GeneratorPort for StubGenerator {
    fn generate(&self, request: &GenerationRequest) -> std::result::Result<GenerationResponse, BackendError> {
        let top_user = request.segments.iter().find(|s| s.kind == SegmentKind::UserPersona);
        let text = match top_user {
            Some(seg) => {
                let persona = seg
                    .text
                    .strip_prefix(self.user_role_token.as_str())
                    .unwrap_or(&seg.text)
                    .trim();
                format!("你之前说过{persona}")
            }
            None => STUB_FALLBACK.to_string(),
        };
        let n = text.chars().count();
        Ok(GenerationResponse {
            token_logprobs: Some(vec![-(2f64.ln()); n]),
            text,
        })
    }
}

/// `exp(-mean(log p))` over natural-log token probabilities.
pub fn perplexity(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::InvalidInput("no token log-probabilities".into()));
    }
    if token_logprobs.iter().any(|x| !x.is_finite() || *x > 0.0) {
        return Err(Error::InvalidInput(
            "log-probabilities must be finite and <= 0".into(),
        ));
    }
    let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
    Ok((-mean).exp())
}
