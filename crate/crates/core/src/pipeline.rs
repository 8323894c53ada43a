//! The per-turn memory pipeline.
//!
//! A user turn runs: extract personas from the user utterance, write them
//! to the user memory, read both memories with the updated context,
//! assemble the generator input, generate, then extract from the response
//! into the bot memory. Turns are planned against copies of the memories;
//! nothing is published until the whole turn has succeeded.

use std::sync::Arc;

use serde::Serialize;

use crate::assembly::{assemble, generate, AssembledInput, CharTokenizer, GenerationResponse, GeneratorPort, StubGenerator, Tokenizer};
use crate::config::EngineConfig;
use crate::encoder::{context_query_text, embed_context, embed_persona, EncoderPort, HashingEmbedder};
use crate::error::{Error, Result};
use crate::extractor::{extract_personas, ClassifierPort, LexiconClassifier};
use crate::memory::{MatcherRescorer, MemoryStore, ReadParams, ReadResult, WriteOutcome};
use crate::types::{DialogueContext, PersonaSentence, Speaker, Utterance};

/// Engine configuration plus the model backends it talks to.
#[derive(Clone)]
pub struct Engine {
    cfg: EngineConfig,
    classifier: Arc<dyn ClassifierPort>,
    encoder: Arc<dyn EncoderPort>,
    matcher: Option<Arc<dyn EncoderPort>>,
    generator: Arc<dyn GeneratorPort>,
    tokenizer: Arc<dyn Tokenizer>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("cfg", &self.cfg)
            .field("encoder", &self.encoder.id())
            .field("matcher", &self.matcher.as_ref().map(|m| m.id()))
            .finish_non_exhaustive()
    }
}

impl Engine {
    /// Lexicon classifier, hashing embedder, stub generator, char tokenizer.
    pub fn reference(cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = HashingEmbedder::new(cfg.embedding_dim)?;
        let generator = StubGenerator::new(&cfg);
        Ok(Self {
            cfg,
            classifier: Arc::new(LexiconClassifier),
            encoder: Arc::new(encoder),
            matcher: None,
            generator: Arc::new(generator),
            tokenizer: Arc::new(CharTokenizer),
        })
    }

    pub fn with_classifier(mut self, classifier: Arc<dyn ClassifierPort>) -> Self {
        self.classifier = classifier;
        self
    }

    pub fn with_encoder(mut self, encoder: Arc<dyn EncoderPort>) -> Self {
        self.encoder = encoder;
        self
    }

    /// A separate context-persona matching model used to re-score read candidates.
    pub fn with_matcher(mut self, matcher: Arc<dyn EncoderPort>) -> Self {
        self.matcher = Some(matcher);
        self
    }

    pub fn with_generator(mut self, generator: Arc<dyn GeneratorPort>) -> Self {
        self.generator = generator;
        self
    }

    pub fn with_tokenizer(mut self, tokenizer: Arc<dyn Tokenizer>) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &dyn EncoderPort {
        self.encoder.as_ref()
    }

    pub fn classifier(&self) -> &dyn ClassifierPort {
        self.classifier.as_ref()
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    pub fn empty_store(&self, owner: Speaker) -> MemoryStore {
        MemoryStore::for_encoder(owner, &self.cfg, self.encoder.as_ref())
    }

    /// Extracts personas and writes them to `store`; returns them with their outcomes.
    pub fn absorb(
        &self,
        store: &mut MemoryStore,
        utterance: &Utterance,
        session_id: &str,
    ) -> Result<(Vec<PersonaSentence>, Vec<WriteOutcome>)> {
        let extracted = extract_personas(utterance, session_id, self.classifier.as_ref())?;
        let mut outcomes = Vec::with_capacity(extracted.len());
        for p in &extracted {
            let emb = embed_persona(p, self.encoder.as_ref())?;
            outcomes.push(store.write_embedded(p.clone(), emb)?);
        }
        Ok((extracted, outcomes))
    }

    /// Reads both memories for the context.
    pub fn retrieve(
        &self,
        user: &MemoryStore,
        bot: &MemoryStore,
        context: &DialogueContext,
        query_id: &str,
    ) -> Result<(ReadResult, ReadResult)> {
        let params = ReadParams::from(&self.cfg);
        if context.is_empty() {
            return Ok((ReadResult::empty(query_id), ReadResult::empty(query_id)));
        }
        let query = embed_context(context, self.encoder.as_ref(), self.cfg.budget_context)?;
        match &self.matcher {
            None => Ok((user.read(query_id, &query, params)?, bot.read(query_id, &query, params)?)),
            Some(m) => {
                let text = context_query_text(context, self.cfg.budget_context);
                let rescorer = MatcherRescorer(m.as_ref());
                Ok((
                    user.read_with(query_id, &query, &text, &rescorer, params)?,
                    bot.read_with(query_id, &query, &text, &rescorer, params)?,
                ))
            }
        }
    }

    /// Runs a full user turn against copies of the memories.
    pub fn plan_turn(
        &self,
        user: &MemoryStore,
        bot: &MemoryStore,
        context: &DialogueContext,
        text: &str,
    ) -> Result<TurnPlan> {
        let mut user = user.clone();
        let mut bot = bot.clone();
        let mut context = context.clone();
        let session_id = context.session_id.clone();

        let utterance = context.say(Speaker::User, text)?.clone();
        let (extracted_user, user_writes) = self.absorb(&mut user, &utterance, &session_id)?;

        let query_id = format!("{session_id}-t{}", utterance.turn_index);
        let (retrieved_user, retrieved_bot) = self.retrieve(&user, &bot, &context, &query_id)?;
        let assembled = assemble(
            &context,
            &retrieved_user.hits,
            &retrieved_bot.hits,
            &self.cfg,
            self.tokenizer.as_ref(),
        );
        let generation = generate(&assembled, self.generator.as_ref(), self.cfg.max_response_tokens)?;
        let response = context.say(Speaker::Bot, generation.text.clone())?.clone();
        let (extracted_bot, bot_writes) = if self.cfg.extract_bot_turns {
            self.absorb(&mut bot, &response, &session_id)?
        } else {
            (Vec::new(), Vec::new())
        };

        let writes = extracted_user.iter().chain(&extracted_bot).cloned().collect();
        Ok(TurnPlan {
            outcome: TurnOutcome {
                user_utterance: utterance,
                response: Some(response),
                extracted_user,
                user_writes,
                retrieved_user,
                retrieved_bot,
                assembled: Some(assembled),
                generation: Some(generation),
                extracted_bot,
                bot_writes,
            },
            user,
            bot,
            context,
            writes,
        })
    }

    /// Records an utterance without generating a reply: extraction and write only.
    pub fn plan_observed(
        &self,
        user: &MemoryStore,
        bot: &MemoryStore,
        context: &DialogueContext,
        speaker: Speaker,
        text: &str,
    ) -> Result<TurnPlan> {
        let mut user = user.clone();
        let mut bot = bot.clone();
        let mut context = context.clone();
        let session_id = context.session_id.clone();
        let utterance = context.say(speaker, text)?.clone();
        let mut outcome = TurnOutcome {
            user_utterance: utterance.clone(),
            response: None,
            extracted_user: Vec::new(),
            user_writes: Vec::new(),
            retrieved_user: ReadResult::empty(""),
            retrieved_bot: ReadResult::empty(""),
            assembled: None,
            generation: None,
            extracted_bot: Vec::new(),
            bot_writes: Vec::new(),
        };
        match speaker {
            Speaker::User => {
                let (e, w) = self.absorb(&mut user, &utterance, &session_id)?;
                outcome.extracted_user = e;
                outcome.user_writes = w;
            }
            Speaker::Bot if self.cfg.extract_bot_turns => {
                let (e, w) = self.absorb(&mut bot, &utterance, &session_id)?;
                outcome.extracted_bot = e;
                outcome.bot_writes = w;
            }
            Speaker::Bot => {}
        }
        let writes = outcome
            .extracted_user
            .iter()
            .chain(&outcome.extracted_bot)
            .cloned()
            .collect();
        Ok(TurnPlan {
            outcome,
            user,
            bot,
            context,
            writes,
        })
    }

    /// Seeds a persona directly (no extraction), e.g. a known bot profile.
    pub fn seed(&self, store: &mut MemoryStore, persona: PersonaSentence) -> Result<WriteOutcome> {
        if persona.owner != store.owner() {
            return Err(Error::OwnerMismatch {
                store: store.owner(),
                persona: persona.owner,
            });
        }
        store.write(persona, self.encoder.as_ref())
    }
}

/// Everything a turn produced, echoed to callers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurnOutcome {
    /// The incoming utterance (a bot utterance for observed bot turns).
    pub user_utterance: Utterance,
    pub response: Option<Utterance>,
    pub extracted_user: Vec<PersonaSentence>,
    pub user_writes: Vec<WriteOutcome>,
    pub retrieved_user: ReadResult,
    pub retrieved_bot: ReadResult,
    pub assembled: Option<AssembledInput>,
    pub generation: Option<GenerationResponse>,
    pub extracted_bot: Vec<PersonaSentence>,
    pub bot_writes: Vec<WriteOutcome>,
}

impl TurnOutcome {
    pub fn response_text(&self) -> Option<&str> {
        self.response.as_ref().map(|u| u.text.as_str())
    }
}

/// A fully computed turn waiting to be published.
#[derive(Debug, Clone)]
pub struct TurnPlan {
    pub outcome: TurnOutcome,
    pub user: MemoryStore,
    pub bot: MemoryStore,
    pub context: DialogueContext,
    /// Every persona written this turn, user side first.
    pub writes: Vec<PersonaSentence>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{GenerationRequest, SegmentKind};
    use crate::error::{BackendError, BackendErrorKind};

    fn engine() -> Engine {
        Engine::reference(EngineConfig::default()).unwrap()
    }

    #[test]
    fn turn_writes_then_reads_own_persona() {
        let e = engine();
        let (u, b) = (e.empty_store(Speaker::User), e.empty_store(Speaker::Bot));
        let ctx = DialogueContext::new("s1", "e1");
        let plan = e.plan_turn(&u, &b, &ctx, "我是一名画家。").unwrap();
        assert_eq!(plan.outcome.extracted_user.len(), 1);
        assert_eq!(plan.user.len(), 1);
        assert_eq!(plan.outcome.retrieved_user.hits[0].persona.text, "我是一名画家");
        let a = plan.outcome.assembled.as_ref().unwrap();
        assert_eq!(a.segments_of(SegmentKind::UserPersona).count(), 1);
        assert_eq!(plan.outcome.response_text(), Some("你之前说过我是一名画家"));
        assert!(plan.outcome.extracted_bot.is_empty());
        assert_eq!(plan.context.len(), 2);
        assert!(u.is_empty(), "inputs untouched");
    }

    #[test]
    fn non_persona_turn_leaves_memory_alone() {
        let e = engine();
        let (u, b) = (e.empty_store(Speaker::User), e.empty_store(Speaker::Bot));
        let plan = e.plan_turn(&u, &b, &DialogueContext::new("s", "e"), "今天天气不错").unwrap();
        assert!(plan.outcome.extracted_user.is_empty());
        assert!(plan.writes.is_empty());
        assert!(plan.user.is_empty() && plan.bot.is_empty());
    }

    struct Down;
    impl GeneratorPort for Down {
        fn generate(&self, _: &GenerationRequest) -> std::result::Result<crate::assembly::GenerationResponse, BackendError> {
            Err(BackendError::new("generator", BackendErrorKind::Unavailable, "down"))
        }
    }

    #[test]
    fn generator_failure_surfaces_before_any_publish() {
        let e = engine().with_generator(Arc::new(Down));
        let (u, b) = (e.empty_store(Speaker::User), e.empty_store(Speaker::Bot));
        let err = e.plan_turn(&u, &b, &DialogueContext::new("s", "e"), "我是一名画家").unwrap_err();
        assert!(err.is_backend());
        assert!(u.is_empty());
    }

    #[test]
    fn observed_bot_turn_writes_bot_memory() {
        let e = engine();
        let (u, b) = (e.empty_store(Speaker::User), e.empty_store(Speaker::Bot));
        let plan = e
            .plan_observed(&u, &b, &DialogueContext::new("s", "e"), Speaker::Bot, "我是一个喜欢音乐的机器人")
            .unwrap();
        assert_eq!(plan.bot.len(), 1);
        assert!(plan.user.is_empty());
        assert!(plan.outcome.response.is_none());
    }

    #[test]
    fn matcher_changes_scores_not_contract() {
        let e = engine().with_matcher(Arc::new(HashingEmbedder::new(64).unwrap()));
        let (u, b) = (e.empty_store(Speaker::User), e.empty_store(Speaker::Bot));
        let plan = e.plan_turn(&u, &b, &DialogueContext::new("s", "e"), "我是一名画家").unwrap();
        assert_eq!(plan.outcome.retrieved_user.hits.len(), 1);
        assert!((plan.outcome.retrieved_user.hits[0].score - 1.0).abs() < 1e-9);
    }
}
