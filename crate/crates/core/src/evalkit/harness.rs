//! Multi-session self-chat between a user simulator and a dialogue agent.
//!
//! An episode is a run of sessions between the same pair. Between sessions
//! the dialogue context starts over; memories carry over only when the
//! episode has memory enabled.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::{AssembledInput, SegmentKind};
use crate::error::{Error, Result};
use crate::memory::{Hit, WriteOutcome};
use crate::pipeline::{Engine, TurnOutcome};
use crate::session::SharedMemory;
use crate::types::{DialogueContext, PersonaSentence, Speaker, Utterance};

pub const PLANTED_PERSONA: &str = "我是一名画家";

const DEFAULT_OPENINGS: [&str; 4] = [
    "我是一名画家，我喜欢画油画。",
    "你记得我是一名画家吗？",
    "还记得我是一名画家吗？",
    "你还记得我是一名画家吗？",
];

/// Bland user-simulator lines with no first-person facts in them.
pub const SIMULATOR_LINES: [&str; 12] = [
    "今天天气怎么样？",
    "最近有什么好看的电影吗？",
    "周末你一般做什么？",
    "说说你的看法吧。",
    "这个话题挺有意思的。",
    "然后呢？",
    "为什么这么说？",
    "你觉得呢？",
    "有道理。",
    "还有别的推荐吗？",
    "听起来不错。",
    "原来如此。",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_sessions: usize,
    /// Exchanges per session; each is one user and one bot utterance.
    pub rounds_per_session: usize,
    /// First user line of each session; the last one is reused if there are more sessions than lines.
    pub opening_lines: Vec<String>,
    pub memory_enabled: bool,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            n_sessions: 4,
            rounds_per_session: 16,
            opening_lines: DEFAULT_OPENINGS.iter().map(|s| s.to_string()).collect(),
            memory_enabled: true,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_sessions == 0 || self.rounds_per_session == 0 {
            return Err(Error::InvalidInput("episodes need at least one session and one round".into()));
        }
        if self.opening_lines.iter().all(|l| l.trim().is_empty()) {
            return Err(Error::InvalidInput("no opening line".into()));
        }
        Ok(())
    }

    fn opening(&self, session: usize) -> &str {
        self.opening_lines
            .get(session)
            .or(self.opening_lines.last())
            .map(String::as_str)
            .unwrap_or_default()
    }
}

/// What the memory pipeline did on one turn.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnAudit {
    pub extracted: Vec<PersonaSentence>,
    pub writes: Vec<WriteOutcome>,
    pub retrieved_user: Vec<Hit>,
    pub retrieved_bot: Vec<Hit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<AssembledInput>,
}

impl From<&TurnOutcome> for TurnAudit {
    fn from(o: &TurnOutcome) -> Self {
        Self {
            extracted: o.extracted_user.iter().chain(&o.extracted_bot).cloned().collect(),
            writes: o.user_writes.iter().chain(&o.bot_writes).cloned().collect(),
            retrieved_user: o.retrieved_user.hits.clone(),
            retrieved_bot: o.retrieved_bot.hits.clone(),
            prompt: o.assembled.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentReply {
    pub text: String,
    pub audit: Option<TurnAudit>,
}

/// A conversation participant.
pub trait AgentPort {
    fn name(&self) -> &str;

    /// Called before each session; `keep_memory` is false when the agent must forget everything.
    fn begin_session(&mut self, session_id: &str, keep_memory: bool) -> Result<()>;

    /// Produces the next utterance for `speaker`, given the session so far.
    fn respond(&mut self, context: &DialogueContext, speaker: Speaker) -> Result<AgentReply>;
}

/// Seeded user simulator drawing from a fixed pool of lines.
#[derive(Debug, Clone)]
pub struct ScriptedAgent {
    lines: Vec<String>,
    rng: ChaCha8Rng,
}

impl ScriptedAgent {
    pub fn new(seed: u64) -> Self {
        Self::with_lines(SIMULATOR_LINES.iter().map(|s| s.to_string()).collect(), seed)
    }

    pub fn with_lines(lines: Vec<String>, seed: u64) -> Self {
        Self {
            lines,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl AgentPort for ScriptedAgent {
    fn name(&self) -> &str {
        "scripted"
    }

    fn begin_session(&mut self, _session_id: &str, _keep_memory: bool) -> Result<()> {
        Ok(())
    }

    fn respond(&mut self, _context: &DialogueContext, _speaker: Speaker) -> Result<AgentReply> {
        let text = self
            .lines
            .choose(&mut self.rng)
            .ok_or_else(|| Error::InvalidInput("scripted agent has no lines".into()))?
            .clone();
        Ok(AgentReply { text, audit: None })
    }
}

/// The memory-augmented bot: every user turn runs the full pipeline.
#[derive(Debug)]
pub struct LtmAgent {
    engine: Engine,
    memory: Arc<SharedMemory>,
}

impl LtmAgent {
    pub fn new(engine: Engine) -> Self {
        let memory = Arc::new(SharedMemory::in_memory(&engine));
        Self { engine, memory }
    }

    pub fn memory(&self) -> &Arc<SharedMemory> {
        &self.memory
    }
}

impl AgentPort for LtmAgent {
    fn name(&self) -> &str {
        "ltm"
    }

    fn begin_session(&mut self, _session_id: &str, keep_memory: bool) -> Result<()> {
        if !keep_memory {
            self.memory = Arc::new(SharedMemory::in_memory(&self.engine));
        }
        Ok(())
    }

    fn respond(&mut self, context: &DialogueContext, speaker: Speaker) -> Result<AgentReply> {
        if speaker != Speaker::Bot {
            return Err(Error::InvalidInput("the memory agent only plays the bot".into()));
        }
        let (last, before) = context
            .utterances()
            .split_last()
            .filter(|(u, _)| u.speaker == Speaker::User)
            .ok_or_else(|| Error::InvalidInput("the bot answers a user utterance".into()))?;
        let before = DialogueContext::from_utterances(&context.session_id, &context.episode_id, before.to_vec())?;
        let _turn = self.memory.lock_turns();
        let (u, b) = self.memory.current();
        let mut plan = self.engine.plan_turn(&u, &b, &before, &last.text)?;
        self.memory.publish(&mut plan)?;
        let text = plan
            .outcome
            .response_text()
            .expect("full turns always respond")
            .to_string();
        Ok(AgentReply {
            text,
            audit: Some(TurnAudit::from(&plan.outcome)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTranscript {
    /// 1-based position within the episode.
    pub session: usize,
    pub session_id: String,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub session: usize,
    pub turn_index: u32,
    pub agent: String,
    #[serde(flatten)]
    pub audit: TurnAudit,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub episode_id: String,
    pub memory_enabled: bool,
    pub sessions: Vec<SessionTranscript>,
    pub audit: Vec<AuditRecord>,
}

impl Transcript {
    pub fn utterance_count(&self) -> usize {
        self.sessions.iter().map(|s| s.utterances.len()).sum()
    }

    /// Sessions (1-based) where some assembled prompt carries `text` in a persona segment.
    pub fn sessions_with_persona_in_prompt(&self, text: &str) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .audit
            .iter()
            .filter(|r| {
                r.audit.prompt.as_ref().is_some_and(|p| {
                    p.segments
                        .iter()
                        .any(|s| matches!(s.kind, SegmentKind::UserPersona | SegmentKind::BotPersona) && s.text.contains(text))
                })
            })
            .map(|r| r.session)
            .collect();
        out.dedup();
        out
    }
}

/// A failed episode with everything that ran before the failure.
#[derive(Debug)]
pub struct EpisodeAborted {
    pub partial: Transcript,
    pub error: Error,
}

impl fmt::Display for EpisodeAborted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "episode {} aborted after {} utterances: {}",
            self.partial.episode_id,
            self.partial.utterance_count(),
            self.error
        )
    }
}

impl std::error::Error for EpisodeAborted {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Runs one episode. `user` plays the user side after each opening line; `bot` answers.
pub fn run_episode(
    user: &mut dyn AgentPort,
    bot: &mut dyn AgentPort,
    spec: &EpisodeSpec,
    episode_id: &str,
) -> std::result::Result<Transcript, Box<EpisodeAborted>> {
    let mut transcript = Transcript {
        episode_id: episode_id.to_string(),
        memory_enabled: spec.memory_enabled,
        ..Default::default()
    };
    let abort = |partial: Transcript, error: Error| Box::new(EpisodeAborted { partial, error });
    if let Err(e) = spec.validate() {
        return Err(abort(transcript, e));
    }
    for s in 0..spec.n_sessions {
        let session_id = format!("{episode_id}-s{}", s + 1);
        let keep = spec.memory_enabled;
        transcript.sessions.push(SessionTranscript {
            session: s + 1,
            session_id: session_id.clone(),
            utterances: Vec::new(),
        });
        let started = user
            .begin_session(&session_id, keep)
            .and_then(|_| bot.begin_session(&session_id, keep));
        if let Err(e) = started {
            return Err(abort(transcript, e));
        }
        let mut ctx = DialogueContext::new(&session_id, episode_id);
        for round in 0..spec.rounds_per_session {
            for speaker in [Speaker::User, Speaker::Bot] {
                let reply = if speaker == Speaker::User && round == 0 {
                    Ok(AgentReply {
                        text: spec.opening(s).to_string(),
                        audit: None,
                    })
                } else {
                    let agent: &mut dyn AgentPort = if speaker == Speaker::User { &mut *user } else { &mut *bot };
                    agent.respond(&ctx, speaker)
                };
                let said = reply.and_then(|r| {
                    let u = ctx.say(speaker, r.text)?.clone();
                    Ok((u, r.audit))
                });
                let (utterance, audit) = match said {
                    Ok(x) => x,
                    Err(e) => return Err(abort(transcript, e)),
                };
                if let Some(audit) = audit {
                    let agent = if speaker == Speaker::User { user.name() } else { bot.name() };
                    transcript.audit.push(AuditRecord {
                        session: s + 1,
                        turn_index: utterance.turn_index,
                        agent: agent.to_string(),
                        audit,
                    });
                }
                transcript.sessions[s].utterances.push(utterance);
            }
        }
    }
    Ok(transcript)
}

/// Runs `n_episodes` between a seeded simulator and fresh memory agents built on `engine`.
pub fn self_chat(
    engine: &Engine,
    spec: &EpisodeSpec,
    n_episodes: usize,
    seed: u64,
) -> std::result::Result<Vec<Transcript>, Box<EpisodeAborted>> {
    (0..n_episodes)
        .map(|i| {
            let mut user = ScriptedAgent::new(seed.wrapping_add(i as u64));
            let mut bot = LtmAgent::new(engine.clone());
            run_episode(&mut user, &mut bot, spec, &format!("ep{}", i + 1))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CarryBin {
    pub written_session: usize,
    pub first_used_session: usize,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CarryoverReport {
    pub carried_persona_count: usize,
    pub first_use_histogram: Vec<CarryBin>,
}

/// Counts personas written in one session and first retrieved in a later one.
pub fn memory_carryover_report(t: &Transcript) -> CarryoverReport {
    let mut written: HashMap<&str, usize> = HashMap::new();
    for r in &t.audit {
        for w in &r.audit.writes {
            written.entry(w.id()).or_insert(r.session);
        }
    }
    let mut first_use: HashMap<&str, usize> = HashMap::new();
    for r in &t.audit {
        for hit in r.audit.retrieved_user.iter().chain(&r.audit.retrieved_bot) {
            let id = hit.persona.id.as_str();
            if written.get(id).is_some_and(|&w| w < r.session) {
                first_use.entry(id).or_insert(r.session);
            }
        }
    }
    let mut bins: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (id, used) in &first_use {
        *bins.entry((written[id], *used)).or_insert(0) += 1;
    }
    CarryoverReport {
        carried_persona_count: first_use.len(),
        first_use_histogram: bins
            .into_iter()
            .map(|((w, u), count)| CarryBin {
                written_session: w,
                first_used_session: u,
                count,
            })
            .collect(),
    }
}

/// One (context, response) pair for human rating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterItem {
    pub episode_id: String,
    pub session_id: String,
    pub turn_index: u32,
    pub context: Vec<String>,
    pub response: String,
}

/// Every bot response with the session context that preceded it.
pub fn rater_items(t: &Transcript) -> Vec<RaterItem> {
    let mut out = Vec::new();
    for s in &t.sessions {
        for (i, u) in s.utterances.iter().enumerate() {
            if u.speaker != Speaker::Bot {
                continue;
            }
            out.push(RaterItem {
                episode_id: t.episode_id.clone(),
                session_id: s.session_id.clone(),
                turn_index: u.turn_index,
                context: s.utterances[..i]
                    .iter()
                    .map(|c| format!("{}: {}", c.speaker, c.text))
                    .collect(),
                response: u.text.clone(),
            });
        }
    }
    out
}

pub fn write_transcripts(path: impl AsRef<Path>, transcripts: &[Transcript]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), transcripts)?;
    Ok(())
}

pub fn write_rater_jsonl(path: impl AsRef<Path>, transcripts: &[Transcript]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in transcripts.iter().flat_map(rater_items) {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
