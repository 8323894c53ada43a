//! Dialogue and persona value types shared by every stage of the engine.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the two conversation parties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Bot,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::User => "user",
            Speaker::Bot => "bot",
        }
    }

    pub fn other(self) -> Speaker {
        match self {
            Speaker::User => Speaker::Bot,
            Speaker::Bot => Speaker::User,
        }
    }

    /// Role id carried on generator segments (bot = 0, user = 1).
    pub fn role_id(self) -> u8 {
        match self {
            Speaker::Bot => 0,
            Speaker::User => 1,
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Speaker {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "user" | "usr" | "u" => Ok(Speaker::User),
            "bot" | "system" | "s" => Ok(Speaker::Bot),
            other => Err(Error::InvalidInput(format!("unknown speaker {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    pub turn_index: u32,
}

impl Utterance {
    pub fn new(speaker: Speaker, text: impl Into<String>, turn_index: u32) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("utterance text is empty".into()));
        }
        Ok(Self {
            speaker,
            text,
            turn_index,
        })
    }
}

/// The running conversation of one session; the retrieval query unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueContext {
    pub session_id: String,
    pub episode_id: String,
    utterances: Vec<Utterance>,
}

impl DialogueContext {
    pub fn new(session_id: impl Into<String>, episode_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            episode_id: episode_id.into(),
            utterances: Vec::new(),
        }
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    /// Turn index the next utterance should carry.
    pub fn next_turn_index(&self) -> u32 {
        self.utterances.last().map_or(0, |u| u.turn_index + 1)
    }

    pub fn push(&mut self, utterance: Utterance) -> Result<()> {
        if let Some(last) = self.utterances.last() {
            if utterance.turn_index <= last.turn_index {
                return Err(Error::InvalidInput(format!(
                    "turn index {} does not follow {}",
                    utterance.turn_index, last.turn_index
                )));
            }
        }
        self.utterances.push(utterance);
        Ok(())
    }

    /// Appends a new utterance with the next turn index.
    pub fn say(&mut self, speaker: Speaker, text: impl Into<String>) -> Result<&Utterance> {
        let u = Utterance::new(speaker, text, self.next_turn_index())?;
        self.utterances.push(u);
        Ok(self.utterances.last().expect("just pushed"))
    }

    pub fn from_utterances(
        session_id: impl Into<String>,
        episode_id: impl Into<String>,
        utterances: Vec<Utterance>,
    ) -> Result<Self> {
        let mut ctx = Self::new(session_id, episode_id);
        for u in utterances {
            ctx.push(u)?;
        }
        Ok(ctx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PersonaSource {
    Extracted,
    Seeded,
}

/// A single declarative fact about one speaker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaSentence {
    pub id: String,
    pub owner: Speaker,
    pub text: String,
    pub source: PersonaSource,
    pub created_at_turn: i64,
    pub session_id: String,
}

impl PersonaSentence {
    pub fn new(
        id: impl Into<String>,
        owner: Speaker,
        text: impl Into<String>,
        source: PersonaSource,
        created_at_turn: i64,
        session_id: impl Into<String>,
    ) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("persona text is empty".into()));
        }
        Ok(Self {
            id: id.into(),
            owner,
            text,
            source,
            created_at_turn,
            session_id: session_id.into(),
        })
    }

    /// Seeded persona with no source turn, e.g. a corpus declaration.
    pub fn seeded(id: impl Into<String>, owner: Speaker, text: impl Into<String>) -> Result<Self> {
        Self::new(id, owner, text, PersonaSource::Seeded, -1, "")
    }
}
