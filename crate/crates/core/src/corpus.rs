//! JSON-lines corpus of persona-grounded dialogues.
//!
//! One dialogue per line:
//!
//! ```json
//! {"dialogue_id": "d1",
//!  "bot_personas": ["B1: 我是一名画家"],
//!  "user_personas_seen": ["U1: 我喜欢跑步"],
//!  "user_personas_unseen": [],
//!  "turns": [{"speaker": "user", "text": "你好", "grounded_persona_ids": []},
//!            {"speaker": "bot", "text": "你好呀", "grounded_persona_ids": ["B1"],
//!             "is_persona_sentence": false}]}
//! ```
//!
//! Persona strings may carry an explicit `ID: text` label. Unlabeled personas
//! get positional ids: `B1..` for the bot, and `U1..` for the user running
//! through the seen list and then the unseen list.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, LineError, Result};
use crate::types::{PersonaSentence, Speaker};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusTurn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grounded_persona_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_persona_sentence: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDialogue {
    pub dialogue_id: String,
    #[serde(default)]
    pub bot_personas: Vec<String>,
    #[serde(default)]
    pub user_personas_seen: Vec<String>,
    #[serde(default)]
    pub user_personas_unseen: Vec<String>,
    pub turns: Vec<CorpusTurn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PersonaCategory {
    Bot,
    UserSeen,
    UserUnseen,
}

impl PersonaCategory {
    pub fn owner(self) -> Speaker {
        match self {
            PersonaCategory::Bot => Speaker::Bot,
            _ => Speaker::User,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeclaredPersona {
    pub id: String,
    pub category: PersonaCategory,
    pub text: String,
}

impl DeclaredPersona {
    pub fn to_sentence(&self, session_id: &str) -> PersonaSentence {
        PersonaSentence {
            id: self.id.clone(),
            owner: self.category.owner(),
            text: self.text.clone(),
            source: crate::types::PersonaSource::Seeded,
            created_at_turn: -1,
            session_id: session_id.to_string(),
        }
    }
}

/// Splits `"B1: text"` into `("B1", "text")` when the prefix is letters then digits.
fn split_label(raw: &str) -> Option<(&str, &str)> {
    let idx = raw.find([':', '：'])?;
    let label = raw[..idx].trim();
    let mut chars = label.chars().peekable();
    let mut letters = 0;
    while chars.peek().is_some_and(|c| c.is_ascii_alphabetic()) {
        chars.next();
        letters += 1;
    }
    let digits = chars.clone().count();
    if letters == 0 || digits == 0 || !chars.all(|c| c.is_ascii_digit()) {
        return None;
    }
    let sep_len = raw[idx..].chars().next().map_or(1, char::len_utf8);
    Some((label, raw[idx + sep_len..].trim()))
}

impl CorpusDialogue {
    /// All personas of both parties with resolved ids, bot first.
    pub fn declared_personas(&self) -> Vec<DeclaredPersona> {
        let mut out = Vec::new();
        let mut push = |raw: &String, category, positional: String| {
            let (id, text) = match split_label(raw) {
                Some((id, text)) => (id.to_string(), text.to_string()),
                None => (positional, raw.trim().to_string()),
            };
            out.push(DeclaredPersona { id, category, text });
        };
        for (i, p) in self.bot_personas.iter().enumerate() {
            push(p, PersonaCategory::Bot, format!("B{}", i + 1));
        }
        let user = self
            .user_personas_seen
            .iter()
            .map(|p| (p, PersonaCategory::UserSeen))
            .chain(
                self.user_personas_unseen
                    .iter()
                    .map(|p| (p, PersonaCategory::UserUnseen)),
            );
        for (i, (p, cat)) in user.enumerate() {
            push(p, cat, format!("U{}", i + 1));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.dialogue_id.trim().is_empty() {
            return bad("empty dialogue_id".into());
        }
        let mut ids = HashSet::new();
        for p in self.declared_personas() {
            if p.text.is_empty() {
                return bad(format!("persona {} has empty text", p.id));
            }
            if !ids.insert(p.id.clone()) {
                return bad(format!("duplicate persona id {}", p.id));
            }
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.text.trim().is_empty() {
                return bad(format!("turn {i} has empty text"));
            }
            if i > 0 && self.turns[i - 1].speaker == turn.speaker {
                return bad(format!("turn {i}: speakers do not alternate"));
            }
            if let Some(id) = turn
                .grounded_persona_ids
                .iter()
                .find(|id| !ids.contains(id.as_str()))
            {
                return bad(format!("turn {i}: dangling grounded_persona_id {id:?}"));
            }
        }
        Ok(())
    }
}

pub fn parse_corpus(reader: impl BufRead) -> Result<Vec<CorpusDialogue>> {
    let mut dialogues = Vec::new();
    let mut errors = Vec::new();
    for (no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<CorpusDialogue>(&line)
            .map_err(Error::from)
            .and_then(|d| d.validate().map(|()| d));
        match parsed {
            Ok(d) => dialogues.push(d),
            Err(e) => errors.push(LineError {
                line: no + 1,
                message: e.to_string(),
            }),
        }
    }
    if errors.is_empty() {
        Ok(dialogues)
    } else {
        Err(Error::Corpus(errors))
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusDialogue>> {
    parse_corpus(BufReader::new(File::open(path)?))
}

pub fn write_corpus(path: impl AsRef<Path>, dialogues: &[CorpusDialogue]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for d in dialogues {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub n_dialogues: usize,
    pub n_utterances: usize,
    pub avg_turns: f64,
    /// Mean utterance length in Unicode scalar values.
    pub avg_utterance_length: f64,
    pub avg_bot_personas: f64,
    pub avg_user_personas_seen: f64,
    pub avg_user_personas_unseen: f64,
}

pub fn corpus_stats(dialogues: &[CorpusDialogue]) -> Result<CorpusStats> {
    if dialogues.is_empty() {
        return Err(Error::InvalidInput("corpus is empty".into()));
    }
    let n = dialogues.len() as f64;
    let n_utterances: usize = dialogues.iter().map(|d| d.turns.len()).sum();
    let total_chars: usize = dialogues
        .iter()
        .flat_map(|d| &d.turns)
        .map(|t| t.text.chars().count())
        .sum();
    let mean = |f: fn(&CorpusDialogue) -> usize| dialogues.iter().map(f).sum::<usize>() as f64 / n;
    Ok(CorpusStats {
        n_dialogues: dialogues.len(),
        n_utterances,
        avg_turns: n_utterances as f64 / n,
        avg_utterance_length: if n_utterances == 0 {
            0.0
        } else {
            total_chars as f64 / n_utterances as f64
        },
        avg_bot_personas: mean(|d| d.bot_personas.len()),
        avg_user_personas_seen: mean(|d| d.user_personas_seen.len()),
        avg_user_personas_unseen: mean(|d| d.user_personas_unseen.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turn(speaker: Speaker, text: &str, ids: &[&str]) -> CorpusTurn {
        CorpusTurn {
            speaker,
            text: text.into(),
            grounded_persona_ids: ids.iter().map(|s| s.to_string()).collect(),
            is_persona_sentence: None,
        }
    }

    fn dialogue(n_turns: usize) -> CorpusDialogue {
        CorpusDialogue {
            dialogue_id: "d".into(),
            bot_personas: vec!["B1: 我是一名画家".into(), "我喜欢猫".into()],
            user_personas_seen: vec!["我住在北京".into()],
            user_personas_unseen: vec!["我是学生".into()],
            turns: (0..n_turns)
                .map(|i| {
                    let sp = if i % 2 == 0 { Speaker::User } else { Speaker::Bot };
                    turn(sp, "你好啊", &[])
                })
                .collect(),
        }
    }

    #[test]
    fn persona_ids_labeled_and_positional() {
        let ids: Vec<_> = dialogue(2)
            .declared_personas()
            .into_iter()
            .map(|p| (p.id, p.text))
            .collect();
        assert_eq!(
            ids,
            vec![
                ("B1".to_string(), "我是一名画家".to_string()),
                ("B2".to_string(), "我喜欢猫".to_string()),
                ("U1".to_string(), "我住在北京".to_string()),
                ("U2".to_string(), "我是学生".to_string()),
            ]
        );
        assert_eq!(split_label("U12：你好"), Some(("U12", "你好")));
        assert_eq!(split_label("note: hi"), None);
        assert_eq!(split_label("12: hi"), None);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(parse_corpus("".as_bytes()).unwrap().is_empty());
        assert!(parse_corpus("\n  \n".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn sixteen_turn_dialogue_loads() {
        let line = serde_json::to_string(&dialogue(16)).unwrap();
        let parsed = parse_corpus(line.as_bytes()).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].turns.len(), 16);
    }

    #[test]
    fn malformed_lines_reported_with_numbers() {
        let good = serde_json::to_string(&dialogue(2)).unwrap();
        let mut dangling = dialogue(2);
        dangling.turns[1].grounded_persona_ids = vec!["B9".into()];
        let dangling = serde_json::to_string(&dangling).unwrap();
        let missing_speaker = r#"{"dialogue_id":"x","turns":[{"text":"hi"}]}"#;
        let text = format!("{good}\n{missing_speaker}\n\n{dangling}\n{{not json\n");
        match parse_corpus(text.as_bytes()) {
            Err(Error::Corpus(errs)) => {
                let lines: Vec<_> = errs.iter().map(|e| e.line).collect();
                assert_eq!(lines, vec![2, 4, 5]);
                assert!(errs[1].message.contains("dangling"));
                assert!(errs[0].message.contains("speaker"));
            }
            other => panic!("expected corpus error, got {other:?}"),
        }
    }

    #[test]
    fn non_alternating_turns_rejected() {
        let mut d = dialogue(2);
        d.turns[1].speaker = Speaker::User;
        assert!(d.validate().is_err());
    }

    #[test]
    fn stats_single_and_pair() {
        let s = corpus_stats(&[dialogue(10)]).unwrap();
        assert_eq!(s.n_dialogues, 1);
        assert_eq!(s.avg_turns, 10.0);
        assert_eq!(s.n_utterances, 10);
        assert_eq!(s.avg_utterance_length, 3.0);
        assert_eq!(s.avg_bot_personas, 2.0);
        let s = corpus_stats(&[dialogue(10), dialogue(20)]).unwrap();
        assert_eq!(s.avg_turns, 15.0);
        assert_eq!(s.n_utterances, 30);
        assert!(corpus_stats(&[]).is_err());
    }
}
