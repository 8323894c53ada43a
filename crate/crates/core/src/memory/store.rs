use serde::{Deserialize, Serialize};

use super::index::{AnyIndex, VectorIndex};
use crate::config::{EngineConfig, IndexBackend};
use crate::encoder::{cosine, embed_persona, encode_checked, EncodeRole, Embedding, EncoderPort};
use crate::error::{Error, Result};
use crate::types::{PersonaSentence, Speaker};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub persona: PersonaSentence,
    pub embedding: Embedding,
    /// Store-wide sequence number of the last write to this slot.
    pub written_at: u64,
    pub replaced_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum WriteOutcome {
    Inserted { id: String },
    Replaced { old_id: String, id: String },
}

impl WriteOutcome {
    pub fn id(&self) -> &str {
        match self {
            WriteOutcome::Inserted { id } | WriteOutcome::Replaced { id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub persona: PersonaSentence,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadResult {
    pub query_id: String,
    pub hits: Vec<Hit>,
}

impl ReadResult {
    pub fn empty(query_id: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            hits: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadParams {
    pub top_k: usize,
    pub sim_threshold: f64,
}

impl From<&EngineConfig> for ReadParams {
    fn from(cfg: &EngineConfig) -> Self {
        Self {
            top_k: cfg.top_k,
            sim_threshold: cfg.sim_threshold,
        }
    }
}

/// Second-stage scoring of coarse candidates.
pub trait Rescorer {
    fn rescore(&self, context_text: &str, query: &Embedding, candidates: &[&MemoryEntry]) -> Result<Vec<f64>>;
}

/// Scores with the embeddings cached at write time.
#[derive(Debug, Clone, Copy, Default)]
pub struct CachedRescorer;

impl Rescorer for CachedRescorer {
    fn rescore(&self, _context_text: &str, query: &Embedding, candidates: &[&MemoryEntry]) -> Result<Vec<f64>> {
        candidates.iter().map(|e| cosine(query, &e.embedding)).collect()
    }
}

/// Re-encodes context and candidate personas with a separate matching model.
pub struct MatcherRescorer<'a>(pub &'a dyn EncoderPort);

impl Rescorer for MatcherRescorer<'_> {
    fn rescore(&self, context_text: &str, _query: &Embedding, candidates: &[&MemoryEntry]) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let ctx = encode_checked(self.0, EncodeRole::Context, &[context_text])?.remove(0);
        let texts: Vec<&str> = candidates.iter().map(|e| e.persona.text.as_str()).collect();
        encode_checked(self.0, EncodeRole::Persona, &texts)?
            .iter()
            .map(|p| cosine(&ctx, p))
            .collect()
    }
}

/// Coarse candidates fetched per requested result before re-scoring.
const CANDIDATE_MULTIPLIER: usize = 4;

/// One speaker's long-term persona memory.
#[derive(Debug, Clone)]
pub struct MemoryStore {
    owner: Speaker,
    encoder_id: String,
    dim: usize,
    dup_threshold: f64,
    capacity_limit: Option<usize>,
    entries: Vec<MemoryEntry>,
    index: AnyIndex,
    next_seq: u64,
    /// Last write-ahead-log record reflected in this store.
    pub(crate) wal_seq: u64,
}

impl MemoryStore {
    pub fn new(owner: Speaker, cfg: &EngineConfig, encoder_id: impl Into<String>, dim: usize) -> Self {
        Self {
            owner,
            encoder_id: encoder_id.into(),
            dim,
            dup_threshold: cfg.dup_threshold,
            capacity_limit: cfg.capacity_limit,
            entries: Vec::new(),
            index: AnyIndex::new(cfg.index_backend),
            next_seq: 0,
            wal_seq: 0,
        }
    }

    pub fn for_encoder(owner: Speaker, cfg: &EngineConfig, encoder: &dyn EncoderPort) -> Self {
        Self::new(owner, cfg, encoder.id(), encoder.dim())
    }

    pub fn owner(&self) -> Speaker {
        self.owner
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn backend(&self) -> IndexBackend {
        self.index.backend()
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn wal_seq(&self) -> u64 {
        self.wal_seq
    }

    pub fn update_settings(&mut self, cfg: &EngineConfig) {
        self.dup_threshold = cfg.dup_threshold;
        self.capacity_limit = cfg.capacity_limit;
    }

    pub fn write(&mut self, persona: PersonaSentence, encoder: &dyn EncoderPort) -> Result<WriteOutcome> {
        self.check_owner(&persona)?;
        let embedding = embed_persona(&persona, encoder)?;
        self.write_embedded(persona, embedding)
    }

    fn check_owner(&self, persona: &PersonaSentence) -> Result<()> {
        if persona.owner != self.owner {
            return Err(Error::OwnerMismatch {
                store: self.owner,
                persona: persona.owner,
            });
        }
        Ok(())
    }

    /// Slot of the entry a write of `embedding` would replace, if any: the
    /// most similar entry at or above the duplication threshold, earliest
    /// written among equals.
    pub fn duplicate_of(&self, embedding: &Embedding) -> Option<(usize, f64)> {
        let near = self.index.search(embedding, 8);
        let best = near.first()?.1;
        if best < self.dup_threshold {
            return None;
        }
        near.into_iter()
            .filter(|h| h.1 == best)
            .min_by_key(|h| self.entries[h.0].written_at)
    }

    /// Dedup-on-write with a precomputed persona embedding.
    pub fn write_embedded(&mut self, persona: PersonaSentence, embedding: Embedding) -> Result<WriteOutcome> {
        self.check_owner(&persona)?;
        if embedding.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: embedding.dim(),
            });
        }
        if embedding.norm() == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let seq = self.next_seq;
        if let Some((slot, _)) = self.duplicate_of(&embedding) {
            self.index.upsert(slot, &embedding);
            let entry = &mut self.entries[slot];
            let old_id = std::mem::replace(&mut entry.persona, persona).id;
            entry.embedding = embedding;
            entry.written_at = seq;
            entry.replaced_count += 1;
            self.next_seq += 1;
            return Ok(WriteOutcome::Replaced {
                old_id,
                id: entry.persona.id.clone(),
            });
        }
        if let Some(cap) = self.capacity_limit {
            if self.entries.len() >= cap {
                return Err(Error::CapacityExceeded(cap));
            }
        }
        self.index.upsert(self.entries.len(), &embedding);
        let id = persona.id.clone();
        self.entries.push(MemoryEntry {
            persona,
            embedding,
            written_at: seq,
            replaced_count: 0,
        });
        self.next_seq += 1;
        Ok(WriteOutcome::Inserted { id })
    }

    /// Top-k then threshold, using cached embeddings for scoring.
    pub fn read(&self, query_id: impl Into<String>, query: &Embedding, params: ReadParams) -> Result<ReadResult> {
        self.read_with(query_id, query, "", &CachedRescorer, params)
    }

    /// Coarse index search, re-scoring of the candidates, top-k selection,
    /// then removal of hits scoring below the similarity threshold.
    pub fn read_with(
        &self,
        query_id: impl Into<String>,
        query: &Embedding,
        context_text: &str,
        rescorer: &dyn Rescorer,
        params: ReadParams,
    ) -> Result<ReadResult> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: query.dim(),
            });
        }
        let query_id = query_id.into();
        if self.entries.is_empty() || params.top_k == 0 {
            return Ok(ReadResult::empty(query_id));
        }
        let pool = self.index.search(query, params.top_k * CANDIDATE_MULTIPLIER);
        let candidates: Vec<&MemoryEntry> = pool.iter().map(|&(slot, _)| &self.entries[slot]).collect();
        let scores = rescorer.rescore(context_text, query, &candidates)?;
        let mut ranked: Vec<(usize, f64)> = pool.iter().map(|h| h.0).zip(scores).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(params.top_k);
        let hits = ranked
            .into_iter()
            .filter(|&(_, s)| s >= params.sim_threshold)
            .map(|(slot, score)| Hit {
                persona: self.entries[slot].persona.clone(),
                score,
            })
            .collect();
        Ok(ReadResult { query_id, hits })
    }

    /// Checks that the index mirrors the entries exactly.
    pub fn index_consistent(&self) -> bool {
        self.index.len() == self.entries.len()
            && self
                .entries
                .iter()
                .enumerate()
                .all(|(slot, e)| self.index.get(slot) == Some(&e.embedding))
    }

    pub(crate) fn from_parts(
        owner: Speaker,
        cfg: &EngineConfig,
        encoder_id: String,
        dim: usize,
        entries: Vec<MemoryEntry>,
        next_seq: u64,
        wal_seq: u64,
    ) -> Self {
        let mut store = Self::new(owner, cfg, encoder_id, dim);
        for (slot, e) in entries.iter().enumerate() {
            store.index.upsert(slot, &e.embedding);
        }
        store.entries = entries;
        store.next_seq = next_seq;
        store.wal_seq = wal_seq;
        store
    }
}

/// Reads both memories with the same query.
pub fn read_both(
    user: &MemoryStore,
    bot: &MemoryStore,
    query_id: &str,
    query: &Embedding,
    params: ReadParams,
) -> Result<(ReadResult, ReadResult)> {
    Ok((user.read(query_id, query, params)?, bot.read(query_id, query, params)?))
}
