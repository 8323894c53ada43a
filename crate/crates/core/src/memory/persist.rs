//! Durable memories: binary snapshots plus a write-ahead log of persona
//! writes grouped per turn.
//!
//! Snapshot layout (integers little-endian):
//!
//! ```text
//! magic "PMEMSNAP" | u32 version | u32 dim | u32 len + encoder id (UTF-8)
//! | u8 owner role id | u64 next_seq | u64 wal_seq | u64 entry count
//! then per entry: u32 len + entry JSON | dim x f32
//! ```
//!
//! WAL lines are `<record JSON>\t<crc32 hex>\n`. A torn or corrupt final
//! line is an interrupted append and is discarded on open.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::store::{MemoryEntry, MemoryStore};
use crate::config::EngineConfig;
use crate::encoder::{embed_persona, Embedding, EncoderPort};
use crate::error::{Error, Result};
use crate::types::{PersonaSentence, Speaker};

const MAGIC: &[u8; 8] = b"PMEMSNAP";
const VERSION: u32 = 1;

pub const USER_SNAPSHOT: &str = "user.mem";
pub const BOT_SNAPSHOT: &str = "bot.mem";
pub const WAL_FILE: &str = "wal.log";

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    persona: PersonaSentence,
    written_at: u64,
    replaced_count: u32,
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Writes the store to `path` atomically (temp file + rename).
pub fn snapshot(store: &MemoryStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        write_u32(&mut w, VERSION)?;
        write_u32(&mut w, store.dim() as u32)?;
        let id = store.encoder_id().as_bytes();
        write_u32(&mut w, id.len() as u32)?;
        w.write_all(id)?;
        w.write_all(&[store.owner().role_id()])?;
        write_u64(&mut w, store.next_seq())?;
        write_u64(&mut w, store.wal_seq())?;
        write_u64(&mut w, store.len() as u64)?;
        for e in store.entries() {
            let json = serde_json::to_vec(&EntryRecord {
                persona: e.persona.clone(),
                written_at: e.written_at,
                replaced_count: e.replaced_count,
            })?;
            write_u32(&mut w, json.len() as u32)?;
            w.write_all(&json)?;
            for x in e.embedding.as_slice() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a snapshot, refusing one written for a different encoder.
pub fn restore(path: impl AsRef<Path>, cfg: &EngineConfig, encoder_id: &str, dim: usize) -> Result<MemoryStore> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |m: &str| Error::Snapshot(m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("not a memory snapshot"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Snapshot(format!("unsupported snapshot version {version}")));
    }
    let file_dim = read_u32(&mut r)? as usize;
    if file_dim != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: file_dim,
        });
    }
    let id_len = read_u32(&mut r)? as usize;
    let mut id = vec![0u8; id_len];
    r.read_exact(&mut id)?;
    let id = String::from_utf8(id).map_err(|_| bad("encoder id is not UTF-8"))?;
    if id != encoder_id {
        return Err(Error::Snapshot(format!(
            "snapshot was written by encoder {id:?}, active encoder is {encoder_id:?}"
        )));
    }
    let mut owner = [0u8; 1];
    r.read_exact(&mut owner)?;
    let owner = match owner[0] {
        0 => Speaker::Bot,
        1 => Speaker::User,
        other => return Err(Error::Snapshot(format!("bad owner tag {other}"))),
    };
    let next_seq = read_u64(&mut r)?;
    let wal_seq = read_u64(&mut r)?;
    let count = read_u64(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    let mut vbuf = vec![0u8; dim * 4];
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let rec: EntryRecord = serde_json::from_slice(&json)?;
        r.read_exact(&mut vbuf)?;
        let vector = vbuf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(MemoryEntry {
            persona: rec.persona,
            embedding: Embedding::new(vector)?,
            written_at: rec.written_at,
            replaced_count: rec.replaced_count,
        });
    }
    Ok(MemoryStore::from_parts(owner, cfg, id, dim, entries, next_seq, wal_seq))
}

/// All persona writes of one turn; replayed together or not at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalRecord {
    pub seq: u64,
    pub writes: Vec<PersonaSentence>,
}

fn encode_line(record: &WalRecord) -> Result<String> {
    let json = serde_json::to_string(record)?;
    Ok(format!("{json}\t{:08x}\n", crc32fast::hash(json.as_bytes())))
}

fn decode_line(line: &str) -> Option<WalRecord> {
    let (json, crc) = line.rsplit_once('\t')?;
    let crc = u32::from_str_radix(crc, 16).ok()?;
    if crc32fast::hash(json.as_bytes()) != crc {
        return None;
    }
    serde_json::from_str(json).ok()
}

#[derive(Debug)]
pub struct Wal {
    path: PathBuf,
    file: File,
    last_seq: u64,
    records: usize,
}

impl Wal {
    /// Opens (creating if needed) and returns the intact records. A damaged
    /// final line is cut off; damage before the final line is an error.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<WalRecord>)> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)?;
        let mut records = Vec::new();
        let mut good_len = 0u64;
        let mut pending_error = None;
        {
            let mut reader = BufReader::new(&file);
            let mut buf = Vec::new();
            loop {
                buf.clear();
                let n = reader.read_until(b'\n', &mut buf)?;
                if n == 0 {
                    break;
                }
                if let Some(e) = pending_error.take() {
                    return Err(e);
                }
                let complete = buf.last() == Some(&b'\n');
                let rec = std::str::from_utf8(&buf)
                    .ok()
                    .filter(|_| complete)
                    .and_then(|s| decode_line(s.trim_end_matches('\n')));
                match rec {
                    Some(rec) => {
                        good_len += n as u64;
                        records.push(rec);
                    }
                    None => {
                        pending_error = Some(Error::Wal(format!(
                            "corrupt record {} in {}",
                            records.len() + 1,
                            path.display()
                        )))
                    }
                }
            }
        }
        if pending_error.is_some() {
            // damaged tail: an append that never completed
            file.set_len(good_len)?;
            file.seek(SeekFrom::End(0))?;
        }
        let last_seq = records.last().map_or(0, |r| r.seq);
        let count = records.len();
        Ok((
            Self {
                path,
                file,
                last_seq,
                records: count,
            },
            records,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn len(&self) -> usize {
        self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records == 0
    }

    /// Appends and fsyncs one turn's writes; returns its sequence number.
    pub fn append(&mut self, writes: Vec<PersonaSentence>) -> Result<u64> {
        let seq = self.last_seq + 1;
        let line = encode_line(&WalRecord { seq, writes })?;
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        self.last_seq = seq;
        self.records += 1;
        Ok(seq)
    }

    /// Drops all records once they are covered by snapshots. Sequence numbers keep counting.
    pub fn truncate(&mut self) -> Result<()> {
        self.file.set_len(0)?;
        self.file.seek(SeekFrom::Start(0))?;
        self.file.sync_all()?;
        self.records = 0;
        Ok(())
    }
}

/// Appends after `wal_seq` so recovery does not re-apply covered records.
fn bump_seq(wal: &mut Wal, floor: u64) {
    if wal.last_seq < floor {
        wal.last_seq = floor;
    }
}

/// One user's persistent memory pair: `user.mem`, `bot.mem` and `wal.log`.
#[derive(Debug)]
pub struct MemoryDir {
    dir: PathBuf,
    wal: Wal,
    checkpoint_every: usize,
}

/// Stores recovered from disk.
#[derive(Debug, Clone)]
pub struct Recovered {
    pub user: MemoryStore,
    pub bot: MemoryStore,
    pub replayed_records: usize,
}

impl MemoryDir {
    /// Opens the directory, loading snapshots and replaying newer WAL records.
    pub fn open(dir: impl AsRef<Path>, cfg: &EngineConfig, encoder: &dyn EncoderPort) -> Result<(Self, Recovered)> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let load = |name: &str, owner: Speaker| -> Result<MemoryStore> {
            let path = dir.join(name);
            if path.exists() {
                let mut s = restore(&path, cfg, &encoder.id(), encoder.dim())?;
                if s.owner() != owner {
                    return Err(Error::Snapshot(format!("{name} holds the {} memory", s.owner())));
                }
                s.update_settings(cfg);
                Ok(s)
            } else {
                Ok(MemoryStore::for_encoder(owner, cfg, encoder))
            }
        };
        let mut user = load(USER_SNAPSHOT, Speaker::User)?;
        let mut bot = load(BOT_SNAPSHOT, Speaker::Bot)?;
        let (mut wal, records) = Wal::open(dir.join(WAL_FILE))?;
        let mut replayed = 0;
        for rec in &records {
            let mut touched = false;
            for store in [&mut user, &mut bot] {
                if rec.seq <= store.wal_seq {
                    continue;
                }
                let owner = store.owner();
                for p in rec.writes.iter().filter(|p| p.owner == owner) {
                    let emb = embed_persona(p, encoder)?;
                    store.write_embedded(p.clone(), emb)?;
                }
                store.wal_seq = rec.seq;
                touched = true;
            }
            replayed += usize::from(touched);
        }
        bump_seq(&mut wal, user.wal_seq.max(bot.wal_seq));
        Ok((
            Self {
                dir,
                wal,
                checkpoint_every: 64,
            },
            Recovered {
                user,
                bot,
                replayed_records: replayed,
            },
        ))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn wal(&self) -> &Wal {
        &self.wal
    }

    pub fn set_checkpoint_every(&mut self, n: usize) {
        self.checkpoint_every = n.max(1);
    }

    /// Logs one turn's writes. Call before publishing the stores that hold
    /// them; the stores are stamped with the record's sequence number.
    pub fn log_turn(&mut self, writes: &[PersonaSentence], user: &mut MemoryStore, bot: &mut MemoryStore) -> Result<()> {
        if writes.is_empty() {
            return Ok(());
        }
        let seq = self.wal.append(writes.to_vec())?;
        user.wal_seq = seq;
        bot.wal_seq = seq;
        Ok(())
    }

    pub fn checkpoint_due(&self) -> bool {
        self.wal.len() >= self.checkpoint_every
    }

    /// Snapshots both stores, then clears the log.
    pub fn checkpoint(&mut self, user: &MemoryStore, bot: &MemoryStore) -> Result<()> {
        snapshot(user, self.dir.join(USER_SNAPSHOT))?;
        snapshot(bot, self.dir.join(BOT_SNAPSHOT))?;
        self.wal.truncate()
    }

    /// Deletes snapshots, log, and the directory itself.
    pub fn purge(self) -> Result<()> {
        let dir = self.dir.clone();
        drop(self);
        match fs::remove_dir_all(&dir) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }
}
