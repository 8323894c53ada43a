//! Dense-vector search over memory slots.
//!
//! Slots are the positions of entries in their store. Results are ordered by
//! cosine score descending with ties broken by ascending slot, so every
//! backend agrees with an exhaustive scan wherever it finds the same items.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::IndexBackend;
use crate::encoder::{cosine, Embedding};

pub trait VectorIndex {
    /// Adds `slot` or replaces the vector it holds.
    fn upsert(&mut self, slot: usize, embedding: &Embedding);
    /// Up to `k` `(slot, cosine)` pairs, best first.
    fn search(&self, query: &Embedding, k: usize) -> Vec<(usize, f64)>;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Vector currently held for `slot`.
    fn get(&self, slot: usize) -> Option<&Embedding>;
}

fn score(a: &Embedding, b: &Embedding) -> f64 {
    cosine(a, b).unwrap_or(f64::NEG_INFINITY)
}

fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Scores every vector. Exact.
#[derive(Debug, Clone, Default)]
pub struct ExhaustiveIndex {
    vectors: Vec<Option<Embedding>>,
    live: usize,
}

impl VectorIndex for ExhaustiveIndex {
    fn upsert(&mut self, slot: usize, embedding: &Embedding) {
        if slot >= self.vectors.len() {
            self.vectors.resize(slot + 1, None);
        }
        if self.vectors[slot].is_none() {
            self.live += 1;
        }
        self.vectors[slot] = Some(embedding.clone());
    }

    fn search(&self, query: &Embedding, k: usize) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .enumerate()
            .filter_map(|(slot, v)| v.as_ref().map(|v| (slot, score(query, v))))
            .collect();
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_by(rank_order);
        scored
    }

    fn len(&self) -> usize {
        self.live
    }

    fn get(&self, slot: usize) -> Option<&Embedding> {
        self.vectors.get(slot).and_then(Option::as_ref)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HnswParams {
    /// Links per node on upper layers; layer 0 keeps twice as many.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 100,
            ef_search: 64,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    slot: usize,
    vector: Embedding,
    /// Neighbor node ids per layer, `links[0]` is the base layer.
    links: Vec<Vec<u32>>,
    deleted: bool,
}

/// Candidate with distance `1 - cosine`; max-heap on distance.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Far(f64, u32);
impl Eq for Far {}
impl PartialOrd for Far {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Far {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Min-heap wrapper.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Near(std::cmp::Reverse<Far>);

/// Hierarchical navigable small-world graph. Replaced vectors are
/// tombstoned and re-inserted; the graph is rebuilt once tombstones
/// outnumber live nodes.
#[derive(Debug, Clone)]
pub struct HnswIndex {
    params: HnswParams,
    nodes: Vec<Node>,
    slot_to_node: Vec<Option<u32>>,
    entry: Option<u32>,
    max_level: usize,
    deleted: usize,
    rng: ChaCha8Rng,
}

impl Default for HnswIndex {
    fn default() -> Self {
        Self::new(HnswParams::default())
    }
}

impl HnswIndex {
    pub fn new(params: HnswParams) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            slot_to_node: Vec::new(),
            entry: None,
            max_level: 0,
            deleted: 0,
            rng: ChaCha8Rng::seed_from_u64(params.seed),
        }
    }

    fn dist(&self, query: &Embedding, node: u32) -> f64 {
        1.0 - score(query, &self.nodes[node as usize].vector)
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            self.params.m * 2
        } else {
            self.params.m
        }
    }

    fn random_level(&mut self) -> usize {
        let ml = 1.0 / (self.params.m.max(2) as f64).ln();
        let u: f64 = self.rng.gen_range(f64::EPSILON..1.0);
        ((-u.ln() * ml).floor() as usize).min(16)
    }

    fn greedy(&self, query: &Embedding, mut cur: u32, layer: usize) -> u32 {
        let mut best = self.dist(query, cur);
        loop {
            let mut moved = false;
            for &n in &self.nodes[cur as usize].links[layer] {
                let d = self.dist(query, n);
                if d < best {
                    best = d;
                    cur = n;
                    moved = true;
                }
            }
            if !moved {
                return cur;
            }
        }
    }

    /// Best-first search of one layer; returns up to `ef` nodes nearest first.
    fn search_layer(&self, query: &Embedding, entry: u32, ef: usize, layer: usize) -> Vec<Far> {
        let mut visited = HashSet::new();
        visited.insert(entry);
        let d0 = self.dist(query, entry);
        let mut candidates = BinaryHeap::new();
        candidates.push(Near(std::cmp::Reverse(Far(d0, entry))));
        let mut found = BinaryHeap::new();
        found.push(Far(d0, entry));
        while let Some(Near(std::cmp::Reverse(Far(d, node)))) = candidates.pop() {
            let worst = found.peek().map_or(f64::INFINITY, |f: &Far| f.0);
            if d > worst && found.len() >= ef {
                break;
            }
            for &n in &self.nodes[node as usize].links[layer] {
                if !visited.insert(n) {
                    continue;
                }
                let dn = self.dist(query, n);
                let worst = found.peek().map_or(f64::INFINITY, |f: &Far| f.0);
                if found.len() < ef || dn < worst {
                    candidates.push(Near(std::cmp::Reverse(Far(dn, n))));
                    found.push(Far(dn, n));
                    if found.len() > ef {
                        found.pop();
                    }
                }
            }
        }
        found.into_sorted_vec()
    }

    /// Neighbor selection heuristic: keep a candidate only if it is closer to
    /// the new node than to every neighbor already kept, then top up.
    fn select_neighbors(&self, candidates: &[Far], m: usize) -> Vec<u32> {
        let mut kept: Vec<u32> = Vec::with_capacity(m);
        let mut skipped = Vec::new();
        for &Far(d, c) in candidates {
            if kept.len() >= m {
                break;
            }
            let diverse = kept.iter().all(|&k| {
                1.0 - score(&self.nodes[c as usize].vector, &self.nodes[k as usize].vector) > d
            });
            if diverse {
                kept.push(c);
            } else {
                skipped.push(c);
            }
        }
        for c in skipped {
            if kept.len() >= m {
                break;
            }
            kept.push(c);
        }
        kept
    }

    fn insert_node(&mut self, slot: usize, vector: Embedding) {
        let level = self.random_level();
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            slot,
            vector,
            links: vec![Vec::new(); level + 1],
            deleted: false,
        });
        if slot >= self.slot_to_node.len() {
            self.slot_to_node.resize(slot + 1, None);
        }
        self.slot_to_node[slot] = Some(id);

        let Some(mut cur) = self.entry else {
            self.entry = Some(id);
            self.max_level = level;
            return;
        };
        let query = self.nodes[id as usize].vector.clone();
        for layer in (level + 1..=self.max_level).rev() {
            cur = self.greedy(&query, cur, layer);
        }
        for layer in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(&query, cur, self.params.ef_construction, layer);
            let max = self.max_links(layer);
            let neighbors = self.select_neighbors(&found, self.params.m.min(max));
            for &n in &neighbors {
                let links = &mut self.nodes[n as usize].links[layer];
                links.push(id);
                if links.len() > max {
                    let anchor = self.nodes[n as usize].vector.clone();
                    let mut cands: Vec<Far> = self.nodes[n as usize].links[layer]
                        .iter()
                        .map(|&x| Far(self.dist(&anchor, x), x))
                        .collect();
                    cands.sort();
                    let pruned = self.select_neighbors(&cands, max);
                    self.nodes[n as usize].links[layer] = pruned;
                }
            }
            self.nodes[id as usize].links[layer] = neighbors;
            cur = found.first().map_or(cur, |f| f.1);
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = Some(id);
        }
    }

    fn rebuild(&mut self) {
        let mut live: Vec<(usize, Embedding)> = self
            .nodes
            .drain(..)
            .filter(|n| !n.deleted)
            .map(|n| (n.slot, n.vector))
            .collect();
        live.sort_by_key(|(slot, _)| *slot);
        self.slot_to_node.iter_mut().for_each(|s| *s = None);
        self.entry = None;
        self.max_level = 0;
        self.deleted = 0;
        self.rng = ChaCha8Rng::seed_from_u64(self.params.seed);
        for (slot, v) in live {
            self.insert_node(slot, v);
        }
    }
}

impl VectorIndex for HnswIndex {
    fn upsert(&mut self, slot: usize, embedding: &Embedding) {
        if let Some(Some(old)) = self.slot_to_node.get(slot).copied() {
            self.nodes[old as usize].deleted = true;
            self.deleted += 1;
        }
        self.insert_node(slot, embedding.clone());
        if self.deleted > 64 && self.deleted > self.len() {
            self.rebuild();
        }
    }

    fn search(&self, query: &Embedding, k: usize) -> Vec<(usize, f64)> {
        let Some(mut cur) = self.entry else {
            return Vec::new();
        };
        if k == 0 {
            return Vec::new();
        }
        for layer in (1..=self.max_level).rev() {
            cur = self.greedy(query, cur, layer);
        }
        let ef = self.params.ef_search.max(k) + self.deleted.min(self.params.ef_search);
        let mut hits: Vec<(usize, f64)> = self
            .search_layer(query, cur, ef, 0)
            .into_iter()
            .filter(|f| !self.nodes[f.1 as usize].deleted)
            .map(|f| {
                let n = &self.nodes[f.1 as usize];
                (n.slot, score(query, &n.vector))
            })
            .collect();
        hits.sort_by(rank_order);
        hits.truncate(k);
        hits
    }

    fn len(&self) -> usize {
        self.nodes.len() - self.deleted
    }

    fn get(&self, slot: usize) -> Option<&Embedding> {
        let node = (*self.slot_to_node.get(slot)?)?;
        Some(&self.nodes[node as usize].vector)
    }
}

/// The configured backend.
#[derive(Debug, Clone)]
pub enum AnyIndex {
    Exhaustive(ExhaustiveIndex),
    Hnsw(Box<HnswIndex>),
}

impl AnyIndex {
    pub fn new(backend: IndexBackend) -> Self {
        match backend {
            IndexBackend::Exhaustive => AnyIndex::Exhaustive(ExhaustiveIndex::default()),
            IndexBackend::Hnsw => AnyIndex::Hnsw(Box::default()),
        }
    }

    pub fn backend(&self) -> IndexBackend {
        match self {
            AnyIndex::Exhaustive(_) => IndexBackend::Exhaustive,
            AnyIndex::Hnsw(_) => IndexBackend::Hnsw,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, AnyIndex::Exhaustive(_))
    }
}

impl VectorIndex for AnyIndex {
    fn upsert(&mut self, slot: usize, embedding: &Embedding) {
        match self {
            AnyIndex::Exhaustive(i) => i.upsert(slot, embedding),
            AnyIndex::Hnsw(i) => i.upsert(slot, embedding),
        }
    }

    fn search(&self, query: &Embedding, k: usize) -> Vec<(usize, f64)> {
        match self {
            AnyIndex::Exhaustive(i) => i.search(query, k),
            AnyIndex::Hnsw(i) => i.search(query, k),
        }
    }

    fn len(&self) -> usize {
        match self {
            AnyIndex::Exhaustive(i) => i.len(),
            AnyIndex::Hnsw(i) => i.len(),
        }
    }

    fn get(&self, slot: usize) -> Option<&Embedding> {
        match self {
            AnyIndex::Exhaustive(i) => i.get(slot),
            AnyIndex::Hnsw(i) => i.get(slot),
        }
    }
}
