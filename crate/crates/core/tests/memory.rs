mod common;

use common::*;
use ltm_core::config::IndexBackend;
use ltm_core::encoder::{Embedding, HashingEmbedder};
use ltm_core::memory::{MemoryStore, ReadParams, WriteOutcome};
use ltm_core::{EngineConfig, Error, Speaker};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn store_with(cfg: &EngineConfig, dim: usize, n: usize, seed: u64) -> MemoryStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = MemoryStore::new(Speaker::User, cfg, "test", dim);
    for i in 0..n {
        store
            .write_embedded(persona(format!("p{i}"), Speaker::User, format!("text {i}")), random_unit(&mut rng, dim))
            .unwrap();
    }
    store
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exhaustive_read_equals_oracle(
        n in 0usize..60,
        dim in 2usize..6,
        k in 1usize..8,
        threshold in -1.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let cfg = EngineConfig { dup_threshold: 1.0, ..EngineConfig::default() };
        let store = store_with(&cfg, dim, n, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..5 {
            let q = random_unit(&mut rng, dim);
            let got = store.read("q", &q, ReadParams { top_k: k, sim_threshold: threshold }).unwrap();
            let want = read_oracle(&store, q.as_slice(), k, threshold);
            prop_assert_eq!(got.hits.len(), want.len());
            for (h, (id, s)) in got.hits.iter().zip(&want) {
                prop_assert_eq!(&h.persona.id, id);
                prop_assert!((h.score - s).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn store_size_never_exceeds_distinct_writes(texts in prop::collection::vec("[a-e]{1,6}", 1..40)) {
        let enc = HashingEmbedder::new(64).unwrap();
        let mut store = MemoryStore::for_encoder(Speaker::User, &EngineConfig::default(), &enc);
        for (i, t) in texts.iter().enumerate() {
            store.write(persona(format!("p{i}"), Speaker::User, t.clone()), &enc).unwrap();
            prop_assert!(store.index_consistent());
        }
        let distinct: std::collections::HashSet<_> = texts.iter().collect();
        prop_assert!(store.len() <= distinct.len());
    }
}

#[test]
fn duplicate_write_replaces_in_place() {
    let enc = HashingEmbedder::default();
    let mut store = MemoryStore::for_encoder(Speaker::User, &EngineConfig::default(), &enc);
    let a = store.write(persona("a", Speaker::User, "我是一名画家"), &enc).unwrap();
    store.write(persona("b", Speaker::User, "我喜欢吃火锅"), &enc).unwrap();
    let c = store.write(persona("c", Speaker::User, "我是一名画家"), &enc).unwrap();
    assert_eq!(a, WriteOutcome::Inserted { id: "a".into() });
    assert_eq!(c, WriteOutcome::Replaced { old_id: "a".into(), id: "c".into() });
    assert_eq!(store.len(), 2);
    assert_eq!(store.entries()[0].persona.id, "c");
    assert_eq!(store.entries()[0].replaced_count, 1);
    assert_eq!(store.entries()[0].written_at, 2);
}

#[test]
fn capacity_limit_rejects_new_entries_but_allows_replacement() {
    let enc = HashingEmbedder::default();
    let cfg = EngineConfig { capacity_limit: Some(1), ..EngineConfig::default() };
    let mut store = MemoryStore::for_encoder(Speaker::User, &cfg, &enc);
    store.write(persona("a", Speaker::User, "我是一名画家"), &enc).unwrap();
    assert!(matches!(
        store.write(persona("b", Speaker::User, "我喜欢吃火锅"), &enc),
        Err(Error::CapacityExceeded(1))
    ));
    assert!(store.write(persona("c", Speaker::User, "我是一名画家"), &enc).is_ok());
    assert_eq!(store.len(), 1);
}

#[test]
fn bad_writes_are_rejected() {
    let cfg = EngineConfig::default();
    let mut store = MemoryStore::new(Speaker::User, &cfg, "test", 3);
    let wrong_dim = Embedding::new(vec![1.0, 0.0]).unwrap();
    assert!(matches!(
        store.write_embedded(persona("a", Speaker::User, "x"), wrong_dim),
        Err(Error::DimensionMismatch { expected: 3, found: 2 })
    ));
    let zero = Embedding::new(vec![0.0; 3]).unwrap();
    assert!(matches!(store.write_embedded(persona("a", Speaker::User, "x"), zero), Err(Error::ZeroNorm)));
    let ok = Embedding::new(vec![1.0, 0.0, 0.0]).unwrap();
    assert!(matches!(
        store.write_embedded(persona("a", Speaker::Bot, "x"), ok),
        Err(Error::OwnerMismatch { .. })
    ));
    assert!(store.is_empty());
}

#[test]
fn read_on_empty_store_is_empty() {
    let store = MemoryStore::new(Speaker::Bot, &EngineConfig::default(), "test", 3);
    let q = Embedding::new(vec![1.0, 0.0, 0.0]).unwrap();
    let params = ReadParams { top_k: 5, sim_threshold: -1.0 };
    assert!(store.read("q", &q, params).unwrap().hits.is_empty());
}

#[test]
fn hnsw_holds_a_hundred_thousand_entries() {
    let cfg = EngineConfig {
        index_backend: IndexBackend::Hnsw,
        dup_threshold: 1.0,
        ..EngineConfig::default()
    };
    let n = 100_000;
    let store = store_with(&cfg, 8, n, 42);
    assert_eq!(store.len(), n);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = ReadParams { top_k: 5, sim_threshold: -1.0 };
    let mut overlap = 0;
    for _ in 0..20 {
        let q = random_unit(&mut rng, 8);
        let got = store.read("q", &q, params).unwrap();
        let want = read_oracle(&store, q.as_slice(), 5, -1.0);
        overlap += got.hits.iter().filter(|h| want.iter().any(|(id, _)| *id == h.persona.id)).count();
    }
    assert!(overlap as f64 / 100.0 >= 0.9, "overlap {overlap}/100");
}
