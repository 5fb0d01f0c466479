use proptest::prelude::*;

use geotoken::config::{DecodeMode, RunConfig, SelectorKind};
use geotoken::decode::{sample_pool, FnModel};
use geotoken::gallery::{Gallery, GalleryEntry};
use geotoken::geocell::{common_prefix_len, detokenize, tokenize, CellId};
use geotoken::rerank::{reward_feature_dim, reward_features, select_ideal, select_logprob};
use geotoken::{LatLon, TokenSequence};

fn coord() -> impl Strategy<Value = LatLon> {
    (-90.0f64..=90.0, -180.0f64..180.0).prop_map(|(a, b)| LatLon::new(a, b).unwrap())
}

fn token_seq(levels: usize) -> impl Strategy<Value = TokenSequence> {
    (0u8..6, proptest::collection::vec(0u8..4, levels - 1)).prop_map(|(f, rest)| {
        let mut t = vec![f];
        t.extend(rest);
        TokenSequence::new(t).unwrap()
    })
}

/// Deterministic logits that depend on the prefix, for decoding checks.
fn toy_logits(prefix: &[u8]) -> Vec<f64> {
    let h = prefix
        .iter()
        .fold(7u64, |a, &t| a.wrapping_mul(31).wrapping_add(t as u64 + 1));
    (0..6).map(|k| ((h.wrapping_mul(k + 3) % 97) as f64) / 20.0).collect()
}

proptest! {
    #[test]
    fn detokenize_then_tokenize_is_identity(t in token_seq(21)) {
        prop_assert_eq!(tokenize(detokenize(&t), 21).unwrap(), t);
    }

    #[test]
    fn token_text_form_round_trips(t in token_seq(21)) {
        let back: TokenSequence = t.to_string().parse().unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn shared_prefix_means_shared_cell(p in coord(), q in coord(), l in 1usize..=21) {
        let (a, b) = (tokenize(p, 21).unwrap(), tokenize(q, 21).unwrap());
        let level = (l - 1) as u8;
        let same = CellId::from_latlon(p, level).unwrap() == CellId::from_latlon(q, level).unwrap();
        prop_assert_eq!(common_prefix_len(&a, &b).unwrap() >= l, same);
    }

    #[test]
    fn retrieval_paths_agree(
        vecs in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 4), 20..60),
        q in proptest::collection::vec(-1.0f32..1.0, 4),
        m in 1usize..10,
    ) {
        prop_assume!(q.iter().any(|x| x.abs() > 1e-3));
        prop_assume!(vecs.iter().all(|v| v.iter().any(|x| x.abs() > 1e-3)));
        let entries: Vec<GalleryEntry> = vecs
            .iter()
            .enumerate()
            .map(|(i, v)| GalleryEntry::new(i as u64, v.clone(), LatLon::new(0.0, i as f64).unwrap(), 21).unwrap())
            .collect();
        let g = Gallery::build(entries).unwrap();
        let par = g.top_m(&q, m, None).unwrap();
        let seq = g.top_m_sequential(&q, m, None).unwrap();
        let batch = g.top_m_batch(std::slice::from_ref(&q), m, &[None]).unwrap();
        prop_assert_eq!(&par, &seq);
        prop_assert_eq!(&batch[0].0, &seq);
        for w in seq.neighbors.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
    }

    #[test]
    fn pools_are_reproducible_and_valid(seed in any::<u64>(), k in 1usize..12, t in 0.1f64..2.0) {
        let model = FnModel { levels: 6, logits: |p: &[u8]| toy_logits(p) };
        let a = sample_pool(&model, t, k, seed).unwrap();
        let b = sample_pool(&model, t, k, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.candidates.len(), k);
        for c in &a.candidates {
            prop_assert!(c.logprob <= 0.0);
            prop_assert!(c.tokens.as_slice()[1..].iter().all(|&x| x < 4));
            prop_assert_eq!(c.location, detokenize(&c.tokens));
        }
        let i = select_logprob(&a).unwrap();
        prop_assert!(a.candidates.iter().all(|c| c.logprob <= a.candidates[i].logprob));
    }

    #[test]
    fn ideal_selector_is_closest(seed in any::<u64>(), truth in coord()) {
        let model = FnModel { levels: 8, logits: |p: &[u8]| toy_logits(p) };
        let pool = sample_pool(&model, 1.5, 10, seed).unwrap();
        let i = select_ideal(&pool, truth).unwrap();
        let best = geotoken::geodesy::haversine_km(pool.candidates[i].location, truth);
        for c in &pool.candidates {
            prop_assert!(best <= geotoken::geodesy::haversine_km(c.location, truth));
        }
        let f = reward_features(&pool.candidates[i], &[pool.candidates[0].tokens.clone()]);
        prop_assert_eq!(f.len(), reward_feature_dim(8));
    }

    #[test]
    fn config_round_trips(t in 0.05f64..3.0, k in 1usize..64, seed in 0..=i64::MAX as u64, mode in 0usize..4) {
        let mut cfg = RunConfig::default();
        cfg.predict.temperature = t;
        cfg.predict.pool_size = k;
        cfg.predict.seed = seed;
        cfg.predict.mode = [DecodeMode::Greedy, DecodeMode::Beam, DecodeMode::Pool, DecodeMode::Knn][mode];
        cfg.predict.selector = SelectorKind::Similarity;
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}
