use std::collections::HashMap;

use lama_core::interpret::{top_words, AttentionRecord, TopWordsConfig};
use lama_core::rng;
use proptest::prelude::*;
use rand::Rng;

fn records(seed: u64, n: usize) -> Vec<AttentionRecord> {
    let mut g = rng::stream(seed, 11);
    (0..n)
        .map(|doc_id| {
            let t = g.random_range(1..8);
            let m = g.random_range(1..4);
            let tokens: Vec<String> = (0..t).map(|_| format!("w{}", g.random_range(0..6))).collect();
            // Quantized weights make ties likely.
            let attention = (0..m)
                .map(|_| (0..t).map(|_| g.random_range(0..4) as f64 / 4.0).collect())
                .collect();
            let label = if g.random_bool(0.5) { "a" } else { "b" }.to_string();
            AttentionRecord { doc_id, tokens, predicted: label.clone(), label, attention }
        })
        .collect()
}

/// Brute force: gather every occurrence, then rank.
fn expected(recs: &[AttentionRecord], class: Option<&str>, cfg: TopWordsConfig) -> Vec<(String, f64, usize)> {
    let mut occ: HashMap<String, Vec<f64>> = HashMap::new();
    for r in recs {
        if class.is_some_and(|c| c != r.label) {
            continue;
        }
        for (t, w) in r.tokens.iter().enumerate() {
            let best = r.attention.iter().map(|row| row[t]).fold(f64::MIN, f64::max);
            occ.entry(w.clone()).or_default().push(best);
        }
    }
    let mut out: Vec<(String, f64, usize)> = occ
        .into_iter()
        .filter(|(_, v)| v.len() >= cfg.min_occurrences)
        .map(|(w, v)| (w, v.iter().sum::<f64>() / v.len() as f64, v.len()))
        .collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    out.truncate(cfg.top_k);
    out
}

proptest! {
    #[test]
    fn ranking_matches_brute_force(seed in 0u64..2000, n in 1usize..20, top_k in 1usize..8, min_occ in 1usize..4, filter in 0u8..3) {
        let recs = records(seed, n);
        let class = match filter { 0 => None, 1 => Some("a"), _ => Some("b") };
        let cfg = TopWordsConfig { top_k, min_occurrences: min_occ };
        let got: Vec<(String, f64, usize)> = top_words(&recs, class, cfg)
            .into_iter()
            .map(|w| (w.word, w.score, w.count))
            .collect();
        let want = expected(&recs, class, cfg);
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            prop_assert_eq!(&g.0, &w.0);
            prop_assert!((g.1 - w.1).abs() < 1e-12);
            prop_assert_eq!(g.2, w.2);
        }
    }
}
