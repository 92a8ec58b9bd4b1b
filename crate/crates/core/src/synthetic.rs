//! Small generated corpora with known structure, used by tests and demos.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::rng;
use crate::text::{Dataset, Split};

pub const FILLER_WORDS: usize = 40;
pub const POSITIVE: [&str; 4] = ["great", "excellent", "superb", "lovely"];
pub const NEGATIVE: [&str; 4] = ["awful", "terrible", "dreadful", "poor"];
/// First aspect: quality of the food.
pub const FOOD: [[&str; 3]; 2] = [["tasty", "delicious", "fresh"], ["bland", "stale", "soggy"]];
/// Second aspect: quality of the service.
pub const SERVICE: [[&str; 3]; 2] = [["friendly", "prompt", "polite"], ["rude", "slow", "careless"]];

fn filler(i: usize) -> String {
    format!("w{i:02}")
}

fn fillers<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<String> {
    (0..len).map(|_| filler(rng.random_range(0..FILLER_WORDS))).collect()
}

/// Inserts a random member of `choices` at a random position.
fn insert<R: Rng + ?Sized>(rng: &mut R, words: &mut Vec<String>, choices: &[&str]) {
    let token = choices.choose(rng).unwrap().to_string();
    let at = rng.random_range(0..=words.len());
    words.insert(at, token);
}

/// Two classes, `pos` and `neg`. Every document is filler plus one or two
/// keywords drawn from its class list, so a bag-of-words linear model
/// separates the classes perfectly.
pub fn keyword_dataset(n: usize, seed: u64, split: Split) -> Dataset {
    let mut g = rng::stream(seed, 0x6b6579);
    let pairs: Vec<(String, String)> = (0..n)
        .map(|i| {
            let positive = i % 2 == 0;
            let len = g.random_range(6..14);
            let mut words = fillers(&mut g, len);
            let list = if positive { &POSITIVE } else { &NEGATIVE };
            for _ in 0..g.random_range(1..=2) {
                insert(&mut g, &mut words, list);
            }
            let label = if positive { "pos" } else { "neg" };
            (label.to_string(), words.join(" "))
        })
        .collect();
    Dataset::from_pairs(&pairs, split)
}

/// Four classes `<food>-<service>`, each aspect signalled by one keyword from
/// its own disjoint group, placed at independent random positions.
pub fn multi_aspect_dataset(n: usize, seed: u64, split: Split) -> Dataset {
    let mut g = rng::stream(seed, 0x617370);
    let pairs: Vec<(String, String)> = (0..n)
        .map(|i| {
            let food = i % 2;
            let service = (i / 2) % 2;
            let len = g.random_range(8..16);
            let mut words = fillers(&mut g, len);
            insert(&mut g, &mut words, &FOOD[food]);
            insert(&mut g, &mut words, &SERVICE[service]);
            let name = |k: usize| if k == 0 { "good" } else { "bad" };
            (format!("{}-{}", name(food), name(service)), words.join(" "))
        })
        .collect();
    Dataset::from_pairs(&pairs, split)
}
