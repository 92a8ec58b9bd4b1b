//! Attention export and top-attended-word aggregation.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use lama_autodiff::Tape;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{LamaError, Result};
use crate::model::forward_batch;
use crate::rng;
use crate::text::{encode, Dataset, Document};
use crate::trainer::{argmax, remap_labels};

pub const DEFAULT_TOP_K: usize = 20;
pub const DEFAULT_MIN_OCCURRENCES: usize = 3;

/// One document's attention, as written to JSON lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub doc_id: usize,
    /// Tokens after truncation, one per attention column.
    pub tokens: Vec<String>,
    pub label: String,
    pub predicted: String,
    /// `m` rows of `T` weights.
    pub attention: Vec<Vec<f64>>,
}

/// Runs the checkpoint over `dataset` in eval mode and collects `A` per document.
pub fn attention_records(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<Vec<AttentionRecord>> {
    let dataset = remap_labels(dataset, &checkpoint.labels)?;
    let max_len = checkpoint.config.max_len;
    let params = &checkpoint.params;
    dataset
        .examples
        .par_iter()
        .enumerate()
        .map(|(doc_id, ex)| {
            let enc = encode(&ex.tokens, &checkpoint.vocab, max_len);
            let doc = Document {
                ids: enc.ids[..enc.true_len].to_vec(),
                true_len: enc.true_len,
                label: ex.label,
            };
            let tape = Tape::new();
            let vars = params.register(&tape);
            let graph = forward_batch::<f32, rng::Rng>(&tape, &params.config, &vars, &[&doc], None)?;
            let probs = tape.softmax(graph.logits, lama_autodiff::Axis::Cols)?;
            let probs: Vec<f64> = tape.value(probs).data().iter().map(|&p| p as f64).collect();
            let a = tape.value(graph.docs[0].attention.a);
            let attention = (0..a.rows())
                .map(|r| a.row(r).iter().map(|&w| w as f64).collect())
                .collect();
            let name = |k: usize| checkpoint.labels.name(k).unwrap_or_default().to_string();
            Ok(AttentionRecord {
                doc_id,
                tokens: ex.tokens[..enc.true_len].to_vec(),
                label: name(ex.label),
                predicted: name(argmax(&probs)),
                attention,
            })
        })
        .collect()
}

pub fn write_jsonl<W: Write>(records: &[AttentionRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<AttentionRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| LamaError::io("<attention records>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AttentionRecord = serde_json::from_str(&line).map_err(|e| {
            LamaError::MalformedLine {
                path: "<attention records>".into(),
                line: i + 1,
                reason: e.to_string(),
            }
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordScore {
    pub word: String,
    pub score: f64,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TopWordsConfig {
    pub top_k: usize,
    pub min_occurrences: usize,
}

impl Default for TopWordsConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            min_occurrences: DEFAULT_MIN_OCCURRENCES,
        }
    }
}

/// Ranks words by the mean, over their occurrences, of the largest weight any
/// head gives that occurrence. Only documents whose true label is `class`
/// count when a class is given. Ties order lexicographically.
pub fn top_words(records: &[AttentionRecord], class: Option<&str>, cfg: TopWordsConfig) -> Vec<WordScore> {
    let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| class.is_none_or(|c| r.label == c)) {
        for (t, word) in r.tokens.iter().enumerate() {
            let max = r
                .attention
                .iter()
                .filter_map(|row| row.get(t).copied())
                .fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                continue;
            }
            let e = acc.entry(word.as_str()).or_insert((0.0, 0));
            e.0 += max;
            e.1 += 1;
        }
    }
    let mut scores: Vec<WordScore> = acc
        .into_iter()
        .filter(|(_, (_, n))| *n >= cfg.min_occurrences)
        .map(|(w, (s, n))| WordScore {
            word: w.to_string(),
            score: s / n as f64,
            count: n,
        })
        .collect();
    scores.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.word.cmp(&b.word)));
    scores.truncate(cfg.top_k);
    scores
}
