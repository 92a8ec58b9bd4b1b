//! Closed-form trainable-parameter counts for the model and the Transformer
//! baseline.

use serde::{Deserialize, Serialize};

use crate::baseline::TeConfig;
use crate::error::Result;
use crate::model::{ContextMode, Encoder, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lama,
    Te,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub kind: ModelKind,
    pub heads: usize,
    pub total: usize,
    pub components: Vec<Component>,
}

pub const CLASSIFIER: &str = "classifier";

impl ParamReport {
    fn new(kind: ModelKind, heads: usize, components: Vec<(&str, usize)>) -> Self {
        let components: Vec<Component> = components
            .into_iter()
            .map(|(name, count)| Component {
                name: name.to_string(),
                count,
            })
            .collect();
        Self {
            kind,
            heads,
            total: components.iter().map(|c| c.count).sum(),
            components,
        }
    }

    pub fn component(&self, name: &str) -> usize {
        self.components
            .iter()
            .filter(|c| c.name == name)
            .map(|c| c.count)
            .sum()
    }

    /// Everything but the output classifier.
    pub fn body(&self) -> usize {
        self.total - self.component(CLASSIFIER)
    }
}

fn gru(d: usize, h: usize) -> usize {
    3 * (h * d + h * h + h)
}

/// Exact count for `config`. The attention layer costs `2·d_ann` per head;
/// the classifier input (`m·d_ann` wide) is reported separately.
pub fn lama_param_count(config: &ModelConfig) -> ParamReport {
    let (d, h, m, d_ann) = (config.embed_dim, config.hidden, config.heads, config.d_ann());
    let mut parts = vec![("embeddings", config.vocab_size * d)];
    if config.encoder == Encoder::Bigru {
        parts.push(("gru_forward", gru(d, h)));
        parts.push(("gru_backward", gru(d, h)));
    }
    parts.push(("word_transform", d_ann * d_ann + d_ann));
    parts.push(("factors", 2 * d_ann * m));
    if config.context == ContextMode::Learned {
        parts.push(("context", d_ann));
    }
    let k = config.mlp_hidden;
    parts.push((CLASSIFIER, k * config.d_doc() + k + config.classes * k + config.classes));
    ParamReport::new(ModelKind::Lama, m, parts)
}

/// Exact count for a Transformer encoder with mean pooling and a linear
/// classifier. Independent of the head count.
pub fn te_param_count(te: &TeConfig, vocab_size: usize, classes: usize) -> Result<ParamReport> {
    te.validate()?;
    let (dm, ff, layers) = (te.d_model, te.d_ff, te.layers);
    let parts = vec![
        ("embeddings", vocab_size * dm),
        ("positions", te.max_positions * dm),
        ("attention", layers * 4 * (dm * dm + dm)),
        ("ffn", layers * (dm * ff + ff + ff * dm + dm)),
        ("norms", layers * 2 * 2 * dm),
        (CLASSIFIER, dm * classes + classes),
    ];
    Ok(ParamReport::new(ModelKind::Te, te.heads, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(m: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 1000,
            embed_dim: 512,
            hidden: 256,
            heads: m,
            mlp_hidden: 512,
            classes: 5,
            encoder: Encoder::Bigru,
            context: ContextMode::DocMean,
        }
    }

    #[test]
    fn body_marginal_is_two_d_ann() {
        for m in 1..70 {
            let a = lama_param_count(&config(m));
            let b = lama_param_count(&config(m + 1));
            assert_eq!(b.body() - a.body(), 2 * 512);
            assert_eq!(a.total, a.components.iter().map(|c| c.count).sum::<usize>());
        }
    }

    #[test]
    fn table_deltas() {
        let body = |m| lama_param_count(&config(m)).body();
        assert_eq!(body(4) - body(2), 2048);
        assert_eq!(body(16) - body(8), 8192);
        assert_eq!(body(64) - body(32), 32768);
    }

    #[test]
    fn te_projection_subtotal_and_divisibility() {
        let te = TeConfig::default();
        let r = te_param_count(&te, 1000, 5).unwrap();
        assert_eq!(r.component("attention"), 1_050_624);
        let bad = TeConfig { heads: 3, ..te };
        assert!(te_param_count(&bad, 1000, 5).is_err());
    }
}
