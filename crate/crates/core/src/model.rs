//! Full model: embeddings, optional bi-GRU, LAMA attention and the classifier.

use lama_autodiff::{Axis, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, context_doc_mean, AttentionVars, AttnParams, AttnVars};
use crate::classifier::{disagreement, classify_logits, ClassifierParams, ClassifierVars, RegularizerKind, TrainMode};
use crate::error::{LamaError, Result};
use crate::gru::{bigru_encode, BiGruParams, BiGruVars, GruParams, GruVars, GRU_TENSORS};
use crate::text::Document;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoder {
    #[default]
    Bigru,
    /// Attention straight over the embeddings.
    Le,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextMode {
    /// One global trainable context vector.
    Learned,
    /// Per-document mean of the word embeddings.
    #[default]
    DocMean,
}

impl std::str::FromStr for Encoder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bigru" => Ok(Self::Bigru),
            "le" => Ok(Self::Le),
            other => Err(format!("unknown encoder `{other}`")),
        }
    }
}

impl std::str::FromStr for ContextMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "learned" => Ok(Self::Learned),
            "doc-mean" => Ok(Self::DocMean),
            other => Err(format!("unknown context mode `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// GRU hidden size per direction.
    pub hidden: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub classes: usize,
    pub encoder: Encoder,
    pub context: ContextMode,
}

impl ModelConfig {
    /// Width of one word annotation.
    pub fn d_ann(&self) -> usize {
        match self.encoder {
            Encoder::Bigru => 2 * self.hidden,
            Encoder::Le => self.embed_dim,
        }
    }

    pub fn d_doc(&self) -> usize {
        self.d_ann() * self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocabulary size", self.vocab_size),
            ("embedding dimension", self.embed_dim),
            ("hidden size", self.hidden),
            ("head count", self.heads),
            ("MLP hidden size", self.mlp_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(LamaError::Config(format!("{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(LamaError::Config(format!(
                "need at least two classes, found {}",
                self.classes
            )));
        }
        if self.context == ContextMode::DocMean && self.embed_dim != self.d_ann() {
            return Err(LamaError::Dimension(format!(
                "document-mean context needs embedding dim {} to equal annotation dim {}",
                self.embed_dim,
                self.d_ann()
            )));
        }
        Ok(())
    }
}

/// Every trainable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    /// `|V| × d`; row 0 is the padding token and stays zero.
    pub embedding: Tensor<F>,
    pub gru: Option<BiGruParams<F>>,
    pub attention: AttnParams<F>,
    pub classifier: ClassifierParams<F>,
}

impl<F: Scalar> ModelParams<F> {
    /// Initializes everything except the embeddings, which are supplied.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, embedding: Tensor<F>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if embedding.shape() != (config.vocab_size, config.embed_dim) {
            return Err(LamaError::Dimension(format!(
                "embedding matrix is {:?}, config expects {}×{}",
                embedding.shape(),
                config.vocab_size,
                config.embed_dim
            )));
        }
        let gru = match config.encoder {
            Encoder::Bigru => Some(BiGruParams::init(config.embed_dim, config.hidden, rng)),
            Encoder::Le => None,
        };
        let attention = AttnParams::init(
            config.d_ann(),
            config.heads,
            config.context == ContextMode::Learned,
            rng,
        );
        let classifier = ClassifierParams::init(config.d_doc(), config.mlp_hidden, config.classes, rng);
        Ok(Self {
            config,
            embedding,
            gru,
            attention,
            classifier,
        })
    }

    /// Trainable tensors with their manifest names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        if let Some(g) = &self.gru {
            for (dir, p) in [("forward", &g.forward), ("backward", &g.backward)] {
                for (name, t) in GRU_TENSORS.iter().zip(p.tensors()) {
                    out.push((format!("gru.{dir}.{name}"), t));
                }
            }
        }
        let a = &self.attention;
        out.push(("attention.w_w".into(), &a.w_w));
        out.push(("attention.b_w".into(), &a.b_w));
        out.push(("attention.p".into(), &a.p));
        out.push(("attention.q".into(), &a.q));
        if let Some(c) = &a.c {
            out.push(("attention.c".into(), c));
        }
        let c = &self.classifier;
        out.push(("classifier.w1".into(), &c.w1));
        out.push(("classifier.b1".into(), &c.b1));
        out.push(("classifier.wc".into(), &c.wc));
        out.push(("classifier.bc".into(), &c.bc));
        out
    }

    /// Mutable view in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.embedding];
        if let Some(g) = &mut self.gru {
            out.extend(g.forward.tensors_mut());
            out.extend(g.backward.tensors_mut());
        }
        let a = &mut self.attention;
        out.extend([&mut a.w_w, &mut a.b_w, &mut a.p, &mut a.q]);
        if let Some(c) = &mut a.c {
            out.push(c);
        }
        let c = &mut self.classifier;
        out.extend([&mut c.w1, &mut c.b1, &mut c.wc, &mut c.bc]);
        out
    }

    /// Tensors in manifest order.
    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Rebuilds parameters from tensors in manifest order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let mut it = tensors.into_iter();
        let mut next = |what: &str| {
            it.next()
                .ok_or_else(|| LamaError::Checkpoint(format!("missing tensor `{what}`")))
        };
        let embedding = next("embedding")?;
        let gru = match config.encoder {
            Encoder::Bigru => {
                let mut dirs = Vec::with_capacity(2);
                for _ in 0..2 {
                    let mut t = Vec::with_capacity(9);
                    for name in GRU_TENSORS {
                        t.push(next(name)?);
                    }
                    dirs.push(GruParams::from_vec(t));
                }
                let backward = dirs.pop().unwrap();
                let forward = dirs.pop().unwrap();
                Some(BiGruParams { forward, backward })
            }
            Encoder::Le => None,
        };
        let w_w = next("attention.w_w")?;
        let b_w = next("attention.b_w")?;
        let p = next("attention.p")?;
        let q = next("attention.q")?;
        let c = match config.context {
            ContextMode::Learned => Some(next("attention.c")?),
            ContextMode::DocMean => None,
        };
        let classifier = ClassifierParams {
            w1: next("classifier.w1")?,
            b1: next("classifier.b1")?,
            wc: next("classifier.wc")?,
            bc: next("classifier.bc")?,
        };
        if it.next().is_some() {
            return Err(LamaError::Checkpoint("unexpected extra tensors".into()));
        }
        let params = Self {
            config,
            embedding,
            gru,
            attention: AttnParams { w_w, b_w, p, q, c },
            classifier,
        };
        params.check_shapes()?;
        Ok(params)
    }

    /// Verifies every tensor against the shapes implied by the config.
    pub fn check_shapes(&self) -> Result<()> {
        let expected = expected_shapes(&self.config);
        let actual = self.named();
        if expected.len() != actual.len() {
            return Err(LamaError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((name, shape), (_, t)) in expected.iter().zip(&actual) {
            if t.shape() != *shape {
                return Err(LamaError::Checkpoint(format!(
                    "tensor `{name}` is {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Trainable scalar count, walking the registry.
    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn register<'a>(&'a self, tape: &Tape<'a, F>) -> ModelVars {
        self.register_all(tape).0
    }

    /// Registers every tensor, also returning the handles in manifest order.
    pub fn register_all<'a>(&'a self, tape: &Tape<'a, F>) -> (ModelVars, Vec<Var>) {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| tape.leaf_ref(t)).collect();
        (ModelVars::from_ordered(&self.config, &vars), vars)
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let tensors = self.tensors().into_iter().map(|t| t.cast()).collect();
        ModelParams::from_tensors(self.config, tensors).expect("shapes preserved by cast")
    }
}

/// Manifest names and shapes implied by `config`.
pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let (d, h, d_ann) = (config.embed_dim, config.hidden, config.d_ann());
    let mut out = vec![("embedding".to_string(), (config.vocab_size, d))];
    if config.encoder == Encoder::Bigru {
        for dir in ["forward", "backward"] {
            for name in GRU_TENSORS {
                let shape = match name.as_bytes()[0] {
                    b'w' => (h, d),
                    b'u' => (h, h),
                    _ => (1, h),
                };
                out.push((format!("gru.{dir}.{name}"), shape));
            }
        }
    }
    out.push(("attention.w_w".into(), (d_ann, d_ann)));
    out.push(("attention.b_w".into(), (1, d_ann)));
    out.push(("attention.p".into(), (d_ann, config.heads)));
    out.push(("attention.q".into(), (d_ann, config.heads)));
    if config.context == ContextMode::Learned {
        out.push(("attention.c".into(), (1, d_ann)));
    }
    out.push(("classifier.w1".into(), (config.mlp_hidden, config.d_doc())));
    out.push(("classifier.b1".into(), (1, config.mlp_hidden)));
    out.push(("classifier.wc".into(), (config.classes, config.mlp_hidden)));
    out.push(("classifier.bc".into(), (1, config.classes)));
    out
}

/// Tape handles for [`ModelParams`].
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub embedding: Var,
    pub gru: Option<BiGruVars>,
    pub attention: AttnVars,
    pub classifier: ClassifierVars,
}

impl ModelVars {
    /// Handles listed in manifest order.
    pub fn from_ordered(config: &ModelConfig, vars: &[Var]) -> Self {
        let mut i = 0;
        let mut take = || {
            let v = vars[i];
            i += 1;
            v
        };
        let embedding = take();
        let gru = (config.encoder == Encoder::Bigru).then(|| {
            let f: Vec<Var> = (0..9).map(|_| take()).collect();
            let b: Vec<Var> = (0..9).map(|_| take()).collect();
            BiGruVars {
                forward: GruVars::from_slice(&f),
                backward: GruVars::from_slice(&b),
            }
        });
        let (w_w, b_w, p, q) = (take(), take(), take(), take());
        let c = (config.context == ContextMode::Learned).then(&mut take);
        let classifier = ClassifierVars {
            w1: take(),
            b1: take(),
            wc: take(),
            bc: take(),
        };
        Self {
            embedding,
            gru,
            attention: AttnVars { w_w, b_w, p, q, c },
            classifier,
        }
    }
}

/// Attention of one document inside a batch graph.
#[derive(Clone, Debug)]
pub struct DocGraph {
    pub attention: AttentionVars,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct BatchGraph {
    /// `B × C`.
    pub logits: Var,
    pub docs: Vec<DocGraph>,
}

/// Encodes and attends over one document whose embedded rows are `x`.
pub fn document_attention<F: Scalar>(
    tape: &Tape<'_, F>,
    config: &ModelConfig,
    vars: &ModelVars,
    x: Var,
    true_len: usize,
) -> Result<DocGraph> {
    let t = tape.shape(x).0;
    let (h, mask) = match &vars.gru {
        Some(g) => {
            let ann = bigru_encode(tape, x, g, true_len)?;
            (ann.h, ann.mask)
        }
        None => (x, (0..t).map(|i| i < true_len).collect()),
    };
    let context = match vars.attention.c {
        Some(c) => c,
        None => context_doc_mean(tape, x, true_len, config.d_ann())?,
    };
    let attention = attend(tape, h, context, &vars.attention, &mask)?;
    Ok(DocGraph { attention, mask })
}

/// Forward pass over a batch. Each document keeps its own length (its `ids`
/// including any padding); embedding rows are gathered once for the batch.
pub fn forward_batch<F: Scalar, R: Rng + ?Sized>(
    tape: &Tape<'_, F>,
    config: &ModelConfig,
    vars: &ModelVars,
    docs: &[&Document],
    train: Option<TrainMode<'_, R>>,
) -> Result<BatchGraph> {
    if docs.is_empty() {
        return Err(LamaError::EmptyCorpus);
    }
    let ids: Vec<usize> = docs.iter().flat_map(|d| d.ids.iter().copied()).collect();
    if let Some(&bad) = ids.iter().find(|&&i| i >= config.vocab_size) {
        return Err(LamaError::Dimension(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    let all = tape.gather_rows(vars.embedding, &ids)?;
    let mut offset = 0;
    let mut graphs = Vec::with_capacity(docs.len());
    for doc in docs {
        let len = doc.ids.len();
        let x = if docs.len() == 1 {
            all
        } else {
            tape.slice(all, Axis::Rows, offset, len)?
        };
        offset += len;
        graphs.push(document_attention(tape, config, vars, x, doc.true_len)?);
    }
    let rows: Vec<Var> = graphs.iter().map(|g| g.attention.d_doc).collect();
    let d_doc = if rows.len() == 1 {
        rows[0]
    } else {
        tape.concat(&rows, Axis::Rows)?
    };
    let logits = classify_logits(tape, d_doc, &vars.classifier, train)?;
    Ok(BatchGraph { logits, docs: graphs })
}

/// Scalar objective `mean CE − λ · mean D` for a batch graph.
pub fn batch_objective<F: Scalar>(
    tape: &Tape<'_, F>,
    graph: &BatchGraph,
    labels: &[usize],
    regularizer: RegularizerKind,
    lambda: f64,
) -> Result<(Var, Var)> {
    let loss = tape.softmax_cross_entropy(graph.logits, labels)?;
    if regularizer == RegularizerKind::None || lambda == 0.0 {
        return Ok((loss, loss));
    }
    let mut terms = Vec::with_capacity(graph.docs.len());
    for g in &graph.docs {
        if let Some(d) = disagreement(tape, regularizer, g.attention.a, g.attention.s)? {
            terms.push(d);
        }
    }
    let stacked = tape.concat(&terms, Axis::Rows)?;
    let mean_d = tape.mean(stacked)?;
    let j = crate::classifier::total_objective(tape, loss, Some(mean_d), lambda)?;
    Ok((j, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn config(encoder: Encoder, context: ContextMode) -> ModelConfig {
        ModelConfig {
            vocab_size: 9,
            embed_dim: 6,
            hidden: 3,
            heads: 2,
            mlp_hidden: 5,
            classes: 3,
            encoder,
            context,
        }
    }

    fn params(cfg: ModelConfig) -> ModelParams<f64> {
        let mut g = rng::stream(4, 1);
        let emb = Tensor::from_fn(cfg.vocab_size, cfg.embed_dim, |r, _| {
            if r == 0 { 0.0 } else { g.random_range(-0.5..0.5) }
        });
        ModelParams::init(cfg, emb, &mut g).unwrap()
    }

    #[test]
    fn manifest_order_round_trips() {
        for enc in [Encoder::Bigru, Encoder::Le] {
            for ctx in [ContextMode::Learned, ContextMode::DocMean] {
                let p = params(config(enc, ctx));
                let shapes: Vec<_> = p.named().iter().map(|(n, t)| (n.clone(), t.shape())).collect();
                assert_eq!(shapes, expected_shapes(&p.config));
                let rebuilt =
                    ModelParams::from_tensors(p.config, p.tensors().into_iter().cloned().collect()).unwrap();
                assert_eq!(rebuilt, p);
            }
        }
    }

    #[test]
    fn doc_mean_requires_matching_dims() {
        let mut cfg = config(Encoder::Bigru, ContextMode::DocMean);
        cfg.hidden = 4;
        assert!(matches!(cfg.validate(), Err(LamaError::Dimension(_))));
        cfg.context = ContextMode::Learned;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn batch_matches_single_documents() {
        let p = params(config(Encoder::Bigru, ContextMode::DocMean));
        let docs = [
            Document { ids: vec![2, 3, 4], true_len: 3, label: 0 },
            Document { ids: vec![5, 1, 0, 0], true_len: 2, label: 2 },
        ];
        let tape = Tape::new();
        let v = p.register(&tape);
        let refs: Vec<&Document> = docs.iter().collect();
        let batch = forward_batch::<f64, rng::Rng>(&tape, &p.config, &v, &refs, None).unwrap();
        let logits = tape.value(batch.logits).clone();
        for (i, d) in docs.iter().enumerate() {
            let single = forward_batch::<f64, rng::Rng>(&tape, &p.config, &v, &[d], None).unwrap();
            let s = tape.value(single.logits);
            for c in 0..3 {
                assert!((s.get(0, c) - logits.get(i, c)).abs() < 1e-12);
            }
        }
    }
}
