//! Minibatch SGD with momentum and weight decay, early stopping and metrics.

use std::path::PathBuf;
use std::time::Instant;

use lama_autodiff::{AutodiffError, Scalar, Tape, Tensor};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::classifier::{RegularizerKind, TrainMode, DEFAULT_LAMBDA};
use crate::error::{LamaError, Result};
use crate::model::{batch_objective, forward_batch, ContextMode, Encoder, ModelConfig, ModelParams};
use crate::rng::{self, streams};
use crate::text::{init_embeddings, Dataset, Document, EmbeddingSource, LabelMap, Vocab, PAD};

pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub max_len: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub patience: usize,
    pub lambda: f64,
    pub regularizer: RegularizerKind,
    pub context: ContextMode,
    pub encoder: Encoder,
    pub max_epochs: usize,
    pub min_count: usize,
    pub seed: u64,
    /// Pretrained vectors in text format; random initialization when absent.
    pub embeddings: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 100,
            hidden: 50,
            heads: 15,
            mlp_hidden: crate::classifier::DEFAULT_MLP_HIDDEN,
            max_len: crate::text::DEFAULT_MAX_LEN,
            batch: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            dropout: crate::classifier::DEFAULT_DROPOUT,
            patience: 5,
            lambda: DEFAULT_LAMBDA,
            regularizer: RegularizerKind::Positions,
            context: ContextMode::DocMean,
            encoder: Encoder::Bigru,
            max_epochs: 50,
            min_count: crate::text::DEFAULT_MIN_COUNT,
            seed: 1,
            embeddings: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("max_len", self.max_len),
            ("batch", self.batch),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
            ("min_count", self.min_count),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(LamaError::Config(format!("{name} must be positive")));
            }
        }
        let checks = [
            ("lr", self.lr > 0.0),
            ("momentum", (0.0..1.0).contains(&self.momentum)),
            ("weight_decay", self.weight_decay >= 0.0),
            ("dropout", (0.0..1.0).contains(&self.dropout)),
            ("lambda", self.lambda >= 0.0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(LamaError::Config(format!("{name} out of range")));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            classes,
            encoder: self.encoder,
            context: self.context,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `g' = g + wd·θ`, `v ← μ v + g'`, `θ ← θ − lr·v`. Rows listed in `frozen`
/// are left untouched (parameter and velocity).
pub fn sgd_step<F: Scalar>(
    param: &mut Tensor<F>,
    grad: Option<&Tensor<F>>,
    velocity: &mut Tensor<F>,
    cfg: SgdConfig,
    frozen: &[usize],
) -> Result<()> {
    let shape = param.shape();
    if velocity.shape() != shape || grad.is_some_and(|g| g.shape() != shape) {
        return Err(LamaError::Dimension(format!(
            "sgd_step: parameter {shape:?}, gradient {:?}, velocity {:?}",
            grad.map(Tensor::shape),
            velocity.shape()
        )));
    }
    let (lr, mu, wd) = (F::of(cfg.lr), F::of(cfg.momentum), F::of(cfg.weight_decay));
    let cols = shape.1;
    let g = grad.map(Tensor::data);
    let v = velocity.data_mut();
    for (i, p) in param.data_mut().iter_mut().enumerate() {
        if frozen.contains(&(i / cols)) {
            continue;
        }
        let gi = g.map_or(F::zero(), |g| g[i]) + wd * *p;
        v[i] = mu * v[i] + gi;
        *p = *p - lr * v[i];
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the returned checkpoint.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_valid_acc(&self) -> f64 {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.best_epoch)
            .map_or(0.0, |e| e.valid_acc)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,valid_acc,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.3}\n",
                e.epoch, e.train_loss, e.valid_acc, e.seconds
            ));
        }
        out
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    /// Parameters after the last completed epoch.
    pub last: ModelParams<f32>,
    /// Fraction of vocabulary rows initialized from pretrained vectors.
    pub coverage: f64,
}

/// Re-expresses `dataset` labels in the id space of `labels`, by name.
pub fn remap_labels(dataset: &Dataset, labels: &LabelMap) -> Result<Dataset> {
    let table: Vec<usize> = dataset
        .labels
        .names()
        .iter()
        .map(|name| {
            labels.id(name).ok_or_else(|| {
                LamaError::LabelMismatch(format!("label `{name}` unknown to the model"))
            })
        })
        .collect::<Result<_>>()?;
    let mut out = dataset.clone();
    for ex in &mut out.examples {
        ex.label = table[ex.label];
    }
    out.labels = labels.clone();
    Ok(out)
}

/// Encoded documents trimmed to their valid tokens.
pub fn encode_dataset(dataset: &Dataset, vocab: &Vocab, max_len: usize) -> Vec<Document> {
    dataset
        .documents(vocab, max_len)
        .into_iter()
        .map(|d| d.padded_to(d.true_len))
        .collect()
}

fn diverged(epoch: usize, batch: usize, loss: f64) -> LamaError {
    LamaError::Divergence { epoch, batch, loss }
}

/// One optimization step on `docs`; returns the batch cross-entropy.
pub fn train_batch(
    params: &mut ModelParams<f32>,
    velocity: &mut [Tensor<f32>],
    docs: &[&Document],
    config: &TrainConfig,
    dropout_rng: &mut rng::Rng,
) -> Result<f64> {
    let labels: Vec<usize> = docs.iter().map(|d| d.label).collect();
    let grads = {
        let tape = Tape::new();
        let (vars, order) = params.register_all(&tape);
        let mode = TrainMode {
            rate: config.dropout,
            rng: dropout_rng,
        };
        let graph = forward_batch(&tape, &params.config, &vars, docs, Some(mode))?;
        let (objective, loss) =
            batch_objective(&tape, &graph, &labels, config.regularizer, config.lambda)?;
        let loss = tape.item(loss).as_f64();
        let mut grads = tape.backward(objective)?;
        let grads: Vec<Option<Tensor<f32>>> = order.into_iter().map(|v| grads.take(v)).collect();
        (grads, loss)
    };
    let (grads, loss) = grads;
    let sgd = config.sgd();
    for (i, ((p, g), v)) in params
        .tensors_mut()
        .into_iter()
        .zip(&grads)
        .zip(velocity.iter_mut())
        .enumerate()
    {
        let frozen: &[usize] = if i == 0 { &[PAD] } else { &[] };
        sgd_step(p, g.as_ref(), v, sgd, frozen)?;
    }
    Ok(loss)
}

/// Trains a model, returning the checkpoint with the best validation accuracy.
pub fn train(config: &TrainConfig, train_set: &Dataset, valid_set: &Dataset) -> Result<TrainOutcome> {
    train_with(config, train_set, valid_set, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    config: &TrainConfig,
    train_set: &Dataset,
    valid_set: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(LamaError::EmptyCorpus);
    }
    if valid_set.is_empty() {
        return Err(LamaError::Config("validation set is empty".into()));
    }
    let vocab = Vocab::build(train_set.examples.iter().map(|e| &e.tokens), config.min_count)?;
    let labels = train_set.labels.clone();
    let valid_set = remap_labels(valid_set, &labels)?;
    let train_docs = encode_dataset(train_set, &vocab, config.max_len);
    let valid_docs = encode_dataset(&valid_set, &vocab, config.max_len);

    let source = match &config.embeddings {
        Some(p) => EmbeddingSource::Pretrained(p),
        None => EmbeddingSource::Random,
    };
    let emb = init_embeddings(
        &vocab,
        config.embed_dim,
        source,
        &mut rng::stream(config.seed, streams::EMBEDDINGS),
    )?;
    let model_config = config.model_config(vocab.len(), labels.len());
    let mut params = ModelParams::init(
        model_config,
        emb.matrix,
        &mut rng::stream(config.seed, streams::INIT),
    )?;
    let mut velocity: Vec<Tensor<f32>> = params
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.rows(), t.cols()))
        .collect();
    let mut shuffle = rng::stream(config.seed, streams::SHUFFLE);
    let mut dropout = rng::stream(config.seed, streams::DROPOUT);

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams<f32>)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_docs.len()).collect();
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch).enumerate() {
            let docs: Vec<&Document> = chunk.iter().map(|&i| &train_docs[i]).collect();
            let loss = match train_batch(&mut params, &mut velocity, &docs, config, &mut dropout) {
                Ok(l) => l,
                Err(LamaError::Autodiff(AutodiffError::NonFinite { .. })) => {
                    return Err(diverged(epoch, b + 1, f64::NAN))
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(epoch, b + 1, loss));
            }
            total += loss * docs.len() as f64;
        }
        let acc = accuracy(&params, &valid_docs)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / train_docs.len() as f64,
            valid_acc: acc,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.epochs.push(record);
        if best.as_ref().is_none_or(|(a, _)| acc > *a) {
            best = Some((acc, params.clone()));
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let last = params;
    let (_, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        last,
        checkpoint: Checkpoint {
            config: config.clone(),
            vocab,
            labels,
            params,
        },
        history,
        coverage: emb.coverage,
    })
}

/// Class probabilities for every document, in eval mode.
pub fn predict<F: Scalar>(params: &ModelParams<F>, docs: &[Document]) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<Result<Vec<Vec<f64>>>> = docs
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let tape = Tape::new();
            let vars = params.register(&tape);
            let refs: Vec<&Document> = chunk.iter().collect();
            let graph = forward_batch::<F, rng::Rng>(&tape, &params.config, &vars, &refs, None)?;
            let probs = tape.softmax(graph.logits, lama_autodiff::Axis::Cols)?;
            let probs = tape.value(probs);
            Ok((0..probs.rows())
                .map(|r| probs.row(r).iter().map(|p| p.as_f64()).collect())
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(docs.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Index of the largest probability; earliest wins ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy<F: Scalar>(params: &ModelParams<F>, docs: &[Document]) -> Result<f64> {
    let probs = predict(params, docs)?;
    let correct = probs
        .iter()
        .zip(docs)
        .filter(|(p, d)| argmax(p) == d.label)
        .count();
    Ok(correct as f64 / docs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_predictions(labels: &LabelMap, truth: &[usize], predicted: &[usize]) -> Self {
        let c = labels.len();
        let mut confusion = vec![vec![0; c]; c];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let per_class = (0..c)
            .map(|k| {
                let tp = confusion[k][k];
                let support: usize = confusion[k].iter().sum();
                let predicted: usize = confusion.iter().map(|row| row[k]).sum();
                ClassMetrics {
                    label: labels.name(k).unwrap_or_default().to_string(),
                    precision: ratio(tp, predicted),
                    recall: ratio(tp, support),
                    support,
                }
            })
            .collect();
        let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
        Self {
            n: truth.len(),
            accuracy: ratio(correct, truth.len()),
            per_class,
            confusion,
        }
    }
}

/// Accuracy, per-class precision/recall and confusion on `dataset`, whose
/// labels are matched to the checkpoint's by name.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(LamaError::EmptyCorpus);
    }
    let dataset = remap_labels(dataset, &checkpoint.labels)?;
    let docs = encode_dataset(&dataset, &checkpoint.vocab, checkpoint.config.max_len);
    let probs = predict(&checkpoint.params, &docs)?;
    let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let truth: Vec<usize> = docs.iter().map(|d| d.label).collect();
    Ok(Metrics::from_predictions(&checkpoint.labels, &truth, &predicted))
}

/// Mean `‖A Aᵀ − I‖²_F` over documents.
pub fn orthogonality<F: Scalar>(params: &ModelParams<F>, docs: &[Document]) -> Result<f64> {
    let per_doc: Vec<Result<f64>> = docs
        .par_iter()
        .map(|doc| {
            let tape = Tape::new();
            let vars = params.register(&tape);
            let graph = forward_batch::<F, rng::Rng>(&tape, &params.config, &vars, &[doc], None)?;
            let d = crate::classifier::disagreement_positions(&tape, graph.docs[0].attention.a)?;
            Ok(-tape.item(d).as_f64())
        })
        .collect();
    let mut total = 0.0;
    for v in per_doc {
        total += v?;
    }
    Ok(total / docs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub heads: usize,
    pub best_valid_acc: f64,
    pub best_epoch: usize,
    pub epochs: usize,
}

/// Trains one model per head count with the shared seed; rows sorted by `m`.
pub fn heads_sweep(
    base: &TrainConfig,
    grid: &[usize],
    train_set: &Dataset,
    valid_set: &Dataset,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(LamaError::Config("head grid is empty".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let rows: Vec<Result<SweepRow>> = grid
        .par_iter()
        .map(|&m| {
            let cfg = TrainConfig {
                heads: m,
                ..base.clone()
            };
            let out = train(&cfg, train_set, valid_set)?;
            Ok(SweepRow {
                heads: m,
                best_valid_acc: out.history.best_valid_acc(),
                best_epoch: out.history.best_epoch,
                epochs: out.history.epochs.len(),
            })
        })
        .collect();
    rows.into_iter().collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("heads,best_valid_acc,best_epoch,epochs\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{},{}\n",
            r.heads, r.best_valid_acc, r.best_epoch, r.epochs
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SGD: SgdConfig = SgdConfig {
        lr: 1.0,
        momentum: 0.9,
        weight_decay: 0.0,
    };

    #[test]
    fn vanilla_step() {
        let mut p = Tensor::<f64>::from_f64(1, 2, &[1.0, -2.0]).unwrap();
        let g = Tensor::from_f64(1, 2, &[0.5, 0.5]).unwrap();
        let mut v = Tensor::zeros(1, 2);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        sgd_step(&mut p, Some(&g), &mut v, cfg, &[]).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.05]);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = Tensor::<f64>::from_f64(2, 2, &[1., 2., 3., 4.]).unwrap();
        let before = p.clone();
        let mut v = Tensor::zeros(2, 2);
        sgd_step(&mut p, Some(&Tensor::zeros(2, 2)), &mut v, SGD, &[]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = Tensor::<f64>::zeros(1, 1);
        let g = Tensor::scalar(2.0);
        let mut v = Tensor::zeros(1, 1);
        sgd_step(&mut p, Some(&g), &mut v, SGD, &[]).unwrap();
        sgd_step(&mut p, Some(&g), &mut v, SGD, &[]).unwrap();
        assert!((p.item().unwrap() + 2.9 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_rows_ignore_decay() {
        let mut p = Tensor::<f64>::ones(2, 2);
        let mut v = Tensor::zeros(2, 2);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.5 };
        sgd_step(&mut p, Some(&Tensor::ones(2, 2)), &mut v, cfg, &[0]).unwrap();
        assert_eq!(p.row(0), &[1.0, 1.0]);
        assert!(p.row(1).iter().all(|&x| x < 1.0));
        assert!(sgd_step(&mut p, Some(&Tensor::ones(1, 2)), &mut v, cfg, &[]).is_err());
    }

    #[test]
    fn metrics_from_predictions() {
        let labels = LabelMap::new(vec!["a".into(), "b".into()]);
        let m = Metrics::from_predictions(&labels, &[0, 0, 1, 1, 1], &[0, 1, 1, 1, 0]);
        assert_eq!(m.confusion, vec![vec![1, 1], vec![1, 2]]);
        assert!((m.accuracy - 0.6).abs() < 1e-12);
        for (k, row) in m.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), m.per_class[k].support);
        }
        assert!((m.per_class[1].precision - 2.0 / 3.0).abs() < 1e-12);
        let perfect = Metrics::from_predictions(&labels, &[0, 1], &[0, 1]);
        assert_eq!(perfect.accuracy, 1.0);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.embed_dim, c.hidden, c.max_len, c.batch), (100, 50, 256, 32));
        assert_eq!((c.lr, c.momentum, c.weight_decay, c.dropout), (0.05, 0.9, 1e-4, 0.4));
        assert_eq!((c.patience, c.lambda), (5, 0.2));
        assert!(c.validate().is_ok());
        let bad = TrainConfig { dropout: 1.0, ..c.clone() };
        assert!(bad.validate().is_err());
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), c);
    }
}
