use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lama_core::baseline::TeConfig;
use lama_core::bench::{bench_runtime, BenchConfig};
use lama_core::checkpoint::Checkpoint;
use lama_core::interpret::{attention_records, read_jsonl, top_words, write_jsonl, TopWordsConfig};
use lama_core::model::{Encoder, ModelConfig};
use lama_core::params::{lama_param_count, te_param_count};
use lama_core::text::{load_dataset, Split};
use lama_core::trainer::{evaluate, heads_sweep, sweep_csv, train_with};
use serde::Serialize;

use crate::args::*;
use crate::manifest::{sidecar, RunManifest};

/// Bad flag values caught after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn manifest<C: Serialize>(
    cmd: &Command,
    seed: Option<u64>,
    inputs: &[&Path],
    outputs: Vec<PathBuf>,
    config: &C,
    out: &Path,
) -> Result<()> {
    RunManifest {
        command: cmd.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
        outputs,
        config: serde_json::to_value(config)?,
        invocation: cmd.resolved(),
    }
    .write(out)?;
    Ok(())
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match &cmd {
        Command::Train(c) => train(&cmd, c),
        Command::Eval(c) => eval(&cmd, c),
        Command::Attend(c) => attend(&cmd, c),
        Command::Topwords(c) => topwords(&cmd, c),
        Command::Params(c) => params(&cmd, c),
        Command::Bench(c) => bench(&cmd, c),
        Command::HeadsSweep(c) => sweep(&cmd, c),
        Command::Replay(c) => {
            let m = RunManifest::read(&c.manifest)?;
            if let Command::Replay(_) = m.invocation {
                return Err(UsageError("a replay manifest cannot itself be replayed".into()).into());
            }
            eprintln!("replaying `{}` from {}", m.command, c.manifest.display());
            dispatch(m.invocation)
        }
    }
}

fn train(cmd: &Command, c: &TrainCmd) -> Result<()> {
    let cfg = c.model.config();
    cfg.validate()?;
    let history_path = sidecar(&c.out, "history.csv")?;
    manifest(
        cmd,
        Some(cfg.seed),
        &[&c.data, &c.valid],
        vec![c.out.clone(), history_path.clone()],
        &cfg,
        &c.out,
    )?;
    let train_set = load_dataset(&c.data, Split::Train, None)?;
    let valid_set = load_dataset(&c.valid, Split::Valid, None)?;
    eprintln!(
        "training on {} documents ({} classes), validating on {}",
        train_set.len(),
        train_set.num_classes(),
        valid_set.len()
    );
    let outcome = train_with(&cfg, &train_set, &valid_set, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  valid acc {:.4}  {:.1}s",
            e.epoch, e.train_loss, e.valid_acc, e.seconds
        );
    })?;
    if cfg.embeddings.is_some() {
        eprintln!("pretrained coverage {:.3}", outcome.coverage);
    }
    outcome.checkpoint.save(&c.out)?;
    write_file(&history_path, outcome.history.to_csv())?;
    println!(
        "best epoch {} valid acc {:.4}; checkpoint {}",
        outcome.history.best_epoch,
        outcome.history.best_valid_acc(),
        c.out.display()
    );
    Ok(())
}

fn eval(cmd: &Command, c: &EvalCmd) -> Result<()> {
    manifest(cmd, None, &[&c.checkpoint, &c.data], vec![c.out.clone()], &(), &c.out)?;
    let ck = Checkpoint::load(&c.checkpoint)?;
    let ds = load_dataset(&c.data, Split::Test, None)?;
    let metrics = evaluate(&ck, &ds)?;
    let json = serde_json::to_string_pretty(&metrics)?;
    write_file(&c.out, format!("{json}\n"))?;
    println!("accuracy {:.4} on {} documents", metrics.accuracy, metrics.n);
    Ok(())
}

fn attend(cmd: &Command, c: &AttendCmd) -> Result<()> {
    manifest(cmd, None, &[&c.checkpoint, &c.data], vec![c.out.clone()], &(), &c.out)?;
    let ck = Checkpoint::load(&c.checkpoint)?;
    let ds = load_dataset(&c.data, Split::Test, None)?;
    let records = attention_records(&ck, &ds)?;
    let mut buf = Vec::new();
    write_jsonl(&records, &mut buf)?;
    write_file(&c.out, buf)?;
    println!("{} documents written to {}", records.len(), c.out.display());
    Ok(())
}

fn topwords(cmd: &Command, c: &TopwordsCmd) -> Result<()> {
    let cfg = TopWordsConfig {
        top_k: c.top_k,
        min_occurrences: c.min_occurrences,
    };
    manifest(cmd, None, &[&c.attention], vec![c.out.clone()], &(), &c.out)?;
    let file = fs::File::open(&c.attention)
        .map_err(|e| lama_core::LamaError::io(&c.attention, e))?;
    let records = read_jsonl(BufReader::new(file))?;
    let words = top_words(&records, c.class.as_deref(), cfg);
    let mut out = String::from("rank\tword\tscore\tcount\n");
    for (i, w) in words.iter().enumerate() {
        out.push_str(&format!("{}\t{}\t{:.6}\t{}\n", i + 1, w.word, w.score, w.count));
    }
    write_file(&c.out, &out)?;
    print!("{out}");
    Ok(())
}

#[derive(Serialize)]
struct ParamsRow {
    heads: usize,
    lama_total: usize,
    lama_body: usize,
    lama_delta: Option<usize>,
    lama_classifier: usize,
    te_total: usize,
    te_body: usize,
    te_classifier: usize,
}

fn params(cmd: &Command, c: &ParamsCmd) -> Result<()> {
    if c.heads.is_empty() || c.heads.contains(&0) {
        return Err(UsageError("--heads needs positive head counts".into()).into());
    }
    if c.d_ann == 0 || !c.d_ann.is_multiple_of(2) {
        return Err(UsageError("--d-ann must be a positive even number".into()).into());
    }
    manifest(cmd, None, &[], vec![c.out.clone()], &(), &c.out)?;
    let mut prev: Option<usize> = None;
    let mut csv = String::from(
        "heads,lama_total,lama_body,lama_delta,lama_classifier,te_total,te_body,te_classifier\n",
    );
    let mut table = String::new();
    for &m in &c.heads {
        let lama = lama_param_count(&ModelConfig {
            vocab_size: c.vocab,
            embed_dim: c.d_ann,
            hidden: c.d_ann / 2,
            heads: m,
            mlp_hidden: c.mlp_hidden,
            classes: c.classes,
            encoder: Encoder::Bigru,
            context: c.ctx,
        });
        let te_cfg = TeConfig {
            d_model: c.te_d_model,
            heads: m,
            d_ff: c.te_d_ff,
            ..TeConfig::default()
        };
        let te = te_param_count(&te_cfg, c.vocab, c.classes)?;
        let row = ParamsRow {
            heads: m,
            lama_total: lama.total,
            lama_body: lama.body(),
            lama_delta: prev.map(|p| lama.body().abs_diff(p)),
            lama_classifier: lama.component(lama_core::params::CLASSIFIER),
            te_total: te.total,
            te_body: te.body(),
            te_classifier: te.component(lama_core::params::CLASSIFIER),
        };
        prev = Some(row.lama_body);
        let delta = row.lama_delta.map_or(String::new(), |d| d.to_string());
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.heads, row.lama_total, row.lama_body, delta, row.lama_classifier, row.te_total,
            row.te_body, row.te_classifier
        ));
        let millions = |n: usize| n as f64 / 1e6;
        table.push_str(&format!(
            "{:>5}  {:>9.3}M  {:>7}  {:>9.3}M\n",
            m,
            millions(row.lama_body),
            row.lama_delta.map_or("-".to_string(), |d| format!("{:.3}M", millions(d))),
            millions(row.te_body)
        ));
    }
    write_file(&c.out, &csv)?;
    println!("heads  lama body    delta  te body    (d_ann {}, classifiers excluded)", c.d_ann);
    print!("{table}");
    Ok(())
}

fn bench(cmd: &Command, c: &BenchCmd) -> Result<()> {
    let cfg = BenchConfig {
        kind: c.kind,
        lengths: c.lengths.clone(),
        trials: c.trials,
        dim: c.dim,
        heads: c.heads,
        min_trial_seconds: c.min_trial_seconds,
        seed: c.seed,
    };
    cfg.validate()?;
    manifest(cmd, Some(c.seed), &[], vec![c.out.clone()], &cfg, &c.out)?;
    let report = bench_runtime(&cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_file(&c.out, report.to_csv())?;
    print!("{}", report.to_csv());
    println!("{}", report.summary());
    Ok(())
}

fn sweep(cmd: &Command, c: &SweepCmd) -> Result<()> {
    if c.grid.is_empty() || c.grid.contains(&0) {
        return Err(UsageError("--grid needs positive head counts".into()).into());
    }
    let cfg = c.model.config();
    cfg.validate()?;
    #[derive(Serialize)]
    struct SweepConfig<'a> {
        grid: &'a [usize],
        #[serde(flatten)]
        base: &'a lama_core::trainer::TrainConfig,
    }
    let resolved = SweepConfig { grid: &c.grid, base: &cfg };
    manifest(cmd, Some(cfg.seed), &[&c.data, &c.valid], vec![c.out.clone()], &resolved, &c.out)?;
    let train_set = load_dataset(&c.data, Split::Train, None)?;
    let valid_set = load_dataset(&c.valid, Split::Valid, None)?;
    let rows = heads_sweep(&cfg, &c.grid, &train_set, &valid_set)?;
    let csv = sweep_csv(&rows);
    write_file(&c.out, &csv)?;
    let mut stdout = BufWriter::new(std::io::stdout());
    stdout.write_all(csv.as_bytes())?;
    stdout.flush()?;
    Ok(())
}

