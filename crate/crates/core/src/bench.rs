//! Forward-pass runtime versus sequence length.

use std::hint::black_box;
use std::time::{Duration, Instant};

use lama_autodiff::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{lama_encoder_forward, AttnParams};
use crate::baseline::{sdpa_forward, SdpaParams};
use crate::error::{LamaError, Result};
use crate::rng::{self, streams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchKind {
    Le,
    Te,
}

impl std::str::FromStr for BenchKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "le" => Ok(Self::Le),
            "te" => Ok(Self::Te),
            other => Err(format!("unknown benchmark kind `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub kind: BenchKind,
    pub lengths: Vec<usize>,
    pub trials: usize,
    /// Embedding width for LE, `d_model` for TE.
    pub dim: usize,
    pub heads: usize,
    /// Each trial repeats the forward pass until at least this long.
    pub min_trial_seconds: f64,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(kind: BenchKind) -> Self {
        Self {
            kind,
            lengths: vec![64, 128, 256, 512, 1024],
            trials: 5,
            dim: 32,
            heads: 4,
            min_trial_seconds: 0.02,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.lengths;
        if l.len() < 4 {
            return Err(LamaError::Config("need at least four lengths".into()));
        }
        if l.windows(2).any(|w| w[0] >= w[1]) || l[0] == 0 {
            return Err(LamaError::Config("lengths must be positive and strictly increasing".into()));
        }
        if l[l.len() - 1] < 8 * l[0] {
            return Err(LamaError::Config("lengths must span at least an 8× range".into()));
        }
        if self.trials < 5 {
            return Err(LamaError::Config("need at least five trials".into()));
        }
        if self.dim == 0 || self.heads == 0 {
            return Err(LamaError::Config("dimension and heads must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub length: usize,
    pub median_seconds: f64,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub kind: BenchKind,
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of `ln t` against `ln n`.
    pub slope: f64,
    pub warnings: Vec<String>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("length,median_seconds,trials\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.9},{}\n", r.length, r.median_seconds, r.trials));
        }
        out
    }

    pub fn summary(&self) -> String {
        let kind = match self.kind {
            BenchKind::Le => "le",
            BenchKind::Te => "te",
        };
        format!("{kind}: log-log slope {:.3} over {} lengths", self.slope, self.rows.len())
    }
}

pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Smallest observable difference between consecutive clock readings.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// A forward pass at one sequence length, ready to time.
pub struct Workload {
    run: Box<dyn Fn() -> Result<()>>,
}

impl Workload {
    pub fn new(kind: BenchKind, length: usize, dim: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut g = rng::stream(seed, streams::BENCH);
        let x: Tensor<f32> = Tensor::from_fn(length, dim, |_, _| g.random_range(-1.0..1.0));
        let run: Box<dyn Fn() -> Result<()>> = match kind {
            BenchKind::Le => {
                let p = AttnParams::<f32>::init(dim, heads, true, &mut g);
                Box::new(move || {
                    black_box(lama_encoder_forward(&x, length, &p)?);
                    Ok(())
                })
            }
            BenchKind::Te => {
                let p = SdpaParams::<f32>::init(dim, &mut g);
                Box::new(move || {
                    black_box(sdpa_forward(&x, &p, heads)?);
                    Ok(())
                })
            }
        };
        Ok(Self { run })
    }

    pub fn run(&self) -> Result<()> {
        (self.run)()
    }

    /// Median seconds per pass over `trials` trials, each repeated to at
    /// least `min_seconds`; also the shortest raw trial duration.
    pub fn time(&self, trials: usize, min_seconds: f64) -> Result<(f64, f64)> {
        self.run()?;
        let start = Instant::now();
        self.run()?;
        let once = start.elapsed().as_secs_f64().max(1e-9);
        let reps = ((min_seconds / once).ceil() as usize).max(1);
        let mut per_pass = Vec::with_capacity(trials);
        let mut shortest = f64::INFINITY;
        for _ in 0..trials {
            let start = Instant::now();
            for _ in 0..reps {
                self.run()?;
            }
            let s = start.elapsed().as_secs_f64();
            shortest = shortest.min(s);
            per_pass.push(s / reps as f64);
        }
        Ok((median(per_pass), shortest))
    }
}

/// Times forward passes at each length on synthetic input and fits the
/// scaling exponent. Runs on the calling thread only.
pub fn bench_runtime(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    if cfg.kind == BenchKind::Te && !cfg.dim.is_multiple_of(cfg.heads) {
        return Err(LamaError::Config(format!(
            "d_model {} is not divisible by {} heads",
            cfg.dim, cfg.heads
        )));
    }
    let resolution = timer_resolution().as_secs_f64();
    let mut rows = Vec::with_capacity(cfg.lengths.len());
    let mut warnings = Vec::new();
    for &n in &cfg.lengths {
        let w = Workload::new(cfg.kind, n, cfg.dim, cfg.heads, cfg.seed)?;
        let (med, shortest) = w.time(cfg.trials, cfg.min_trial_seconds)?;
        if shortest < 100.0 * resolution {
            warnings.push(format!(
                "length {n}: trial of {shortest:.3e} s is below 100× the timer resolution ({resolution:.1e} s)"
            ));
        }
        rows.push(BenchRow {
            length: n,
            median_seconds: med,
            trials: cfg.trials,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.length as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.median_seconds).collect();
    Ok(BenchReport {
        kind: cfg.kind,
        slope: loglog_slope(&xs, &ys),
        rows,
        warnings,
    })
}
