//! Seeded synthetic traces with class-separated embeddings.
//!
//! Score pairs are drawn cell by cell from a 3x3 bucket mix so that the
//! resulting bucket-transition counts are known exactly. Embeddings, when
//! requested, are Gaussian clouds whose means sit at `±margin/2` along two
//! orthonormal directions: one encoding true need, one encoding positive
//! utility.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use super::{
    write_embeddings, write_trace_set, Condition, EmbeddingDir, EmbeddingError, EmbeddingMatrix,
    EmbeddingRef, PromptVariant, TraceError, TraceRecord, TraceSet,
};
use crate::defaults;
use crate::labeling::{bucket, true_need, true_utility, Bucket, BucketThresholds};

const MIX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{what} fractions sum to {sum}, not 1")]
    InfeasibleMix { what: &'static str, sum: f64 },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Utility regime shares for instances whose two scores share a bucket.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityMix {
    pub positive: f64,
    pub neutral: f64,
    pub negative: f64,
}

impl UtilityMix {
    pub const NEUTRAL: UtilityMix = UtilityMix {
        positive: 0.0,
        neutral: 1.0,
        negative: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSpec {
    pub dim: usize,
    /// Layers `0..layers` are generated.
    pub layers: u32,
    /// Layers carrying label signal; the rest are pure noise.
    pub signal_layers: Vec<u32>,
    /// Distance between class means, in noise standard deviations.
    pub margin: f64,
    /// Probability that an instance's embedding is drawn from the wrong class.
    pub label_noise: f64,
    pub conditions: Vec<Condition>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub task_name: String,
    pub model_id: String,
    pub thresholds: BucketThresholds,
    /// Shares of (no-tool bucket, always-tool bucket) cells; must sum to 1.
    pub bucket_mix: [[f64; 3]; 3],
    /// How diagonal cells split into positive / neutral / negative utility.
    pub diagonal_utility: UtilityMix,
    /// Probability of flipping the self-decision away from "call iff utility is positive".
    pub self_decision_noise: f64,
    /// Probability of flipping a perceived-need answer away from true need.
    pub perceived_noise: f64,
    /// Probability that a perceived-need answer is unparseable.
    pub perceived_missing: f64,
    /// Probability that a self-called instance records a second call event.
    pub extra_call_prob: f64,
    pub embeddings: Option<EmbeddingSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 500,
            task_name: "synthetic".to_string(),
            model_id: "synthetic-model".to_string(),
            thresholds: BucketThresholds::default(),
            bucket_mix: [[0.10, 0.08, 0.10], [0.02, 0.25, 0.10], [0.03, 0.07, 0.25]],
            diagonal_utility: UtilityMix {
                positive: 0.2,
                neutral: 0.7,
                negative: 0.1,
            },
            self_decision_noise: 0.2,
            perceived_noise: 0.2,
            perceived_missing: 0.05,
            extra_call_prob: 0.0,
            embeddings: None,
        }
    }
}

/// Generated trace plus its embedding matrices and the constructed cell counts.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub trace: TraceSet,
    pub embeddings: Vec<(Condition, EmbeddingMatrix)>,
    /// Bucket-transition counts as constructed by the generator.
    pub cell_counts: [[u64; 3]; 3],
}

impl SynthOutput {
    pub const TRACE_FILE: &'static str = "trace.jsonl";

    /// Writes `trace.jsonl` and one EMB1 file per (condition, layer) into `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<PathBuf, SynthError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| TraceError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for (cond, m) in &self.embeddings {
            write_embeddings(m, dir.join(EmbeddingDir::file_name(*cond, m.layer)))?;
        }
        let path = dir.join(Self::TRACE_FILE);
        write_trace_set(&self.trace, &path)?;
        Ok(path)
    }
}

/// Largest-remainder apportionment of `n` over `weights` (which sum to 1).
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn check_prob(name: &str, p: f64) -> Result<(), SynthError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(SynthError::Config(format!(
            "{name} = {p} is not a probability"
        )))
    }
}

fn check_mix(what: &'static str, weights: &[f64]) -> Result<(), SynthError> {
    if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
        return Err(SynthError::Config(format!("{what} has a negative share")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > MIX_TOLERANCE {
        return Err(SynthError::InfeasibleMix { what, sum });
    }
    Ok(())
}

/// Draws a score strictly inside `b` according to `th`.
fn sample_in(rng: &mut ChaCha8Rng, b: Bucket, th: &BucketThresholds) -> f64 {
    let (lo, hi) = th.interval(b);
    loop {
        let u: f64 = rng.random();
        // Low is closed at 0; Mid and High are open at their lower edge.
        let s = match b {
            Bucket::Low => lo + (hi - lo) * u,
            _ => hi - (hi - lo) * u,
        };
        if bucket(s, th).ok() == Some(b) {
            return s;
        }
    }
}

#[derive(Clone, Copy)]
enum Regime {
    Positive,
    Neutral,
    Negative,
}

fn sample_pair(
    rng: &mut ChaCha8Rng,
    nt: Bucket,
    at: Bucket,
    regime: Regime,
    th: &BucketThresholds,
) -> (f64, f64) {
    if nt != at {
        return (sample_in(rng, nt, th), sample_in(rng, at, th));
    }
    match regime {
        Regime::Neutral => {
            let s = sample_in(rng, nt, th);
            (s, s)
        }
        Regime::Positive | Regime::Negative => loop {
            let a = sample_in(rng, nt, th);
            let b = sample_in(rng, nt, th);
            if (a - b).abs() > defaults::EPS {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                return match regime {
                    Regime::Positive => (lo, hi),
                    _ => (hi, lo),
                };
            }
        },
    }
}

fn unit_directions(rng: &mut ChaCha8Rng, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut draw = || -> Vec<f64> { (0..dim).map(|_| rng.sample(StandardNormal)).collect() };
    let normalize = |v: &mut Vec<f64>| {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
    };
    let mut a = draw();
    normalize(&mut a);
    let mut b = draw();
    let proj: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    b.iter_mut().zip(&a).for_each(|(y, x)| *y -= proj * x);
    normalize(&mut b);
    (a, b)
}

pub fn synth_trace(config: &SynthConfig, seed: u64) -> Result<SynthOutput, SynthError> {
    let flat: Vec<f64> = config.bucket_mix.iter().flatten().copied().collect();
    check_mix("bucket mix", &flat)?;
    let um = config.diagonal_utility;
    check_mix("utility mix", &[um.positive, um.neutral, um.negative])?;
    check_prob("self_decision_noise", config.self_decision_noise)?;
    check_prob("perceived_noise", config.perceived_noise)?;
    check_prob("perceived_missing", config.perceived_missing)?;
    check_prob("extra_call_prob", config.extra_call_prob)?;
    if let Some(spec) = &config.embeddings {
        check_prob("label_noise", spec.label_noise)?;
        if spec.dim < 2 {
            return Err(SynthError::Config(
                "embedding dim must be at least 2".into(),
            ));
        }
        if let Some(l) = spec.signal_layers.iter().find(|&&l| l >= spec.layers) {
            return Err(SynthError::Config(format!(
                "signal layer {l} >= layer count"
            )));
        }
    }

    let th = &config.thresholds;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Cell and regime assignment, then shuffled into arrival order.
    let cell_sizes = apportion(config.n, &flat);
    let mut cell_counts = [[0u64; 3]; 3];
    let mut slots: Vec<(Bucket, Bucket, Regime)> = Vec::with_capacity(config.n);
    for (c, &size) in cell_sizes.iter().enumerate() {
        let (nt, at) = (Bucket::ALL[c / 3], Bucket::ALL[c % 3]);
        cell_counts[c / 3][c % 3] = size as u64;
        let regimes = if nt == at {
            apportion(size, &[um.positive, um.neutral, um.negative])
        } else {
            vec![0, size, 0]
        };
        for (regime, k) in [Regime::Positive, Regime::Neutral, Regime::Negative]
            .into_iter()
            .zip(regimes)
        {
            slots.extend(std::iter::repeat_n((nt, at, regime), k));
        }
    }
    slots.shuffle(&mut rng);

    let mut records = Vec::with_capacity(config.n);
    let mut need_labels = Vec::with_capacity(config.n);
    let mut util_labels = Vec::with_capacity(config.n);
    for (i, &(nt_b, at_b, regime)) in slots.iter().enumerate() {
        let (nt, at) = sample_pair(&mut rng, nt_b, at_b, regime, th);
        let need = true_need(nt, th.high_lo())
            .expect("score in range")
            .is_needed();
        let helpful = true_utility(nt, at, defaults::EPS)
            .expect("score in range")
            .is_positive();
        need_labels.push(need);
        util_labels.push(helpful);

        let called = helpful ^ rng.random_bool(config.self_decision_noise);
        let calls = if called {
            1 + u32::from(rng.random_bool(config.extra_call_prob))
        } else {
            0
        };
        let mut perceived = BTreeMap::new();
        for v in PromptVariant::ALL {
            let answer = if rng.random_bool(config.perceived_missing) {
                None
            } else {
                Some(need ^ rng.random_bool(config.perceived_noise))
            };
            perceived.insert(v, answer);
        }
        records.push(TraceRecord {
            instance_id: format!("{}-{:05}", config.task_name, i),
            seq_index: i as u64,
            task_name: config.task_name.clone(),
            model_id: config.model_id.clone(),
            s_no_tool: nt,
            s_always_tool: at,
            self_called: called,
            self_call_count: calls,
            perceived_need: Some(perceived),
            embedding_refs: None,
            raw_texts: None,
        });
    }

    let mut embeddings = Vec::new();
    if let Some(spec) = &config.embeddings {
        for &cond in &spec.conditions {
            for layer in 0..spec.layers {
                let signal = spec.signal_layers.contains(&layer);
                let dirs = signal.then(|| unit_directions(&mut rng, spec.dim));
                let mut values = Vec::with_capacity(config.n * spec.dim);
                for i in 0..config.n {
                    let mut mean = vec![0.0; spec.dim];
                    if let Some((need_dir, util_dir)) = &dirs {
                        let y_need = need_labels[i] ^ rng.random_bool(spec.label_noise);
                        let y_util = util_labels[i] ^ rng.random_bool(spec.label_noise);
                        let s_need = if y_need { 0.5 } else { -0.5 } * spec.margin;
                        let s_util = if y_util { 0.5 } else { -0.5 } * spec.margin;
                        for (k, m) in mean.iter_mut().enumerate() {
                            *m = s_need * need_dir[k] + s_util * util_dir[k];
                        }
                    }
                    for m in mean {
                        let z: f64 = rng.sample(StandardNormal);
                        values.push((m + z) as f32);
                    }
                }
                let matrix =
                    EmbeddingMatrix::new(config.n, spec.dim, layer, &config.model_id, values)?;
                embeddings.push((cond, matrix));
            }
        }
        let ref_layer = spec.signal_layers.first().copied().unwrap_or(0);
        for (i, r) in records.iter_mut().enumerate() {
            let refs = spec
                .conditions
                .iter()
                .map(|&c| {
                    let eref = EmbeddingRef {
                        path: EmbeddingDir::file_name(c, ref_layer),
                        row: i,
                        layer: ref_layer,
                    };
                    (c, eref)
                })
                .collect();
            r.embedding_refs = Some(refs);
        }
    }

    let mut trace = TraceSet::new(records);
    trace
        .provenance
        .insert("generator".into(), serde_json::json!("synth_trace"));
    trace
        .provenance
        .insert("seed".into(), serde_json::json!(seed));
    trace
        .provenance
        .insert("n".into(), serde_json::json!(config.n));
    Ok(SynthOutput {
        trace,
        embeddings,
        cell_counts,
    })
}
