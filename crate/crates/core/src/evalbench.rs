//! Corpus BLEU, unigram F1 by training frequency, parameter counts and
//! training-step timing.
//!
//! BLEU is corpus-level BLEU-4 against a single reference: clipped n-gram
//! precisions for n = 1..4, their geometric mean, and the brevity penalty
//! `exp(1 - r/c)` when the hypotheses are shorter than the references. There
//! is no smoothing, so any zero precision gives 0. Tokens compare
//! case-sensitively.
//!
//! Unigram F1 clips matches per sentence (`min(hyp count, ref count)` per
//! word type) and micro-averages the counts of every word whose training
//! frequency falls in a bucket.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{Batch, SentencePair, Vocabulary};
use crate::embed::RESERVED;
use crate::seq2seq::optim::Adam;
use crate::seq2seq::{param_specs, train_batch, HeadKind, ModelConfig, ModelError, Objective, Seq2SeqModel};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("empty reference set")]
    EmptyReferences,
    #[error("non-finite timing for `{0}`")]
    NonFiniteTiming(String),
    #[error("report field `{0}` is negative or not finite")]
    InvalidReport(String),
    #[error("benchmark needs at least one trial")]
    NoTrials,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn check_aligned<A, B>(hyps: &[A], refs: &[B]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    Ok(())
}

fn counts<T: Hash + Eq>(items: impl IntoIterator<Item = T>) -> HashMap<T, usize> {
    let mut map = HashMap::new();
    for x in items {
        *map.entry(x).or_insert(0) += 1;
    }
    map
}

/// Sufficient statistics of corpus BLEU.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BleuStats {
    pub matched: [usize; MAX_ORDER],
    pub total: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn precisions(&self) -> [f64; MAX_ORDER] {
        std::array::from_fn(|n| if self.total[n] == 0 { 0.0 } else { self.matched[n] as f64 / self.total[n] as f64 })
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        }
    }

    pub fn score(&self) -> f64 {
        let p = self.precisions();
        if p.contains(&0.0) {
            return 0.0;
        }
        self.brevity_penalty() * (p.iter().map(|x| x.ln()).sum::<f64>() / MAX_ORDER as f64).exp()
    }
}

pub fn bleu_stats<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<BleuStats> {
    check_aligned(hyps, refs)?;
    if refs.is_empty() {
        return Err(EvalError::EmptyReferences);
    }
    let mut st = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.iter().map(AsRef::as_ref).collect();
        let r: Vec<&str> = r.iter().map(AsRef::as_ref).collect();
        st.hyp_len += h.len();
        st.ref_len += r.len();
        for n in 1..=MAX_ORDER {
            if h.len() < n {
                continue;
            }
            let rc = counts(r.windows(n));
            let hc = counts(h.windows(n));
            st.total[n - 1] += h.len() + 1 - n;
            st.matched[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    Ok(st)
}

/// Corpus BLEU-4 in `[0, 1]`.
pub fn bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64> {
    Ok(bleu_stats(hyps, refs)?.score())
}

/// Training-frequency bucket `[lo, hi]`; `hi = None` is open-ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreqBucket {
    pub lo: u64,
    pub hi: Option<u64>,
}

pub const FREQ_BUCKETS: [FreqBucket; 8] = [
    FreqBucket { lo: 1, hi: Some(1) },
    FreqBucket { lo: 2, hi: Some(2) },
    FreqBucket { lo: 3, hi: Some(3) },
    FreqBucket { lo: 4, hi: Some(4) },
    FreqBucket { lo: 5, hi: Some(9) },
    FreqBucket { lo: 10, hi: Some(99) },
    FreqBucket { lo: 100, hi: Some(999) },
    FreqBucket { lo: 1000, hi: None },
];

impl FreqBucket {
    pub fn contains(&self, freq: u64) -> bool {
        freq >= self.lo && self.hi.is_none_or(|hi| freq <= hi)
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(hi) if hi == self.lo => self.lo.to_string(),
            Some(hi) => format!("{}-{}", self.lo, hi),
            None => format!("{}+", self.lo),
        }
    }
}

/// Index into [`FREQ_BUCKETS`]; frequency 0 has no bucket.
pub fn bucket_of(freq: u64) -> Option<usize> {
    FREQ_BUCKETS.iter().position(|b| b.contains(freq))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct BucketScore {
    pub matched: usize,
    pub produced: usize,
    pub reference: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl BucketScore {
    fn finish(mut self) -> Self {
        self.precision = if self.produced == 0 { 0.0 } else { self.matched as f64 / self.produced as f64 };
        self.recall = if self.reference == 0 { 0.0 } else { self.matched as f64 / self.reference as f64 };
        let s = self.precision + self.recall;
        self.f1 = if s == 0.0 { 0.0 } else { 2.0 * self.precision * self.recall / s };
        self
    }
}

/// Unigram scores per frequency bucket, keyed by bucket label. Buckets in
/// which nothing was produced or referenced are absent. Frequencies come
/// from `train_freq`; words outside it are ignored.
pub fn unigram_f1_by_freq<S: AsRef<str>>(
    hyps: &[Vec<S>],
    refs: &[Vec<S>],
    train_freq: &Vocabulary,
) -> Result<BTreeMap<String, BucketScore>> {
    check_aligned(hyps, refs)?;
    let bucket = |w: &str| train_freq.get(w).and_then(|id| bucket_of(train_freq.count(id)));
    let mut acc = [BucketScore::default(); FREQ_BUCKETS.len()];
    for (h, r) in hyps.iter().zip(refs) {
        let hc = counts(h.iter().map(AsRef::as_ref));
        let rc = counts(r.iter().map(AsRef::as_ref));
        for (&w, &c) in &hc {
            if let Some(b) = bucket(w) {
                acc[b].produced += c;
                acc[b].matched += c.min(rc.get(w).copied().unwrap_or(0));
            }
        }
        for (&w, &c) in &rc {
            if let Some(b) = bucket(w) {
                acc[b].reference += c;
            }
        }
    }
    Ok(FREQ_BUCKETS
        .iter()
        .zip(acc)
        .filter(|(_, s)| s.produced + s.reference > 0)
        .map(|(b, s)| (b.label(), s.finish()))
        .collect())
}

/// Table 7 conventions: weight matrices only. `input_layer` is the
/// trainable decoder input path, `output_layer` the head. `total` counts
/// every trainable scalar, biases included.
pub fn count_params(cfg: &ModelConfig) -> BTreeMap<String, u64> {
    let (v, h, e, m) = (cfg.tgt_vocab as u64, cfg.hidden as u64, cfg.input_emb as u64, cfg.output_dim as u64);
    let input = if cfg.tied { m * e } else { v * e };
    let output = match cfg.head {
        HeadKind::Softmax => v * h,
        HeadKind::Continuous => h * m,
    };
    let total = param_specs(cfg).iter().map(|s| s.len() as u64).sum();
    BTreeMap::from([
        ("input_layer".to_string(), input),
        ("output_layer".to_string(), output),
        ("total".to_string(), total),
    ])
}

/// A batch of random pairs with fixed lengths, for timing.
pub fn synthetic_batch(
    batch_size: usize,
    src_len: usize,
    tgt_len: usize,
    src_vocab: usize,
    tgt_vocab: usize,
    seed: u64,
) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = RESERVED.len();
    let pairs: Vec<SentencePair> = (0..batch_size)
        .map(|_| SentencePair {
            src: (0..src_len).map(|_| rng.gen_range(lo..src_vocab)).collect(),
            tgt: (0..tgt_len).map(|_| rng.gen_range(lo..tgt_vocab)).collect(),
        })
        .collect();
    Batch::from_pairs(&pairs.iter().collect::<Vec<_>>(), (0..batch_size).collect())
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// A model under benchmark with the objective it trains on.
pub struct BenchModel {
    pub name: String,
    pub model: Seq2SeqModel,
    pub objective: Objective,
    pub lr: f64,
}

/// Median wall-clock milliseconds of one training step (forward, backward
/// and update) on `batch`, after `warmup` untimed steps.
pub fn bench_step_time(bench: &mut BenchModel, batch: &Batch, warmup: usize, trials: usize) -> Result<f64> {
    if trials == 0 {
        return Err(EvalError::NoTrials);
    }
    let mut opt = Adam::new(bench.lr);
    for i in 0..warmup {
        train_batch(&mut bench.model, batch, &bench.objective, &mut opt, i)?;
    }
    let mut times = Vec::with_capacity(trials);
    for i in 0..trials {
        let start = Instant::now();
        train_batch(&mut bench.model, batch, &bench.objective, &mut opt, warmup + i)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let ms = median(&mut times);
    if !ms.is_finite() {
        return Err(EvalError::NonFiniteTiming(bench.name.clone()));
    }
    Ok(ms)
}

/// Median step time of every model on the same batch, keyed by name.
pub fn bench_all(models: &mut [BenchModel], batch: &Batch, warmup: usize, trials: usize) -> Result<BTreeMap<String, f64>> {
    models.iter_mut().map(|b| Ok((b.name.clone(), bench_step_time(b, batch, warmup, trials)?))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputPoint {
    pub batch_size: usize,
    pub samples_per_sec: f64,
    pub config: String,
}

/// Training samples per second at each batch size.
pub fn throughput_curve(
    bench: &mut BenchModel,
    batch_sizes: &[usize],
    src_len: usize,
    tgt_len: usize,
    warmup: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<ThroughputPoint>> {
    let (sv, tv) = (bench.model.config().src_vocab, bench.model.config().tgt_vocab);
    batch_sizes
        .iter()
        .map(|&bs| {
            let batch = synthetic_batch(bs, src_len, tgt_len, sv, tv, seed);
            let ms = bench_step_time(bench, &batch, warmup, trials)?;
            Ok(ThroughputPoint { batch_size: bs, samples_per_sec: bs as f64 * 1e3 / ms, config: bench.name.clone() })
        })
        .collect()
}

/// CSV with header `batch_size,samples_per_sec,config`.
pub fn write_throughput_csv<W: Write>(points: &[ThroughputPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub bleu: f64,
    pub f1_by_bucket: BTreeMap<String, f64>,
    pub timings: BTreeMap<String, f64>,
    pub param_counts: BTreeMap<String, u64>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.bleu) {
            return Err(EvalError::InvalidReport("bleu".into()));
        }
        for (k, &v) in self.f1_by_bucket.iter().chain(&self.timings) {
            if !ok(v) {
                return Err(EvalError::InvalidReport(k.clone()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Two aligned columns: metric name and value.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("config_hash".into(), self.config_hash.clone()),
            ("seed".into(), self.seed.to_string()),
            ("bleu".into(), format!("{:.4}", self.bleu)),
        ];
        let bucket_order = FREQ_BUCKETS.iter().map(FreqBucket::label);
        for label in bucket_order {
            if let Some(f1) = self.f1_by_bucket.get(&label) {
                rows.push((format!("f1[{label}]"), format!("{f1:.4}")));
            }
        }
        rows.extend(self.timings.iter().map(|(k, v)| (format!("ms[{k}]"), format!("{v:.3}"))));
        rows.extend(self.param_counts.iter().map(|(k, v)| (format!("params[{k}]"), v.to_string())));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v}");
        }
        out
    }
}
