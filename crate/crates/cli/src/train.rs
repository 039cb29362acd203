//! Data loading and the epoch loop.

use std::collections::HashSet;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

use seqcont::corpus::{self, encode_pairs, make_batches, sequential_batches, Batch, SentencePair, Vocabulary};
use seqcont::embed::{self, EmbeddingTable, LoadOptions, RESERVED};
use seqcont::evalbench;
use seqcont::seq2seq::optim::Adam;
use seqcont::seq2seq::{train_batch, HeadKind, ModelError, Objective, Seq2SeqModel};

use crate::config::RunConfig;

/// Encoded training and dev data with the vocabularies used to encode it.
/// When a table is present its rows follow the target vocabulary.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub table: Option<EmbeddingTable>,
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
}

/// Target embedding table restricted to `vocab`. Words missing from the
/// embedding file are dropped from the vocabulary (they become `<unk>`),
/// and `<unk>` is the mean of the embeddings outside the training vocabulary.
pub fn target_table(full: &EmbeddingTable, vocab: &Vocabulary) -> Result<(Vocabulary, EmbeddingTable)> {
    let train_words: HashSet<String> = vocab.words()[RESERVED.len()..].iter().cloned().collect();
    let unk = embed::build_unk_embedding(full, &train_words)?;
    let words: Vec<String> = RESERVED
        .iter()
        .map(|w| w.to_string())
        .chain(vocab.words()[RESERVED.len()..].iter().filter(|w| full.contains(w)).cloned())
        .collect();
    let dropped = vocab.len() - words.len();
    if dropped > 0 {
        log::warn!("{dropped} target words have no embedding and map to <unk>");
    }
    let (table, _) = full.select(&words, &unk)?;
    let table = table.with_unk(&unk)?;
    let vocab = Vocabulary::from_words(words).expect("reserved tokens first");
    Ok((vocab, table))
}

pub fn load_train_data(cfg: &RunConfig) -> Result<TrainData> {
    let train_pairs = corpus::read_parallel(cfg.require("train_src")?, cfg.require("train_tgt")?)?;
    let dev_pairs = corpus::read_parallel(cfg.require("dev_src")?, cfg.require("dev_tgt")?)?;
    let src_vocab = Vocabulary::from_sentences(train_pairs.iter().map(|p| &p.0), cfg.src_vocab_size);
    let mut tgt_vocab = Vocabulary::from_sentences(train_pairs.iter().map(|p| &p.1), cfg.tgt_vocab_size);
    let mut table = None;
    if cfg.head == HeadKind::Continuous || cfg.tied {
        let path = cfg.require("embeddings")?;
        let opts = LoadOptions { restrict_vocab: None, reserved: cfg.reserved_layout() };
        let full = embed::load_embedding_table(path, &opts)
            .with_context(|| format!("loading embeddings from {}", path.display()))?;
        let (v, t) = target_table(&full, &tgt_vocab)?;
        tgt_vocab = v;
        table = Some(t);
    }
    let train = encode_pairs(&train_pairs, &src_vocab, &tgt_vocab);
    let dev = encode_pairs(&dev_pairs, &src_vocab, &tgt_vocab);
    Ok(TrainData { src_vocab, tgt_vocab, table, train, dev })
}

pub fn objective(cfg: &RunConfig, m: usize) -> Objective {
    match cfg.head {
        HeadKind::Softmax => Objective::CrossEntropy,
        HeadKind::Continuous => Objective::Vector(cfg.loss_config(m)),
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Stop after this many epochs without a lower dev loss.
    pub patience: Option<usize>,
    /// Decode the dev set greedily each epoch and score it with BLEU.
    pub dev_bleu: bool,
    pub config_hash: String,
}

impl FitOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            max_len: cfg.max_len,
            lr: cfg.learning_rate(),
            clip_norm: cfg.clip_norm,
            seed: cfg.seed,
            patience: Some(cfg.patience),
            dev_bleu: true,
            config_hash: cfg.hash(),
        }
    }
}

/// One line of the metrics log. Holds no timings, so identical runs give
/// identical lines.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_accuracy: f64,
    pub dev_bleu: Option<f64>,
    pub skipped_batches: usize,
    pub config_hash: String,
    pub seed: u64,
}

pub struct EpochEvent<'a> {
    pub metrics: &'a EpochMetrics,
    pub model: &'a Seq2SeqModel,
    /// Dev loss reached a new minimum this epoch.
    pub improved: bool,
    /// Seconds spent in training steps so far, evaluation excluded.
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub stopped_early: bool,
}

/// Stops once the dev loss has failed to improve for `patience`
/// consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: Option<usize>,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: Option<usize>) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, since_best: 0 }
    }

    /// Records the dev loss of `epoch`; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        (improved, self.patience.is_some_and(|p| self.since_best >= p))
    }
}

fn batches_of(pairs: &[SentencePair], size: usize) -> Result<Vec<Batch>> {
    let mut usable: Vec<SentencePair> = pairs.iter().filter(|p| !p.src.is_empty()).cloned().collect();
    if usable.is_empty() {
        usable = pairs.to_vec();
    }
    Ok(sequential_batches(&usable, size)?)
}

/// Mean dev loss over sentences with at least one target token.
pub fn dev_loss(model: &Seq2SeqModel, batches: &[Batch], objective: &Objective) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for b in batches {
        let live = b.tgt_mask.rows().into_iter().filter(|r| r.sum() > 0.0).count();
        total += model.batch_loss(b, objective)? * live as f64;
        n += live;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Fraction of target tokens (including `</s>`) predicted correctly when the
/// decoder reads the gold prefix.
pub fn token_accuracy(model: &Seq2SeqModel, batches: &[Batch]) -> Result<f64> {
    let (mut right, mut total) = (0usize, 0usize);
    for b in batches {
        let pred = model.teacher_forced_predictions(b)?;
        for ((&p, &g), &m) in pred.iter().zip(&b.tgt_out).zip(&b.tgt_mask) {
            if m > 0.0 {
                total += 1;
                right += usize::from(p == g);
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { right as f64 / total as f64 })
}

/// Greedy translations of every pair with a non-empty source, as words.
pub fn greedy_words(model: &Seq2SeqModel, pairs: &[SentencePair], tgt_vocab: &Vocabulary) -> Result<Vec<Vec<String>>> {
    pairs.iter().map(|p| Ok(tgt_vocab.decode(model.greedy_translate(&p.src)?.words()))).collect()
}

pub fn dev_bleu(model: &Seq2SeqModel, pairs: &[SentencePair], tgt_vocab: &Vocabulary) -> Result<f64> {
    let hyps = greedy_words(model, pairs, tgt_vocab)?;
    let refs: Vec<Vec<String>> = pairs.iter().map(|p| tgt_vocab.decode(&p.tgt)).collect();
    Ok(evalbench::bleu(&hyps, &refs)?)
}

/// Trains for up to `opts.epochs` epochs, calling `on_epoch` after each.
/// Batches with a non-finite loss are logged and skipped.
pub fn fit(
    model: &mut Seq2SeqModel,
    data: &TrainData,
    objective: &Objective,
    opts: &FitOptions,
    mut on_epoch: impl FnMut(EpochEvent<'_>) -> Result<()>,
) -> Result<FitSummary> {
    let mut opt = Adam::new(opts.lr);
    opt.clip_norm = Some(opts.clip_norm);
    let dev_batches = batches_of(&data.dev, opts.batch_size.max(64))?;
    let dev_pairs: Vec<SentencePair> = data.dev.iter().filter(|p| !p.src.is_empty()).cloned().collect();
    let mut stopping = EarlyStopping::new(opts.patience);
    let mut train_seconds = 0.0;
    let mut summary = FitSummary { epochs_run: 0, best_epoch: 0, best_dev_loss: f64::INFINITY, stopped_early: false };
    for epoch in 1..=opts.epochs {
        let batch_seed = opts.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64);
        let (batches, report) = make_batches(&data.train, opts.batch_size, opts.max_len, batch_seed)?;
        if epoch == 1 && report.kept < report.total {
            report.emit();
        }
        let start = Instant::now();
        let (mut loss_sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
        for (i, b) in batches.iter().enumerate() {
            match train_batch(model, b, objective, &mut opt, i) {
                Ok(loss) => {
                    loss_sum += loss;
                    used += 1;
                }
                Err(ModelError::NonFiniteLoss { batch }) => {
                    log::warn!("epoch {epoch}: non-finite loss in batch {batch}, update skipped");
                    skipped += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }
        train_seconds += start.elapsed().as_secs_f64();
        let dev_loss = dev_loss(model, &dev_batches, objective)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: if used == 0 { 0.0 } else { loss_sum / used as f64 },
            dev_loss,
            dev_accuracy: token_accuracy(model, &dev_batches)?,
            dev_bleu: if opts.dev_bleu { Some(dev_bleu(model, &dev_pairs, &data.tgt_vocab)?) } else { None },
            skipped_batches: skipped,
            config_hash: opts.config_hash.clone(),
            seed: opts.seed,
        };
        let (improved, stop) = stopping.observe(epoch, dev_loss);
        summary.epochs_run = epoch;
        on_epoch(EpochEvent { metrics: &metrics, model, improved, train_seconds })?;
        if stop {
            summary.stopped_early = true;
            break;
        }
    }
    summary.best_epoch = stopping.best_epoch;
    summary.best_dev_loss = stopping.best;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use seqcont::seq2seq::{init_model, ModelConfig};
    use seqcont::synthetic;

    fn data() -> TrainData {
        let p = synthetic::prepare(&synthetic::copy_task(1), 4, 2).unwrap();
        TrainData { src_vocab: p.src_vocab, tgt_vocab: p.tgt_vocab, table: Some(p.table), train: p.train, dev: p.dev }
    }

    fn opts(epochs: usize, patience: Option<usize>) -> FitOptions {
        FitOptions {
            epochs,
            batch_size: 32,
            max_len: 100,
            lr: 0.003,
            clip_norm: 5.0,
            seed: 3,
            patience,
            dev_bleu: false,
            config_hash: "h".into(),
        }
    }

    fn model(d: &TrainData) -> Seq2SeqModel {
        let cfg = ModelConfig {
            hidden: 8,
            input_emb: 4,
            output_dim: d.table.as_ref().unwrap().dim(),
            src_vocab: d.src_vocab.len(),
            tgt_vocab: d.tgt_vocab.len(),
            ..ModelConfig::default()
        };
        init_model(cfg, 1, d.table.clone()).unwrap()
    }

    #[test]
    fn early_stopping_waits_for_patience_epochs() {
        let mut s = EarlyStopping::new(Some(3));
        let losses = [5.0, 4.0, 4.5, 4.0, 3.9, 4.0, 4.0, 3.95];
        let stops: Vec<bool> = losses.iter().enumerate().map(|(i, &l)| s.observe(i + 1, l).1).collect();
        assert_eq!(stops, [false, false, false, false, false, false, false, true]);
        assert_eq!((s.best_epoch, s.best), (5, 3.9));
        let mut never = EarlyStopping::new(None);
        assert!((0..10).all(|i| !never.observe(i, 1.0).1));
    }

    #[test]
    fn fit_reports_every_epoch() {
        let d = data();
        let obj = Objective::Vector(seqcont::losses::LossConfig::new(seqcont::losses::LossVariant::NllVmf, 7));
        let mut m = model(&d);
        let mut epochs = Vec::new();
        let s = fit(&mut m, &d, &obj, &opts(3, None), |e| {
            epochs.push(e.metrics.epoch);
            Ok(())
        })
        .unwrap();
        assert_eq!(epochs, [1, 2, 3]);
        assert_eq!(s.epochs_run, 3);
        assert!(!s.stopped_early);
    }

    #[test]
    fn identical_runs_give_identical_metrics() {
        let d = data();
        let obj = Objective::Vector(seqcont::losses::LossConfig::new(seqcont::losses::LossVariant::NllVmfReg1Reg2, 7));
        let run = || {
            let mut m = model(&d);
            let mut lines = Vec::new();
            fit(&mut m, &d, &obj, &opts(2, None), |e| {
                lines.push(serde_json::to_string(e.metrics).unwrap());
                Ok(())
            })
            .unwrap();
            lines
        };
        assert_eq!(run(), run());
    }
}
