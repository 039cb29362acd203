//! The `train`, `translate`, `eval` and `bench` workflows.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use seqcont::corpus::{self, Vocabulary};
use seqcont::evalbench::{self, BenchModel, EvalReport};
use seqcont::seq2seq::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use seqcont::seq2seq::{init_model, HeadKind, ModelConfig, Objective};
use seqcont::synthetic;

use crate::config::RunConfig;
use crate::train::{self, FitOptions};

fn create_out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating output directory {}", cfg.out_dir.display()))?;
    Ok(&cfg.out_dir)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Writes the resolved config, headed by its hash, to `config.txt` in the
/// output directory.
pub fn echo_config(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = create_out_dir(cfg)?;
    let path = dir.join("config.txt");
    write_file(&path, format!("# config_hash = {}\n{}", cfg.hash(), cfg.to_text()).as_bytes())?;
    Ok(path)
}

fn json_line<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(value)? + "\n")
}

#[derive(Serialize)]
struct Artifact<'a> {
    artifact: &'a str,
    config_hash: String,
    seed: u64,
}

/// `metrics.jsonl` gets one line per epoch; `model.ckpt` (or the configured
/// checkpoint) always holds the model with the lowest dev loss so far.
pub fn train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let data = train::load_train_data(cfg)?;
    echo_config(cfg)?;
    let m = data.table.as_ref().map_or(cfg.output_dim, |t| t.dim());
    let model_cfg = cfg.model_config(data.src_vocab.len(), data.tgt_vocab.len(), m);
    let mut model = init_model(model_cfg, cfg.seed, data.table.clone())?;
    let objective = train::objective(cfg, m);
    let metrics_path = cfg.out_dir.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
    let ckpt_path = cfg.checkpoint_path();
    let run_config = format!("# config_hash = {}\n{}", cfg.hash(), cfg.to_text());
    let summary = train::fit(&mut model, &data, &objective, &FitOptions::from_config(cfg), |event| {
        metrics.write_all(json_line(event.metrics)?.as_bytes())?;
        metrics.flush()?;
        log::info!(
            "epoch {} train {:.4} dev {:.4} acc {:.4}",
            event.metrics.epoch,
            event.metrics.train_loss,
            event.metrics.dev_loss,
            event.metrics.dev_accuracy
        );
        if event.improved {
            let ck = Checkpoint {
                run_config: run_config.clone(),
                src_words: data.src_vocab.words().to_vec(),
                tgt_words: data.tgt_vocab.words().to_vec(),
                model: event.model.clone(),
            };
            save_checkpoint(&ck, &ckpt_path)?;
        }
        Ok(())
    })?;
    eprintln!(
        "trained {} epochs (best {} with dev loss {:.6}{}); checkpoint {}",
        summary.epochs_run,
        summary.best_epoch,
        summary.best_dev_loss,
        if summary.stopped_early { ", stopped early" } else { "" },
        ckpt_path.display()
    );
    Ok(())
}

/// Greedy translations of `source` sentences with unk replacement when a
/// dictionary is configured. Returns one line per input sentence.
pub fn translate_sentences(ck: &Checkpoint, sources: &[Vec<String>], dict: Option<&corpus::BilingualDictionary>) -> Result<Vec<Vec<String>>> {
    let src_vocab = Vocabulary::from_words(ck.src_words.clone()).context("checkpoint source vocabulary lacks reserved tokens")?;
    let empty = corpus::BilingualDictionary::default();
    let dict = dict.unwrap_or(&empty);
    let max_len = ck.model.config().max_len;
    sources
        .iter()
        .map(|src| {
            let src: &[String] = &src[..src.len().min(max_len)];
            let t = ck.model.greedy_translate(&src_vocab.encode(src))?;
            let words: Vec<String> = t.words().iter().map(|&i| ck.tgt_words[i].clone()).collect();
            if words.is_empty() {
                return Ok(words);
            }
            Ok(corpus::replace_unks(&words, src, t.word_attention(), dict)?)
        })
        .collect()
}

fn check_compatible(ck: &Checkpoint, path: &Path) -> Result<()> {
    let cfg = ck.model.config();
    if ck.src_words.len() != cfg.src_vocab || ck.tgt_words.len() != cfg.tgt_vocab {
        bail!("checkpoint {} is inconsistent: vocabulary sizes do not match its model config", path.display());
    }
    Ok(())
}

/// Translates `test_src` (one sentence per line) to `output`, or to stdout.
pub fn translate(cfg: &RunConfig) -> Result<()> {
    let ckpt = cfg.checkpoint_path();
    let ck = load_checkpoint(&ckpt).with_context(|| format!("cannot load checkpoint {}", ckpt.display()))?;
    check_compatible(&ck, &ckpt)?;
    let sources = corpus::read_sentences(cfg.require("test_src")?)?;
    let dict = cfg.optional("dictionary")?.map(corpus::load_dictionary).transpose()?;
    let lines = translate_sentences(&ck, &sources, dict.as_ref())?;
    let text: String = lines.iter().map(|l| l.join(" ") + "\n").collect();
    match &cfg.output {
        Some(path) => {
            write_file(path, text.as_bytes())?;
            let meta = Artifact { artifact: "translations", config_hash: cfg.hash(), seed: cfg.seed };
            write_file(&sidecar(path), serde_json::to_string_pretty(&meta)?.as_bytes())?;
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// `<path>.meta.json`, carrying the config hash of a plain-text artifact.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Scores `hyp` against `test_tgt`. Frequency buckets need `train_tgt`;
/// parameter counts come from the checkpoint when one exists, else from
/// the configured shape.
pub fn eval(cfg: &RunConfig) -> Result<EvalReport> {
    let hyps = corpus::read_sentences(cfg.require("hyp")?)?;
    let refs = corpus::read_sentences(cfg.require("test_tgt")?)?;
    let mut report = EvalReport { config_hash: cfg.hash(), seed: cfg.seed, ..Default::default() };
    report.bleu = evalbench::bleu(&hyps, &refs)?;
    if let Some(train_tgt) = cfg.optional("train_tgt")? {
        let freq = Vocabulary::from_sentences(&corpus::read_sentences(train_tgt)?, usize::MAX);
        report.f1_by_bucket = evalbench::unigram_f1_by_freq(&hyps, &refs, &freq)?.into_iter().map(|(k, v)| (k, v.f1)).collect();
    }
    let ckpt = cfg.checkpoint_path();
    let model_cfg = if ckpt.exists() {
        *load_checkpoint(&ckpt).with_context(|| format!("cannot load checkpoint {}", ckpt.display()))?.model.config()
    } else {
        cfg.model_config(cfg.src_vocab_size, cfg.tgt_vocab_size, cfg.output_dim)
    };
    report.param_counts = evalbench::count_params(&model_cfg);
    let dir = create_out_dir(cfg)?;
    write_file(&dir.join("eval.json"), report.to_json()?.as_bytes())?;
    write_file(&dir.join("eval.txt"), report.to_table().as_bytes())?;
    print!("{}", report.to_table());
    Ok(report)
}

/// Bundled synthetic tasks: name, generator seed, embedding dimension and
/// embedding seed.
pub const BUNDLED: [(&str, u64, usize, u64); 2] = [("copy", 5, 16, 6), ("lexicon", 7, 32, 11)];

/// Writes `train.src`, `train.tgt`, `dev.src`, `dev.tgt` and `embeddings.vec`
/// for one bundled task into `dir`.
pub fn write_bundled(name: &str, dir: &Path) -> Result<()> {
    let &(_, seed, dim, emb_seed) = BUNDLED.iter().find(|b| b.0 == name).with_context(|| format!("no bundled task `{name}`"))?;
    let task = match name {
        "copy" => synthetic::copy_task(seed),
        _ => synthetic::lexicon_task(seed),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let side = |pairs: &[synthetic::Pair], src: bool| synthetic::sentences_text(pairs.iter().map(|p| if src { &p.0 } else { &p.1 }));
    write_file(&dir.join("train.src"), side(&task.train, true).as_bytes())?;
    write_file(&dir.join("train.tgt"), side(&task.train, false).as_bytes())?;
    write_file(&dir.join("dev.src"), side(&task.dev, true).as_bytes())?;
    write_file(&dir.join("dev.tgt"), side(&task.dev, false).as_bytes())?;
    write_file(&dir.join("embeddings.vec"), synthetic::random_embeddings_text(&task.target_words, dim, emb_seed).as_bytes())?;
    Ok(())
}

/// Softmax (untied) and continuous (tied, `output_dim`) models of the
/// configured shape for a target vocabulary of `v` words.
pub fn bench_models(cfg: &RunConfig, v: usize) -> Result<Vec<BenchModel>> {
    let shape = |head, tied| ModelConfig {
        head,
        tied,
        ..cfg.model_config(cfg.src_vocab_size.clamp(8, 1000), v, cfg.output_dim)
    };
    let soft = init_model(shape(HeadKind::Softmax, false), cfg.seed, None)?;
    let table = synthetic::random_table(v, cfg.output_dim, cfg.seed)?;
    let cont = init_model(shape(HeadKind::Continuous, true), cfg.seed, Some(table))?;
    let lr = |head| RunConfig { head, ..cfg.clone() }.learning_rate();
    Ok(vec![
        BenchModel { name: format!("softmax_v{v}"), model: soft, objective: Objective::CrossEntropy, lr: lr(HeadKind::Softmax) },
        BenchModel {
            name: format!("continuous_v{v}"),
            model: cont,
            objective: Objective::Vector(cfg.loss_config(cfg.output_dim)),
            lr: lr(HeadKind::Continuous),
        },
    ])
}

/// Median step times at `batch_size` for every benchmark vocabulary, and a
/// throughput curve over `bench_batch_sizes` at `tgt_vocab_size`. Writes
/// `bench.json` and `bench.csv`.
pub fn bench(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let dir = create_out_dir(cfg)?.to_path_buf();
    echo_config(cfg)?;
    let hash = cfg.hash();
    let mut timings = BTreeMap::new();
    for &v in &cfg.bench_vocab {
        for mut b in bench_models(cfg, v)? {
            let (sv, tv) = (b.model.config().src_vocab, v);
            let batch = evalbench::synthetic_batch(cfg.batch_size, cfg.bench_src_len, cfg.bench_tgt_len, sv, tv, cfg.seed);
            let ms = evalbench::bench_step_time(&mut b, &batch, cfg.bench_warmup, cfg.bench_trials)?;
            eprintln!("{}: {ms:.2} ms/step", b.name);
            timings.insert(b.name, ms);
        }
    }
    let mut points = Vec::new();
    for mut b in bench_models(cfg, cfg.tgt_vocab_size)? {
        b.name = format!("{}@{hash}", b.name);
        points.extend(evalbench::throughput_curve(
            &mut b,
            &cfg.bench_batch_sizes,
            cfg.bench_src_len,
            cfg.bench_tgt_len,
            cfg.bench_warmup,
            cfg.bench_trials,
            cfg.seed,
        )?);
    }
    let csv_path = dir.join("bench.csv");
    evalbench::write_throughput_csv(&points, File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?)?;
    let mut report = EvalReport { config_hash: hash, seed: cfg.seed, timings, ..Default::default() };
    for (name, shape) in [("softmax", HeadKind::Softmax), ("continuous", HeadKind::Continuous)] {
        let mc = ModelConfig {
            head: shape,
            tied: shape == HeadKind::Continuous,
            ..cfg.model_config(cfg.src_vocab_size, cfg.tgt_vocab_size, cfg.output_dim)
        };
        for (k, v) in evalbench::count_params(&mc) {
            report.param_counts.insert(format!("{name}.{k}"), v);
        }
    }
    write_file(&dir.join("bench.json"), report.to_json()?.as_bytes())?;
    print!("{}", report.to_table());
    Ok(report)
}
