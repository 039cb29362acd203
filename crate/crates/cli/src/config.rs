//! Run configuration: `key = value` lines, `#` comments, later lines and
//! `--set` overrides replacing earlier values. Unset keys take the defaults
//! of the reference hyperparameter table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use seqcont::corpus::{DEFAULT_MAX_LEN, DEFAULT_VOCAB_CAP};
use seqcont::embed::ReservedLayout;
use seqcont::losses::{LossConfig, LossVariant};
use seqcont::seq2seq::optim::DEFAULT_CLIP_NORM;
use seqcont::seq2seq::{HeadKind, ModelConfig};
use seqcont::specfun::CmEvalMode;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const LR_CONTINUOUS: f64 = 0.0005;
pub const LR_SOFTMAX: f64 = 0.0002;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("{origin}: malformed line `{line}` (expected `key = value`)")]
    Malformed { origin: String, line: String },
    #[error("config key `{key}`: cannot parse `{value}` as {expected}")]
    Type { key: String, value: String, expected: &'static str },
    #[error("config key `{0}` is required")]
    Missing(String),
    #[error("config key `{key}`: path {path} does not exist")]
    PathNotFound { key: String, path: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {msg}")]
    Io { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub hidden: usize,
    pub input_emb: usize,
    pub output_dim: usize,
    pub tied: bool,
    pub head: HeadKind,
    pub max_len: usize,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub loss: LossVariant,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
    pub cm_mode: CmEvalMode,
    /// `None` picks the per-head default.
    pub lr: Option<f64>,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub reserved: ReservedKind,
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    pub test_src: Option<PathBuf>,
    pub test_tgt: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub dictionary: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub hyp: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub bench_vocab: Vec<usize>,
    pub bench_batch_sizes: Vec<usize>,
    pub bench_trials: usize,
    pub bench_warmup: usize,
    pub bench_src_len: usize,
    pub bench_tgt_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReservedKind {
    Appended,
    Random,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            enc_layers: model.enc_layers,
            dec_layers: model.dec_layers,
            hidden: model.hidden,
            input_emb: model.input_emb,
            output_dim: model.output_dim,
            tied: model.tied,
            head: model.head,
            max_len: DEFAULT_MAX_LEN,
            src_vocab_size: DEFAULT_VOCAB_CAP,
            tgt_vocab_size: DEFAULT_VOCAB_CAP,
            loss: LossVariant::NllVmfReg1Reg2,
            lambda1: 0.02,
            lambda2: 0.1,
            gamma: 0.5,
            cm_mode: CmEvalMode::Exact,
            lr: None,
            clip_norm: DEFAULT_CLIP_NORM,
            batch_size: 64,
            epochs: 30,
            patience: 3,
            seed: 1,
            reserved: ReservedKind::Appended,
            train_src: None,
            train_tgt: None,
            dev_src: None,
            dev_tgt: None,
            test_src: None,
            test_tgt: None,
            embeddings: None,
            dictionary: None,
            checkpoint: None,
            hyp: None,
            output: None,
            out_dir: PathBuf::from("run"),
            bench_vocab: vec![5_000, 50_000, 200_000],
            bench_batch_sizes: vec![16, 32, 64, 128],
            bench_trials: 5,
            bench_warmup: 1,
            bench_src_len: 10,
            bench_tgt_len: 10,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T> {
    value.parse().map_err(|_| ConfigError::Type { key: key.into(), value: value.into(), expected })
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|x| parse(key, x.trim(), "a comma-separated list of integers")).collect()
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn show_list(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        const INT: &str = "a non-negative integer";
        const REAL: &str = "a number";
        match key {
            "enc_layers" => self.enc_layers = parse(key, value, INT)?,
            "dec_layers" => self.dec_layers = parse(key, value, INT)?,
            "hidden" => self.hidden = parse(key, value, INT)?,
            "input_emb" => self.input_emb = parse(key, value, INT)?,
            "output_dim" => self.output_dim = parse(key, value, INT)?,
            "tied" => self.tied = parse(key, value, "true or false")?,
            "head" => self.head = parse(key, value, "softmax or continuous")?,
            "max_len" => self.max_len = parse(key, value, INT)?,
            "src_vocab_size" => self.src_vocab_size = parse(key, value, INT)?,
            "tgt_vocab_size" => self.tgt_vocab_size = parse(key, value, INT)?,
            "loss" => self.loss = parse(key, value, "a loss name")?,
            "lambda1" => self.lambda1 = parse(key, value, REAL)?,
            "lambda2" => self.lambda2 = parse(key, value, REAL)?,
            "gamma" => self.gamma = parse(key, value, REAL)?,
            "cm_mode" => self.cm_mode = parse(key, value, "exact or bound")?,
            "lr" => self.lr = if value == "auto" { None } else { Some(parse(key, value, REAL)?) },
            "clip_norm" => self.clip_norm = parse(key, value, REAL)?,
            "batch_size" => self.batch_size = parse(key, value, INT)?,
            "epochs" => self.epochs = parse(key, value, INT)?,
            "patience" => self.patience = parse(key, value, INT)?,
            "seed" => self.seed = parse(key, value, INT)?,
            "reserved" => {
                self.reserved = match value {
                    "appended" => ReservedKind::Appended,
                    "random" => ReservedKind::Random,
                    _ => return Err(ConfigError::Type { key: key.into(), value: value.into(), expected: "appended or random" }),
                }
            }
            "train_src" => self.train_src = path(value),
            "train_tgt" => self.train_tgt = path(value),
            "dev_src" => self.dev_src = path(value),
            "dev_tgt" => self.dev_tgt = path(value),
            "test_src" => self.test_src = path(value),
            "test_tgt" => self.test_tgt = path(value),
            "embeddings" => self.embeddings = path(value),
            "dictionary" => self.dictionary = path(value),
            "checkpoint" => self.checkpoint = path(value),
            "hyp" => self.hyp = path(value),
            "output" => self.output = path(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "bench_vocab" => self.bench_vocab = list(key, value)?,
            "bench_batch_sizes" => self.bench_batch_sizes = list(key, value)?,
            "bench_trials" => self.bench_trials = parse(key, value, INT)?,
            "bench_warmup" => self.bench_warmup = parse(key, value, INT)?,
            "bench_src_len" => self.bench_src_len = parse(key, value, INT)?,
            "bench_tgt_len" => self.bench_tgt_len = parse(key, value, INT)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Malformed { origin: origin.into(), line: raw.into() })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides` (each `key=value`).
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = file {
            let text = fs::read_to_string(p).map_err(|e| ConfigError::Io { path: p.display().to_string(), msg: e.to_string() })?;
            cfg.apply_text(&text, &p.display().to_string())?;
        }
        for o in overrides {
            cfg.apply_text(o, "--set")?;
        }
        Ok(cfg)
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(match self.head {
            HeadKind::Softmax => LR_SOFTMAX,
            HeadKind::Continuous => LR_CONTINUOUS,
        })
    }

    pub fn loss_config(&self, m: usize) -> LossConfig {
        LossConfig {
            variant: self.loss,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            gamma: self.gamma,
            m,
            cm_mode: self.cm_mode,
        }
    }

    pub fn reserved_layout(&self) -> ReservedLayout {
        match self.reserved {
            ReservedKind::Appended => ReservedLayout::Appended,
            ReservedKind::Random => ReservedLayout::Random { seed: self.seed },
        }
    }

    /// Model shape for vocabularies of the given sizes and output dimension.
    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize, output_dim: usize) -> ModelConfig {
        ModelConfig {
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            hidden: self.hidden,
            input_emb: self.input_emb,
            output_dim,
            tied: self.tied,
            head: self.head,
            max_len: self.max_len,
            src_vocab,
            tgt_vocab,
        }
    }

    /// The resolved configuration, one `key = value` line per key. Parsing
    /// it back gives the same configuration.
    pub fn to_text(&self) -> String {
        let reserved = match self.reserved {
            ReservedKind::Appended => "appended",
            ReservedKind::Random => "random",
        };
        let fields: Vec<(&str, String)> = vec![
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("hidden", self.hidden.to_string()),
            ("input_emb", self.input_emb.to_string()),
            ("output_dim", self.output_dim.to_string()),
            ("tied", self.tied.to_string()),
            ("head", self.head.to_string()),
            ("max_len", self.max_len.to_string()),
            ("src_vocab_size", self.src_vocab_size.to_string()),
            ("tgt_vocab_size", self.tgt_vocab_size.to_string()),
            ("loss", self.loss.to_string()),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("gamma", self.gamma.to_string()),
            ("cm_mode", self.cm_mode.to_string()),
            ("lr", self.learning_rate().to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            ("reserved", reserved.to_string()),
            ("train_src", show_path(&self.train_src)),
            ("train_tgt", show_path(&self.train_tgt)),
            ("dev_src", show_path(&self.dev_src)),
            ("dev_tgt", show_path(&self.dev_tgt)),
            ("test_src", show_path(&self.test_src)),
            ("test_tgt", show_path(&self.test_tgt)),
            ("embeddings", show_path(&self.embeddings)),
            ("dictionary", show_path(&self.dictionary)),
            ("checkpoint", show_path(&self.checkpoint)),
            ("hyp", show_path(&self.hyp)),
            ("output", show_path(&self.output)),
            ("out_dir", self.out_dir.display().to_string()),
            ("bench_vocab", show_list(&self.bench_vocab)),
            ("bench_batch_sizes", show_list(&self.bench_batch_sizes)),
            ("bench_trials", self.bench_trials.to_string()),
            ("bench_warmup", self.bench_warmup.to_string()),
            ("bench_src_len", self.bench_src_len.to_string()),
            ("bench_tgt_len", self.bench_tgt_len.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in fields {
            let _ = if v.is_empty() { writeln!(out, "{k} =") } else { writeln!(out, "{k} = {v}") };
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The path under `key`, which must be set and exist.
    pub fn require(&self, key: &str) -> Result<&Path> {
        let p = match key {
            "train_src" => &self.train_src,
            "train_tgt" => &self.train_tgt,
            "dev_src" => &self.dev_src,
            "dev_tgt" => &self.dev_tgt,
            "test_src" => &self.test_src,
            "test_tgt" => &self.test_tgt,
            "embeddings" => &self.embeddings,
            "dictionary" => &self.dictionary,
            "checkpoint" => &self.checkpoint,
            "hyp" => &self.hyp,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        };
        let p = p.as_deref().ok_or_else(|| ConfigError::Missing(key.into()))?;
        if !p.exists() {
            return Err(ConfigError::PathNotFound { key: key.into(), path: p.display().to_string() });
        }
        Ok(p)
    }

    /// `path` if it is set and exists, `None` if unset.
    pub fn optional(&self, key: &str) -> Result<Option<&Path>> {
        match self.require(key) {
            Err(ConfigError::Missing(_)) => Ok(None),
            other => other.map(Some),
        }
    }

    /// Checkpoint to read or write: the configured one, or `model.ckpt` in
    /// the output directory.
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    /// Checks the settings shared by all subcommands.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("input_emb", self.input_emb),
            ("output_dim", self.output_dim),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("max_len", self.max_len),
            ("batch_size", self.batch_size),
            ("src_vocab_size", self.src_vocab_size),
            ("tgt_vocab_size", self.tgt_vocab_size),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::Invalid(format!("`{k}` must be at least 1")));
        }
        if !self.hidden.is_multiple_of(2) {
            return Err(ConfigError::Invalid("`hidden` must be even (the encoder splits it between directions)".into()));
        }
        if !(self.learning_rate() > 0.0 && self.learning_rate().is_finite()) {
            return Err(ConfigError::Invalid("`lr` must be positive".into()));
        }
        self.loss_config(self.output_dim).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_reference_defaults() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("", "empty").unwrap();
        assert_eq!((cfg.hidden, cfg.input_emb, cfg.output_dim, cfg.max_len), (1024, 512, 300, 100));
        assert_eq!((cfg.enc_layers, cfg.dec_layers), (1, 2));
        assert_eq!((cfg.src_vocab_size, cfg.tgt_vocab_size), (50_000, 50_000));
        assert_eq!(cfg.learning_rate(), 0.0005);
        cfg.set("head", "softmax").unwrap();
        assert_eq!(cfg.learning_rate(), 0.0002);
    }

    #[test]
    fn overrides_win() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(&file, "hidden = 64  # small\n\ninput_emb=16\n").unwrap();
        let cfg = RunConfig::resolve(Some(&file), &["hidden=32".into()]).unwrap();
        assert_eq!((cfg.hidden, cfg.input_emb), (32, 16));
    }

    #[test]
    fn strict_parsing() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("foo = 1", "x").unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey("foo".into()));
        assert!(err.to_string().contains("foo"));
        assert!(matches!(cfg.set("hidden", "big"), Err(ConfigError::Type { .. })));
        assert!(matches!(cfg.apply_text("hidden 3", "x"), Err(ConfigError::Malformed { .. })));
        assert!(matches!(cfg.require("train_src"), Err(ConfigError::Missing(_))));
        cfg.set("train_src", "/no/such/file").unwrap();
        assert!(matches!(cfg.require("train_src"), Err(ConfigError::PathNotFound { .. })));
        cfg.set("hidden", "33").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn text_round_trips_and_hash_tracks_content() {
        let mut cfg = RunConfig::default();
        cfg.set("train_src", "a.txt").unwrap();
        cfg.set("bench_vocab", "10, 20").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text(), "echo").unwrap();
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
        back.set("seed", "2").unwrap();
        assert_ne!(back.hash(), cfg.hash());
    }
}
