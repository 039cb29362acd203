//! Bidirectional-LSTM encoder, stacked LSTM decoder with general (bilinear)
//! attention, and two output heads: a softmax over the target vocabulary or
//! a continuous `H -> m` projection scored against a fixed embedding table.
//!
//! Decoder step `t` with previous token `y`:
//!
//! ```text
//! x      = E y                       (or A^T e(y) when tied: frozen e, trainable A)
//! h_l    = LSTM_l([x | h_{l-1}])     for l = 1..L, x_1 = x, x_{l+1} = h_l
//! alpha  = softmax_s(h_L W_a . hbar_s)
//! h_out  = tanh(W_c^T [sum_s alpha_s hbar_s | h_L])
//! output = W h_out + b               (softmax head)
//!        | P^T h_out                 (continuous head)
//! ```
//!
//! The encoder runs each direction with `H/2` units; the decoder layers all
//! start from `[h_fwd | h_bwd]`, `[c_fwd | c_bwd]` of the top encoder layer.
//! Matrices multiply row vectors from the right, so a weight for an
//! `a -> b` map has shape `a x b` (the softmax matrix is stored `V x H`).

pub mod checkpoint;
pub mod optim;
pub mod tape;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::Batch;
use crate::embed::{self, EmbedError, EmbeddingTable, BOS_ID, EOS_ID, PAD_ID};
use crate::losses::{LossConfig, LossError};
use optim::Adam;
use tape::{Grads, NodeId, ParamSet, Tape};

pub const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("tied input embeddings need an embedding table")]
    TiedWithoutTable,
    #[error("the continuous head needs a target embedding table")]
    MissingTable,
    #[error("embedding table is {rows}x{dim}, model expects {vocab}x{m}")]
    TableShape { rows: usize, dim: usize, vocab: usize, m: usize },
    #[error("source sentence is empty")]
    EmptySource,
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sentence of length {len} exceeds the maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("objective does not match the {0} head")]
    ObjectiveMismatch(HeadKind),
    #[error("non-finite loss at batch {batch}; update skipped")]
    NonFiniteLoss { batch: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Softmax,
    Continuous,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Softmax => "softmax",
            HeadKind::Continuous => "continuous",
        })
    }
}

impl FromStr for HeadKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(HeadKind::Softmax),
            "continuous" => Ok(HeadKind::Continuous),
            _ => Err(ModelError::Config(format!("unknown head `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub hidden: usize,
    pub input_emb: usize,
    pub output_dim: usize,
    pub tied: bool,
    pub head: HeadKind,
    pub max_len: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_layers: 1,
            dec_layers: 2,
            hidden: 1024,
            input_emb: 512,
            output_dim: 300,
            tied: false,
            head: HeadKind::Continuous,
            max_len: 100,
            src_vocab: 50_000,
            tgt_vocab: 50_000,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("hidden", self.hidden),
            ("input_emb", self.input_emb),
            ("output_dim", self.output_dim),
            ("max_len", self.max_len),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.hidden.is_multiple_of(2) {
            return Err(ModelError::Config(format!(
                "hidden = {} must be even (each encoder direction has hidden/2 units)",
                self.hidden
            )));
        }
        Ok(())
    }

    /// `key = value` lines, in a fixed order.
    pub fn to_text(&self) -> String {
        format!(
            "enc_layers = {}\ndec_layers = {}\nhidden = {}\ninput_emb = {}\noutput_dim = {}\ntied = {}\nhead = {}\nmax_len = {}\nsrc_vocab = {}\ntgt_vocab = {}\n",
            self.enc_layers,
            self.dec_layers,
            self.hidden,
            self.input_emb,
            self.output_dim,
            self.tied,
            self.head,
            self.max_len,
            self.src_vocab,
            self.tgt_vocab
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| ModelError::Config(format!("malformed line `{line}`")))?;
            let num = || v.parse::<usize>().map_err(|e| ModelError::Config(format!("{k}: {e}")));
            match k {
                "enc_layers" => cfg.enc_layers = num()?,
                "dec_layers" => cfg.dec_layers = num()?,
                "hidden" => cfg.hidden = num()?,
                "input_emb" => cfg.input_emb = num()?,
                "output_dim" => cfg.output_dim = num()?,
                "max_len" => cfg.max_len = num()?,
                "src_vocab" => cfg.src_vocab = num()?,
                "tgt_vocab" => cfg.tgt_vocab = num()?,
                "tied" => cfg.tied = v.parse().map_err(|e| ModelError::Config(format!("tied: {e}")))?,
                "head" => cfg.head = v.parse()?,
                other => return Err(ModelError::Config(format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Shape of one parameter matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSpec {
    fn new(name: String, rows: usize, cols: usize) -> Self {
        Self { name, rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Every trainable matrix of a model with this configuration, in
/// initialization order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (h, e) = (cfg.hidden, cfg.input_emb);
    let hh = h / 2;
    let mut specs = vec![ParamSpec::new("enc.emb".into(), cfg.src_vocab, e)];
    for l in 0..cfg.enc_layers {
        let d_in = if l == 0 { e } else { h };
        for dir in ["fwd", "bwd"] {
            specs.push(ParamSpec::new(format!("enc.l{l}.{dir}.w"), d_in + hh, 4 * hh));
            specs.push(ParamSpec::new(format!("enc.l{l}.{dir}.b"), 1, 4 * hh));
        }
    }
    if cfg.tied {
        specs.push(ParamSpec::new("dec.adapter".into(), cfg.output_dim, e));
    } else {
        specs.push(ParamSpec::new("dec.emb".into(), cfg.tgt_vocab, e));
    }
    for l in 0..cfg.dec_layers {
        let d_in = if l == 0 { e } else { h };
        specs.push(ParamSpec::new(format!("dec.l{l}.w"), d_in + h, 4 * h));
        specs.push(ParamSpec::new(format!("dec.l{l}.b"), 1, 4 * h));
    }
    specs.push(ParamSpec::new("att.w".into(), h, h));
    specs.push(ParamSpec::new("att.out".into(), 2 * h, h));
    match cfg.head {
        HeadKind::Softmax => {
            specs.push(ParamSpec::new("out.w".into(), cfg.tgt_vocab, h));
            specs.push(ParamSpec::new("out.b".into(), 1, cfg.tgt_vocab));
        }
        HeadKind::Continuous => specs.push(ParamSpec::new("out.proj".into(), h, cfg.output_dim)),
    }
    specs
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    enc_emb: usize,
    enc: Vec<[(usize, usize); 2]>,
    dec_in: usize,
    dec: Vec<(usize, usize)>,
    att_w: usize,
    att_out: usize,
    out_w: usize,
    out_b: Option<usize>,
}

impl Layout {
    fn resolve(cfg: &ModelConfig, params: &ParamSet) -> Result<Self> {
        let find = |n: &str| params.index(n).ok_or_else(|| ModelError::Checkpoint(format!("missing parameter `{n}`")));
        let enc = (0..cfg.enc_layers)
            .map(|l| {
                Ok([
                    (find(&format!("enc.l{l}.fwd.w"))?, find(&format!("enc.l{l}.fwd.b"))?),
                    (find(&format!("enc.l{l}.bwd.w"))?, find(&format!("enc.l{l}.bwd.b"))?),
                ])
            })
            .collect::<Result<_>>()?;
        let dec = (0..cfg.dec_layers)
            .map(|l| Ok((find(&format!("dec.l{l}.w"))?, find(&format!("dec.l{l}.b"))?)))
            .collect::<Result<_>>()?;
        let (out_w, out_b) = match cfg.head {
            HeadKind::Softmax => (find("out.w")?, Some(find("out.b")?)),
            HeadKind::Continuous => (find("out.proj")?, None),
        };
        Ok(Self {
            enc_emb: find("enc.emb")?,
            enc,
            dec_in: find(if cfg.tied { "dec.adapter" } else { "dec.emb" })?,
            dec,
            att_w: find("att.w")?,
            att_out: find("att.out")?,
            out_w,
            out_b,
        })
    }
}

/// What the model is trained to minimize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    CrossEntropy,
    Vector(LossConfig),
}

/// Head output at one decoder step.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadOutput {
    Logits(Vec<f64>),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub hidden: Vec<f64>,
    pub attention: Vec<f64>,
    pub output: HeadOutput,
}

/// Encoder results for one source sentence.
#[derive(Debug, Clone)]
pub struct EncodedSource {
    memory: Vec<Array2<f64>>,
    mask: Array2<f64>,
}

impl EncodedSource {
    pub fn len(&self) -> usize {
        self.memory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memory.is_empty()
    }
}

/// `(h, c)` for each decoder layer.
#[derive(Debug, Clone)]
pub struct DecoderState {
    layers: Vec<(Array2<f64>, Array2<f64>)>,
}

/// Greedy decoder output. `tokens` ends with `</s>` unless the length limit
/// was hit; `attention` has one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub tokens: Vec<usize>,
    pub attention: Array2<f64>,
}

impl Translation {
    /// Tokens without the closing `</s>`.
    pub fn words(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS_ID) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    /// Attention rows matching [`Translation::words`].
    pub fn word_attention(&self) -> ArrayView2<'_, f64> {
        self.attention.slice(ndarray::s![..self.words().len(), ..])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel {
    cfg: ModelConfig,
    params: ParamSet,
    trainable: Vec<bool>,
    layout: Layout,
    table: Option<EmbeddingTable>,
}

struct Recorded {
    h_out: NodeId,
    attention: NodeId,
    states: Vec<(NodeId, NodeId)>,
}

/// Parameters drawn uniformly from `[-0.1, 0.1]` in [`param_specs`] order.
/// `table` is the target embedding table: required when tied (as the frozen
/// decoder input) and for the continuous head (as the regression target).
pub fn init_model(cfg: ModelConfig, seed: u64, table: Option<EmbeddingTable>) -> Result<Seq2SeqModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-INIT_RANGE, INIT_RANGE);
    let mut params = ParamSet::new();
    for spec in param_specs(&cfg) {
        let data: Vec<f64> = (0..spec.len()).map(|_| dist.sample(&mut rng)).collect();
        params.push(spec.name, Array2::from_shape_vec((spec.rows, spec.cols), data).expect("shape"));
    }
    Seq2SeqModel::from_parts(cfg, params, table)
}

impl Seq2SeqModel {
    pub fn from_parts(cfg: ModelConfig, params: ParamSet, table: Option<EmbeddingTable>) -> Result<Self> {
        cfg.validate()?;
        if cfg.tied && table.is_none() {
            return Err(ModelError::TiedWithoutTable);
        }
        if cfg.head == HeadKind::Continuous && table.is_none() {
            return Err(ModelError::MissingTable);
        }
        if let Some(t) = &table {
            if t.dim() != cfg.output_dim || t.len() != cfg.tgt_vocab {
                return Err(ModelError::TableShape { rows: t.len(), dim: t.dim(), vocab: cfg.tgt_vocab, m: cfg.output_dim });
            }
        }
        for spec in param_specs(&cfg) {
            let i = params
                .index(&spec.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter `{}`", spec.name)))?;
            if params.value(i).dim() != (spec.rows, spec.cols) {
                return Err(ModelError::Checkpoint(format!("parameter `{}` has the wrong shape", spec.name)));
            }
        }
        let layout = Layout::resolve(&cfg, &params)?;
        let trainable = vec![true; params.len()];
        Ok(Self { cfg, params, trainable, layout, table })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn table(&self) -> Option<&EmbeddingTable> {
        self.table.as_ref()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_ids<'i>(&self, ids: impl IntoIterator<Item = &'i usize>, vocab: usize) -> Result<()> {
        match ids.into_iter().find(|&&i| i >= vocab) {
            Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }

    fn lstm_step(&self, t: &mut Tape<'_>, x: NodeId, h: NodeId, c: NodeId, w: usize, b: usize) -> (NodeId, NodeId) {
        let hidden = t.value(h).ncols();
        let xh = t.concat_cols(&[x, h]);
        let wn = t.param(w);
        let bn = t.param(b);
        let pre = t.matmul(xh, wn);
        let gates = t.add_row(pre, bn);
        let hc = t.lstm_cell(gates, c);
        (t.slice_cols(hc, 0, hidden), t.slice_cols(hc, hidden, hidden))
    }

    /// Runs the encoder over `src` (`B x S`, padded) and returns the memory
    /// nodes and the initial decoder state.
    fn record_encoder(&self, t: &mut Tape<'_>, src: ArrayView2<'_, usize>, mask: ArrayView2<'_, f64>) -> (Vec<NodeId>, Vec<(NodeId, NodeId)>) {
        let (b, s_len) = src.dim();
        let hh = self.cfg.hidden / 2;
        let mut inputs: Vec<NodeId> = (0..s_len)
            .map(|s| {
                let ids: Vec<usize> = src.column(s).to_vec();
                t.gather(self.layout.enc_emb, &ids)
            })
            .collect();
        let columns: Vec<Vec<f64>> = (0..s_len).map(|s| mask.column(s).to_vec()).collect();
        let mut finals = Vec::new();
        for layer in &self.layout.enc {
            let mut outs = [vec![0; s_len], vec![0; s_len]];
            finals.clear();
            for (dir, &(w, bias)) in layer.iter().enumerate() {
                let mut h = t.input(Array2::zeros((b, hh)));
                let mut c = t.input(Array2::zeros((b, hh)));
                let order: Vec<usize> = if dir == 0 { (0..s_len).collect() } else { (0..s_len).rev().collect() };
                for s in order {
                    let (h2, c2) = self.lstm_step(t, inputs[s], h, c, w, bias);
                    h = t.blend(h2, h, &columns[s]);
                    c = t.blend(c2, c, &columns[s]);
                    outs[dir][s] = h;
                }
                finals.push((h, c));
            }
            inputs = (0..s_len).map(|s| t.concat_cols(&[outs[0][s], outs[1][s]])).collect();
        }
        let h0 = t.concat_cols(&[finals[0].0, finals[1].0]);
        let c0 = t.concat_cols(&[finals[0].1, finals[1].1]);
        (inputs, vec![(h0, c0); self.cfg.dec_layers])
    }

    fn record_input(&self, t: &mut Tape<'_>, prev: &[usize]) -> NodeId {
        if self.cfg.tied {
            let e = t.gather_table(self.table.as_ref().expect("tied model has a table"), prev);
            let a = t.param(self.layout.dec_in);
            t.matmul(e, a)
        } else {
            t.gather(self.layout.dec_in, prev)
        }
    }

    fn record_step(
        &self,
        t: &mut Tape<'_>,
        prev: &[usize],
        states: &[(NodeId, NodeId)],
        memory: &[NodeId],
        mask: ArrayView2<'_, f64>,
    ) -> Recorded {
        let mut x = self.record_input(t, prev);
        let mut next = Vec::with_capacity(states.len());
        for (&(w, b), &(h, c)) in self.layout.dec.iter().zip(states) {
            let (h2, c2) = self.lstm_step(t, x, h, c, w, b);
            next.push((h2, c2));
            x = h2;
        }
        let wa = t.param(self.layout.att_w);
        let q = t.matmul(x, wa);
        let ctx = t.attend(q, memory, mask);
        let joined = t.concat_cols(&[ctx, x]);
        let wc = t.param(self.layout.att_out);
        let pre = t.matmul(joined, wc);
        let h_out = t.tanh(pre);
        Recorded { h_out, attention: ctx, states: next }
    }

    fn record_head(&self, t: &mut Tape<'_>, h_out: NodeId) -> NodeId {
        match self.layout.out_b {
            Some(b) => {
                // logits = h W^T + b with W stored V x H
                let w = self.params.value(self.layout.out_w);
                let logits = t.value(h_out).dot(&w.t()) + self.params.value(b);
                t.input(logits)
            }
            None => {
                let w = t.param(self.layout.out_w);
                t.matmul(h_out, w)
            }
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        self.check_ids(&batch.src, self.cfg.src_vocab)?;
        self.check_ids(&batch.tgt_in, self.cfg.tgt_vocab)?;
        self.check_ids(&batch.tgt_out, self.cfg.tgt_vocab)?;
        Ok(())
    }

    /// Records the teacher-forced loss of `batch`: the mean token loss of each
    /// sentence, averaged over sentences with at least one target token.
    fn record_loss(&self, t: &mut Tape<'_>, batch: &Batch, objective: &Objective) -> Result<Option<NodeId>> {
        match (objective, self.cfg.head) {
            (Objective::CrossEntropy, HeadKind::Softmax) | (Objective::Vector(_), HeadKind::Continuous) => {}
            _ => return Err(ModelError::ObjectiveMismatch(self.cfg.head)),
        }
        self.check_batch(batch)?;
        let (b, steps) = batch.tgt_mask.dim();
        let lens: Vec<f64> = batch.tgt_mask.rows().into_iter().map(|r| r.sum()).collect();
        let live = lens.iter().filter(|&&l| l > 0.0).count();
        if live == 0 || batch.src.ncols() == 0 {
            return Ok(None);
        }
        let (memory, mut states) = self.record_encoder(t, batch.src.view(), batch.src_mask.view());
        let mut outs = Vec::with_capacity(steps);
        let mut targets = Vec::with_capacity(steps * b);
        let mut weights = Vec::with_capacity(steps * b);
        for s in 0..steps {
            let prev: Vec<usize> = batch.tgt_in.column(s).to_vec();
            let rec = self.record_step(t, &prev, &states, &memory, batch.src_mask.view());
            states = rec.states;
            outs.push(rec.h_out);
            for r in 0..b {
                targets.push(batch.tgt_out[[r, s]]);
                let m = batch.tgt_mask[[r, s]];
                weights.push(if m > 0.0 { m / (lens[r] * live as f64) } else { 0.0 });
            }
        }
        let stacked = t.concat_rows(&outs);
        let root = match objective {
            Objective::CrossEntropy => {
                t.softmax_ce(stacked, self.layout.out_w, self.layout.out_b.expect("softmax head"), &targets, &weights)
            }
            Objective::Vector(cfg) => {
                let w = t.param(self.layout.out_w);
                let pred = t.matmul(stacked, w);
                t.vector_loss(pred, self.table.as_ref().expect("continuous head has a table"), &targets, &weights, cfg)?
            }
        };
        Ok(Some(root))
    }

    /// Mean teacher-forced loss of `batch` (0 when it holds no target token).
    pub fn batch_loss(&self, batch: &Batch, objective: &Objective) -> Result<f64> {
        let mut t = Tape::new(&self.params, &self.trainable, false);
        Ok(match self.record_loss(&mut t, batch, objective)? {
            Some(root) => t.value(root)[[0, 0]],
            None => 0.0,
        })
    }

    /// Shapes `[rows, inner, cols]` of the forward matrix products recorded
    /// while computing the loss of `batch`.
    pub fn loss_products(&self, batch: &Batch, objective: &Objective) -> Result<Vec<[usize; 3]>> {
        let mut t = Tape::new(&self.params, &self.trainable, false);
        self.record_loss(&mut t, batch, objective)?;
        Ok(t.products().to_vec())
    }

    /// Loss and parameter gradients; gradients are empty when the batch holds
    /// no target token.
    pub fn loss_and_grads(&self, batch: &Batch, objective: &Objective) -> Result<(f64, Grads)> {
        let mut t = Tape::new(&self.params, &self.trainable, true);
        match self.record_loss(&mut t, batch, objective)? {
            Some(root) => {
                let loss = t.value(root)[[0, 0]];
                Ok((loss, t.backward(root)))
            }
            None => Ok((0.0, vec![None; self.params.len()])),
        }
    }

    /// Word emitted at every target position of `batch` (`B x T`) when the
    /// decoder reads the gold prefix. Padding positions hold `<pad>`.
    pub fn teacher_forced_predictions(&self, batch: &Batch) -> Result<Array2<usize>> {
        self.check_batch(batch)?;
        let (b, steps) = batch.tgt_mask.dim();
        let mut pred = Array2::from_elem((b, steps), PAD_ID);
        if steps == 0 || batch.src.ncols() == 0 {
            return Ok(pred);
        }
        let mut t = Tape::new(&self.params, &self.trainable, false);
        let (memory, mut states) = self.record_encoder(&mut t, batch.src.view(), batch.src_mask.view());
        let mut outs = Vec::with_capacity(steps);
        for s in 0..steps {
            let prev: Vec<usize> = batch.tgt_in.column(s).to_vec();
            let rec = self.record_step(&mut t, &prev, &states, &memory, batch.src_mask.view());
            states = rec.states;
            outs.push(rec.h_out);
        }
        let stacked = t.concat_rows(&outs);
        let head = self.record_head(&mut t, stacked);
        for (k, row) in t.value(head).rows().into_iter().enumerate() {
            let (s, r) = (k / b, k % b);
            if batch.tgt_mask[[r, s]] == 0.0 {
                continue;
            }
            let out = match self.cfg.head {
                HeadKind::Softmax => HeadOutput::Logits(row.to_vec()),
                HeadKind::Continuous => HeadOutput::Vector(row.to_vec()),
            };
            pred[[r, s]] = self.output_word(&out)?;
        }
        Ok(pred)
    }

    /// Teacher-forced decoder outputs for one pair: the decoder reads
    /// `<s> tgt[..n-1]` and emits one output per target token.
    pub fn forward_teacher_forced(&self, src: &[usize], tgt: &[usize]) -> Result<Vec<StepOutput>> {
        self.check_ids(tgt, self.cfg.tgt_vocab)?;
        let (enc, mut state) = self.encode(src)?;
        if tgt.len() > self.cfg.max_len + 1 {
            return Err(ModelError::TooLong { len: tgt.len(), max: self.cfg.max_len });
        }
        let mut outputs = Vec::with_capacity(tgt.len());
        let mut prev = BOS_ID;
        for &y in tgt {
            let (out, next) = self.decode_step(&enc, &state, prev)?;
            outputs.push(out);
            state = next;
            prev = y;
        }
        Ok(outputs)
    }

    /// Encodes one source sentence.
    pub fn encode(&self, src: &[usize]) -> Result<(EncodedSource, DecoderState)> {
        if src.is_empty() {
            return Err(ModelError::EmptySource);
        }
        if src.len() > self.cfg.max_len {
            return Err(ModelError::TooLong { len: src.len(), max: self.cfg.max_len });
        }
        self.check_ids(src, self.cfg.src_vocab)?;
        let mut t = Tape::new(&self.params, &self.trainable, false);
        let ids = Array2::from_shape_vec((1, src.len()), src.to_vec()).expect("shape");
        let mask = Array2::ones((1, src.len()));
        let (memory, states) = self.record_encoder(&mut t, ids.view(), mask.view());
        let memory = memory.iter().map(|&m| t.value(m).to_owned()).collect();
        let layers = states.iter().map(|&(h, c)| (t.value(h).to_owned(), t.value(c).to_owned())).collect();
        Ok((EncodedSource { memory, mask }, DecoderState { layers }))
    }

    /// One decoder step from `state` after emitting `prev`.
    pub fn decode_step(&self, enc: &EncodedSource, state: &DecoderState, prev: usize) -> Result<(StepOutput, DecoderState)> {
        self.check_ids(&[prev], self.cfg.tgt_vocab)?;
        let mut t = Tape::new(&self.params, &self.trainable, false);
        let memory: Vec<NodeId> = enc.memory.iter().map(|m| t.input(m.clone())).collect();
        let states: Vec<(NodeId, NodeId)> =
            state.layers.iter().map(|(h, c)| (t.input(h.clone()), t.input(c.clone()))).collect();
        let rec = self.record_step(&mut t, &[prev], &states, &memory, enc.mask.view());
        let head = self.record_head(&mut t, rec.h_out);
        let values = t.value(head).row(0).to_vec();
        let output = match self.cfg.head {
            HeadKind::Softmax => HeadOutput::Logits(values),
            HeadKind::Continuous => HeadOutput::Vector(values),
        };
        let step = StepOutput {
            hidden: t.value(rec.h_out).row(0).to_vec(),
            attention: t.attention(rec.attention).row(0).to_vec(),
            output,
        };
        let layers = rec.states.iter().map(|&(h, c)| (t.value(h).to_owned(), t.value(c).to_owned())).collect();
        Ok((step, DecoderState { layers }))
    }

    /// The word a head output stands for: the logit argmax, or the nearest
    /// table word to the predicted vector. Ties go to the lowest id.
    pub fn output_word(&self, output: &HeadOutput) -> Result<usize> {
        match output {
            HeadOutput::Logits(l) => {
                let mut best = 0;
                for (i, &x) in l.iter().enumerate() {
                    if x > l[best] {
                        best = i;
                    }
                }
                Ok(best)
            }
            HeadOutput::Vector(v) => {
                let table = self.table.as_ref().ok_or(ModelError::MissingTable)?;
                Ok(embed::nearest_word(v, table)?.word_id)
            }
        }
    }

    /// Greedy decoding: each step emits the best word for its output and feeds
    /// that word back as the next input, until `</s>` or `max_len` tokens.
    pub fn greedy_translate(&self, src: &[usize]) -> Result<Translation> {
        if src.is_empty() {
            return Ok(Translation { tokens: vec![EOS_ID], attention: Array2::zeros((1, 0)) });
        }
        let (enc, mut state) = self.encode(src)?;
        let mut tokens = Vec::new();
        let mut rows: Vec<f64> = Vec::new();
        let mut prev = BOS_ID;
        while tokens.len() < self.cfg.max_len {
            let (out, next) = self.decode_step(&enc, &state, prev)?;
            let word = self.output_word(&out.output)?;
            tokens.push(word);
            rows.extend(&out.attention);
            state = next;
            prev = word;
            if word == EOS_ID {
                break;
            }
        }
        let attention = Array2::from_shape_vec((tokens.len(), src.len()), rows).expect("shape");
        Ok(Translation { tokens, attention })
    }
}

/// One optimization step on `batch`. Returns the mean loss before the
/// update. A batch without target tokens returns 0 and changes nothing; a
/// non-finite loss is reported with `batch_index` and skips the update.
pub fn train_batch(
    model: &mut Seq2SeqModel,
    batch: &Batch,
    objective: &Objective,
    opt: &mut Adam,
    batch_index: usize,
) -> Result<f64> {
    let (loss, grads) = match model.loss_and_grads(batch, objective) {
        Err(ModelError::Loss(LossError::NonFinite)) => return Err(ModelError::NonFiniteLoss { batch: batch_index }),
        other => other?,
    };
    if !loss.is_finite() {
        return Err(ModelError::NonFiniteLoss { batch: batch_index });
    }
    if grads.iter().all(Option::is_none) {
        return Ok(loss);
    }
    if grads.iter().flatten().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(ModelError::NonFiniteLoss { batch: batch_index });
    }
    opt.step(&mut model.params, grads);
    Ok(loss)
}
