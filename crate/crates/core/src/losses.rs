//! Losses over a predicted output vector `e_hat` and a unit-norm target
//! embedding, each returning its value and the gradient with respect to
//! `e_hat`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

use crate::embed::EmbeddingTable;
use crate::specfun::{self, CmEvalMode, SpecFunError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("predicted vector has zero norm")]
    ZeroNorm,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("target embedding has norm {0}, expected 1")]
    TargetNotUnit(f64),
    #[error("target word id {id} outside vocabulary of {len}")]
    UnknownTarget { id: usize, len: usize },
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("non-finite loss or gradient")]
    NonFinite,
    #[error(transparent)]
    SpecFun(#[from] SpecFunError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    NllVmf,
    NllVmfReg1,
    NllVmfReg1Reg2,
    L2Squared,
    L2Root,
    Cosine,
    MaxMargin,
}

impl LossVariant {
    pub const ALL: [LossVariant; 7] = [
        LossVariant::NllVmf,
        LossVariant::NllVmfReg1,
        LossVariant::NllVmfReg1Reg2,
        LossVariant::L2Squared,
        LossVariant::L2Root,
        LossVariant::Cosine,
        LossVariant::MaxMargin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::NllVmf => "nllvmf",
            LossVariant::NllVmfReg1 => "nllvmf_reg1",
            LossVariant::NllVmfReg1Reg2 => "nllvmf_reg1_reg2",
            LossVariant::L2Squared => "l2_squared",
            LossVariant::L2Root => "l2_root",
            LossVariant::Cosine => "cosine",
            LossVariant::MaxMargin => "max_margin",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| LossError::Config(format!("unknown loss `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
    pub m: usize,
    pub cm_mode: CmEvalMode,
}

impl LossConfig {
    pub fn new(variant: LossVariant, m: usize) -> Self {
        Self { variant, lambda1: 0.02, lambda2: 0.1, gamma: 0.5, m, cm_mode: CmEvalMode::Exact }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LossError::Config(msg));
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return bad(format!("lambda1 = {} must be >= 0", self.lambda1));
        }
        if !(self.lambda2 > 0.0 && self.lambda2 <= 1.0) {
            return bad(format!("lambda2 = {} must lie in (0, 1]", self.lambda2));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma = {} must be >= 0", self.gamma));
        }
        if self.m < 2 {
            return bad(format!("m = {} must be >= 2", self.m));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad_e_hat: Vec<f64>,
}

impl LossResult {
    fn zero(m: usize) -> Self {
        Self { value: 0.0, grad_e_hat: vec![0.0; m] }
    }

    fn checked(self) -> Result<Self> {
        if self.value.is_finite() && self.grad_e_hat.iter().all(|g| g.is_finite()) {
            Ok(self)
        } else {
            Err(LossError::NonFinite)
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_dims(e_hat: &[f64], e_target: &[f64]) -> Result<()> {
    if e_hat.len() != e_target.len() {
        return Err(LossError::Dimension { expected: e_target.len(), found: e_hat.len() });
    }
    Ok(())
}

fn check_unit(e_target: &[f64]) -> Result<()> {
    let n = norm(e_target);
    if (n - 1.0).abs() > 1e-6 {
        return Err(LossError::TargetNotUnit(n));
    }
    Ok(())
}

/// vMF negative log-likelihood and its regularized forms:
///
/// * `nllvmf`: `-log C_m(|e_hat|) - e_hat.e`
/// * `nllvmf_reg1`: adds `lambda1 |e_hat|`
/// * `nllvmf_reg1_reg2`: `-log C_m(|e_hat|) - lambda2 e_hat.e + lambda1 |e_hat|`
pub fn nllvmf_loss(e_hat: &[f64], e_target: &[f64], cfg: &LossConfig) -> Result<LossResult> {
    check_dims(e_hat, e_target)?;
    if e_hat.len() != cfg.m {
        return Err(LossError::Dimension { expected: cfg.m, found: e_hat.len() });
    }
    check_unit(e_target)?;
    let kappa = norm(e_hat);
    if kappa == 0.0 {
        return Err(LossError::ZeroNorm);
    }
    let (lin, lambda1) = match cfg.variant {
        LossVariant::NllVmf => (1.0, 0.0),
        LossVariant::NllVmfReg1 => (1.0, cfg.lambda1),
        LossVariant::NllVmfReg1Reg2 => (cfg.lambda2, cfg.lambda1),
        other => return Err(LossError::Config(format!("{other} is not a vMF loss"))),
    };
    let log_cm = specfun::log_cm(cfg.m, kappa, cfg.cm_mode)?;
    let dlog_cm = specfun::grad_log_cm(cfg.m, kappa, cfg.cm_mode)?;
    let value = -log_cm - lin * dot(e_hat, e_target) + lambda1 * kappa;
    let radial = (lambda1 - dlog_cm) / kappa;
    let grad_e_hat = e_hat.iter().zip(e_target).map(|(x, t)| radial * x - lin * t).collect();
    LossResult { value, grad_e_hat }.checked()
}

/// `|e_hat - e|^2`, or `|e_hat - e|` when `rooted`. The rooted gradient at
/// `e_hat = e` is zero.
pub fn l2_loss(e_hat: &[f64], e_target: &[f64], rooted: bool) -> Result<LossResult> {
    check_dims(e_hat, e_target)?;
    let diff: Vec<f64> = e_hat.iter().zip(e_target).map(|(x, t)| x - t).collect();
    let sq = dot(&diff, &diff);
    let result = if rooted {
        let d = sq.sqrt();
        if d == 0.0 {
            LossResult::zero(diff.len())
        } else {
            LossResult { value: d, grad_e_hat: diff.iter().map(|x| x / d).collect() }
        }
    } else {
        LossResult { value: sq, grad_e_hat: diff.iter().map(|x| 2.0 * x).collect() }
    };
    result.checked()
}

/// Gradient of `cos(e_hat, e)` for unit `e`, given `kappa = |e_hat|` and `d = e_hat.e`.
fn cosine_grad(e_hat: &[f64], e: ArrayView1<'_, f64>, kappa: f64, d: f64) -> Vec<f64> {
    let k3 = kappa * kappa * kappa;
    e_hat.iter().zip(e).map(|(x, t)| t / kappa - d * x / k3).collect()
}

/// `1 - e_hat.e / |e_hat|`.
pub fn cosine_loss(e_hat: &[f64], e_target: &[f64]) -> Result<LossResult> {
    check_dims(e_hat, e_target)?;
    let kappa = norm(e_hat);
    if kappa == 0.0 {
        return Err(LossError::ZeroNorm);
    }
    let d = dot(e_hat, e_target);
    let value = 1.0 - d / kappa;
    let grad_e_hat = cosine_grad(e_hat, ArrayView1::from(e_target), kappa, d).iter().map(|g| -g).collect();
    LossResult { value, grad_e_hat }.checked()
}

/// The informative negative for `target`: the other word with the highest
/// cosine to `e_hat`, ties to the lowest id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Negative {
    pub word_id: usize,
    pub cos_negative: f64,
    pub cos_target: f64,
}

impl Negative {
    pub fn hinge(&self, gamma: f64) -> f64 {
        gamma + self.cos_negative - self.cos_target
    }
}

pub fn informative_negative(e_hat: &[f64], target_word: usize, table: &EmbeddingTable) -> Result<Option<Negative>> {
    if target_word >= table.len() {
        return Err(LossError::UnknownTarget { id: target_word, len: table.len() });
    }
    if e_hat.len() != table.dim() {
        return Err(LossError::Dimension { expected: table.dim(), found: e_hat.len() });
    }
    let kappa = norm(e_hat);
    if kappa == 0.0 {
        return Err(LossError::ZeroNorm);
    }
    let scores = table.vectors().dot(&ArrayView1::from(e_hat));
    Ok(pick_negative(scores.view(), target_word, kappa))
}

fn pick_negative(scores: ArrayView1<'_, f64>, target: usize, kappa: f64) -> Option<Negative> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if i != target && best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(word_id, s)| Negative { word_id, cos_negative: s / kappa, cos_target: scores[target] / kappa })
}

/// `max(0, gamma + cos(e_hat, e(w')) - cos(e_hat, e(w)))` with `w'` the
/// informative negative.
pub fn max_margin_loss(e_hat: &[f64], target_word: usize, table: &EmbeddingTable, gamma: f64) -> Result<LossResult> {
    let Some(neg) = informative_negative(e_hat, target_word, table)? else {
        return Ok(LossResult::zero(e_hat.len()));
    };
    margin_result(e_hat, &neg, table, target_word, gamma)
}

fn margin_result(e_hat: &[f64], neg: &Negative, table: &EmbeddingTable, target: usize, gamma: f64) -> Result<LossResult> {
    let h = neg.hinge(gamma);
    if h <= 0.0 {
        return Ok(LossResult::zero(e_hat.len()));
    }
    let kappa = norm(e_hat);
    let dn = neg.cos_negative * kappa;
    let dp = neg.cos_target * kappa;
    let gn = cosine_grad(e_hat, table.vector(neg.word_id), kappa, dn);
    let gp = cosine_grad(e_hat, table.vector(target), kappa, dp);
    let grad_e_hat = gn.iter().zip(&gp).map(|(n, p)| n - p).collect();
    LossResult { value: h, grad_e_hat }.checked()
}

/// Any configured loss for target word `target` of `table`.
pub fn vector_loss(e_hat: &[f64], target: usize, table: &EmbeddingTable, cfg: &LossConfig) -> Result<LossResult> {
    if target >= table.len() {
        return Err(LossError::UnknownTarget { id: target, len: table.len() });
    }
    let e = table.vector(target).to_vec();
    match cfg.variant {
        LossVariant::NllVmf | LossVariant::NllVmfReg1 | LossVariant::NllVmfReg1Reg2 => nllvmf_loss(e_hat, &e, cfg),
        LossVariant::L2Squared => l2_loss(e_hat, &e, false),
        LossVariant::L2Root => l2_loss(e_hat, &e, true),
        LossVariant::Cosine => cosine_loss(e_hat, &e),
        LossVariant::MaxMargin => max_margin_loss(e_hat, target, table, cfg.gamma),
    }
}

/// Row-wise [`vector_loss`] over a `T x m` matrix of predictions. The
/// max-margin scan is done with one matrix product for all rows.
pub fn vector_loss_rows(
    e_hat: ArrayView2<'_, f64>,
    targets: &[usize],
    table: &EmbeddingTable,
    cfg: &LossConfig,
) -> Result<(Vec<f64>, Array2<f64>)> {
    assert_eq!(e_hat.nrows(), targets.len(), "one target per row");
    if e_hat.ncols() != table.dim() {
        return Err(LossError::Dimension { expected: table.dim(), found: e_hat.ncols() });
    }
    let mut values = Vec::with_capacity(targets.len());
    let mut grads = Array2::zeros(e_hat.raw_dim());
    let scores = (cfg.variant == LossVariant::MaxMargin).then(|| e_hat.dot(&table.vectors().t()));
    for (i, (row, &target)) in e_hat.axis_iter(Axis(0)).zip(targets).enumerate() {
        let x = row.to_vec();
        let r = match &scores {
            Some(s) => {
                if target >= table.len() {
                    return Err(LossError::UnknownTarget { id: target, len: table.len() });
                }
                let kappa = norm(&x);
                if kappa == 0.0 {
                    return Err(LossError::ZeroNorm);
                }
                match pick_negative(s.row(i), target, kappa) {
                    Some(neg) => margin_result(&x, &neg, table, target, cfg.gamma)?,
                    None => LossResult::zero(x.len()),
                }
            }
            None => vector_loss(&x, target, table, cfg)?,
        };
        values.push(r.value);
        grads.row_mut(i).assign(&ArrayView1::from(&r.grad_e_hat));
    }
    Ok((values, grads))
}
