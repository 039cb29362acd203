//! Minimal reverse-mode differentiation over 2-D `f64` arrays.
//!
//! Every node holds a `rows x cols` value. Parameters are referenced in place
//! from a [`ParamSet`], so recording a forward pass never copies weights.
//! The two loss nodes are terminal: they produce a `1 x 1` scalar and compute
//! their local gradients during the forward pass.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use crate::embed::EmbeddingTable;
use crate::losses::{self, LossConfig, LossError, LossVariant};

pub type NodeId = usize;

/// Named parameter matrices. Frozen entries are never given gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn value(&self, i: usize) -> &Array2<f64> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Array2<f64> {
        &mut self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients; `None` for parameters the pass did not touch.
pub type Grads = Vec<Option<Array2<f64>>>;

enum Op {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Tanh(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    GatherParam(usize, Vec<usize>),
    /// `mask * new + (1 - mask) * old`, `mask` one entry per row.
    Blend(NodeId, NodeId, Vec<f64>),
    /// Output `[h, c]` from gates `[i f g o]` and the previous cell.
    LstmCell { gates: NodeId, c_prev: NodeId, act: Array2<f64>, tanh_c: Array2<f64> },
    /// Dot-product attention of `query` over `memory` positions.
    Attend { query: NodeId, memory: Vec<NodeId>, alpha: Array2<f64> },
    /// Terminal loss with precomputed input gradients.
    Loss { inputs: Vec<(NodeId, Array2<f64>)>, params: Vec<(usize, Array2<f64>)> },
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'a> {
    params: &'a ParamSet,
    trainable: &'a [bool],
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    grad_enabled: bool,
    products: Vec<[usize; 3]>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a ParamSet, trainable: &'a [bool], grad_enabled: bool) -> Self {
        assert_eq!(params.len(), trainable.len());
        Self { params, trainable, nodes: Vec::new(), param_nodes: vec![None; params.len()], grad_enabled, products: Vec::new() }
    }

    /// `[rows, inner, cols]` of every forward matrix product recorded so far,
    /// including the ones fused into loss nodes.
    pub fn products(&self) -> &[[usize; 3]] {
        &self.products
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> ArrayView2<'_, f64> {
        match (&self.nodes[id].value, &self.nodes[id].op) {
            (Some(v), _) => v.view(),
            (None, Op::Param(i)) => self.params.value(*i).view(),
            _ => unreachable!("node without value"),
        }
    }

    /// Attention weights recorded by an [`Tape::attend`] node.
    pub fn attention(&self, id: NodeId) -> ArrayView2<'_, f64> {
        match &self.nodes[id].op {
            Op::Attend { alpha, .. } => alpha.view(),
            _ => panic!("node {id} is not an attention node"),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        let needs_grad = self.grad_enabled
            && match &op {
                Op::Input => false,
                Op::Param(i) | Op::GatherParam(i, _) => self.trainable[*i],
                Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Blend(a, b, _) => {
                    self.nodes[*a].needs_grad || self.nodes[*b].needs_grad
                }
                Op::Tanh(a) | Op::SliceCols(a, _, _) => self.nodes[*a].needs_grad,
                Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.iter().any(|x| self.nodes[*x].needs_grad),
                Op::LstmCell { gates, c_prev, .. } => self.nodes[*gates].needs_grad || self.nodes[*c_prev].needs_grad,
                Op::Attend { query, memory, .. } => {
                    self.nodes[*query].needs_grad || memory.iter().any(|m| self.nodes[*m].needs_grad)
                }
                Op::Loss { .. } => true,
            };
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, i: usize) -> NodeId {
        if let Some(id) = self.param_nodes[i] {
            return id;
        }
        let needs_grad = self.grad_enabled && self.trainable[i];
        self.nodes.push(Node { value: None, op: Op::Param(i), needs_grad });
        let id = self.nodes.len() - 1;
        self.param_nodes[i] = Some(id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b));
        self.products.push([v.nrows(), self.value(a).ncols(), v.ncols()]);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.value(a) + &self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds the `1 x n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let v = &self.value(a) + &self.value(bias);
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> NodeId {
        let views: Vec<_> = xs.iter().map(|&x| self.value(x)).collect();
        let v = concatenate(Axis(1), &views).expect("equal row counts");
        self.push(v, Op::ConcatCols(xs.to_vec()))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> NodeId {
        let views: Vec<_> = xs.iter().map(|&x| self.value(x)).collect();
        let v = concatenate(Axis(0), &views).expect("equal column counts");
        self.push(v, Op::ConcatRows(xs.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start, len))
    }

    /// Rows `ids` of parameter `i`.
    pub fn gather(&mut self, i: usize, ids: &[usize]) -> NodeId {
        let v = self.params.value(i).select(Axis(0), ids);
        self.push(v, Op::GatherParam(i, ids.to_vec()))
    }

    /// Rows `ids` of a fixed table; never differentiated.
    pub fn gather_table(&mut self, table: &EmbeddingTable, ids: &[usize]) -> NodeId {
        self.push(table.gather(ids), Op::Input)
    }

    pub fn blend(&mut self, new: NodeId, old: NodeId, mask: &[f64]) -> NodeId {
        let mut v = self.value(old).to_owned();
        for (mut row, (n, &m)) in v.rows_mut().into_iter().zip(self.value(new).rows().into_iter().zip(mask)) {
            if m == 1.0 {
                row.assign(&n);
            } else if m != 0.0 {
                row.zip_mut_with(&n, |o, &x| *o = m * x + (1.0 - m) * *o);
            }
        }
        self.push(v, Op::Blend(new, old, mask.to_vec()))
    }

    /// LSTM cell update. `gates` is `B x 4H` in the order input, forget,
    /// candidate, output; returns `B x 2H` holding `[h, c]`.
    pub fn lstm_cell(&mut self, gates: NodeId, c_prev: NodeId) -> NodeId {
        let g = self.value(gates);
        let c0 = self.value(c_prev);
        let (b, h4) = g.dim();
        let h = h4 / 4;
        let mut act = Array2::zeros((b, h4));
        let mut tanh_c = Array2::zeros((b, h));
        let mut out = Array2::zeros((b, 2 * h));
        for r in 0..b {
            for j in 0..h {
                let i = sigmoid(g[[r, j]]);
                let f = sigmoid(g[[r, h + j]]);
                let cand = g[[r, 2 * h + j]].tanh();
                let o = sigmoid(g[[r, 3 * h + j]]);
                let c = f * c0[[r, j]] + i * cand;
                let tc = c.tanh();
                act[[r, j]] = i;
                act[[r, h + j]] = f;
                act[[r, 2 * h + j]] = cand;
                act[[r, 3 * h + j]] = o;
                tanh_c[[r, j]] = tc;
                out[[r, j]] = o * tc;
                out[[r, h + j]] = c;
            }
        }
        self.push(out, Op::LstmCell { gates, c_prev, act, tanh_c })
    }

    /// Context vectors `sum_s alpha[., s] memory_s` with
    /// `alpha = softmax_s(query . memory_s)` over positions where `mask` is 1.
    /// `mask` is `B x S`; rows with no unmasked position get zero context.
    pub fn attend(&mut self, query: NodeId, memory: &[NodeId], mask: ArrayView2<'_, f64>) -> NodeId {
        let q = self.value(query);
        let (b, h) = q.dim();
        let s_len = memory.len();
        let mut alpha = Array2::zeros((b, s_len));
        for r in 0..b {
            let mut max = f64::NEG_INFINITY;
            for s in 0..s_len {
                if mask[[r, s]] > 0.0 {
                    let score = q.row(r).dot(&self.value(memory[s]).row(r));
                    alpha[[r, s]] = score;
                    max = max.max(score);
                }
            }
            let mut z = 0.0;
            for s in 0..s_len {
                if mask[[r, s]] > 0.0 {
                    let e = (alpha[[r, s]] - max).exp();
                    alpha[[r, s]] = e;
                    z += e;
                } else {
                    alpha[[r, s]] = 0.0;
                }
            }
            if z > 0.0 {
                alpha.row_mut(r).mapv_inplace(|a| a / z);
            }
        }
        let mut ctx = Array2::zeros((b, h));
        for (s, &m) in memory.iter().enumerate() {
            let mv = self.value(m);
            for r in 0..b {
                let a = alpha[[r, s]];
                if a != 0.0 {
                    ctx.row_mut(r).scaled_add(a, &mv.row(r));
                }
            }
        }
        self.push(ctx, Op::Attend { query, memory: memory.to_vec(), alpha })
    }

    /// Weighted softmax cross-entropy of `h W^T + b` against `targets`.
    /// Rows with zero weight are skipped; logits are formed `chunk` rows at a
    /// time so the full `rows x V` matrix never exists.
    pub fn softmax_ce(&mut self, h: NodeId, w: usize, b: usize, targets: &[usize], weights: &[f64]) -> NodeId {
        const CHUNK: usize = 64;
        let hv = self.value(h).to_owned();
        let wv = self.params.value(w);
        let bv = self.params.value(b);
        let live: Vec<usize> = (0..targets.len()).filter(|&r| weights[r] != 0.0).collect();
        let with_grad = self.grad_enabled;
        let mut dh = Array2::zeros(hv.raw_dim());
        let mut dw = with_grad.then(|| Array2::zeros(wv.raw_dim()));
        let mut db = with_grad.then(|| Array2::zeros(bv.raw_dim()));
        self.products.push([live.len(), wv.ncols(), wv.nrows()]);
        let mut total = 0.0;
        for rows in live.chunks(CHUNK) {
            let hc = hv.select(Axis(0), rows);
            let mut logits = hc.dot(&wv.t()) + bv;
            for (k, mut row) in logits.rows_mut().into_iter().enumerate() {
                let r = rows[k];
                let loss = softmax_ce_in_place(row.as_slice_mut().expect("row-major"), targets[r]);
                total += weights[r] * loss;
                row.mapv_inplace(|p| p * weights[r]);
            }
            if with_grad {
                dw.as_mut().unwrap().scaled_add(1.0, &logits.t().dot(&hc));
                *db.as_mut().unwrap() += &logits.sum_axis(Axis(0)).insert_axis(Axis(0));
                let dhc = logits.dot(wv);
                for (k, &r) in rows.iter().enumerate() {
                    dh.row_mut(r).assign(&dhc.row(k));
                }
            }
        }
        let mut params = Vec::new();
        if let (Some(dw), Some(db)) = (dw, db) {
            params.push((w, dw));
            params.push((b, db));
        }
        let out = Array2::from_elem((1, 1), total);
        self.push(out, Op::Loss { inputs: vec![(h, dh)], params })
    }

    /// Weighted sum of a vector loss over the rows of `pred`, one target word
    /// per row. Zero-weight rows are skipped.
    pub fn vector_loss(
        &mut self,
        pred: NodeId,
        table: &EmbeddingTable,
        targets: &[usize],
        weights: &[f64],
        cfg: &LossConfig,
    ) -> Result<NodeId, LossError> {
        let pv = self.value(pred);
        let live: Vec<usize> = (0..targets.len()).filter(|&r| weights[r] != 0.0).collect();
        let rows = pv.select(Axis(0), &live);
        let live_targets: Vec<usize> = live.iter().map(|&r| targets[r]).collect();
        let (values, grads) = losses::vector_loss_rows(rows.view(), &live_targets, table, cfg)?;
        let mut dp = Array2::zeros(pv.raw_dim());
        let mut total = 0.0;
        for (k, &r) in live.iter().enumerate() {
            total += weights[r] * values[k];
            dp.row_mut(r).scaled_add(weights[r], &grads.row(k));
        }
        if cfg.variant == LossVariant::MaxMargin {
            self.products.push([live.len(), table.dim(), table.len()]);
        }
        Ok(self.push(Array2::from_elem((1, 1), total), Op::Loss { inputs: vec![(pred, dp)], params: Vec::new() }))
    }

    /// Gradients of the scalar node `root` with respect to every trainable
    /// parameter. Node gradients are released as soon as they are consumed.
    pub fn backward(mut self, root: NodeId) -> Grads {
        assert!(self.grad_enabled, "tape recorded without gradients");
        assert_eq!(self.value(root).dim(), (1, 1), "root must be a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Grads = vec![None; self.params.len()];
        grads[root] = Some(Array2::ones((1, 1)));

        fn acc(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
            match slot {
                Some(s) => *s += &g,
                None => *slot = Some(g),
            }
        }
        fn acc_view(slot: &mut Option<Array2<f64>>, g: ArrayView2<'_, f64>) {
            match slot {
                Some(s) => *s += &g,
                None => *slot = Some(g.to_owned()),
            }
        }

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Input);
            let ng = |t: &Self, x: NodeId| t.nodes[x].needs_grad;
            match &op {
                Op::Input => {}
                Op::Param(i) => acc(&mut pgrads[*i], g),
                Op::MatMul(a, b) => {
                    if ng(&self, *a) {
                        let ga = g.dot(&self.value(*b).t());
                        acc(&mut grads[*a], ga);
                    }
                    if ng(&self, *b) {
                        let gb = self.value(*a).t().dot(&g);
                        acc(&mut grads[*b], gb);
                    }
                }
                Op::Add(a, b) => {
                    if ng(&self, *b) {
                        acc_view(&mut grads[*b], g.view());
                    }
                    if ng(&self, *a) {
                        acc(&mut grads[*a], g);
                    }
                }
                Op::AddRow(a, bias) => {
                    if ng(&self, *bias) {
                        acc(&mut grads[*bias], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if ng(&self, *a) {
                        acc(&mut grads[*a], g);
                    }
                }
                Op::Tanh(a) => {
                    let y = self.nodes[id].value.as_ref().unwrap();
                    let mut ga = g;
                    ga.zip_mut_with(y, |d, &t| *d *= 1.0 - t * t);
                    acc(&mut grads[*a], ga);
                }
                Op::ConcatCols(xs) => {
                    let mut start = 0;
                    for &x in xs {
                        let n = self.value(x).ncols();
                        if ng(&self, x) {
                            acc_view(&mut grads[x], g.slice(s![.., start..start + n]));
                        }
                        start += n;
                    }
                }
                Op::ConcatRows(xs) => {
                    let mut start = 0;
                    for &x in xs {
                        let n = self.value(x).nrows();
                        if ng(&self, x) {
                            acc_view(&mut grads[x], g.slice(s![start..start + n, ..]));
                        }
                        start += n;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let (r, c) = self.value(*a).dim();
                    let slot = grads[*a].get_or_insert_with(|| Array2::zeros((r, c)));
                    let mut part = slot.slice_mut(s![.., *start..*start + *len]);
                    part += &g;
                }
                Op::GatherParam(i, ids) => {
                    let p = self.params.value(*i);
                    let slot = pgrads[*i].get_or_insert_with(|| Array2::zeros(p.raw_dim()));
                    for (k, &row) in ids.iter().enumerate() {
                        let mut dst = slot.row_mut(row);
                        dst += &g.row(k);
                    }
                }
                Op::Blend(new, old, mask) => {
                    if ng(&self, *new) {
                        let mut gn = g.clone();
                        for (mut row, &m) in gn.rows_mut().into_iter().zip(mask) {
                            row.mapv_inplace(|x| x * m);
                        }
                        acc(&mut grads[*new], gn);
                    }
                    if ng(&self, *old) {
                        let mut go = g;
                        for (mut row, &m) in go.rows_mut().into_iter().zip(mask) {
                            row.mapv_inplace(|x| x * (1.0 - m));
                        }
                        acc(&mut grads[*old], go);
                    }
                }
                Op::LstmCell { gates, c_prev, act, tanh_c } => {
                    let (b, h) = tanh_c.dim();
                    let c0 = self.value(*c_prev);
                    let mut dg = Array2::zeros((b, 4 * h));
                    let mut dc0 = Array2::zeros((b, h));
                    for r in 0..b {
                        for j in 0..h {
                            let (i, f, cand, o) = (act[[r, j]], act[[r, h + j]], act[[r, 2 * h + j]], act[[r, 3 * h + j]]);
                            let tc = tanh_c[[r, j]];
                            let dh = g[[r, j]];
                            let dc = g[[r, h + j]] + dh * o * (1.0 - tc * tc);
                            dg[[r, j]] = dc * cand * i * (1.0 - i);
                            dg[[r, h + j]] = dc * c0[[r, j]] * f * (1.0 - f);
                            dg[[r, 2 * h + j]] = dc * i * (1.0 - cand * cand);
                            dg[[r, 3 * h + j]] = dh * tc * o * (1.0 - o);
                            dc0[[r, j]] = dc * f;
                        }
                    }
                    if ng(&self, *c_prev) {
                        acc(&mut grads[*c_prev], dc0);
                    }
                    if ng(&self, *gates) {
                        acc(&mut grads[*gates], dg);
                    }
                }
                Op::Attend { query, memory, alpha } => {
                    let q = self.value(*query);
                    let (b, h) = q.dim();
                    // d alpha[r, s] = g[r] . memory_s[r]
                    let mut dscore = Array2::zeros(alpha.raw_dim());
                    for (s, &m) in memory.iter().enumerate() {
                        let mv = self.value(m);
                        for r in 0..b {
                            dscore[[r, s]] = g.row(r).dot(&mv.row(r));
                        }
                    }
                    for r in 0..b {
                        let mean: f64 = (0..memory.len()).map(|s| alpha[[r, s]] * dscore[[r, s]]).sum();
                        for s in 0..memory.len() {
                            dscore[[r, s]] = alpha[[r, s]] * (dscore[[r, s]] - mean);
                        }
                    }
                    let mut dq = Array2::zeros((b, h));
                    for (s, &m) in memory.iter().enumerate() {
                        let mut dm = Array2::zeros((b, h));
                        {
                            let mv = self.value(m);
                            for r in 0..b {
                                dq.row_mut(r).scaled_add(dscore[[r, s]], &mv.row(r));
                                dm.row_mut(r).scaled_add(alpha[[r, s]], &g.row(r));
                                dm.row_mut(r).scaled_add(dscore[[r, s]], &q.row(r));
                            }
                        }
                        if ng(&self, m) {
                            acc(&mut grads[m], dm);
                        }
                    }
                    if ng(&self, *query) {
                        acc(&mut grads[*query], dq);
                    }
                }
                Op::Loss { inputs, params } => {
                    let scale = g[[0, 0]];
                    for (x, dx) in inputs {
                        if ng(&self, *x) {
                            acc(&mut grads[*x], dx * scale);
                        }
                    }
                    for (i, dp) in params {
                        if self.trainable[*i] {
                            acc(&mut pgrads[*i], dp * scale);
                        }
                    }
                }
            }
            self.nodes[id].value = None;
        }
        pgrads
    }
}

/// Replaces `logits` by softmax probabilities and returns the cross-entropy
/// `-ln p[target]` with the gradient `p - onehot(target)` left in `logits`.
pub fn softmax_ce_in_place(logits: &mut [f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted_target = logits[target] - max;
    let mut z = 0.0;
    for x in logits.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in logits.iter_mut() {
        *x /= z;
    }
    logits[target] -= 1.0;
    z.ln() - shifted_target
}
