//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A forward pass appends nodes (value + primitive op); `backward` replays
//! the tape in exact reverse order and accumulates adjoints. All ops are
//! row-local for 2-D operands, so padded batch rows never contaminate live
//! rows. Running backward twice on the same tape is an error.

use crate::error::{CoreError, Result};
use crate::nn::tensor::{dgemm_acc, Tensor};

pub type NodeId = usize;

pub const EPS_PROB: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    /// Elementwise sum, identical shapes.
    Add(NodeId, NodeId),
    /// (r x c) matrix plus length-c bias row.
    AddBias(NodeId, NodeId),
    /// Elementwise product, identical shapes.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// (m x k) . (k x n).
    MatMul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Elu(NodeId, f64),
    /// Row-stabilized softmax over the last axis.
    Softmax(NodeId),
    /// Softmax over the last axis restricted to `mask`-true columns
    /// (row-major mask, same shape as input); masked entries get weight 0.
    MaskedSoftmax(NodeId, Vec<bool>),
    /// Identity forward; upstream gradient times -lambda on the way back.
    Grl(NodeId, f64),
    /// Concatenate 2-D nodes with equal row counts along the last axis.
    ConcatCols(Vec<NodeId>),
    /// Columns [start, start+len) of a 2-D node.
    SliceCols {
        input: NodeId,
        start: usize,
        len: usize,
    },
    /// Gather rows of an embedding table: out[b, :] = table[idx[b], :].
    EmbedRows { table: NodeId, idx: Vec<usize> },
    /// Per-row gather across step nodes: out[b, :] = steps[which[b]][b, :].
    SelectStep {
        steps: Vec<NodeId>,
        which: Vec<usize>,
    },
    /// Row-wise dot product of two (B x d) nodes -> (B x 1).
    RowDot(NodeId, NodeId),
    /// (B x 1) column broadcast-multiplied into (B x d).
    MulColBroadcast(NodeId, NodeId),
    /// Per-row -log(p[target]) with probability clamp, 0 where target is None.
    CrossEntropyRows {
        probs: NodeId,
        targets: Vec<Option<usize>>,
    },
    SumAll(NodeId),
    /// Scalar dot of a (B x 1) column with constant per-row weights.
    WeightedRowSum { x: NodeId, weights: Vec<f64> },
    /// KL( N(mu, sigma^2) || N(0, I) ) summed over all elements;
    /// second operand is log sigma.
    KlStdNormal { mu: NodeId, log_sigma: NodeId },
    /// mu + exp(log_sigma) * eps with eps a constant draw.
    Reparam {
        mu: NodeId,
        log_sigma: NodeId,
        eps: Vec<f64>,
    },
}

pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    spent: bool,
}

/// Adjoints produced by one backward pass, indexed by NodeId.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. a node; zeros if the node did not influence the root.
    pub fn wrt(&self, id: NodeId, tape: &Tape) -> Tensor {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape()),
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id].as_ref()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            spent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.values.len() - 1
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.values[a].shape() != self.values[b].shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.values[a].shape(),
                self.values[b].shape()
            )));
        }
        let mut out = self.values[a].clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.values[b].data()) {
            *o += *x;
        }
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn add_bias(&mut self, m: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, c) = self.values[m].dims2()?;
        if self.values[bias].numel() != c {
            return Err(CoreError::ShapeMismatch(format!(
                "add_bias: matrix cols {} vs bias len {}",
                c,
                self.values[bias].numel()
            )));
        }
        let mut out = self.values[m].clone();
        let b = self.values[bias].data();
        for row in out.data_mut().chunks_mut(c) {
            for (o, x) in row.iter_mut().zip(b) {
                *o += *x;
            }
        }
        Ok(self.push(out, Op::AddBias(m, bias)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.values[a].shape() != self.values[b].shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                self.values[a].shape(),
                self.values[b].shape()
            )));
        }
        let mut out = self.values[a].clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.values[b].data()) {
            *o *= *x;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let mut out = self.values[a].clone();
        for o in out.data_mut() {
            *o *= k;
        }
        self.push(out, Op::Scale(a, k))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.values[a].dims2()?;
        let (kb, n) = self.values[b].dims2()?;
        if ka != kb {
            return Err(CoreError::ShapeMismatch(format!(
                "matmul: ({m} x {ka}) . ({kb} x {n})"
            )));
        }
        let mut out = vec![0.0; m * n];
        dgemm_acc(
            m,
            ka,
            n,
            1.0,
            self.values[a].data(),
            false,
            self.values[b].data(),
            false,
            0.0,
            &mut out,
        );
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut out = self.values[a].clone();
        for o in out.data_mut() {
            *o = 1.0 / (1.0 + (-*o).exp());
        }
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let mut out = self.values[a].clone();
        for o in out.data_mut() {
            *o = o.tanh();
        }
        self.push(out, Op::Tanh(a))
    }

    pub fn elu(&mut self, a: NodeId, alpha: f64) -> NodeId {
        let mut out = self.values[a].clone();
        for o in out.data_mut() {
            if *o < 0.0 {
                *o = alpha * (o.exp_m1());
            }
        }
        self.push(out, Op::Elu(a, alpha))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.values[a].dims2()?;
        if c == 0 {
            return Err(CoreError::InvalidArgument("softmax over empty axis".into()));
        }
        let mut out = self.values[a].clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_row(row);
        }
        let _ = r;
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn masked_softmax(&mut self, a: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        let (r, c) = self.values[a].dims2()?;
        if mask.len() != r * c {
            return Err(CoreError::ShapeMismatch(
                "masked_softmax: mask length".into(),
            ));
        }
        if mask.chunks(c).any(|m| !m.iter().any(|&v| v)) {
            return Err(CoreError::InvalidArgument(
                "masked_softmax: row with no valid entries".into(),
            ));
        }
        let mut out = self.values[a].clone();
        for (row, mrow) in out.data_mut().chunks_mut(c).zip(mask.chunks(c)) {
            let mut mx = f64::NEG_INFINITY;
            for (v, &keep) in row.iter().zip(mrow) {
                if keep && *v > mx {
                    mx = *v;
                }
            }
            let mut sum = 0.0;
            for (v, &keep) in row.iter_mut().zip(mrow) {
                if keep {
                    *v = (*v - mx).exp();
                    sum += *v;
                } else {
                    *v = 0.0;
                }
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(out, Op::MaskedSoftmax(a, mask)))
    }

    pub fn grl(&mut self, a: NodeId, lambda: f64) -> Result<NodeId> {
        if lambda < 0.0 {
            return Err(CoreError::InvalidArgument(
                "grl: lambda must be nonnegative".into(),
            ));
        }
        let out = self.values[a].clone();
        Ok(self.push(out, Op::Grl(a, lambda)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::InvalidArgument("concat of nothing".into()));
        }
        let (r, _) = self.values[parts[0]].dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rp, cp) = self.values[p].dims2()?;
            if rp != r {
                return Err(CoreError::ShapeMismatch("concat_cols: row counts".into()));
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        for b in 0..r {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                out[b * total + off..b * total + off + w].copy_from_slice(self.values[p].row(b));
                off += w;
            }
        }
        let out = Tensor::new(vec![r, total], out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.values[input].dims2()?;
        if start + len > c {
            return Err(CoreError::ShapeMismatch(format!(
                "slice_cols: [{start}, {}) of {c}",
                start + len
            )));
        }
        let mut out = vec![0.0; r * len];
        for b in 0..r {
            out[b * len..(b + 1) * len]
                .copy_from_slice(&self.values[input].row(b)[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], out)?;
        Ok(self.push(out, Op::SliceCols { input, start, len }))
    }

    pub fn embed_rows(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (rows, dim) = self.values[table].dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(CoreError::InvalidArgument(format!(
                "embedding index {bad} out of range (table has {rows} rows)"
            )));
        }
        let mut out = vec![0.0; idx.len() * dim];
        for (b, &i) in idx.iter().enumerate() {
            out[b * dim..(b + 1) * dim].copy_from_slice(self.values[table].row(i));
        }
        let out = Tensor::new(vec![idx.len(), dim], out)?;
        Ok(self.push(
            out,
            Op::EmbedRows {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn select_step(&mut self, steps: &[NodeId], which: &[usize]) -> Result<NodeId> {
        if steps.is_empty() {
            return Err(CoreError::InvalidArgument("select_step: no steps".into()));
        }
        let (r, c) = self.values[steps[0]].dims2()?;
        for &s in steps {
            if self.values[s].dims2()? != (r, c) {
                return Err(CoreError::ShapeMismatch("select_step: step shapes".into()));
            }
        }
        if which.len() != r || which.iter().any(|&t| t >= steps.len()) {
            return Err(CoreError::InvalidArgument(
                "select_step: bad index vector".into(),
            ));
        }
        let mut out = vec![0.0; r * c];
        for (b, &t) in which.iter().enumerate() {
            out[b * c..(b + 1) * c].copy_from_slice(self.values[steps[t]].row(b));
        }
        let out = Tensor::new(vec![r, c], out)?;
        Ok(self.push(
            out,
            Op::SelectStep {
                steps: steps.to_vec(),
                which: which.to_vec(),
            },
        ))
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.values[a].dims2()?;
        if self.values[b].dims2()? != (r, c) {
            return Err(CoreError::ShapeMismatch("row_dot shapes".into()));
        }
        let mut out = vec![0.0; r];
        for bi in 0..r {
            out[bi] = self.values[a]
                .row(bi)
                .iter()
                .zip(self.values[b].row(bi))
                .map(|(x, y)| x * y)
                .sum();
        }
        let out = Tensor::new(vec![r, 1], out)?;
        Ok(self.push(out, Op::RowDot(a, b)))
    }

    pub fn mul_col_broadcast(&mut self, col: NodeId, m: NodeId) -> Result<NodeId> {
        let (r, one) = self.values[col].dims2()?;
        let (rm, c) = self.values[m].dims2()?;
        if one != 1 || rm != r {
            return Err(CoreError::ShapeMismatch("mul_col_broadcast shapes".into()));
        }
        let mut out = self.values[m].clone();
        for b in 0..r {
            let w = self.values[col].data()[b];
            for v in &mut out.data_mut()[b * c..(b + 1) * c] {
                *v *= w;
            }
        }
        Ok(self.push(out, Op::MulColBroadcast(col, m)))
    }

    pub fn cross_entropy_rows(
        &mut self,
        probs: NodeId,
        targets: Vec<Option<usize>>,
    ) -> Result<NodeId> {
        let (r, c) = self.values[probs].dims2()?;
        if targets.len() != r {
            return Err(CoreError::ShapeMismatch("cross_entropy_rows targets".into()));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(CoreError::InvalidArgument(format!(
                "cross_entropy: target {bad} out of range for {c} classes"
            )));
        }
        let mut out = vec![0.0; r];
        for (b, tgt) in targets.iter().enumerate() {
            if let Some(t) = tgt {
                out[b] = -self.values[probs].row(b)[*t].max(EPS_PROB).ln();
            }
        }
        let out = Tensor::new(vec![r, 1], out)?;
        Ok(self.push(out, Op::CrossEntropyRows { probs, targets }))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.values[a].data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn weighted_row_sum(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        let (r, one) = self.values[x].dims2()?;
        if one != 1 || weights.len() != r {
            return Err(CoreError::ShapeMismatch("weighted_row_sum shapes".into()));
        }
        let s: f64 = self.values[x]
            .data()
            .iter()
            .zip(&weights)
            .map(|(v, w)| v * w)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedRowSum { x, weights }))
    }

    pub fn kl_std_normal(&mut self, mu: NodeId, log_sigma: NodeId) -> Result<NodeId> {
        if self.values[mu].shape() != self.values[log_sigma].shape() {
            return Err(CoreError::ShapeMismatch("kl_std_normal shapes".into()));
        }
        let mut s = 0.0;
        for (m, ls) in self.values[mu]
            .data()
            .iter()
            .zip(self.values[log_sigma].data())
        {
            let var = (2.0 * ls).exp();
            s += 0.5 * (m * m + var - 1.0 - 2.0 * ls);
        }
        Ok(self.push(Tensor::scalar(s), Op::KlStdNormal { mu, log_sigma }))
    }

    pub fn reparam(&mut self, mu: NodeId, log_sigma: NodeId, eps: Vec<f64>) -> Result<NodeId> {
        if self.values[mu].shape() != self.values[log_sigma].shape()
            || eps.len() != self.values[mu].numel()
        {
            return Err(CoreError::ShapeMismatch("reparam shapes".into()));
        }
        let mut out = self.values[mu].clone();
        for ((o, ls), e) in out
            .data_mut()
            .iter_mut()
            .zip(self.values[log_sigma].data())
            .zip(&eps)
        {
            *o += ls.exp() * e;
        }
        Ok(self.push(
            out,
            Op::Reparam {
                mu,
                log_sigma,
                eps,
            },
        ))
    }

    /// Run the backward pass from a scalar root. Consumes the tape's
    /// one-shot budget; a second call without a fresh forward is an error.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if self.spent {
            return Err(CoreError::InvalidArgument(
                "backward called twice on the same tape".into(),
            ));
        }
        self.spent = true;
        let root_val = self.values[root].as_scalar()?;
        if !root_val.is_finite() {
            return Err(CoreError::NonFinite("backward root".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[root] = Some(Tensor::scalar(1.0));

        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        // Helper: lazily materialize the adjoint buffer for node `n`.
        macro_rules! grad_of {
            ($n:expr) => {{
                let n = $n;
                if grads[n].is_none() {
                    grads[n] = Some(Tensor::zeros(self.values[n].shape()));
                }
                grads[n].as_mut().unwrap()
            }};
        }

        match &self.ops[id] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (o, x) in grad_of!(*a).data_mut().iter_mut().zip(g.data()) {
                    *o += x;
                }
                for (o, x) in grad_of!(*b).data_mut().iter_mut().zip(g.data()) {
                    *o += x;
                }
            }
            Op::AddBias(m, bias) => {
                let c = self.values[*bias].numel();
                for (o, x) in grad_of!(*m).data_mut().iter_mut().zip(g.data()) {
                    *o += x;
                }
                let gb = grad_of!(*bias);
                for row in g.data().chunks(c) {
                    for (o, x) in gb.data_mut().iter_mut().zip(row) {
                        *o += x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                {
                    let vb = self.values[b].data().to_vec();
                    let ga = grad_of!(a);
                    for ((o, x), v) in ga.data_mut().iter_mut().zip(g.data()).zip(&vb) {
                        *o += x * v;
                    }
                }
                {
                    let va = self.values[a].data().to_vec();
                    let gb = grad_of!(b);
                    for ((o, x), v) in gb.data_mut().iter_mut().zip(g.data()).zip(&va) {
                        *o += x * v;
                    }
                }
            }
            Op::Scale(a, k) => {
                for (o, x) in grad_of!(*a).data_mut().iter_mut().zip(g.data()) {
                    *o += x * k;
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = self.values[a].dims2()?;
                let (_, n) = self.values[b].dims2()?;
                // dA += g . B^T
                {
                    let vb = self.values[b].data().to_vec();
                    let ga = grad_of!(a);
                    dgemm_acc(m, n, k, 1.0, g.data(), false, &vb, true, 1.0, ga.data_mut());
                }
                // dB += A^T . g
                {
                    let va = self.values[a].data().to_vec();
                    let gb = grad_of!(b);
                    dgemm_acc(k, m, n, 1.0, &va, true, g.data(), false, 1.0, gb.data_mut());
                }
            }
            Op::Sigmoid(a) => {
                let y = self.values[id].data();
                for ((o, x), yy) in grad_of!(*a).data_mut().iter_mut().zip(g.data()).zip(y) {
                    *o += x * yy * (1.0 - yy);
                }
            }
            Op::Tanh(a) => {
                let y = self.values[id].data();
                for ((o, x), yy) in grad_of!(*a).data_mut().iter_mut().zip(g.data()).zip(y) {
                    *o += x * (1.0 - yy * yy);
                }
            }
            Op::Elu(a, alpha) => {
                let x_in = self.values[*a].data();
                let y = self.values[id].data();
                let ga = grad_of!(*a);
                for i in 0..y.len() {
                    let d = if x_in[i] >= 0.0 { 1.0 } else { y[i] + alpha };
                    ga.data_mut()[i] += g.data()[i] * d;
                }
            }
            Op::Softmax(a) => {
                let (_, c) = self.values[id].dims2()?;
                let y = self.values[id].data();
                let ga = grad_of!(*a);
                for (b, (yrow, grow)) in y.chunks(c).zip(g.data().chunks(c)).enumerate() {
                    let dot: f64 = yrow.iter().zip(grow).map(|(yy, gg)| yy * gg).sum();
                    for j in 0..c {
                        ga.data_mut()[b * c + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::MaskedSoftmax(a, mask) => {
                let (_, c) = self.values[id].dims2()?;
                let y = self.values[id].data();
                let ga = grad_of!(*a);
                for (b, (yrow, grow)) in y.chunks(c).zip(g.data().chunks(c)).enumerate() {
                    let mrow = &mask[b * c..(b + 1) * c];
                    let dot: f64 = yrow
                        .iter()
                        .zip(grow)
                        .zip(mrow)
                        .filter(|(_, &keep)| keep)
                        .map(|((yy, gg), _)| yy * gg)
                        .sum();
                    for j in 0..c {
                        if mrow[j] {
                            ga.data_mut()[b * c + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::Grl(a, lambda) => {
                for (o, x) in grad_of!(*a).data_mut().iter_mut().zip(g.data()) {
                    *o += -lambda * x;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let (r, total) = self.values[id].dims2()?;
                let mut off = 0;
                for p in parts {
                    let (_, w) = self.values[p].dims2()?;
                    let gp = grad_of!(p);
                    for b in 0..r {
                        for j in 0..w {
                            gp.data_mut()[b * w + j] += g.data()[b * total + off + j];
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { input, start, len } => {
                let (r, c) = self.values[*input].dims2()?;
                let gi = grad_of!(*input);
                for b in 0..r {
                    for j in 0..*len {
                        gi.data_mut()[b * c + start + j] += g.data()[b * len + j];
                    }
                }
            }
            Op::EmbedRows { table, idx } => {
                let (_, dim) = self.values[*table].dims2()?;
                let gt = grad_of!(*table);
                for (b, &i) in idx.iter().enumerate() {
                    for j in 0..dim {
                        gt.data_mut()[i * dim + j] += g.data()[b * dim + j];
                    }
                }
            }
            Op::SelectStep { steps, which } => {
                let steps = steps.clone();
                let which = which.clone();
                let (_, c) = self.values[id].dims2()?;
                for (b, &t) in which.iter().enumerate() {
                    let gs = grad_of!(steps[t]);
                    for j in 0..c {
                        gs.data_mut()[b * c + j] += g.data()[b * c + j];
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (a, b) = (*a, *b);
                let (r, c) = self.values[a].dims2()?;
                {
                    let vb = self.values[b].data().to_vec();
                    let ga = grad_of!(a);
                    for bi in 0..r {
                        let gg = g.data()[bi];
                        for j in 0..c {
                            ga.data_mut()[bi * c + j] += gg * vb[bi * c + j];
                        }
                    }
                }
                {
                    let va = self.values[a].data().to_vec();
                    let gb = grad_of!(b);
                    for bi in 0..r {
                        let gg = g.data()[bi];
                        for j in 0..c {
                            gb.data_mut()[bi * c + j] += gg * va[bi * c + j];
                        }
                    }
                }
            }
            Op::MulColBroadcast(col, m) => {
                let (col, m) = (*col, *m);
                let (r, c) = self.values[m].dims2()?;
                {
                    let vm = self.values[m].data().to_vec();
                    let gc = grad_of!(col);
                    for b in 0..r {
                        let s: f64 = (0..c).map(|j| g.data()[b * c + j] * vm[b * c + j]).sum();
                        gc.data_mut()[b] += s;
                    }
                }
                {
                    let vcol = self.values[col].data().to_vec();
                    let gm = grad_of!(m);
                    for b in 0..r {
                        for j in 0..c {
                            gm.data_mut()[b * c + j] += g.data()[b * c + j] * vcol[b];
                        }
                    }
                }
            }
            Op::CrossEntropyRows { probs, targets } => {
                let (_, c) = self.values[*probs].dims2()?;
                let p = self.values[*probs].data().to_vec();
                let gp = grad_of!(*probs);
                for (b, tgt) in targets.iter().enumerate() {
                    if let Some(t) = tgt {
                        let pv = p[b * c + t];
                        if pv > EPS_PROB {
                            gp.data_mut()[b * c + t] += g.data()[b] * (-1.0 / pv);
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let gg = g.data()[0];
                for o in grad_of!(*a).data_mut() {
                    *o += gg;
                }
            }
            Op::WeightedRowSum { x, weights } => {
                let gg = g.data()[0];
                let gx = grad_of!(*x);
                for (o, w) in gx.data_mut().iter_mut().zip(weights) {
                    *o += gg * w;
                }
            }
            Op::KlStdNormal { mu, log_sigma } => {
                let (mu, log_sigma) = (*mu, *log_sigma);
                let gg = g.data()[0];
                {
                    let vm = self.values[mu].data().to_vec();
                    let gm = grad_of!(mu);
                    for (o, m) in gm.data_mut().iter_mut().zip(&vm) {
                        *o += gg * m;
                    }
                }
                {
                    let vls = self.values[log_sigma].data().to_vec();
                    let gls = grad_of!(log_sigma);
                    for (o, ls) in gls.data_mut().iter_mut().zip(&vls) {
                        *o += gg * ((2.0 * ls).exp() - 1.0);
                    }
                }
            }
            Op::Reparam {
                mu,
                log_sigma,
                eps,
            } => {
                let (mu, log_sigma) = (*mu, *log_sigma);
                let eps = eps.clone();
                for (o, x) in grad_of!(mu).data_mut().iter_mut().zip(g.data()) {
                    *o += x;
                }
                let vls = self.values[log_sigma].data().to_vec();
                let gls = grad_of!(log_sigma);
                for i in 0..eps.len() {
                    gls.data_mut()[i] += g.data()[i] * eps[i] * vls[i].exp();
                }
            }
        }
        Ok(())
    }
}

fn softmax_row(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Plain (non-tape) stabilized softmax of one row.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_row(&mut out);
    out
}

/// -log(pred[target]) with the probability clamp at `EPS_PROB`.
pub fn cross_entropy(pred: &[f64], target: usize) -> Result<f64> {
    if target >= pred.len() {
        return Err(CoreError::InvalidArgument(format!(
            "cross_entropy: target {target} out of range for {} classes",
            pred.len()
        )));
    }
    Ok(-pred[target].max(EPS_PROB).ln())
}
