//! Layer primitives built on the tape: linear, embedding, stacked LSTM,
//! ELU MLP, and single-head scaled dot-product attention.

use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::nn::init;
use crate::nn::param::{Binder, HasParams, Parameter};
use crate::nn::tape::{NodeId, Tape};

pub const ELU_ALPHA: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: Parameter,
    pub b: Parameter,
}

impl LinearParams {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        LinearParams {
            w: Parameter::new(format!("{name}.w"), init::uniform_fan_in(rng, d_in, d_out)),
            b: Parameter::new(format!("{name}.b"), init::zero_bias(d_out)),
        }
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut Binder) -> BoundLinear {
        BoundLinear {
            w: binder.bind(tape, &self.w),
            b: binder.bind(tape, &self.b),
        }
    }
}

impl HasParams for LinearParams {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.w);
        f(&self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

#[derive(Clone, Copy)]
pub struct BoundLinear {
    pub w: NodeId,
    pub b: NodeId,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let xw = tape.matmul(x, self.w)?;
        tape.add_bias(xw, self.b)
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingParams {
    pub table: Parameter,
}

impl EmbeddingParams {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, rows: usize, dim: usize) -> Self {
        EmbeddingParams {
            table: Parameter::new(format!("{name}.table"), init::embedding_table(rng, rows, dim)),
        }
    }

    pub fn rows(&self) -> usize {
        self.table.value.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.value.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut Binder) -> NodeId {
        binder.bind(tape, &self.table)
    }
}

impl HasParams for EmbeddingParams {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.table);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.table);
    }
}

/// Stacked LSTM. Each layer holds one (in+h x 4h) weight matrix with gate
/// columns ordered [input | forget | cell | output] and a 4h bias whose
/// forget block starts at 1.
#[derive(Debug, Clone)]
pub struct LstmStackParams {
    pub layers: Vec<LinearParams>,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmStackParams {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        input_dim: usize,
        hidden: usize,
        n_layers: usize,
    ) -> Self {
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let d_in = if l == 0 { input_dim } else { hidden };
            let mut lin = LinearParams::new(rng, &format!("{name}.l{l}"), d_in + hidden, 4 * hidden);
            for j in hidden..2 * hidden {
                lin.b.value.data_mut()[j] = 1.0;
            }
            layers.push(lin);
        }
        LstmStackParams {
            layers,
            input_dim,
            hidden,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut Binder) -> BoundLstmStack {
        BoundLstmStack {
            layers: self.layers.iter().map(|l| l.bind(tape, binder)).collect(),
            hidden: self.hidden,
        }
    }
}

impl HasParams for LstmStackParams {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        for l in &self.layers {
            l.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

pub struct BoundLstmStack {
    layers: Vec<BoundLinear>,
    hidden: usize,
}

/// Per-layer (h, c) node pairs.
pub type LstmState = Vec<(NodeId, NodeId)>;

impl BoundLstmStack {
    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// All-zero initial state for a batch of `b` rows.
    pub fn zero_state(&self, tape: &mut Tape, b: usize) -> LstmState {
        (0..self.layers.len())
            .map(|_| {
                let h = tape.constant(crate::nn::tensor::Tensor::zeros(&[b, self.hidden]));
                let c = tape.constant(crate::nn::tensor::Tensor::zeros(&[b, self.hidden]));
                (h, c)
            })
            .collect()
    }

    /// Advance every layer one step; returns the top layer's new hidden.
    pub fn step(&self, tape: &mut Tape, x: NodeId, state: &mut LstmState) -> Result<NodeId> {
        if state.len() != self.layers.len() {
            return Err(CoreError::ShapeMismatch("lstm state depth".into()));
        }
        let h = self.hidden;
        let mut inp = x;
        for (l, lin) in self.layers.iter().enumerate() {
            let (h_prev, c_prev) = state[l];
            let z = tape.concat_cols(&[inp, h_prev])?;
            let gates = lin.forward(tape, z)?;
            let gi = tape.slice_cols(gates, 0, h)?;
            let gf = tape.slice_cols(gates, h, h)?;
            let gg = tape.slice_cols(gates, 2 * h, h)?;
            let go = tape.slice_cols(gates, 3 * h, h)?;
            let i = tape.sigmoid(gi);
            let f = tape.sigmoid(gf);
            let g = tape.tanh(gg);
            let o = tape.sigmoid(go);
            let fc = tape.mul(f, c_prev)?;
            let ig = tape.mul(i, g)?;
            let c_new = tape.add(fc, ig)?;
            let tc = tape.tanh(c_new);
            let h_new = tape.mul(o, tc)?;
            state[l] = (h_new, c_new);
            inp = h_new;
        }
        Ok(inp)
    }
}

/// Fully connected stack with ELU between layers and a bare linear output.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<LinearParams>,
}

impl MlpParams {
    /// `dims` lists layer widths input-first, e.g. [64, 64, 64, 10].
    pub fn new(rng: &mut ChaCha8Rng, name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| LinearParams::new(rng, &format!("{name}.l{l}"), w[0], w[1]))
            .collect();
        MlpParams { layers }
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut Binder) -> BoundMlp {
        BoundMlp {
            layers: self.layers.iter().map(|l| l.bind(tape, binder)).collect(),
        }
    }
}

impl HasParams for MlpParams {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        for l in &self.layers {
            l.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

pub struct BoundMlp {
    layers: Vec<BoundLinear>,
}

impl BoundMlp {
    /// Linear output (logits).
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut cur = x;
        let last = self.layers.len() - 1;
        for (l, lin) in self.layers.iter().enumerate() {
            cur = lin.forward(tape, cur)?;
            if l != last {
                cur = tape.elu(cur, ELU_ALPHA);
            }
        }
        Ok(cur)
    }

    /// Softmax output.
    pub fn forward_softmax(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let logits = self.forward(tape, x)?;
        tape.softmax(logits)
    }
}

/// Single-head scaled dot-product attention pooling over step hiddens.
///
/// Scores s_t = (q . h_t) / sqrt(d) are softmaxed over steps where
/// `valid[b][t]` holds (padding steps get zero weight); the context is
/// the attention-weighted sum of the step hiddens. Returns
/// (context NodeId, attention weights NodeId of shape B x T).
pub fn attention_pool(
    tape: &mut Tape,
    query: NodeId,
    steps: &[NodeId],
    valid: &[Vec<bool>],
) -> Result<(NodeId, NodeId)> {
    if steps.is_empty() {
        return Err(CoreError::InvalidArgument("attention over no steps".into()));
    }
    let (b, d) = tape.value(query).dims2()?;
    if valid.len() != b || valid.iter().any(|v| v.len() != steps.len()) {
        return Err(CoreError::ShapeMismatch("attention validity mask".into()));
    }
    let mut score_cols = Vec::with_capacity(steps.len());
    for &hstep in steps {
        score_cols.push(tape.row_dot(query, hstep)?);
    }
    let scores = tape.concat_cols(&score_cols)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let mask: Vec<bool> = valid.iter().flat_map(|row| row.iter().copied()).collect();
    let attn = tape.masked_softmax(scaled, mask)?;
    let mut ctx: Option<NodeId> = None;
    for (t, &hstep) in steps.iter().enumerate() {
        let a_t = tape.slice_cols(attn, t, 1)?;
        let weighted = tape.mul_col_broadcast(a_t, hstep)?;
        ctx = Some(match ctx {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    Ok((ctx.expect("steps nonempty"), attn))
}
