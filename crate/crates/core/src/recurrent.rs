//! LSTM cell, sequence unrolling, and the bidirectional composition.
//!
//! Gate layout follows the usual four-gate cell: forget, input, candidate
//! and output gates each apply `W · [h_{t-1}, x_t] + b` with `W` of shape
//! `(H, H+F)` — the previous hidden state comes first in the concatenation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// One direction's gate weights and biases.
///
/// Weights are `(H, H+F)`; biases are stored as `(1, H)` row vectors so they
/// broadcast over the batch.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub w_f: Tensor,
    pub w_i: Tensor,
    pub w_c: Tensor,
    pub w_o: Tensor,
    pub b_f: Tensor,
    pub b_i: Tensor,
    pub b_c: Tensor,
    pub b_o: Tensor,
}

impl LstmParams {
    /// Uniform `±1/√H` weights, zero biases except a forget-gate bias of 1.
    pub fn init<R: Rng>(input_size: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let wshape = [hidden, hidden + input_size];
        let w = |rng: &mut R| Tensor::rand_uniform(&wshape, -bound, bound, rng).with_requires_grad();
        let w_f = w(rng);
        let w_i = w(rng);
        let w_c = w(rng);
        let w_o = w(rng);
        let bias = || Tensor::zeros(&[1, hidden]).with_requires_grad();
        LstmParams {
            w_f,
            w_i,
            w_c,
            w_o,
            b_f: Tensor::full(&[1, hidden], 1.0).expect("finite").with_requires_grad(),
            b_i: bias(),
            b_c: bias(),
            b_o: bias(),
        }
    }

    /// All-zero parameters (useful for the degenerate-cell checks).
    pub fn zeros(input_size: usize, hidden: usize) -> Self {
        let w = || Tensor::zeros(&[hidden, hidden + input_size]).with_requires_grad();
        let b = || Tensor::zeros(&[1, hidden]).with_requires_grad();
        LstmParams { w_f: w(), w_i: w(), w_c: w(), w_o: w(), b_f: b(), b_i: b(), b_c: b(), b_o: b() }
    }

    pub fn hidden(&self) -> usize {
        self.w_f.shape()[0]
    }

    pub fn input_size(&self) -> usize {
        self.w_f.shape()[1] - self.w_f.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        let cols = h + self.input_size();
        for (name, w) in [("w_f", &self.w_f), ("w_i", &self.w_i), ("w_c", &self.w_c), ("w_o", &self.w_o)] {
            if w.shape() != [h, cols] {
                return Err(Error::dim("lstm_params", format!("{name} has shape {:?}, expected {:?}", w.shape(), [h, cols])));
            }
        }
        for (name, b) in [("b_f", &self.b_f), ("b_i", &self.b_i), ("b_c", &self.b_c), ("b_o", &self.b_o)] {
            if b.shape() != [1, h] {
                return Err(Error::dim("lstm_params", format!("{name} has shape {:?}, expected {:?}", b.shape(), [1, h])));
            }
        }
        Ok(())
    }

    /// Binds every parameter as a graph leaf, pre-transposing the weights so
    /// the per-step product is `[B, H+F] @ [H+F, H]`.
    pub fn bind(&self, g: &mut Graph) -> Result<LstmNodes> {
        let weights = [g.leaf(&self.w_f), g.leaf(&self.w_i), g.leaf(&self.w_c), g.leaf(&self.w_o)];
        let biases = [g.leaf(&self.b_f), g.leaf(&self.b_i), g.leaf(&self.b_c), g.leaf(&self.b_o)];
        LstmNodes::from_leaves(g, self.hidden(), weights, biases)
    }
}

/// Graph handles for one direction's parameters within a forward pass.
///
/// `weights` are the raw `(H, H+F)` leaves (useful for reading gradients);
/// the `w_*_t` handles are their transposes used by the cell.
#[derive(Debug, Clone, Copy)]
pub struct LstmNodes {
    pub hidden: usize,
    pub weights: [NodeId; 4],
    pub biases: [NodeId; 4],
    w_f_t: NodeId,
    w_i_t: NodeId,
    w_c_t: NodeId,
    w_o_t: NodeId,
}

impl LstmNodes {
    /// Wires already-registered leaves (e.g. from a parameter registry) into
    /// the transposed layout used by the cell. Order: f, i, C, o.
    pub fn from_leaves(g: &mut Graph, hidden: usize, weights: [NodeId; 4], biases: [NodeId; 4]) -> Result<Self> {
        Ok(LstmNodes {
            hidden,
            weights,
            biases,
            w_f_t: g.transpose_last_two(weights[0])?,
            w_i_t: g.transpose_last_two(weights[1])?,
            w_c_t: g.transpose_last_two(weights[2])?,
            w_o_t: g.transpose_last_two(weights[3])?,
        })
    }
}

/// Hidden and cell state, each `[B, H]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, batch: usize, hidden: usize) -> Self {
        let z = Tensor::zeros(&[batch, hidden]);
        LstmState { h: g.leaf(&z), c: g.leaf(&z) }
    }
}

fn gate(g: &mut Graph, hx: NodeId, w_t: NodeId, b: NodeId) -> Result<NodeId> {
    let prod = g.matmul(hx, w_t)?;
    g.add(prod, b)
}

/// One step of the cell:
/// f = σ(W_f·[h,x]+b_f), i = σ(W_i·[h,x]+b_i), C̃ = tanh(W_C·[h,x]+b_C),
/// C' = f⊙C + i⊙C̃, o = σ(W_o·[h,x]+b_o), h' = o⊙tanh(C').
pub fn lstm_cell_step(g: &mut Graph, x_t: NodeId, state: LstmState, p: &LstmNodes) -> Result<LstmState> {
    let hx = g.concat(&[state.h, x_t], 1)?;
    let f_pre = gate(g, hx, p.w_f_t, p.biases[0])?;
    let f = g.sigmoid(f_pre)?;
    let i_pre = gate(g, hx, p.w_i_t, p.biases[1])?;
    let i = g.sigmoid(i_pre)?;
    let c_pre = gate(g, hx, p.w_c_t, p.biases[2])?;
    let c_tilde = g.tanh(c_pre)?;
    let o_pre = gate(g, hx, p.w_o_t, p.biases[3])?;
    let o = g.sigmoid(o_pre)?;

    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, c_tilde)?;
    let c_next = g.add(keep, write)?;
    let c_act = g.tanh(c_next)?;
    let h_next = g.mul(o, c_act)?;
    Ok(LstmState { h: h_next, c: c_next })
}

fn check_seq(g: &Graph, seq: NodeId) -> Result<(usize, usize, usize)> {
    let sh = g.shape(seq);
    if sh.len() != 3 {
        return Err(Error::dim("lstm_forward", format!("expected [B, L, F], got {sh:?}")));
    }
    if sh[1] == 0 {
        return Err(Error::Contract("lstm_forward: empty sequence".into()));
    }
    Ok((sh[0], sh[1], sh[2]))
}

fn step_input(g: &mut Graph, seq: NodeId, t: usize, batch: usize, features: usize) -> Result<NodeId> {
    let sl = g.slice(seq, 1, t, t + 1)?;
    g.reshape(sl, &[batch, features])
}

fn stack_time(g: &mut Graph, hs: &[NodeId], batch: usize, hidden: usize) -> Result<NodeId> {
    let mut stacked = Vec::with_capacity(hs.len());
    for &h in hs {
        stacked.push(g.reshape(h, &[batch, 1, hidden])?);
    }
    g.concat(&stacked, 1)
}

/// Unrolls the cell over `[B, L, F]`, returning the stacked hidden states
/// `[B, L, H]`. `init` defaults to zero state.
pub fn lstm_forward(g: &mut Graph, seq: NodeId, p: &LstmNodes, init: Option<LstmState>) -> Result<NodeId> {
    let (batch, len, features) = check_seq(g, seq)?;
    let mut state = init.unwrap_or_else(|| LstmState::zeros(g, batch, p.hidden));
    let mut hs = Vec::with_capacity(len);
    for t in 0..len {
        let x_t = step_input(g, seq, t, batch, features)?;
        state = lstm_cell_step(g, x_t, state, p)?;
        hs.push(state.h);
    }
    stack_time(g, &hs, batch, p.hidden)
}

/// Forward pass over the sequence and a second pass over the time-reversed
/// sequence, re-reversed so position `t` holds the backward state for step
/// `t`; halves are concatenated on the hidden axis, forward first: `[B, L, 2H]`.
pub fn bilstm_forward(g: &mut Graph, seq: NodeId, forward: &LstmNodes, backward: &LstmNodes) -> Result<NodeId> {
    if forward.hidden != backward.hidden {
        return Err(Error::dim(
            "bilstm_forward",
            format!("direction hidden sizes differ: {} vs {}", forward.hidden, backward.hidden),
        ));
    }
    let (batch, len, features) = check_seq(g, seq)?;
    let fwd = lstm_forward(g, seq, forward, None)?;

    let mut state = LstmState::zeros(g, batch, backward.hidden);
    let mut rev = vec![None; len];
    for t in (0..len).rev() {
        let x_t = step_input(g, seq, t, batch, features)?;
        state = lstm_cell_step(g, x_t, state, backward)?;
        rev[t] = Some(state.h);
    }
    let rev: Vec<NodeId> = rev.into_iter().map(|h| h.expect("all steps visited")).collect();
    let bwd = stack_time(g, &rev, batch, backward.hidden)?;
    g.concat(&[fwd, bwd], 2)
}
