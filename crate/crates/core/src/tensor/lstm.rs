//! Stacked LSTM cell built from graph primitives.
//!
//! Gate columns are laid out `[input, forget, cell, output]`, each `H` wide.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::graph::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::tensor::nn::glorot_uniform;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmLayer {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub layers: Vec<LstmLayer>,
    pub input_size: usize,
    pub hidden: usize,
}

/// Hidden and cell state per layer.
#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl LstmParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input_size: usize,
        hidden: usize,
        layers: usize,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let fan_in = if l == 0 { input_size } else { hidden };
                let w_input = store.add(format!("{name}.{l}.w_input"), glorot_uniform(rng, fan_in, 4 * hidden));
                let w_hidden = store.add(format!("{name}.{l}.w_hidden"), glorot_uniform(rng, hidden, 4 * hidden));
                let mut bias = Tensor::zeros([1, 4 * hidden]);
                bias.values[hidden..2 * hidden].fill(1.0);
                let bias = store.add(format!("{name}.{l}.bias"), bias);
                LstmLayer { w_input, w_hidden, bias }
            })
            .collect();
        Self { layers, input_size, hidden }
    }

    /// Zero state for a batch of `batch` sequences.
    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> LstmState {
        let mut h = Vec::new();
        let mut c = Vec::new();
        for _ in &self.layers {
            h.push(g.constant(Tensor::zeros([batch, self.hidden])));
            c.push(g.constant(Tensor::zeros([batch, self.hidden])));
        }
        LstmState { h, c }
    }
}

/// Advance every layer by one time step. Dropout with rate `dropout` is
/// applied to the outputs passed between layers while the graph trains.
pub fn lstm_step(
    g: &mut Graph,
    store: &ParamStore,
    params: &LstmParams,
    x: Var,
    state: &LstmState,
    dropout: f64,
) -> Result<(Var, LstmState)> {
    let width = g.shape(x)[1];
    if width != params.input_size {
        return Err(Error::Shape {
            op: "lstm_step",
            left: g.shape(x),
            right: [g.shape(x)[0], params.input_size],
        });
    }
    let hsz = params.hidden;
    let mut input = x;
    let mut next = LstmState { h: Vec::new(), c: Vec::new() };
    for (l, layer) in params.layers.iter().enumerate() {
        if l > 0 {
            input = g.dropout(input, dropout);
        }
        let wi = g.param(store, layer.w_input);
        let wh = g.param(store, layer.w_hidden);
        let b = g.param(store, layer.bias);
        let xi = g.matmul(input, wi)?;
        let hh = g.matmul(state.h[l], wh)?;
        let pre = g.add(xi, hh)?;
        let pre = g.add(pre, b)?;
        let i_pre = g.slice_cols(pre, 0, hsz)?;
        let f_pre = g.slice_cols(pre, hsz, 2 * hsz)?;
        let c_pre = g.slice_cols(pre, 2 * hsz, 3 * hsz)?;
        let o_pre = g.slice_cols(pre, 3 * hsz, 4 * hsz)?;
        let i = g.sigmoid(i_pre);
        let f = g.sigmoid(f_pre);
        let cand = g.tanh(c_pre);
        let o = g.sigmoid(o_pre);
        let keep = g.mul(f, state.c[l])?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        next.h.push(h);
        next.c.push(c);
        input = h;
    }
    Ok((input, next))
}
