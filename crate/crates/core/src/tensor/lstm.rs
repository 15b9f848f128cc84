use rand::Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Gate names in the order they are stored: forget, input, output, candidate.
pub const GATES: [&str; 4] = ["f", "i", "o", "c"];

/// Register the weights of one LSTM cell under `prefix`.
///
/// Each gate owns `w_<g>` of shape `[hidden + input, hidden]` acting on the
/// concatenation `[h_prev, q_t]`, and `b_<g>` of shape `[hidden]`.
pub fn init_lstm_cell(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let fan_in = (input + hidden) as f64;
    let bound = 1.0 / fan_in.sqrt();
    for g in GATES {
        let w = (0..(input + hidden) * hidden)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        store.insert(format!("{prefix}.w_{g}"), Tensor::new(vec![input + hidden, hidden], w)?)?;
        // A unit forget bias keeps early gradients flowing through the cell.
        let b = if g == "f" { 1.0 } else { 0.0 };
        store.insert(format!("{prefix}.b_{g}"), Tensor::full(&[hidden], b))?;
    }
    Ok(())
}

/// One LSTM step:
///
/// ```text
/// f = σ(W_f·[h, q] + b_f)    i = σ(W_i·[h, q] + b_i)    o = σ(W_o·[h, q] + b_o)
/// c̃ = tanh(W_c·[h, q] + b_c)
/// c' = f ⊙ c + i ⊙ c̃
/// h' = o ⊙ tanh(c')
/// ```
pub fn lstm_cell(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    q: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let hidden = g.value(h_prev).len();
    let input = g.value(q).len();
    if g.value(c_prev).len() != hidden {
        return Err(Error::dim("lstm_cell", "cell state", hidden, g.value(c_prev).len()));
    }
    let hq = g.concat(&[h_prev, q])?;
    let mut pre = Vec::with_capacity(4);
    for gate in GATES {
        let wname = format!("{prefix}.w_{gate}");
        let bname = format!("{prefix}.b_{gate}");
        let w = store.get(&wname)?;
        if w.shape() != [hidden + input, hidden] {
            return Err(Error::dim(
                "lstm_cell",
                format!("gate {gate} weight rows x cols"),
                (hidden + input) * hidden,
                w.len(),
            ));
        }
        if store.get(&bname)?.len() != hidden {
            return Err(Error::dim("lstm_cell", format!("gate {gate} bias"), hidden, store.get(&bname)?.len()));
        }
        let wv = g.param(store, &wname)?;
        let bv = g.param(store, &bname)?;
        pre.push(g.linear(hq, wv, bv)?);
    }
    let f = g.sigmoid(pre[0]);
    let i = g.sigmoid(pre[1]);
    let o = g.sigmoid(pre[2]);
    let cand = g.tanh(pre[3]);
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}
