//! Reverse-mode differentiation over whole tensors.
//!
//! A [`Graph`] records every forward op as a node holding its output value.
//! [`Graph::backward`] walks the nodes in reverse, accumulating the gradient
//! of a scalar loss into each node, and finally adds the gradients of
//! parameter nodes into a [`ParamStore`].
//!
//! A graph is built and differentiated by one worker. Forward passes over a
//! shared, read-only [`ParamStore`] may run in parallel on separate graphs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{self, PoolMode};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    Conv2d { x: Var, k: Var, b: Var, stride: usize, pad: usize },
    MaxPool { x: Var, arg: Vec<usize> },
    ChannelPool { x: Var, mode: PoolMode },
    Upsample { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Tile { x: Var },
    MulMap { f: Var, m: Var },
    Reshape(Var),
    Mse(Var, Var),
    SumSq(Var, Var),
    Ssim { a: Var, b: Var, c1: f64, c2: f64 },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` if the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }
}

/// Inverted-dropout mask for `len` elements, tied to `(seed, call)`.
///
/// Survivors are scaled by `1/(1-p)`.
pub fn dropout_mask(len: usize, p: f64, seed: u64, call: u64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!("dropout rate {p} must lie in [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(call);
    let keep = 1.0 / (1.0 - p);
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant or input tensor. Its gradient is available from
    /// [`Gradients::get`] but never written to a parameter store.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A trainable parameter read from `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store.get(name)?.clone();
        Ok(self.push(t, Op::Param(name.to_string())))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(k), self.value(b), stride, pad)?;
        Ok(self.push(out, Op::Conv2d { x, k, b, stride, pad }))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (out, arg) = ops::maxpool2x2(self.value(x))?;
        Ok(self.push(out, Op::MaxPool { x, arg }))
    }

    pub fn channel_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let out = ops::channel_pool(self.value(x), mode)?;
        Ok(self.push(out, Op::ChannelPool { x, mode }))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample2x(self.value(x))?;
        Ok(self.push(out, Op::Upsample { x }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    /// Dropout with rate `p`. In eval mode (`train == false`) this is the
    /// identity; in train mode the mask is fixed by `(seed, call)`.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, seed: u64, call: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout rate {p} must lie in [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).len(), p, seed, call)?;
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(
                op,
                format!("shape {sa:?} vs {sb:?}"),
                self.value(a).len(),
                self.value(b).len(),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape checked by caller")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    /// Concatenate along the last axis. All leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = {
            let s = self.value(*first).shape();
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat", "leading dims", lead.len() + 1, s.len()));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Broadcast a vector of length D to an `[h, w, D]` map.
    pub fn tile(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 1 {
            return Err(Error::dim("tile", "rank", 1, v.shape().len()));
        }
        let d = v.len();
        let data = v.data().repeat(h * w);
        let out = Tensor::new(vec![h, w, d], data)?;
        Ok(self.push(out, Op::Tile { x }))
    }

    /// Multiply an `[H, W, C]` map by an `[H, W, 1]` map, broadcasting over
    /// channels.
    pub fn mul_map(&mut self, f: Var, m: Var) -> Result<Var> {
        let (h, w, c) = self.value(f).dims3("mul_map")?;
        let (mh, mw, mc) = self.value(m).dims3("mul_map")?;
        if (mh, mw, mc) != (h, w, 1) {
            return Err(Error::dim("mul_map", "attention map size", h * w, mh * mw * mc));
        }
        let fm = self.value(f);
        let mm = self.value(m);
        let data = fm
            .data()
            .chunks_exact(c)
            .zip(mm.data())
            .flat_map(|(px, &g)| px.iter().map(move |v| v * g))
            .collect();
        let out = Tensor::new(vec![h, w, c], data)?;
        Ok(self.push(out, Op::MulMap { f, m }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.reshape(x, &[n])
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b)))
    }

    /// Sum of squared differences (squared L2 distance).
    pub fn sum_sq(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sum_sq", a, b)?;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::SumSq(a, b)))
    }

    /// Whole-image SSIM averaged over channels, as a scalar node.
    pub fn ssim(&mut self, a: Var, b: Var, c1: f64, c2: f64) -> Result<Var> {
        self.same_shape("ssim", a, b)?;
        let v = ops::ssim(self.value(a), self.value(b), c1, c2)?;
        Ok(self.push(Tensor::scalar(v), Op::Ssim { a, b, c1, c2 }))
    }

    /// `Σ w_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::dim("weighted_sum", "scalar term", 1, t.len()));
            }
            s += w * t.data()[0];
        }
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are added to
    /// `params` (scaled by `scale`); all node gradients are returned.
    pub fn backward(&self, loss: Var, params: &mut ParamStore, scale: f64) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(name), Some(g)) = (&node.op, &grads.0[i]) {
                params.accumulate_grad(name, g, scale)?;
            }
        }
        Ok(grads)
    }

    /// Reverse pass without touching any parameter store.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            debug_assert!(v.0 < grads.len(), "inputs precede their consumers");
            match &mut grads[v.0] {
                Some(existing) => existing.add_scaled(&g, 1.0),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            let grads = lower;
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Conv2d { x, k, b, stride, pad } => {
                    let (gx, gk, gb) = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*k),
                        self.value(*b),
                        *stride,
                        *pad,
                        g,
                    )?;
                    acc(grads, *x, gx);
                    acc(grads, *k, gk);
                    acc(grads, *b, gb);
                }
                Op::MaxPool { x, arg } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for (&src, &gv) in arg.iter().zip(g.data()) {
                        gx.data_mut()[src] += gv;
                    }
                    acc(grads, *x, gx);
                }
                Op::ChannelPool { x, mode } => {
                    let xt = self.value(*x);
                    let (_, _, c) = xt.dims3("channel_pool")?;
                    let mut gx = Tensor::zeros(xt.shape());
                    match mode {
                        PoolMode::Avg => {
                            for (px, &gv) in gx.data_mut().chunks_exact_mut(c).zip(g.data()) {
                                px.fill(gv / c as f64);
                            }
                        }
                        PoolMode::Max => {
                            let arg = ops::channel_argmax(xt)?;
                            for (p, (&a, &gv)) in arg.iter().zip(g.data()).enumerate() {
                                gx.data_mut()[p * c + a] += gv;
                            }
                        }
                    }
                    acc(grads, *x, gx);
                }
                Op::Upsample { x } => {
                    let gx = ops::upsample2x_backward(g, self.value(*x).shape())?;
                    acc(grads, *x, gx);
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = ops::linear_backward(self.value(*x), self.value(*w), g)?;
                    acc(grads, *x, gx);
                    acc(grads, *w, gw);
                    acc(grads, *b, gb);
                }
                Op::Relu(x) => {
                    let mut gx = g.clone();
                    for (gv, &xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    acc(grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g.clone();
                    for (gv, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *gv *= y * (1.0 - y);
                    }
                    acc(grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let mut gx = g.clone();
                    for (gv, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *gv *= 1.0 - y * y;
                    }
                    acc(grads, *x, gx);
                }
                Op::Dropout { x, mask } => {
                    let mut gx = g.clone();
                    for (gv, m) in gx.data_mut().iter_mut().zip(mask) {
                        *gv *= m;
                    }
                    acc(grads, *x, gx);
                }
                Op::Add(a, b) => {
                    acc(grads, *b, g.clone());
                    acc(grads, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(grads, *b, g.map(|v| -v));
                    acc(grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let mut ga = g.clone();
                    for (gv, &bv) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *gv *= bv;
                    }
                    let mut gb = g.clone();
                    for (gv, &av) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *gv *= av;
                    }
                    acc(grads, *a, ga);
                    acc(grads, *b, gb);
                }
                Op::Scale(x, s) => {
                    acc(grads, *x, g.map(|v| v * s));
                }
                Op::Concat(parts) => {
                    let total = *node.value.shape().last().expect("rank >= 1");
                    let rows = node.value.len() / total;
                    let mut offset = 0;
                    for &p in parts {
                        let pt = self.value(p);
                        let w = *pt.shape().last().expect("rank >= 1");
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        acc(grads, p, Tensor::new(pt.shape().to_vec(), gp)?);
                    }
                }
                Op::Tile { x } => {
                    let d = self.value(*x).len();
                    let mut gx = vec![0.0; d];
                    for chunk in g.data().chunks_exact(d) {
                        for (a, b) in gx.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    acc(grads, *x, Tensor::from_vec(gx));
                }
                Op::MulMap { f, m } => {
                    let ft = self.value(*f);
                    let mt = self.value(*m);
                    let c = ft.shape()[2];
                    let mut gf = g.clone();
                    let mut gm = Tensor::zeros(mt.shape());
                    for (p, ((gchunk, fchunk), &mv)) in gf
                        .data_mut()
                        .chunks_exact_mut(c)
                        .zip(ft.data().chunks_exact(c))
                        .zip(mt.data())
                        .enumerate()
                    {
                        let mut s = 0.0;
                        for (gv, &fv) in gchunk.iter_mut().zip(fchunk) {
                            s += *gv * fv;
                            *gv *= mv;
                        }
                        gm.data_mut()[p] = s;
                    }
                    acc(grads, *f, gf);
                    acc(grads, *m, gm);
                }
                Op::Reshape(x) => {
                    let gx = g.clone().reshape(self.value(*x).shape())?;
                    acc(grads, *x, gx);
                }
                Op::Mse(a, b) => {
                    let up = g.data()[0];
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let k = 2.0 * up / ta.len() as f64;
                    let diff: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| k * (x - y)).collect();
                    let ga = Tensor::new(ta.shape().to_vec(), diff)?;
                    acc(grads, *b, ga.map(|v| -v));
                    acc(grads, *a, ga);
                }
                Op::SumSq(a, b) => {
                    let up = g.data()[0];
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let diff: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| 2.0 * up * (x - y)).collect();
                    let ga = Tensor::new(ta.shape().to_vec(), diff)?;
                    acc(grads, *b, ga.map(|v| -v));
                    acc(grads, *a, ga);
                }
                Op::Ssim { a, b, c1, c2 } => {
                    let up = g.data()[0];
                    let (ga, gb) = ops::ssim_backward(self.value(*a), self.value(*b), *c1, *c2)?;
                    acc(grads, *a, ga.map(|v| v * up));
                    acc(grads, *b, gb.map(|v| v * up));
                }
                Op::WeightedSum(terms) => {
                    let up = g.data()[0];
                    for &(v, w) in terms {
                        acc(grads, v, Tensor::scalar(w * up).reshape(self.value(v).shape())?);
                    }
                }
            }
        }
        Ok(Gradients(grads))
    }
}

