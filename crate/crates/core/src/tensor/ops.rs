//! Forward and backward kernels for the layers the network uses.
//!
//! Every function here is pure. The tape in `graph.rs` wires them together.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<ConvGeom> {
    let (h, w, cin) = input.dims3("conv2d")?;
    let (k, k2, kcin, cout) = match kernel.shape() {
        &[a, b, c, d] => (a, b, c, d),
        s => return Err(Error::dim("conv2d", "kernel rank", 4, s.len())),
    };
    if k != k2 {
        return Err(Error::dim("conv2d", "kernel width", k, k2));
    }
    if k % 2 == 0 {
        return Err(Error::Contract(format!("conv2d: kernel size {k} must be odd")));
    }
    if kcin != cin {
        return Err(Error::dim("conv2d", "input channels", kcin, cin));
    }
    if bias.shape() != [cout] {
        return Err(Error::dim("conv2d", "bias length", cout, bias.len()));
    }
    if stride == 0 {
        return Err(Error::Parameter("conv2d: stride must be at least 1".into()));
    }
    let oh = conv_out_dim(h, k, stride, padding).ok_or_else(|| Error::dim("conv2d", "height", k, h + 2 * padding))?;
    let ow = conv_out_dim(w, k, stride, padding).ok_or_else(|| Error::dim("conv2d", "width", k, w + 2 * padding))?;
    Ok(ConvGeom { h, w, cin, k, cout, oh, ow })
}

/// 2-D convolution over an `[H, W, Cin]` map with a `[k, k, Cin, Cout]` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geom(input, kernel, bias, stride, padding)?;
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![0.0; g.oh * g.ow * g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = &mut out[(oy * g.ow + ox) * g.cout..][..g.cout];
            o.copy_from_slice(bias.data());
            for ky in 0..g.k {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let xin = &x[(iy as usize * g.w + ix as usize) * g.cin..][..g.cin];
                    let kbase = (ky * g.k + kx) * g.cin * g.cout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &kd[kbase + ci * g.cout..][..g.cout];
                        for (ov, &kv) in o.iter_mut().zip(krow) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.oh, g.ow, g.cout], out)
}

/// Gradients of `conv2d` with respect to input, kernel and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = conv_geom(input, kernel, bias, stride, padding)?;
    if grad_out.shape() != [g.oh, g.ow, g.cout] {
        return Err(Error::dim("conv2d_backward", "grad shape", g.oh * g.ow * g.cout, grad_out.len()));
    }
    let x = input.data();
    let kd = kernel.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gb = vec![0.0; g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let gslice = &go[(oy * g.ow + ox) * g.cout..][..g.cout];
            for (b, &v) in gb.iter_mut().zip(gslice) {
                *b += v;
            }
            for ky in 0..g.k {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let ibase = (iy as usize * g.w + ix as usize) * g.cin;
                    let kbase = (ky * g.k + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let xv = x[ibase + ci];
                        let krow = &kd[kbase + ci * g.cout..][..g.cout];
                        let gkrow = &mut gk[kbase + ci * g.cout..][..g.cout];
                        let mut acc = 0.0;
                        for ((gkv, &kv), &gv) in gkrow.iter_mut().zip(krow).zip(gslice) {
                            acc += kv * gv;
                            *gkv += xv * gv;
                        }
                        gx[ibase + ci] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::new(vec![g.cout], gb)?,
    ))
}

/// 2×2 max pooling with stride 2. Also returns the flat input index that
/// won each window (first row-major maximum on ties).
pub fn maxpool2x2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = input.dims3("maxpool2x2")?;
    if h < 2 {
        return Err(Error::dim("maxpool2x2", "height", 2, h));
    }
    if w < 2 {
        return Err(Error::dim("maxpool2x2", "width", 2, w));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut arg = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best_i = ((2 * oy) * w + 2 * ox) * c + ch;
                let mut best = x[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                    if x[i] > best {
                        best = x[i];
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new(vec![oh, ow, c], out)?, arg))
}

/// Per-pixel mean or max over the channel axis; output is `[H, W, 1]`.
pub fn channel_pool(input: &Tensor, mode: PoolMode) -> Result<Tensor> {
    let (h, w, c) = input.dims3("channel_pool")?;
    let out = input
        .data()
        .chunks_exact(c)
        .map(|px| match mode {
            PoolMode::Avg => px.iter().sum::<f64>() / c as f64,
            PoolMode::Max => px.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    Tensor::new(vec![h, w, 1], out)
}

/// Index of the first maximal channel at each pixel.
pub fn channel_argmax(input: &Tensor) -> Result<Vec<usize>> {
    let (_, _, c) = input.dims3("channel_pool")?;
    Ok(input
        .data()
        .chunks_exact(c)
        .map(|px| {
            let mut best = 0;
            for (i, &v) in px.iter().enumerate() {
                if v > px[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Nearest-neighbour 2× spatial upsampling.
pub fn upsample2x(input: &Tensor) -> Result<Tensor> {
    let (h, w, c) = input.dims3("upsample2x")?;
    let x = input.data();
    let mut out = vec![0.0; 4 * h * w * c];
    for y in 0..2 * h {
        for xx in 0..2 * w {
            let src = &x[((y / 2) * w + xx / 2) * c..][..c];
            out[(y * 2 * w + xx) * c..][..c].copy_from_slice(src);
        }
    }
    Tensor::new(vec![2 * h, 2 * w, c], out)
}

pub fn upsample2x_backward(grad_out: &Tensor, in_shape: &[usize]) -> Result<Tensor> {
    let (h, w, c) = match in_shape {
        &[h, w, c] => (h, w, c),
        s => return Err(Error::dim("upsample2x", "rank", 3, s.len())),
    };
    let g = grad_out.data();
    let mut gx = vec![0.0; h * w * c];
    for y in 0..2 * h {
        for xx in 0..2 * w {
            let src = &g[(y * 2 * w + xx) * c..][..c];
            let dst = &mut gx[((y / 2) * w + xx / 2) * c..][..c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gx)
}

/// Affine map `out[o] = Σ_d in[d]·W[d,o] + b[o]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (d, o) = match weight.shape() {
        &[d, o] => (d, o),
        s => return Err(Error::dim("linear", "weight rank", 2, s.len())),
    };
    if input.len() != d {
        return Err(Error::dim("linear", "input length", d, input.len()));
    }
    if bias.len() != o {
        return Err(Error::dim("linear", "bias length", o, bias.len()));
    }
    let mut out = bias.data().to_vec();
    let wd = weight.data();
    for (i, &xv) in input.data().iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (ov, &wv) in out.iter_mut().zip(&wd[i * o..(i + 1) * o]) {
            *ov += xv * wv;
        }
    }
    Ok(Tensor::from_vec(out))
}

pub fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let o = grad_out.len();
    let wd = weight.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; input.len()];
    let mut gw = vec![0.0; wd.len()];
    for (i, &xv) in input.data().iter().enumerate() {
        let row = &wd[i * o..(i + 1) * o];
        let grow = &mut gw[i * o..(i + 1) * o];
        let mut acc = 0.0;
        for ((gwv, &wv), &gv) in grow.iter_mut().zip(row).zip(go) {
            acc += wv * gv;
            *gwv = xv * gv;
        }
        gx[i] = acc;
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(weight.shape().to_vec(), gw)?,
        Tensor::new(vec![o], go.to_vec())?,
    ))
}

/// Whole-image SSIM per channel, averaged over channels, from global means,
/// variances and covariance (all with 1/N normalisation).
pub fn ssim(a: &Tensor, b: &Tensor, c1: f64, c2: f64) -> Result<f64> {
    Ok(ssim_parts(a, b, c1, c2)?.iter().map(|p| p.value()).sum::<f64>() / channels_of(a) as f64)
}

fn channels_of(t: &Tensor) -> usize {
    if t.shape().len() == 3 {
        t.shape()[2]
    } else {
        1
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct SsimChannel {
    pub mu_a: f64,
    pub mu_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub cov: f64,
    pub c1: f64,
    pub c2: f64,
}

impl SsimChannel {
    fn lum_num(&self) -> f64 {
        2.0 * self.mu_a * self.mu_b + self.c1
    }
    fn con_num(&self) -> f64 {
        2.0 * self.cov + self.c2
    }
    fn lum_den(&self) -> f64 {
        self.mu_a * self.mu_a + self.mu_b * self.mu_b + self.c1
    }
    fn con_den(&self) -> f64 {
        self.var_a + self.var_b + self.c2
    }

    pub fn value(&self) -> f64 {
        self.lum_num() * self.con_num() / (self.lum_den() * self.con_den())
    }
}

pub(crate) fn ssim_parts(a: &Tensor, b: &Tensor, c1: f64, c2: f64) -> Result<Vec<SsimChannel>> {
    if a.shape() != b.shape() {
        return Err(Error::dim("ssim", "element count", a.len(), b.len()));
    }
    let c = channels_of(a);
    let n = (a.len() / c) as f64;
    let mut parts = Vec::with_capacity(c);
    for ch in 0..c {
        let xs = a.data().iter().skip(ch).step_by(c);
        let ys = b.data().iter().skip(ch).step_by(c);
        let mu_a = xs.clone().sum::<f64>() / n;
        let mu_b = ys.clone().sum::<f64>() / n;
        let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
        for (&x, &y) in xs.zip(ys) {
            var_a += (x - mu_a) * (x - mu_a);
            var_b += (y - mu_b) * (y - mu_b);
            cov += (x - mu_a) * (y - mu_b);
        }
        parts.push(SsimChannel {
            mu_a,
            mu_b,
            var_a: var_a / n,
            var_b: var_b / n,
            cov: cov / n,
            c1,
            c2,
        });
    }
    Ok(parts)
}

/// Gradient of mean-over-channels SSIM with respect to both images.
pub(crate) fn ssim_backward(a: &Tensor, b: &Tensor, c1: f64, c2: f64) -> Result<(Tensor, Tensor)> {
    let parts = ssim_parts(a, b, c1, c2)?;
    let c = parts.len();
    let n = (a.len() / c) as f64;
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        let p = &parts[i % c];
        let s = p.value() / c as f64;
        let (ln, cn, ld, cd) = (p.lum_num(), p.con_num(), p.lum_den(), p.con_den());
        let dx = x - p.mu_a;
        let dy = y - p.mu_b;
        ga[i] = s * (2.0 * p.mu_b / (n * ln) + 2.0 * dy / (n * cn) - 2.0 * p.mu_a / (n * ld) - 2.0 * dx / (n * cd));
        gb[i] = s * (2.0 * p.mu_a / (n * ln) + 2.0 * dx / (n * cn) - 2.0 * p.mu_b / (n * ld) - 2.0 * dy / (n * cd));
    }
    Ok((Tensor::new(a.shape().to_vec(), ga)?, Tensor::new(b.shape().to_vec(), gb)?))
}
