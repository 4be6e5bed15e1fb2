//! Layer kinds: dense, conv2d, relu, flatten, scalenorm.
//!
//! Each layer owns its parameters, same-shaped gradient buffers, per-parameter
//! trainable flags, and the forward cache needed for backward. Gradients
//! accumulate across backward calls until an SGD step (or an explicit zero)
//! resets them.
//!
//! Shapes are per-sample; the leading batch dimension is implicit. A dimension
//! recorded as 0 means "any" (conv stacks are size-polymorphic in height and
//! width until a flatten pins them).

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

/// Forward mode. Train caches intermediates and lets scalenorm use batch
/// statistics (updating the running ones); Eval uses running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Normalization epsilon in scalenorm denominators.
pub const NORM_EPS: f64 = 1e-5;
/// Running-statistics momentum for scalenorm.
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Dense {
    /// Weight, row-major (out, in).
    pub w: Tensor,
    pub b: Tensor,
    pub gw: Tensor,
    pub gb: Tensor,
    pub train_w: bool,
    pub train_b: bool,
    cache_x: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// Kernel, row-major (out_c, in_c, k, k). Stride 1, zero-padded "same".
    pub w: Tensor,
    pub b: Tensor,
    pub gw: Tensor,
    pub gb: Tensor,
    pub train_w: bool,
    pub train_b: bool,
    cache_x: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Relu {
    cache_x: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Flatten {
    /// Expected per-sample input shape (c, h, w).
    pub in_shape: [usize; 3],
    cache_n: Option<usize>,
}

/// Per-channel batch normalization with learnable scale and shift.
#[derive(Debug, Clone)]
pub struct ScaleNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub run_mean: Tensor,
    pub run_var: Tensor,
    pub ggamma: Tensor,
    pub gbeta: Tensor,
    pub train_gamma: bool,
    pub train_beta: bool,
    cache: Option<SnCache>,
}

#[derive(Debug, Clone)]
struct SnCache {
    mode: Mode,
    xhat: Tensor,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu(Relu),
    Flatten(Flatten),
    ScaleNorm(ScaleNorm),
}

/// Splits an (n, c, spatial...) tensor view into batch count and per-channel
/// spatial size. Scalenorm treats dim 1 as the channel axis for both image
/// (n, c, h, w) and feature (n, d) inputs.
fn channel_geometry(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!(
            "scalenorm needs a batched input, got rank {}",
            shape.len()
        )));
    }
    let n = shape[0];
    let c = shape[1];
    let spatial: usize = shape[2..].iter().product();
    Ok((n, c, spatial.max(1)))
}

impl Layer {
    pub fn dense<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Layer {
        // Kaiming-style uniform fan-in init.
        let limit = (6.0 / in_dim as f64).sqrt();
        let w = Tensor::from_rng(&[out_dim, in_dim], rng, |r| r.gen_range(-limit..limit));
        Layer::Dense(Dense {
            gw: Tensor::zeros(w.shape()),
            gb: Tensor::zeros(&[out_dim]),
            w,
            b: Tensor::zeros(&[out_dim]),
            train_w: true,
            train_b: true,
            cache_x: None,
        })
    }

    pub fn dense_from(w: Tensor, b: Tensor) -> Result<Layer> {
        if w.shape().len() != 2 || b.shape() != [w.shape()[0]] {
            return Err(Error::Shape(format!(
                "dense expects w (out, in) and b (out), got {:?} / {:?}",
                w.shape(),
                b.shape()
            )));
        }
        Ok(Layer::Dense(Dense {
            gw: Tensor::zeros(w.shape()),
            gb: Tensor::zeros(b.shape()),
            w,
            b,
            train_w: true,
            train_b: true,
            cache_x: None,
        }))
    }

    pub fn conv2d<R: Rng>(in_c: usize, out_c: usize, k: usize, rng: &mut R) -> Result<Layer> {
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d kernel must be odd for same padding, got {k}"
            )));
        }
        let fan_in = (in_c * k * k) as f64;
        let limit = (6.0 / fan_in).sqrt();
        let w = Tensor::from_rng(&[out_c, in_c, k, k], rng, |r| r.gen_range(-limit..limit));
        Ok(Layer::Conv2d(Conv2d {
            gw: Tensor::zeros(w.shape()),
            gb: Tensor::zeros(&[out_c]),
            w,
            b: Tensor::zeros(&[out_c]),
            train_w: true,
            train_b: true,
            cache_x: None,
        }))
    }

    pub fn relu() -> Layer {
        Layer::Relu(Relu { cache_x: None })
    }

    pub fn flatten(c: usize, h: usize, w: usize) -> Layer {
        Layer::Flatten(Flatten {
            in_shape: [c, h, w],
            cache_n: None,
        })
    }

    pub fn scalenorm(channels: usize) -> Layer {
        Layer::ScaleNorm(ScaleNorm {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            run_mean: Tensor::zeros(&[channels]),
            run_var: Tensor::full(&[channels], 1.0),
            ggamma: Tensor::zeros(&[channels]),
            gbeta: Tensor::zeros(&[channels]),
            train_gamma: true,
            train_beta: true,
            cache: None,
        })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu(_) => "relu",
            Layer::Flatten(_) => "flatten",
            Layer::ScaleNorm(_) => "scalenorm",
        }
    }

    /// Propagates a per-sample shape through this layer (0 = any extent).
    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => {
                let in_dim = d.w.shape()[1];
                if in_shape != [in_dim] {
                    return Err(Error::Shape(format!(
                        "dense expects input [{in_dim}], got {in_shape:?}"
                    )));
                }
                Ok(vec![d.w.shape()[0]])
            }
            Layer::Conv2d(c) => {
                let (oc, ic) = (c.w.shape()[0], c.w.shape()[1]);
                if in_shape.len() != 3 || in_shape[0] != ic {
                    return Err(Error::Shape(format!(
                        "conv2d expects input ({ic}, h, w), got {in_shape:?}"
                    )));
                }
                Ok(vec![oc, in_shape[1], in_shape[2]])
            }
            Layer::Relu(_) => Ok(in_shape.to_vec()),
            Layer::Flatten(f) => {
                let [c, h, w] = f.in_shape;
                let ok = in_shape.len() == 3
                    && in_shape[0] == c
                    && (in_shape[1] == h || in_shape[1] == 0)
                    && (in_shape[2] == w || in_shape[2] == 0);
                if !ok {
                    return Err(Error::Shape(format!(
                        "flatten expects input ({c}, {h}, {w}), got {in_shape:?}"
                    )));
                }
                Ok(vec![c * h * w])
            }
            Layer::ScaleNorm(s) => {
                let c = s.gamma.len();
                if in_shape.is_empty() || in_shape[0] != c {
                    return Err(Error::Shape(format!(
                        "scalenorm expects {c} channels, got {in_shape:?}"
                    )));
                }
                Ok(in_shape.to_vec())
            }
        }
    }

    /// Forward pass over a batched input; caches what backward needs.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Layer::Dense(d) => {
                let y = dense_forward(d, x)?;
                d.cache_x = Some(x.clone());
                Ok(y)
            }
            Layer::Conv2d(c) => {
                let y = conv_forward(c, x)?;
                c.cache_x = Some(x.clone());
                Ok(y)
            }
            Layer::Relu(r) => {
                let y = relu_forward(x);
                r.cache_x = Some(x.clone());
                Ok(y)
            }
            Layer::Flatten(f) => {
                let y = flatten_forward(f, x)?;
                f.cache_n = Some(x.shape()[0]);
                Ok(y)
            }
            Layer::ScaleNorm(s) => scalenorm_forward(s, x, mode, true),
        }
    }

    /// Cache-free eval forward; usable concurrently on shared references.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(d) => dense_forward(d, x),
            Layer::Conv2d(c) => conv_forward(c, x),
            Layer::Relu(_) => Ok(relu_forward(x)),
            Layer::Flatten(f) => flatten_forward(f, x),
            Layer::ScaleNorm(s) => {
                // No cache, no stat updates; cast away mut via a scratch clone
                // of the tiny cache field is unnecessary because eval stats
                // path never mutates.
                scalenorm_eval(s, x)
            }
        }
    }

    /// Backward pass: accumulates parameter gradients, returns the input
    /// gradient. Requires a prior forward.
    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(d) => dense_backward(d, g),
            Layer::Conv2d(c) => conv_backward(c, g),
            Layer::Relu(r) => relu_backward(r, g),
            Layer::Flatten(f) => flatten_backward(f, g),
            Layer::ScaleNorm(s) => scalenorm_backward(s, g),
        }
    }

    /// Applies `w -= lr * grad` to trainable parameters, then zeros all
    /// gradients (frozen ones included).
    pub fn sgd_step(&mut self, lr: f64) {
        match self {
            Layer::Dense(d) => {
                if d.train_w {
                    apply_sgd(&mut d.w, &d.gw, lr);
                }
                if d.train_b {
                    apply_sgd(&mut d.b, &d.gb, lr);
                }
                d.gw.data_mut().fill(0.0);
                d.gb.data_mut().fill(0.0);
            }
            Layer::Conv2d(c) => {
                if c.train_w {
                    apply_sgd(&mut c.w, &c.gw, lr);
                }
                if c.train_b {
                    apply_sgd(&mut c.b, &c.gb, lr);
                }
                c.gw.data_mut().fill(0.0);
                c.gb.data_mut().fill(0.0);
            }
            Layer::ScaleNorm(s) => {
                if s.train_gamma {
                    apply_sgd(&mut s.gamma, &s.ggamma, lr);
                }
                if s.train_beta {
                    apply_sgd(&mut s.beta, &s.gbeta, lr);
                }
                s.ggamma.data_mut().fill(0.0);
                s.gbeta.data_mut().fill(0.0);
            }
            Layer::Relu(_) | Layer::Flatten(_) => {}
        }
    }

    pub fn zero_grads(&mut self) {
        match self {
            Layer::Dense(d) => {
                d.gw.data_mut().fill(0.0);
                d.gb.data_mut().fill(0.0);
            }
            Layer::Conv2d(c) => {
                c.gw.data_mut().fill(0.0);
                c.gb.data_mut().fill(0.0);
            }
            Layer::ScaleNorm(s) => {
                s.ggamma.data_mut().fill(0.0);
                s.gbeta.data_mut().fill(0.0);
            }
            Layer::Relu(_) | Layer::Flatten(_) => {}
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Dense(d) => d.cache_x = None,
            Layer::Conv2d(c) => c.cache_x = None,
            Layer::Relu(r) => r.cache_x = None,
            Layer::Flatten(f) => f.cache_n = None,
            Layer::ScaleNorm(s) => s.cache = None,
        }
    }

    /// Learnable parameters in deterministic enumeration order, with their
    /// gradient buffers and trainable flags.
    pub fn params(&self) -> Vec<(&'static str, &Tensor, &Tensor, bool)> {
        match self {
            Layer::Dense(d) => vec![
                ("weight", &d.w, &d.gw, d.train_w),
                ("bias", &d.b, &d.gb, d.train_b),
            ],
            Layer::Conv2d(c) => vec![
                ("weight", &c.w, &c.gw, c.train_w),
                ("bias", &c.b, &c.gb, c.train_b),
            ],
            Layer::ScaleNorm(s) => vec![
                ("gamma", &s.gamma, &s.ggamma, s.train_gamma),
                ("beta", &s.beta, &s.gbeta, s.train_beta),
            ],
            Layer::Relu(_) | Layer::Flatten(_) => vec![],
        }
    }

    /// Mutable view of learnable parameters in enumeration order.
    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::Dense(d) => vec![("weight", &mut d.w), ("bias", &mut d.b)],
            Layer::Conv2d(c) => vec![("weight", &mut c.w), ("bias", &mut c.b)],
            Layer::ScaleNorm(s) => vec![("gamma", &mut s.gamma), ("beta", &mut s.beta)],
            Layer::Relu(_) | Layer::Flatten(_) => vec![],
        }
    }

    /// Everything that defines the layer's state: learnable parameters
    /// followed by running statistics. This is the checkpoint enumeration
    /// order and the set averaged by the aggregator.
    pub fn state(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(d) => vec![&d.w, &d.b],
            Layer::Conv2d(c) => vec![&c.w, &c.b],
            Layer::ScaleNorm(s) => vec![&s.gamma, &s.beta, &s.run_mean, &s.run_var],
            Layer::Relu(_) | Layer::Flatten(_) => vec![],
        }
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => vec![&mut d.w, &mut d.b],
            Layer::Conv2d(c) => vec![&mut c.w, &mut c.b],
            Layer::ScaleNorm(s) => vec![&mut s.gamma, &mut s.beta, &mut s.run_mean, &mut s.run_var],
            Layer::Relu(_) | Layer::Flatten(_) => vec![],
        }
    }

    /// Flips the trainable flag of one named parameter.
    pub fn set_trainable(&mut self, name: &str, on: bool) -> Result<()> {
        let flag = match (self, name) {
            (Layer::Dense(d), "weight") => &mut d.train_w,
            (Layer::Dense(d), "bias") => &mut d.train_b,
            (Layer::Conv2d(c), "weight") => &mut c.train_w,
            (Layer::Conv2d(c), "bias") => &mut c.train_b,
            (Layer::ScaleNorm(s), "gamma") => &mut s.train_gamma,
            (Layer::ScaleNorm(s), "beta") => &mut s.train_beta,
            (l, n) => {
                return Err(Error::Config(format!(
                    "layer {} has no parameter named {n}",
                    l.kind_name()
                )))
            }
        };
        *flag = on;
        Ok(())
    }
}

fn apply_sgd(w: &mut Tensor, g: &Tensor, lr: f64) {
    for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
        *wv -= lr * gv;
    }
}

fn dense_forward(d: &Dense, x: &Tensor) -> Result<Tensor> {
    let (out_dim, in_dim) = (d.w.shape()[0], d.w.shape()[1]);
    if x.shape().len() != 2 || x.shape()[1] != in_dim {
        return Err(Error::Shape(format!(
            "dense forward expects (n, {in_dim}), got {:?}",
            x.shape()
        )));
    }
    let n = x.shape()[0];
    let mut y = Tensor::zeros(&[n, out_dim]);
    let (xd, wd, bd, yd) = (x.data(), d.w.data(), d.b.data(), y.data_mut());
    for i in 0..n {
        let xrow = &xd[i * in_dim..(i + 1) * in_dim];
        let yrow = &mut yd[i * out_dim..(i + 1) * out_dim];
        for (o, yo) in yrow.iter_mut().enumerate() {
            let wrow = &wd[o * in_dim..(o + 1) * in_dim];
            let mut acc = bd[o];
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc += xv * wv;
            }
            *yo = acc;
        }
    }
    Ok(y)
}

fn dense_backward(d: &mut Dense, g: &Tensor) -> Result<Tensor> {
    let x = d
        .cache_x
        .take()
        .ok_or_else(|| Error::State("dense backward without forward".into()))?;
    let (out_dim, in_dim) = (d.w.shape()[0], d.w.shape()[1]);
    let n = x.shape()[0];
    if g.shape() != [n, out_dim] {
        return Err(Error::Shape(format!(
            "dense backward expects grad (n={n}, {out_dim}), got {:?}",
            g.shape()
        )));
    }
    let mut gx = Tensor::zeros(&[n, in_dim]);
    {
        let (gd, wd, xd) = (g.data(), d.w.data(), x.data());
        let gxd = gx.data_mut();
        let gwd = d.gw.data_mut();
        let gbd = d.gb.data_mut();
        for i in 0..n {
            let grow = &gd[i * out_dim..(i + 1) * out_dim];
            let xrow = &xd[i * in_dim..(i + 1) * in_dim];
            let gxrow = &mut gxd[i * in_dim..(i + 1) * in_dim];
            for (o, &go) in grow.iter().enumerate() {
                gbd[o] += go;
                let wrow = &wd[o * in_dim..(o + 1) * in_dim];
                let gwrow = &mut gwd[o * in_dim..(o + 1) * in_dim];
                for j in 0..in_dim {
                    gxrow[j] += go * wrow[j];
                    gwrow[j] += go * xrow[j];
                }
            }
        }
    }
    Ok(gx)
}

fn conv_forward(c: &Conv2d, x: &Tensor) -> Result<Tensor> {
    let [oc, ic, kh, kw] = [c.w.shape()[0], c.w.shape()[1], c.w.shape()[2], c.w.shape()[3]];
    if x.shape().len() != 4 || x.shape()[1] != ic {
        return Err(Error::Shape(format!(
            "conv2d forward expects (n, {ic}, h, w), got {:?}",
            x.shape()
        )));
    }
    let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut y = Tensor::zeros(&[n, oc, h, w]);
    let (xd, wd, bd) = (x.data(), c.w.data(), c.b.data());
    let yd = y.data_mut();
    let hw = h * w;
    for ni in 0..n {
        for o in 0..oc {
            let ybase = (ni * oc + o) * hw;
            yd[ybase..ybase + hw].fill(bd[o]);
            for cc in 0..ic {
                let xbase = (ni * ic + cc) * hw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[((o * ic + cc) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        // iy = oy + ky - ph must fall in [0, h)
                        let oy_lo = ph.saturating_sub(ky);
                        let oy_hi = (h + ph - ky).min(h);
                        let ox_lo = pw.saturating_sub(kx);
                        let ox_hi = (w + pw - kx).min(w);
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - ph;
                            let yrow = ybase + oy * w;
                            let xrow = xbase + iy * w;
                            for ox in ox_lo..ox_hi {
                                let ix = ox + kx - pw;
                                yd[yrow + ox] += wv * xd[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

fn conv_backward(c: &mut Conv2d, g: &Tensor) -> Result<Tensor> {
    let x = c
        .cache_x
        .take()
        .ok_or_else(|| Error::State("conv2d backward without forward".into()))?;
    let [oc, ic, kh, kw] = [c.w.shape()[0], c.w.shape()[1], c.w.shape()[2], c.w.shape()[3]];
    let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    if g.shape() != [n, oc, h, w] {
        return Err(Error::Shape(format!(
            "conv2d backward expects grad (n={n}, {oc}, {h}, {w}), got {:?}",
            g.shape()
        )));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    let mut gx = Tensor::zeros(x.shape());
    {
        let (gd, wd, xd) = (g.data(), c.w.data(), x.data());
        let gxd = gx.data_mut();
        let gwd = c.gw.data_mut();
        let gbd = c.gb.data_mut();
        for ni in 0..n {
            for o in 0..oc {
                let gbase = (ni * oc + o) * hw;
                let grow_all = &gd[gbase..gbase + hw];
                gbd[o] += grow_all.iter().sum::<f64>();
                for cc in 0..ic {
                    let xbase = (ni * ic + cc) * hw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let widx = ((o * ic + cc) * kh + ky) * kw + kx;
                            let wv = wd[widx];
                            let mut gw_acc = 0.0;
                            let oy_lo = ph.saturating_sub(ky);
                            let oy_hi = (h + ph - ky).min(h);
                            let ox_lo = pw.saturating_sub(kx);
                            let ox_hi = (w + pw - kx).min(w);
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - ph;
                                let grow = gbase + oy * w;
                                let xrow = xbase + iy * w;
                                for ox in ox_lo..ox_hi {
                                    let ix = ox + kx - pw;
                                    let gv = gd[grow + ox];
                                    gw_acc += gv * xd[xrow + ix];
                                    gxd[xrow + ix] += gv * wv;
                                }
                            }
                            gwd[widx] += gw_acc;
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

fn relu_backward(r: &mut Relu, g: &Tensor) -> Result<Tensor> {
    let x = r
        .cache_x
        .take()
        .ok_or_else(|| Error::State("relu backward without forward".into()))?;
    if g.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "relu backward expects grad {:?}, got {:?}",
            x.shape(),
            g.shape()
        )));
    }
    let mut gx = g.clone();
    for (gv, xv) in gx.data_mut().iter_mut().zip(x.data()) {
        if *xv <= 0.0 {
            *gv = 0.0;
        }
    }
    Ok(gx)
}

fn flatten_forward(f: &Flatten, x: &Tensor) -> Result<Tensor> {
    let [c, h, w] = f.in_shape;
    if x.shape().len() != 4 || x.shape()[1..] != [c, h, w] {
        return Err(Error::Shape(format!(
            "flatten expects (n, {c}, {h}, {w}), got {:?}",
            x.shape()
        )));
    }
    x.reshape(&[x.shape()[0], c * h * w])
}

fn flatten_backward(f: &mut Flatten, g: &Tensor) -> Result<Tensor> {
    let n = f
        .cache_n
        .take()
        .ok_or_else(|| Error::State("flatten backward without forward".into()))?;
    let [c, h, w] = f.in_shape;
    if g.shape() != [n, c * h * w] {
        return Err(Error::Shape(format!(
            "flatten backward expects grad (n={n}, {}), got {:?}",
            c * h * w,
            g.shape()
        )));
    }
    g.reshape(&[n, c, h, w])
}

fn scalenorm_forward(s: &mut ScaleNorm, x: &Tensor, mode: Mode, cache: bool) -> Result<Tensor> {
    let (n, c, spatial) = channel_geometry(x.shape())?;
    if c != s.gamma.len() {
        return Err(Error::Shape(format!(
            "scalenorm has {} channels, input has {c}",
            s.gamma.len()
        )));
    }
    let m = (n * spatial) as f64;
    let xd = x.data();
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = vec![0.0; c];
    let cs = c * spatial;

    for ch in 0..c {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for ni in 0..n {
                    let base = ni * cs + ch * spatial;
                    for &v in &xd[base..base + spatial] {
                        sum += v;
                        sq += v * v;
                    }
                }
                let mean = sum / m;
                // Biased variance, floored at 0 against rounding.
                let var = (sq / m - mean * mean).max(0.0);
                s.run_mean.data_mut()[ch] =
                    (1.0 - NORM_MOMENTUM) * s.run_mean.data()[ch] + NORM_MOMENTUM * mean;
                s.run_var.data_mut()[ch] =
                    (1.0 - NORM_MOMENTUM) * s.run_var.data()[ch] + NORM_MOMENTUM * var;
                (mean, var)
            }
            Mode::Eval => (s.run_mean.data()[ch], s.run_var.data()[ch]),
        };
        let istd = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[ch] = istd;
        let (gamma, beta) = (s.gamma.data()[ch], s.beta.data()[ch]);
        for ni in 0..n {
            let base = ni * cs + ch * spatial;
            for i in base..base + spatial {
                let xh = (xd[i] - mean) * istd;
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = gamma * xh + beta;
            }
        }
    }
    if cache {
        s.cache = Some(SnCache { mode, xhat, inv_std });
    }
    Ok(y)
}

/// Eval-mode forward without touching caches or running statistics.
fn scalenorm_eval(s: &ScaleNorm, x: &Tensor) -> Result<Tensor> {
    let (n, c, spatial) = channel_geometry(x.shape())?;
    if c != s.gamma.len() {
        return Err(Error::Shape(format!(
            "scalenorm has {} channels, input has {c}",
            s.gamma.len()
        )));
    }
    let xd = x.data();
    let mut y = Tensor::zeros(x.shape());
    let cs = c * spatial;
    for ch in 0..c {
        let istd = 1.0 / (s.run_var.data()[ch] + NORM_EPS).sqrt();
        let (mean, gamma, beta) = (s.run_mean.data()[ch], s.gamma.data()[ch], s.beta.data()[ch]);
        for ni in 0..n {
            let base = ni * cs + ch * spatial;
            for i in base..base + spatial {
                y.data_mut()[i] = gamma * (xd[i] - mean) * istd + beta;
            }
        }
    }
    Ok(y)
}

fn scalenorm_backward(s: &mut ScaleNorm, g: &Tensor) -> Result<Tensor> {
    let cache = s
        .cache
        .take()
        .ok_or_else(|| Error::State("scalenorm backward without forward".into()))?;
    if g.shape() != cache.xhat.shape() {
        return Err(Error::Shape(format!(
            "scalenorm backward expects grad {:?}, got {:?}",
            cache.xhat.shape(),
            g.shape()
        )));
    }
    let (n, c, spatial) = channel_geometry(g.shape())?;
    let m = (n * spatial) as f64;
    let cs = c * spatial;
    let (gd, xh) = (g.data(), cache.xhat.data());
    let mut gx = Tensor::zeros(g.shape());

    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for ni in 0..n {
            let base = ni * cs + ch * spatial;
            for i in base..base + spatial {
                sum_g += gd[i];
                sum_gx += gd[i] * xh[i];
            }
        }
        s.ggamma.data_mut()[ch] += sum_gx;
        s.gbeta.data_mut()[ch] += sum_g;

        let gamma = s.gamma.data()[ch];
        let istd = cache.inv_std[ch];
        match cache.mode {
            Mode::Train => {
                // Batch statistics couple every element of the channel.
                let mean_g = sum_g / m;
                let mean_gx = sum_gx / m;
                for ni in 0..n {
                    let base = ni * cs + ch * spatial;
                    for i in base..base + spatial {
                        gx.data_mut()[i] = gamma * istd * (gd[i] - mean_g - xh[i] * mean_gx);
                    }
                }
            }
            Mode::Eval => {
                // Running statistics are constants; the map is affine.
                for ni in 0..n {
                    let base = ni * cs + ch * spatial;
                    for i in base..base + spatial {
                        gx.data_mut()[i] = gamma * istd * gd[i];
                    }
                }
            }
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_affine_evaluation() {
        // weight [[2]], bias [1], input [3] -> [7]
        let mut l = Layer::dense_from(t(&[1, 1], &[2.0]), t(&[1], &[1.0])).unwrap();
        let y = l.forward(&t(&[1, 1], &[3.0]), Mode::Train).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn relu_definition() {
        let mut l = Layer::relu();
        let y = l.forward(&t(&[1, 2], &[-1.0, 2.0]), Mode::Train).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
        // Gradient is 0 at the negative coordinate.
        let gx = l.backward(&t(&[1, 2], &[1.0, 1.0])).unwrap();
        assert_eq!(gx.data(), &[0.0, 1.0]);
    }

    #[test]
    fn scalenorm_identity_on_standardized_batch() {
        // Zero-mean unit-variance batch with gamma=1, beta=0 passes through
        // unchanged up to the epsilon in the denominator.
        let mut l = Layer::scalenorm(1);
        let x = t(&[2, 1], &[-1.0, 1.0]);
        let y = l.forward(&x, Mode::Train).unwrap();
        for (yv, xv) in y.data().iter().zip(x.data()) {
            assert!((yv - xv).abs() < 1e-4, "{yv} vs {xv}");
        }
    }

    #[test]
    fn dense_input_grad_is_w_transpose_g() {
        let w = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut l = Layer::dense_from(w, Tensor::zeros(&[2])).unwrap();
        l.forward(&t(&[1, 3], &[0.5, -1.0, 2.0]), Mode::Train).unwrap();
        let gx = l.backward(&t(&[1, 2], &[10.0, 100.0])).unwrap();
        // W^T g = [1*10+4*100, 2*10+5*100, 3*10+6*100]
        assert_eq!(gx.data(), &[410.0, 520.0, 630.0]);
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut l = Layer::relu();
        assert!(matches!(
            l.backward(&t(&[1, 1], &[1.0])),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn sgd_update_rule_and_freeze() {
        let mut l = Layer::dense_from(t(&[1, 1], &[1.0]), Tensor::zeros(&[1])).unwrap();
        if let Layer::Dense(d) = &mut l {
            d.gw.data_mut()[0] = 0.5;
        }
        l.sgd_step(0.1);
        if let Layer::Dense(d) = &l {
            assert!((d.w.data()[0] - 0.95).abs() < 1e-15);
            assert_eq!(d.gw.data()[0], 0.0);
        }

        // A frozen parameter is untouched even with a nonzero gradient.
        let mut sn = Layer::scalenorm(2);
        sn.set_trainable("gamma", false).unwrap();
        if let Layer::ScaleNorm(s) = &mut sn {
            s.ggamma.data_mut().fill(3.0);
        }
        sn.sgd_step(0.1);
        if let Layer::ScaleNorm(s) = &sn {
            assert_eq!(s.gamma.data(), &[1.0, 1.0]);
            assert_eq!(s.ggamma.data(), &[0.0, 0.0]);
        }
    }

    #[test]
    fn grad_accumulation_is_additive() {
        let mut l = Layer::dense_from(t(&[1, 1], &[2.0]), Tensor::zeros(&[1])).unwrap();
        let x = t(&[1, 1], &[3.0]);
        let g = t(&[1, 1], &[1.0]);
        l.forward(&x, Mode::Train).unwrap();
        l.backward(&g).unwrap();
        l.forward(&x, Mode::Train).unwrap();
        l.backward(&g).unwrap();
        if let Layer::Dense(d) = &l {
            assert_eq!(d.gw.data()[0], 6.0); // 2 * (g*x)
        }
    }

    #[test]
    fn conv_same_padding_shape_and_known_value() {
        // 1x1x3x3 input, single 3x3 averaging-like kernel of ones.
        let mut rng = crate::seed::rng(0, &[0]);
        let mut l = Layer::conv2d(1, 1, 3, &mut rng).unwrap();
        if let Layer::Conv2d(c) = &mut l {
            c.w.data_mut().fill(1.0);
            c.b.data_mut().fill(0.0);
        }
        let x = t(&[1, 1, 3, 3], &[1.0; 9]);
        let y = l.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        // Center sees all 9 ones, corners see 4, edges see 6.
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn eval_forward_uses_running_stats_and_infer_matches() {
        let mut l = Layer::scalenorm(1);
        // Push the running stats away from the defaults.
        let x = t(&[4, 1], &[10.0, 12.0, 8.0, 10.0]);
        l.forward(&x, Mode::Train).unwrap();
        let probe = t(&[1, 1], &[10.0]);
        let eval = l.forward(&probe, Mode::Eval).unwrap();
        let infer = l.infer(&probe).unwrap();
        assert_eq!(eval.data(), infer.data());
    }
}
