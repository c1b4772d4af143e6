//! Reverse-mode differentiation over a dynamic tape.
//!
//! A `Tape` is the spec's graph: building an expression *is* the forward
//! pass (nodes are created in topological order), and `backward` replays
//! the nodes in exact reverse order, accumulating gradients additively
//! over fan-out. Tapes are rebuilt per forward so stochastic dropout
//! masks can be resampled on every pass.
//!
//! Every primitive checks its output for non-finite values; NaN/Inf
//! propagation is an error surfaced to the caller rather than silent
//! poisoning of a search run.

use crate::autodiff::params::{Gradients, ParamId, ParamStore};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Source {
    Const,
    Param(ParamId),
    Op(Op),
}

enum Op {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Exp(usize),
    Square(usize),
    AddConst(usize),
    MulConst(usize, f64),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    /// Scalar pick out of a flat tensor.
    Index(usize, usize),
    /// Tensor times a scalar variable.
    Scale { x: usize, s: usize },
    /// Tensor divided by a scalar variable.
    DivByScalar { x: usize, s: usize },
    /// Tensor plus a broadcast scalar variable.
    ShiftByScalar { x: usize, s: usize },
    /// Fused concrete-dropout application (mask and rescale), saving
    /// the sampled mask and keep probability for the backward pass.
    ConcreteDropout {
        x: usize,
        logit: usize,
        mask: Tensor,
        p: f64,
        inv_temp: f64,
    },
    /// Softmax over the last axis.
    Softmax(usize),
    /// Mean negative log-likelihood of given class probabilities.
    CrossEntropy { probs: usize, labels: Vec<usize> },
    MatMul { a: usize, b: usize },
    /// `[m, n] + [n]` row-broadcast.
    AddBias { x: usize, b: usize },
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
        pad: usize,
    },
    MaxPool {
        x: usize,
        /// Flat input index chosen per output element.
        argmax: Vec<usize>,
    },
    AvgPool { x: usize, stride: usize },
    ConcatChannels(Vec<usize>),
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        x_hat: Tensor,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GlobalAvgPool(usize),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    source: Source,
}

/// Per-channel statistics of one batch-norm forward, reported so the
/// trainer can fold them into the running averages.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const POOL_K: usize = 3;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, source: Source, op: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node { value, source });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Source::Const, "constant")
    }

    /// Bind a parameter as a leaf; `backward` reports gradients per id.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push(store.get(id).clone(), Source::Param(id), "param")
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<Var> {
        self.constant(Tensor::zeros(shape))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push(v, Source::Op(Op::Add(a.0, b.0)), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push(v, Source::Op(Op::Sub(a.0, b.0)), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(v, Source::Op(Op::Mul(a.0, b.0)), "mul")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| -x);
        self.push(v, Source::Op(Op::Neg(a.0)), "neg")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Source::Op(Op::Relu(a.0)), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Source::Op(Op::Sigmoid(a.0)), "sigmoid")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push(v, Source::Op(Op::Log(a.0)), "log")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Source::Op(Op::Exp(a.0)), "exp")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Source::Op(Op::Square(a.0)), "square")
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Source::Op(Op::AddConst(a.0)), "add_const")
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Source::Op(Op::MulConst(a.0, c)), "mul_const")
    }

    /// 1 - x, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        self.add_const(n, 1.0)
    }

    /// Hard clamp; gradient passes through strictly inside the range and
    /// stops at the rails.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Source::Op(Op::Clamp(a.0, lo, hi)), "clamp")
    }

    // ── Reductions and scalar plumbing ───────────────────────────────

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Source::Op(Op::Sum(a.0)), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Source::Op(Op::Mean(a.0)), "mean")
    }

    /// Scalar element `a[i]` (flat index), differentiable.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).data()[i]);
        self.push(v, Source::Op(Op::Index(a.0, i)), "index")
    }

    /// `x * s` with `s` a scalar variable.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        debug_assert!(self.value(s).is_scalar());
        let sv = self.value(s).item();
        let v = self.value(x).map(|e| e * sv);
        self.push(v, Source::Op(Op::Scale { x: x.0, s: s.0 }), "scale")
    }

    /// `x / s` with `s` a scalar variable.
    pub fn div_by_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        debug_assert!(self.value(s).is_scalar());
        let sv = self.value(s).item();
        let v = self.value(x).map(|e| e / sv);
        self.push(v, Source::Op(Op::DivByScalar { x: x.0, s: s.0 }), "div_by_scalar")
    }

    /// `x + s` with `s` a scalar variable broadcast over `x`.
    pub fn shift_by_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        debug_assert!(self.value(s).is_scalar());
        let sv = self.value(s).item();
        let v = self.value(x).map(|e| e + sv);
        self.push(v, Source::Op(Op::ShiftByScalar { x: x.0, s: s.0 }), "shift_by_scalar")
    }

    /// Concrete-dropout application in one node:
    /// `out = x * mask / (1 - p)` with `p = sigmoid(logit)` and
    /// `mask_i = 1 - sigmoid((logit + noise_i) / temperature)`, the
    /// `noise_i` being pre-drawn logistic draws `ln(u/(1-u))`.
    /// Differentiable in `x` and in the site logit.
    pub fn concrete_dropout(&mut self, x: Var, logit: Var, noise: &Tensor, inv_temp: f64) -> Result<Var> {
        let tx = self.value(x);
        if noise.shape() != tx.shape() {
            return Err(Error::ShapeMismatch {
                op: "concrete_dropout",
                expected: tx.shape().to_vec(),
                got: noise.shape().to_vec(),
            });
        }
        let l = self.value(logit).item();
        let p = sigmoid(l);
        let keep = 1.0 - p;
        let mask = noise.map(|n| 1.0 - sigmoid((l + n) * inv_temp));
        let out = tx
            .zip_map(&mask, "concrete_dropout", |xv, m| xv * m / keep)
            .expect("same shape");
        self.push(
            out,
            Source::Op(Op::ConcreteDropout {
                x: x.0,
                logit: logit.0,
                mask,
                p,
                inv_temp,
            }),
            "concrete_dropout",
        )
    }

    // ── Classification head ──────────────────────────────────────────

    /// Softmax over the last axis; rows sum to one and stay strictly positive.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let cols = *shape.last().ok_or(Error::ShapeMismatch {
            op: "softmax",
            expected: vec![1],
            got: shape.clone(),
        })?;
        let rows = t.len() / cols;
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row.iter()) {
                *o = (x - m).exp();
                z += *o;
            }
            for o in out[r * cols..(r + 1) * cols].iter_mut() {
                *o /= z;
            }
        }
        let v = Tensor::new(shape, out)?;
        self.push(v, Source::Op(Op::Softmax(a.0)), "softmax")
    }

    /// Mean negative log-likelihood of class probabilities `[batch, classes]`.
    pub fn cross_entropy_from_probs(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(probs);
        let shape = t.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                expected: vec![labels.len(), shape.last().copied().unwrap_or(0)],
                got: shape.to_vec(),
            });
        }
        let classes = shape[1];
        let mut acc = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            acc -= t.data()[b * classes + y].ln();
        }
        let v = Tensor::scalar(acc / labels.len() as f64);
        self.push(
            v,
            Source::Op(Op::CrossEntropy {
                probs: probs.0,
                labels: labels.to_vec(),
            }),
            "cross_entropy",
        )
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                expected: sa.to_vec(),
                got: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let av = ta.data()[i * k + l];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += av * tb.data()[l * n + j];
                }
            }
        }
        let v = Tensor::new(vec![m, n], out)?;
        self.push(v, Source::Op(Op::MatMul { a: a.0, b: b.0 }), "matmul")
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (sx, sb) = (tx.shape(), tb.shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                expected: sx.to_vec(),
                got: sb.to_vec(),
            });
        }
        let n = sx[1];
        let out: Vec<f64> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % n])
            .collect();
        let v = Tensor::new(sx.to_vec(), out)?;
        self.push(v, Source::Op(Op::AddBias { x: x.0, b: b.0 }), "add_bias")
    }

    // ── Convolution family ───────────────────────────────────────────

    /// 2-D convolution over `[b, c, h, w]`. Zero padding is chosen so unit
    /// stride preserves the spatial resolution; stride 2 halves it
    /// (rounding up). `groups == in_channels` gives the depthwise case,
    /// `dilation == 2` the dilated case.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, dilation: usize, groups: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape().to_vec(), tw.shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: vec![4],
                got: if sx.len() != 4 { sx } else { sw },
            });
        }
        let (batch, c_in, h, wid) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, c_in_g, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if c_in % groups != 0 || c_out % groups != 0 || c_in / groups != c_in_g {
            return Err(Error::ChannelMismatch {
                site: "conv2d",
                expected: c_in / groups.max(1),
                got: c_in_g,
            });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::BadNetworkSpec(format!(
                "conv kernel must be square and odd, got {kh}x{kw}"
            )));
        }
        let pad = dilation * (kh - 1) / 2;
        let h_out = (h + 2 * pad - dilation * (kh - 1) - 1) / stride + 1;
        let w_out = (wid + 2 * pad - dilation * (kw - 1) - 1) / stride + 1;
        let mut out = vec![0.0; batch * c_out * h_out * w_out];
        let cpg_out = c_out / groups;
        let h_taps = conv_taps(h_out, h, stride, dilation, pad, kh);
        let w_taps = conv_taps(w_out, wid, stride, dilation, pad, kw);
        let xd = tx.data();
        let wd = tw.data();
        for b in 0..batch {
            for co in 0..c_out {
                let g = co / cpg_out;
                for oh in 0..h_out {
                    let (r_lo, r_hi, ih_base) = h_taps[oh];
                    for ow in 0..w_out {
                        let (s_lo, s_hi, iw_base) = w_taps[ow];
                        let mut acc = 0.0;
                        for cl in 0..c_in_g {
                            let ci = g * c_in_g + cl;
                            let x_plane = (b * c_in + ci) * h;
                            let w_plane = (co * c_in_g + cl) * kh;
                            for r in r_lo..r_hi {
                                let ih = (ih_base + (r * dilation) as isize) as usize;
                                let x_row = (x_plane + ih) * wid;
                                let w_row = (w_plane + r) * kw;
                                for s in s_lo..s_hi {
                                    let iw = (iw_base + (s * dilation) as isize) as usize;
                                    acc += xd[x_row + iw] * wd[w_row + s];
                                }
                            }
                        }
                        out[((b * c_out + co) * h_out + oh) * w_out + ow] = acc;
                    }
                }
            }
        }
        let v = Tensor::new(vec![batch, c_out, h_out, w_out], out)?;
        self.push(
            v,
            Source::Op(Op::Conv2d {
                x: x.0,
                w: w.0,
                stride,
                dilation,
                groups,
                pad,
            }),
            "conv2d",
        )
    }

    /// 3x3 max pooling, zero padding excluded from the max.
    pub fn max_pool3(&mut self, x: Var, stride: usize) -> Result<Var> {
        let tx = self.value(x);
        let sx = tx.shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "max_pool3",
                expected: vec![4],
                got: sx,
            });
        }
        let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let pad = 1;
        let h_out = (h + 2 * pad - POOL_K) / stride + 1;
        let w_out = (w + 2 * pad - POOL_K) / stride + 1;
        let mut out = vec![0.0; batch * c * h_out * w_out];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..batch {
            for ci in 0..c {
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for r in 0..POOL_K {
                            let ih = (oh * stride + r) as isize - pad as isize;
                            if ih < 0 || ih as usize >= h {
                                continue;
                            }
                            for s in 0..POOL_K {
                                let iw = (ow * stride + s) as isize - pad as isize;
                                if iw < 0 || iw as usize >= w {
                                    continue;
                                }
                                let xi = ((b * c + ci) * h + ih as usize) * w + iw as usize;
                                if tx.data()[xi] > best {
                                    best = tx.data()[xi];
                                    best_i = xi;
                                }
                            }
                        }
                        let oi = ((b * c + ci) * h_out + oh) * w_out + ow;
                        out[oi] = best;
                        argmax[oi] = best_i;
                    }
                }
            }
        }
        let v = Tensor::new(vec![batch, c, h_out, w_out], out)?;
        self.push(
            v,
            Source::Op(Op::MaxPool { x: x.0, argmax }),
            "max_pool3",
        )
    }

    /// 3x3 average pooling, divisor counts in-bounds cells only.
    pub fn avg_pool3(&mut self, x: Var, stride: usize) -> Result<Var> {
        let tx = self.value(x);
        let sx = tx.shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "avg_pool3",
                expected: vec![4],
                got: sx,
            });
        }
        let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let pad = 1;
        let h_out = (h + 2 * pad - POOL_K) / stride + 1;
        let w_out = (w + 2 * pad - POOL_K) / stride + 1;
        let mut out = vec![0.0; batch * c * h_out * w_out];
        for b in 0..batch {
            for ci in 0..c {
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut acc = 0.0;
                        let mut count = 0;
                        for r in 0..POOL_K {
                            let ih = (oh * stride + r) as isize - pad as isize;
                            if ih < 0 || ih as usize >= h {
                                continue;
                            }
                            for s in 0..POOL_K {
                                let iw = (ow * stride + s) as isize - pad as isize;
                                if iw < 0 || iw as usize >= w {
                                    continue;
                                }
                                acc += tx.data()[((b * c + ci) * h + ih as usize) * w + iw as usize];
                                count += 1;
                            }
                        }
                        out[((b * c + ci) * h_out + oh) * w_out + ow] = acc / count as f64;
                    }
                }
            }
        }
        let v = Tensor::new(vec![batch, c, h_out, w_out], out)?;
        self.push(v, Source::Op(Op::AvgPool { x: x.0, stride }), "avg_pool3")
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::BadNetworkSpec("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                expected: vec![4],
                got: first,
            });
        }
        let (batch, h, w) = (first[0], first[2], first[3]);
        let mut c_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 4 || s[0] != batch || s[2] != h || s[3] != w {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    expected: first.clone(),
                    got: s.to_vec(),
                });
            }
            c_total += s[1];
        }
        let mut out = vec![0.0; batch * c_total * h * w];
        for b in 0..batch {
            let mut c_off = 0;
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                let src = &t.data()[b * c * h * w..(b + 1) * c * h * w];
                let dst = &mut out[(b * c_total + c_off) * h * w..(b * c_total + c_off + c) * h * w];
                dst.copy_from_slice(src);
                c_off += c;
            }
        }
        let v = Tensor::new(vec![batch, c_total, h, w], out)?;
        self.push(
            v,
            Source::Op(Op::ConcatChannels(parts.iter().map(|p| p.0).collect())),
            "concat_channels",
        )
    }

    // ── Batch normalization ──────────────────────────────────────────

    /// Training-mode batch norm: per-channel batch statistics, affine
    /// scale/shift. Returns the batch statistics so the caller can fold
    /// them into running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let tx = self.value(x);
        let sx = tx.shape().to_vec();
        let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let m = (batch * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..batch {
            for ci in 0..c {
                for i in 0..h * w {
                    mean[ci] += tx.data()[(b * c + ci) * h * w + i];
                }
            }
        }
        for mv in mean.iter_mut() {
            *mv /= m;
        }
        for b in 0..batch {
            for ci in 0..c {
                for i in 0..h * w {
                    let d = tx.data()[(b * c + ci) * h * w + i] - mean[ci];
                    var[ci] += d * d;
                }
            }
        }
        for vv in var.iter_mut() {
            *vv /= m;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut x_hat = vec![0.0; tx.len()];
        let mut out = vec![0.0; tx.len()];
        let (tg, tb) = (self.value(gamma), self.value(beta));
        for b in 0..batch {
            for ci in 0..c {
                for i in 0..h * w {
                    let idx = (b * c + ci) * h * w + i;
                    let xh = (self.value(x).data()[idx] - mean[ci]) * inv_std[ci];
                    x_hat[idx] = xh;
                    out[idx] = tg.data()[ci] * xh + tb.data()[ci];
                }
            }
        }
        let x_hat = Tensor::new(sx.clone(), x_hat)?;
        let v = Tensor::new(sx, out)?;
        let var_out = self.push(
            v,
            Source::Op(Op::BatchNormTrain {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                x_hat,
                inv_std: inv_std.clone(),
            }),
            "batch_norm",
        )?;
        Ok((var_out, BatchStats { mean, var }))
    }

    /// Inference-mode batch norm against stored running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        let tx = self.value(x);
        let sx = tx.shape().to_vec();
        let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let inv_std: Vec<f64> = running_var.data().iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        let mut out = vec![0.0; tx.len()];
        for b in 0..batch {
            for ci in 0..c {
                for i in 0..h * w {
                    let idx = (b * c + ci) * h * w + i;
                    out[idx] = tg.data()[ci] * (tx.data()[idx] - running_mean.data()[ci]) * inv_std[ci]
                        + tb.data()[ci];
                }
            }
        }
        let v = Tensor::new(sx, out)?;
        self.push(
            v,
            Source::Op(Op::BatchNormEval {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean: running_mean.data().to_vec(),
                inv_std,
            }),
            "batch_norm_eval",
        )
    }

    /// `[b, c, h, w] -> [b, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let sx = tx.shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "global_avg_pool",
                expected: vec![4],
                got: sx,
            });
        }
        let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let mut out = vec![0.0; batch * c];
        for b in 0..batch {
            for ci in 0..c {
                let mut acc = 0.0;
                for i in 0..h * w {
                    acc += tx.data()[(b * c + ci) * h * w + i];
                }
                out[b * c + ci] = acc / (h * w) as f64;
            }
        }
        let v = Tensor::new(vec![batch, c], out)?;
        self.push(v, Source::Op(Op::GlobalAvgPool(x.0)), "global_avg_pool")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let n: usize = shape.iter().product();
        if n != t.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: shape,
                got: t.shape().to_vec(),
            });
        }
        let v = Tensor::new(shape, t.data().to_vec())?;
        self.push(v, Source::Op(Op::Reshape(x.0)), "reshape")
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Seed the given output with ones and differentiate.
    pub fn backward_scalar(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::BackwardBeforeForward);
        }
        let seed = Tensor::full(self.value(loss).shape(), 1.0);
        self.backward(loss, seed)
    }

    /// Reverse sweep from `output` seeded with `seed`. Visits nodes in
    /// exact reverse topological (creation) order; fan-out accumulates
    /// additively. Returns per-parameter gradients.
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::BackwardBeforeForward);
        }
        if seed.shape() != self.value(output).shape() {
            return Err(Error::SeedShapeMismatch {
                seed: seed.shape().to_vec(),
                output: self.value(output).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].source {
                Source::Const => {}
                Source::Param(_) => {
                    grads[i] = Some(g);
                }
                Source::Op(op) => self.backward_op(op, &g, &mut grads),
            }
        }

        let mut out = Gradients::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Source::Param(id) = node.source {
                if let Some(g) = grads[i].take() {
                    if !g.all_finite() {
                        return Err(Error::NonFinite { op: "backward" });
                    }
                    out.accumulate(id, &g);
                }
            }
        }
        Ok(out)
    }

    fn backward_op(&self, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let accum = |grads: &mut [Option<Tensor>], idx: usize, delta: Tensor| {
            match &mut grads[idx] {
                Some(existing) => existing.add_in_place(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match op {
            Op::Add(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(&self.nodes[*b].value, "mul_bw", |gv, bv| gv * bv).unwrap();
                let db = g.zip_map(&self.nodes[*a].value, "mul_bw", |gv, av| gv * av).unwrap();
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::Neg(a) => accum(grads, *a, g.map(|x| -x)),
            Op::Relu(a) => {
                let da = g
                    .zip_map(&self.nodes[*a].value, "relu_bw", |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                    .unwrap();
                accum(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let da = g
                    .zip_map(&self.nodes[*a].value, "sigmoid_bw", |gv, xv| {
                        let s = sigmoid(xv);
                        gv * s * (1.0 - s)
                    })
                    .unwrap();
                accum(grads, *a, da);
            }
            Op::Log(a) => {
                let da = g
                    .zip_map(&self.nodes[*a].value, "log_bw", |gv, xv| gv / xv)
                    .unwrap();
                accum(grads, *a, da);
            }
            Op::Exp(a) => {
                let da = g
                    .zip_map(&self.nodes[*a].value, "exp_bw", |gv, xv| gv * xv.exp())
                    .unwrap();
                accum(grads, *a, da);
            }
            Op::Square(a) => {
                let da = g
                    .zip_map(&self.nodes[*a].value, "square_bw", |gv, xv| 2.0 * gv * xv)
                    .unwrap();
                accum(grads, *a, da);
            }
            Op::AddConst(a) => accum(grads, *a, g.clone()),
            Op::MulConst(a, c) => accum(grads, *a, g.map(|x| x * c)),
            Op::Clamp(a, lo, hi) => {
                let da = g
                    .zip_map(&self.nodes[*a].value, "clamp_bw", |gv, xv| {
                        if xv > *lo && xv < *hi {
                            gv
                        } else {
                            0.0
                        }
                    })
                    .unwrap();
                accum(grads, *a, da);
            }
            Op::Sum(a) => {
                let gv = g.item();
                accum(grads, *a, Tensor::full(self.nodes[*a].value.shape(), gv));
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len() as f64;
                let gv = g.item() / n;
                accum(grads, *a, Tensor::full(self.nodes[*a].value.shape(), gv));
            }
            Op::Index(a, i) => {
                let mut da = Tensor::zeros(self.nodes[*a].value.shape());
                da.data_mut()[*i] = g.item();
                accum(grads, *a, da);
            }
            Op::Scale { x, s } => {
                let sv = self.nodes[*s].value.item();
                accum(grads, *x, g.map(|gv| gv * sv));
                let ds = g.dot(&self.nodes[*x].value);
                accum(grads, *s, Tensor::scalar(ds));
            }
            Op::DivByScalar { x, s } => {
                let sv = self.nodes[*s].value.item();
                accum(grads, *x, g.map(|gv| gv / sv));
                let ds = -g.dot(&self.nodes[*x].value) / (sv * sv);
                accum(grads, *s, Tensor::scalar(ds));
            }
            Op::ShiftByScalar { x, s } => {
                accum(grads, *x, g.clone());
                accum(grads, *s, Tensor::scalar(g.sum()));
            }
            Op::ConcreteDropout {
                x,
                logit,
                mask,
                p,
                inv_temp,
            } => {
                // out = x m k, k = 1/(1-p):
                //   d/dx = m k
                //   d/dl = x k m (p - (1 - m) inv_temp)
                // using m' = -(1-m) m inv_temp and k' = p k.
                let k = 1.0 / (1.0 - p);
                let tx = &self.nodes[*x].value;
                let dx = g
                    .zip_map(mask, "concrete_dropout_bw", |gv, m| gv * m * k)
                    .unwrap();
                let mut dl = 0.0;
                for ((gv, xv), m) in g.data().iter().zip(tx.data()).zip(mask.data()) {
                    dl += gv * xv * k * m * (p - (1.0 - m) * inv_temp);
                }
                accum(grads, *x, dx);
                accum(grads, *logit, Tensor::scalar(dl));
            }
            Op::Softmax(a) => {
                // dx = y * (g - sum(g * y)) per row.
                let y = &self.nodes[*a].value;
                let cols = *y.shape().last().unwrap();
                let rows = y.len() / cols;
                let probs: Vec<f64> = {
                    // Recompute stably from the input values.
                    let mut p = vec![0.0; y.len()];
                    for r in 0..rows {
                        let row = &y.data()[r * cols..(r + 1) * cols];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut z = 0.0;
                        for (o, &x) in p[r * cols..(r + 1) * cols].iter_mut().zip(row.iter()) {
                            *o = (x - m).exp();
                            z += *o;
                        }
                        for o in p[r * cols..(r + 1) * cols].iter_mut() {
                            *o /= z;
                        }
                    }
                    p
                };
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let pr = &probs[r * cols..(r + 1) * cols];
                    let dot: f64 = gr.iter().zip(pr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = pr[j] * (gr[j] - dot);
                    }
                }
                accum(grads, *a, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::CrossEntropy { probs, labels } => {
                let p = &self.nodes[*probs].value;
                let classes = p.shape()[1];
                let gv = g.item();
                let mut dp = Tensor::zeros(p.shape());
                let inv_b = 1.0 / labels.len() as f64;
                for (b, &y) in labels.iter().enumerate() {
                    dp.data_mut()[b * classes + y] = -gv * inv_b / p.data()[b * classes + y];
                }
                accum(grads, *probs, dp);
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                // dA = g . B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g.data()[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for l in 0..k {
                            da[i * k + l] += gv * tb.data()[l * n + j];
                        }
                    }
                }
                // dB = A^T . g
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for l in 0..k {
                        let av = ta.data()[i * k + l];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[l * n + j] += av * g.data()[i * n + j];
                        }
                    }
                }
                accum(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                accum(grads, *b, Tensor::new(vec![k, n], db).unwrap());
            }
            Op::AddBias { x, b } => {
                accum(grads, *x, g.clone());
                let n = self.nodes[*b].value.len();
                let mut db = vec![0.0; n];
                for (i, &gv) in g.data().iter().enumerate() {
                    db[i % n] += gv;
                }
                accum(grads, *b, Tensor::from_vec(db));
            }
            Op::Conv2d {
                x,
                w,
                stride,
                dilation,
                groups,
                pad,
            } => {
                let (tx, tw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let sx = tx.shape();
                let sw = tw.shape();
                let (batch, c_in, h, wid) = (sx[0], sx[1], sx[2], sx[3]);
                let (c_out, c_in_g, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
                let so = g.shape();
                let (h_out, w_out) = (so[2], so[3]);
                let cpg_out = c_out / groups;
                let h_taps = conv_taps(h_out, h, *stride, *dilation, *pad, kh);
                let w_taps = conv_taps(w_out, wid, *stride, *dilation, *pad, kw);
                let mut dx = vec![0.0; tx.len()];
                let mut dw = vec![0.0; tw.len()];
                let xd = tx.data();
                let wdat = tw.data();
                for b in 0..batch {
                    for co in 0..c_out {
                        let grp = co / cpg_out;
                        for oh in 0..h_out {
                            let (r_lo, r_hi, ih_base) = h_taps[oh];
                            for ow in 0..w_out {
                                let gv = g.data()[((b * c_out + co) * h_out + oh) * w_out + ow];
                                if gv == 0.0 {
                                    continue;
                                }
                                let (s_lo, s_hi, iw_base) = w_taps[ow];
                                for cl in 0..c_in_g {
                                    let ci = grp * c_in_g + cl;
                                    let x_plane = (b * c_in + ci) * h;
                                    let w_plane = (co * c_in_g + cl) * kh;
                                    for r in r_lo..r_hi {
                                        let ih = (ih_base + (r * dilation) as isize) as usize;
                                        let x_row = (x_plane + ih) * wid;
                                        let w_row = (w_plane + r) * kw;
                                        for s in s_lo..s_hi {
                                            let iw = (iw_base + (s * dilation) as isize) as usize;
                                            dx[x_row + iw] += gv * wdat[w_row + s];
                                            dw[w_row + s] += gv * xd[x_row + iw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                accum(grads, *x, Tensor::new(sx.to_vec(), dx).unwrap());
                accum(grads, *w, Tensor::new(sw.to_vec(), dw).unwrap());
            }
            Op::MaxPool { x, argmax, .. } => {
                let mut dx = Tensor::zeros(self.nodes[*x].value.shape());
                for (oi, &xi) in argmax.iter().enumerate() {
                    dx.data_mut()[xi] += g.data()[oi];
                }
                accum(grads, *x, dx);
            }
            Op::AvgPool { x, stride } => {
                let tx = &self.nodes[*x].value;
                let sx = tx.shape();
                let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let so = g.shape();
                let (h_out, w_out) = (so[2], so[3]);
                let pad = 1;
                let mut dx = vec![0.0; tx.len()];
                for b in 0..batch {
                    for ci in 0..c {
                        for oh in 0..h_out {
                            for ow in 0..w_out {
                                // Same in-bounds divisor as the forward pass.
                                let mut count = 0;
                                for r in 0..POOL_K {
                                    let ih = (oh * stride + r) as isize - pad as isize;
                                    if ih < 0 || ih as usize >= h {
                                        continue;
                                    }
                                    for s in 0..POOL_K {
                                        let iw = (ow * stride + s) as isize - pad as isize;
                                        if iw < 0 || iw as usize >= w {
                                            continue;
                                        }
                                        count += 1;
                                    }
                                }
                                let gv = g.data()[((b * c + ci) * h_out + oh) * w_out + ow] / count as f64;
                                for r in 0..POOL_K {
                                    let ih = (oh * stride + r) as isize - pad as isize;
                                    if ih < 0 || ih as usize >= h {
                                        continue;
                                    }
                                    for s in 0..POOL_K {
                                        let iw = (ow * stride + s) as isize - pad as isize;
                                        if iw < 0 || iw as usize >= w {
                                            continue;
                                        }
                                        dx[((b * c + ci) * h + ih as usize) * w + iw as usize] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                accum(grads, *x, Tensor::new(sx.to_vec(), dx).unwrap());
            }
            Op::ConcatChannels(parts) => {
                let so = g.shape();
                let (batch, c_total, h, w) = (so[0], so[1], so[2], so[3]);
                let mut c_off = 0;
                for &p in parts {
                    let sp = self.nodes[p].value.shape().to_vec();
                    let c = sp[1];
                    let mut dp = vec![0.0; batch * c * h * w];
                    for b in 0..batch {
                        let src = &g.data()[(b * c_total + c_off) * h * w..(b * c_total + c_off + c) * h * w];
                        dp[b * c * h * w..(b + 1) * c * h * w].copy_from_slice(src);
                    }
                    accum(grads, p, Tensor::new(sp, dp).unwrap());
                    c_off += c;
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => {
                let sx = x_hat.shape();
                let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let m = (batch * h * w) as f64;
                let tg = &self.nodes[*gamma].value;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..batch {
                    for ci in 0..c {
                        for i in 0..h * w {
                            let idx = (b * c + ci) * h * w + i;
                            let gv = g.data()[idx];
                            dbeta[ci] += gv;
                            dgamma[ci] += gv * x_hat.data()[idx];
                            sum_g[ci] += gv;
                            sum_gx[ci] += gv * x_hat.data()[idx];
                        }
                    }
                }
                let mut dx = vec![0.0; x_hat.len()];
                for b in 0..batch {
                    for ci in 0..c {
                        let k = tg.data()[ci] * inv_std[ci] / m;
                        for i in 0..h * w {
                            let idx = (b * c + ci) * h * w + i;
                            dx[idx] = k * (m * g.data()[idx] - sum_g[ci] - x_hat.data()[idx] * sum_gx[ci]);
                        }
                    }
                }
                accum(grads, *x, Tensor::new(sx.to_vec(), dx).unwrap());
                accum(grads, *gamma, Tensor::from_vec(dgamma));
                accum(grads, *beta, Tensor::from_vec(dbeta));
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                // Running stats are constants here, so this is a per-channel
                // affine map: dx = g * gamma * inv_std, dgamma = sum g * x_hat.
                let tx = &self.nodes[*x].value;
                let sx = tx.shape();
                let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let tg = &self.nodes[*gamma].value;
                let mut dx = vec![0.0; tx.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..batch {
                    for ci in 0..c {
                        for i in 0..h * w {
                            let idx = (b * c + ci) * h * w + i;
                            let gv = g.data()[idx];
                            let x_hat = (tx.data()[idx] - mean[ci]) * inv_std[ci];
                            dx[idx] = gv * tg.data()[ci] * inv_std[ci];
                            dgamma[ci] += gv * x_hat;
                            dbeta[ci] += gv;
                        }
                    }
                }
                accum(grads, *x, Tensor::new(sx.to_vec(), dx).unwrap());
                accum(grads, *gamma, Tensor::from_vec(dgamma));
                accum(grads, *beta, Tensor::from_vec(dbeta));
            }
            Op::GlobalAvgPool(x) => {
                let tx = &self.nodes[*x].value;
                let sx = tx.shape();
                let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let inv = 1.0 / (h * w) as f64;
                let mut dx = vec![0.0; tx.len()];
                for b in 0..batch {
                    for ci in 0..c {
                        let gv = g.data()[b * c + ci] * inv;
                        for i in 0..h * w {
                            dx[(b * c + ci) * h * w + i] = gv;
                        }
                    }
                }
                accum(grads, *x, Tensor::new(sx.to_vec(), dx).unwrap());
            }
            Op::Reshape(x) => {
                let sx = self.nodes[*x].value.shape().to_vec();
                accum(grads, *x, Tensor::new(sx, g.data().to_vec()).unwrap());
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per output position: the in-bounds kernel tap range `[lo, hi)` and
/// the signed input base index, so inner loops skip bounds checks.
fn conv_taps(out_len: usize, in_len: usize, stride: usize, dilation: usize, pad: usize, k: usize) -> Vec<(usize, usize, isize)> {
    (0..out_len)
        .map(|o| {
            let base = (o * stride) as isize - pad as isize;
            // Smallest r with base + r*dilation >= 0.
            let lo = if base >= 0 {
                0
            } else {
                ((-base) as usize).div_ceil(dilation)
            };
            // Largest r with base + r*dilation < in_len.
            let hi_signed = in_len as isize - base; // need r*dil < hi_signed
            let hi = if hi_signed <= 0 {
                0
            } else {
                ((hi_signed as usize).div_ceil(dilation)).min(k)
            };
            (lo.min(k), hi.max(lo.min(k)), base)
        })
        .collect()
}
