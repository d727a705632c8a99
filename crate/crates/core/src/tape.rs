//! Reverse-mode differentiation over an append-only tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward sweep. Node ids are assigned in creation order, so
//! the tape is topologically sorted by construction and [`Tape::backward`]
//! visits nodes in reverse id order exactly once.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Error, Result};
use crate::normalization::{normalize, normalize_backward, NormCache, StatsSource, Statistic};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How convolution treats positions outside the input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    #[default]
    Zero,
    /// Wrap around; only used to test translation equivariance.
    Circular,
}

/// Convolution geometry normalized to two spatial axes (rank-1 inputs use a
/// unit height).
#[derive(Clone, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
    circular: bool,
    out_shape: Vec<usize>,
}

#[derive(Clone, Debug)]
struct PoolGeom {
    factor: usize,
    in_shape: Vec<usize>,
    /// Flat input index chosen for every output element.
    argmax: Vec<usize>,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    MaxPool {
        x: Var,
        geom: PoolGeom,
    },
    Concat {
        parts: Vec<Var>,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: Box<NormCache<T>>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum {
        x: Var,
    },
    Square {
        x: Var,
    },
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only record of a computation. Confined to one thread.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`. Leaves are always populated (zeros when
    /// unreachable); interior nodes the loss does not depend on yield `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Forward cache of a normalization node.
    pub fn norm_cache(&self, v: Var) -> Option<&NormCache<T>> {
        match &self.nodes[v.0].op {
            Op::Norm { cache, .. } => Some(cache),
            _ => None,
        }
    }

    /// Cross-correlation of `x` `[B, Cin, S...]` with `kernel` `[Cout, Cin, K...]`
    /// plus `bias` `[Cout]`, for one or two spatial axes.
    pub fn conv(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        stride: &[usize],
        padding: &[usize],
        mode: PaddingMode,
    ) -> Result<Var> {
        let geom = conv_geometry(
            self.value(x).shape(),
            self.value(kernel).shape(),
            self.value(bias).shape(),
            stride,
            padding,
            mode,
        )?;
        let y = conv_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geom,
        );
        let y = Tensor::new(geom.out_shape.clone(), y)?;
        Ok(self.push(
            y,
            Op::Conv {
                x,
                w: kernel,
                b: bias,
                geom,
            },
        ))
    }

    /// `y = x Wᵀ + b` for `x` `[B, D]`, `W` `[Dout, D]`, `b` `[Dout]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(config_err!(
                "linear shape mismatch: x {xs:?}, weight {ws:?}, bias {bs:?}"
            ));
        }
        let (nb, d, dout) = (xs[0], xs[1], ws[0]);
        let (xd, wd, bd) = (
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let mut y = vec![T::zero(); nb * dout];
        for b in 0..nb {
            let xr = &xd[b * d..(b + 1) * d];
            for o in 0..dout {
                let wr = &wd[o * d..(o + 1) * d];
                y[b * dout + o] = bd[o] + dot(xr, wr);
            }
        }
        let y = Tensor::new(vec![nb, dout], y)?;
        Ok(self.push(
            y,
            Op::Linear {
                x,
                w: weight,
                b: bias,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(y, Op::Relu { x })
    }

    /// Mean over all spatial positions: `[B, C, S...]` → `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 3 {
            return Err(config_err!("global pooling needs spatial axes, got {xs:?}"));
        }
        let l: usize = xs[2..].iter().product();
        let n = T::from_usize_lossy(l);
        let y: Vec<T> = self
            .value(x)
            .data()
            .chunks(l)
            .map(|c| c.iter().copied().sum::<T>() / n)
            .collect();
        let y = Tensor::new(vec![xs[0], xs[1]], y)?;
        Ok(self.push(y, Op::GlobalAvgPool { x }))
    }

    /// Non-overlapping max pooling with window and stride `factor` on every
    /// spatial axis; trailing positions that do not fill a window are dropped.
    pub fn max_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if !(3..=4).contains(&xs.len()) || factor == 0 {
            return Err(config_err!(
                "max pooling needs rank 3 or 4 input and a positive factor, got {xs:?}/{factor}"
            ));
        }
        let (h, w) = if xs.len() == 4 { (xs[2], xs[3]) } else { (1, xs[2]) };
        let fh = if xs.len() == 4 { factor } else { 1 };
        let (oh, ow) = (h / fh, w / factor);
        if oh == 0 || ow == 0 {
            return Err(config_err!(
                "pooling by {factor} collapses spatial size {:?} below 1",
                &xs[2..]
            ));
        }
        let planes = xs[0] * xs[1];
        let xd = self.value(x).data();
        let mut y = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * fh * w + ox * factor;
                    for dy in 0..fh {
                        for dx in 0..factor {
                            let idx = base + (oy * fh + dy) * w + ox * factor + dx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    y.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let mut out_shape = vec![xs[0], xs[1]];
        if xs.len() == 4 {
            out_shape.push(oh);
        }
        out_shape.push(ow);
        let y = Tensor::new(out_shape, y)?;
        Ok(self.push(
            y,
            Op::MaxPool {
                x,
                geom: PoolGeom {
                    factor,
                    in_shape: xs,
                    argmax,
                },
            },
        ))
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| config_err!("concat of zero tensors"))?;
        let s0 = self.value(*first).shape().to_vec();
        if s0.len() < 2 {
            return Err(config_err!("concat needs (batch, channel, ...) tensors"));
        }
        let inner: usize = s0[2..].iter().product();
        let mut channels = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(config_err!("concat shape mismatch: {s0:?} vs {s:?}"));
            }
            channels += s[1];
        }
        let nb = s0[0];
        let mut y = Vec::with_capacity(nb * channels * inner);
        for b in 0..nb {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape()[1];
                y.extend_from_slice(&v.data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = s0;
        shape[1] = channels;
        let y = Tensor::new(shape, y)?;
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Channels `start..start + len` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 || len == 0 || start + len > xs[1] {
            return Err(config_err!(
                "channel slice {start}..{} out of range for {xs:?}",
                start + len
            ));
        }
        let inner: usize = xs[2..].iter().product();
        let xd = self.value(x).data();
        let mut y = Vec::with_capacity(xs[0] * len * inner);
        for b in 0..xs[0] {
            let off = (b * xs[1] + start) * inner;
            y.extend_from_slice(&xd[off..off + len * inner]);
        }
        let mut shape = xs;
        shape[1] = len;
        let y = Tensor::new(shape, y)?;
        Ok(self.push(y, Op::SliceChannels { x, start }))
    }

    /// `[B, ...]` → `[B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let nb = v.shape()[0];
        let rest = v.len() / nb;
        let y = v.clone().reshape(vec![nb, rest]).expect("same element count");
        self.push(y, Op::Reshape { x })
    }

    /// Feature normalization; see [`crate::normalization::normalize`].
    pub fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        statistic: Statistic,
        epsilon: f64,
        source: StatsSource<'_, T>,
    ) -> Result<Var> {
        let (y, cache) = normalize(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            statistic,
            epsilon,
            source,
        )?;
        Ok(self.push(
            y,
            Op::Norm {
                x,
                gamma,
                beta,
                cache: Box::new(cache),
            },
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    ///
    /// `logits` is `[B, K]` with one label per sample, or `[B, K, T]` with
    /// labels laid out as `b * T + t`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        if !(2..=3).contains(&ls.len()) || ls[1] < 2 {
            return Err(config_err!(
                "cross entropy needs [B, K] or [B, K, T] logits with K >= 2, got {ls:?}"
            ));
        }
        let (nb, k) = (ls[0], ls[1]);
        let t = if ls.len() == 3 { ls[2] } else { 1 };
        if labels.len() != nb * t {
            return Err(data_err!(
                "{} labels supplied for logits of shape {ls:?}",
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(data_err!("label {bad} out of range for {k} classes"));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); ld.len()];
        let mut total = T::zero();
        for b in 0..nb {
            for ti in 0..t {
                let at = |c: usize| (b * k + c) * t + ti;
                let max = (0..k).map(|c| ld[at(c)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for c in 0..k {
                    let e = (ld[at(c)] - max).exp();
                    probs[at(c)] = e;
                    z = z + e;
                }
                for c in 0..k {
                    probs[at(c)] = probs[at(c)] / z;
                }
                let label = labels[b * t + ti];
                total = total + (z.ln() - (ld[at(label)] - max));
            }
        }
        let loss = total / T::from_usize_lossy(nb * t);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * v);
        self.push(y, Op::Square { x })
    }

    /// `Σ x ⊙ weights` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.shape() != self.value(x).shape() {
            return Err(config_err!(
                "weights {:?} do not match {:?}",
                weights.shape(),
                self.value(x).shape()
            ));
        }
        let s = dot(self.value(x).data(), weights.data());
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let seed = &self.nodes[loss.0].value;
        if seed.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, node has shape {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(seed.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Conv { x, w, b, geom } => {
                    let (dx, dw, db) = conv_backward(
                        g.data(),
                        self.value(*x).data(),
                        self.value(*w).data(),
                        geom,
                    );
                    accumulate(&mut grads, *x, self.value(*x).shape(), dx);
                    accumulate(&mut grads, *w, self.value(*w).shape(), dw);
                    accumulate(&mut grads, *b, self.value(*b).shape(), db);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (nb, d) = (xv.shape()[0], xv.shape()[1]);
                    let dout = wv.shape()[0];
                    let gd = g.data();
                    let mut dx = vec![T::zero(); nb * d];
                    let mut dw = vec![T::zero(); dout * d];
                    let mut db = vec![T::zero(); dout];
                    for bi in 0..nb {
                        let xr = &xv.data()[bi * d..(bi + 1) * d];
                        let dxr = &mut dx[bi * d..(bi + 1) * d];
                        for o in 0..dout {
                            let go = gd[bi * dout + o];
                            db[o] = db[o] + go;
                            let wr = &wv.data()[o * d..(o + 1) * d];
                            axpy(dxr, go, wr);
                            axpy(&mut dw[o * d..(o + 1) * d], go, xr);
                        }
                    }
                    accumulate(&mut grads, *x, xv.shape(), dx);
                    accumulate(&mut grads, *w, wv.shape(), dw);
                    accumulate(&mut grads, *b, self.value(*b).shape(), db);
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    let dx = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, xv.shape(), dx);
                }
                Op::GlobalAvgPool { x } => {
                    let xv = self.value(*x);
                    let l: usize = xv.shape()[2..].iter().product();
                    let n = T::from_usize_lossy(l);
                    let mut dx = Vec::with_capacity(xv.len());
                    for &gi in g.data() {
                        dx.extend(std::iter::repeat_n(gi / n, l));
                    }
                    accumulate(&mut grads, *x, xv.shape(), dx);
                }
                Op::MaxPool { x, geom } => {
                    let n: usize = geom.in_shape.iter().product();
                    let mut dx = vec![T::zero(); n];
                    for (&gi, &src) in g.data().iter().zip(&geom.argmax) {
                        dx[src] = dx[src] + gi;
                    }
                    debug_assert!(geom.factor > 0);
                    accumulate(&mut grads, *x, &geom.in_shape, dx);
                }
                Op::Concat { parts } => {
                    let shape = node.value.shape();
                    let inner: usize = shape[2..].iter().product();
                    let total_c = shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let ps = self.value(p).shape();
                        let c = ps[1];
                        let mut dp = Vec::with_capacity(self.value(p).len());
                        for bi in 0..shape[0] {
                            let start = (bi * total_c + offset) * inner;
                            dp.extend_from_slice(&g.data()[start..start + c * inner]);
                        }
                        accumulate(&mut grads, p, ps, dp);
                        offset += c;
                    }
                }
                Op::SliceChannels { x, start } => {
                    let xs = self.value(*x).shape();
                    let inner: usize = xs[2..].iter().product();
                    let len = node.value.shape()[1];
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for bi in 0..xs[0] {
                        let dst = (bi * xs[1] + start) * inner;
                        let src = bi * len * inner;
                        dx[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    accumulate(&mut grads, *x, xs, dx);
                }
                Op::Reshape { x } => {
                    let xs = self.value(*x).shape();
                    accumulate(&mut grads, *x, xs, g.into_data());
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dgamma, dbeta) = normalize_backward(&g, cache)?;
                    accumulate(&mut grads, *x, self.value(*x).shape(), dx.into_data());
                    accumulate(&mut grads, *gamma, self.value(*gamma).shape(), dgamma);
                    accumulate(&mut grads, *beta, self.value(*beta).shape(), dbeta);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let ls = self.value(*logits).shape();
                    let (nb, k) = (ls[0], ls[1]);
                    let t = if ls.len() == 3 { ls[2] } else { 1 };
                    let scale = g.item() / T::from_usize_lossy(nb * t);
                    let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for b in 0..nb {
                        for ti in 0..t {
                            let at = (b * k + labels[b * t + ti]) * t + ti;
                            dl[at] = dl[at] - scale;
                        }
                    }
                    accumulate(&mut grads, *logits, ls, dl);
                }
                Op::Sum { x } => {
                    let xs = self.value(*x).shape();
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, xs, vec![g.item(); n]);
                }
                Op::Square { x } => {
                    let xv = self.value(*x);
                    let two = T::one() + T::one();
                    let dx = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gi, &xi)| two * xi * gi)
                        .collect();
                    accumulate(&mut grads, *x, xv.shape(), dx);
                }
                Op::WeightedSum { x, weights } => {
                    let gi = g.item();
                    let dx = weights.data().iter().map(|&w| w * gi).collect();
                    accumulate(&mut grads, *x, weights.shape(), dx);
                }
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    shape: &[usize],
    delta: Vec<T>,
) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, d) in existing.data_mut().iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape"));
        }
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

fn conv_geometry(
    xs: &[usize],
    ks: &[usize],
    bs: &[usize],
    stride: &[usize],
    padding: &[usize],
    mode: PaddingMode,
) -> Result<ConvGeom> {
    let rank = xs.len().saturating_sub(2);
    if !(1..=2).contains(&rank)
        || ks.len() != xs.len()
        || stride.len() != rank
        || padding.len() != rank
    {
        return Err(config_err!(
            "convolution rank mismatch: x {xs:?}, kernel {ks:?}, stride {stride:?}, padding {padding:?}"
        ));
    }
    if ks[1] != xs[1] {
        return Err(config_err!(
            "kernel expects {} input channels, input has {}",
            ks[1],
            xs[1]
        ));
    }
    if bs != [ks[0]] {
        return Err(config_err!("bias shape {bs:?} does not match {} filters", ks[0]));
    }
    if stride.contains(&0) {
        return Err(config_err!("stride must be positive"));
    }
    let spatial = |axis: usize| -> (usize, usize, usize, usize) {
        if rank == 2 {
            (xs[2 + axis], ks[2 + axis], stride[axis], padding[axis])
        } else if axis == 0 {
            (1, 1, 1, 0)
        } else {
            (xs[2], ks[2], stride[0], padding[0])
        }
    };
    let (h, kh, sh, ph) = spatial(0);
    let (w, kw, sw, pw) = spatial(1);
    let out = |n: usize, k: usize, s: usize, p: usize| -> Result<usize> {
        let padded = n + 2 * p;
        if padded < k {
            return Err(config_err!(
                "kernel {k} larger than padded input {padded}: output size below 1"
            ));
        }
        Ok((padded - k) / s + 1)
    };
    let oh = out(h, kh, sh, ph)?;
    let ow = out(w, kw, sw, pw)?;
    let circular = mode == PaddingMode::Circular;
    if circular && (ph > h || pw > w) {
        return Err(config_err!("circular padding wider than the input"));
    }
    let mut out_shape = vec![xs[0], ks[0]];
    if rank == 2 {
        out_shape.push(oh);
    }
    out_shape.push(ow);
    Ok(ConvGeom {
        batch: xs[0],
        cin: xs[1],
        cout: ks[0],
        h,
        w,
        kh,
        kw,
        sh,
        sw,
        ph,
        pw,
        oh,
        ow,
        circular,
        out_shape,
    })
}

/// Input index for each (kernel offset, output position) along one axis.
fn axis_table(
    out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    size: usize,
    circular: bool,
) -> Vec<Vec<Option<usize>>> {
    (0..k)
        .map(|ki| {
            (0..out)
                .map(|o| {
                    let pos = (o * stride + ki) as isize - pad as isize;
                    if circular {
                        Some(pos.rem_euclid(size as isize) as usize)
                    } else if pos >= 0 && (pos as usize) < size {
                        Some(pos as usize)
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect()
}

/// Contiguous output range `[lo, hi)` touching valid input for a unit-stride,
/// zero-padded axis, and the input offset `ix = ox + shift`.
#[inline]
fn unit_stride_range(ki: usize, pad: usize, size: usize, out: usize) -> (usize, usize, isize) {
    let shift = ki as isize - pad as isize;
    let lo = (-shift).max(0) as usize;
    let hi = ((size as isize - shift).max(0) as usize).min(out);
    (lo.min(hi), hi, shift)
}

struct ConvTables {
    rows: Vec<Vec<Option<usize>>>,
    cols: Vec<Vec<Option<usize>>>,
    fast: bool,
}

impl ConvTables {
    fn new(g: &ConvGeom) -> Self {
        Self {
            rows: axis_table(g.oh, g.kh, g.sh, g.ph, g.h, g.circular),
            cols: axis_table(g.ow, g.kw, g.sw, g.pw, g.w, g.circular),
            fast: g.sw == 1 && !g.circular,
        }
    }
}

fn conv_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let t = ConvTables::new(g);
    let (plane_in, plane_out) = (g.h * g.w, g.oh * g.ow);
    let mut y = vec![T::zero(); g.batch * g.cout * plane_out];
    for b in 0..g.batch {
        for o in 0..g.cout {
            let yp = &mut y[(b * g.cout + o) * plane_out..(b * g.cout + o + 1) * plane_out];
            yp.iter_mut().for_each(|v| *v = bias[o]);
            for i in 0..g.cin {
                let xp = &x[(b * g.cin + i) * plane_in..(b * g.cin + i + 1) * plane_in];
                let wk = &w[(o * g.cin + i) * g.kh * g.kw..(o * g.cin + i + 1) * g.kh * g.kw];
                for ky in 0..g.kh {
                    for oy in 0..g.oh {
                        let Some(iy) = t.rows[ky][oy] else { continue };
                        let xr = &xp[iy * g.w..(iy + 1) * g.w];
                        let yr = &mut yp[oy * g.ow..(oy + 1) * g.ow];
                        for kx in 0..g.kw {
                            let wv = wk[ky * g.kw + kx];
                            if t.fast {
                                let (lo, hi, shift) = unit_stride_range(kx, g.pw, g.w, g.ow);
                                let src = &xr[(lo as isize + shift) as usize..];
                                axpy(&mut yr[lo..hi], wv, src);
                            } else {
                                for (ox, slot) in t.cols[kx].iter().enumerate() {
                                    if let Some(ix) = *slot {
                                        yr[ox] = yr[ox] + wv * xr[ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    w: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let t = ConvTables::new(g);
    let (plane_in, plane_out) = (g.h * g.w, g.oh * g.ow);
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.cout];
    for b in 0..g.batch {
        for o in 0..g.cout {
            let gp = &dy[(b * g.cout + o) * plane_out..(b * g.cout + o + 1) * plane_out];
            db[o] = gp.iter().fold(db[o], |acc, &v| acc + v);
            for i in 0..g.cin {
                let xp = &x[(b * g.cin + i) * plane_in..(b * g.cin + i + 1) * plane_in];
                let dxp = &mut dx[(b * g.cin + i) * plane_in..(b * g.cin + i + 1) * plane_in];
                let kbase = (o * g.cin + i) * g.kh * g.kw;
                for ky in 0..g.kh {
                    for oy in 0..g.oh {
                        let Some(iy) = t.rows[ky][oy] else { continue };
                        let xr = &xp[iy * g.w..(iy + 1) * g.w];
                        let dxr = &mut dxp[iy * g.w..(iy + 1) * g.w];
                        let gr = &gp[oy * g.ow..(oy + 1) * g.ow];
                        for kx in 0..g.kw {
                            let widx = kbase + ky * g.kw + kx;
                            let wv = w[widx];
                            if t.fast {
                                let (lo, hi, shift) = unit_stride_range(kx, g.pw, g.w, g.ow);
                                let s = (lo as isize + shift) as usize;
                                let e = (hi as isize + shift) as usize;
                                dw[widx] = dw[widx] + dot(&gr[lo..hi], &xr[s..e]);
                                axpy(&mut dxr[s..e], wv, &gr[lo..hi]);
                            } else {
                                for (ox, slot) in t.cols[kx].iter().enumerate() {
                                    if let Some(ix) = *slot {
                                        dw[widx] = dw[widx] + gr[ox] * xr[ix];
                                        dxr[ix] = dxr[ix] + wv * gr[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
