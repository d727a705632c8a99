//! Feature normalization over the (scheme × averaging × statistic) design
//! space.
//!
//! A layer normalizes each channel of a `(batch, channel, spatial...)` tensor
//! with statistics that come from one of two places:
//!
//! * **non-adaptive**: running averages accumulated during training and
//!   frozen at inference;
//! * **adaptive**: recomputed from whatever data is being normalized, either
//!   pooled over the batch (and spatial positions) or per instance.
//!
//! The statistic is either mean and variance (`y = γ(x − μ)/√(σ² + ε) + β`)
//! or the mean square without centering (`y = γx/√(ν² + ε) + β`).
//!
//! Variances are population variances (divisor N) everywhere, including the
//! running buffers.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScheme {
    NonAdaptive,
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    Batch,
    Instance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    MeanStd,
    MeanSquare,
}

impl fmt::Display for NormScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormScheme::NonAdaptive => "non_adaptive",
            NormScheme::Adaptive => "adaptive",
        })
    }
}

impl fmt::Display for Averaging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Averaging::Batch => "batch",
            Averaging::Instance => "instance",
        })
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Statistic::MeanStd => "mean_std",
            Statistic::MeanSquare => "mean_square",
        })
    }
}

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Message used whenever the excluded combination is requested.
pub const EXCLUDED_COMBINATION: &str = "non_adaptive normalization cannot use instance averaging: \
     fixed inference statistics require stable batch-based estimates";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNormSpec {
    scheme: NormScheme,
    averaging: Averaging,
    statistic: Statistic,
    #[serde(default = "default_epsilon")]
    epsilon: f64,
    #[serde(default = "default_momentum")]
    momentum: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

/// A validated normalization configuration. The non-adaptive/instance
/// combination cannot be constructed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNormSpec", into = "RawNormSpec")]
pub struct NormSpec {
    scheme: NormScheme,
    averaging: Averaging,
    statistic: Statistic,
    epsilon: f64,
    momentum: f64,
}

impl TryFrom<RawNormSpec> for NormSpec {
    type Error = Error;

    fn try_from(raw: RawNormSpec) -> Result<Self> {
        NormSpec::new(raw.scheme, raw.averaging, raw.statistic)?
            .with_epsilon(raw.epsilon)?
            .with_momentum(raw.momentum)
    }
}

impl From<NormSpec> for RawNormSpec {
    fn from(s: NormSpec) -> Self {
        RawNormSpec {
            scheme: s.scheme,
            averaging: s.averaging,
            statistic: s.statistic,
            epsilon: s.epsilon,
            momentum: s.momentum,
        }
    }
}

impl NormSpec {
    pub fn new(scheme: NormScheme, averaging: Averaging, statistic: Statistic) -> Result<Self> {
        if scheme == NormScheme::NonAdaptive && averaging == Averaging::Instance {
            return Err(Error::Config(EXCLUDED_COMBINATION.to_string()));
        }
        Ok(Self {
            scheme,
            averaging,
            statistic,
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
        })
    }

    /// Standard batch normalization.
    pub fn batch_norm() -> Self {
        Self::new(NormScheme::NonAdaptive, Averaging::Batch, Statistic::MeanStd).unwrap()
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(config_err!("epsilon must be positive, got {epsilon}"));
        }
        self.epsilon = epsilon;
        Ok(self)
    }

    pub fn with_momentum(mut self, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(config_err!("momentum must lie in (0, 1], got {momentum}"));
        }
        self.momentum = momentum;
        Ok(self)
    }

    pub fn scheme(&self) -> NormScheme {
        self.scheme
    }

    pub fn averaging(&self) -> Averaging {
        self.averaging
    }

    pub fn statistic(&self) -> Statistic {
        self.statistic
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Same training-time behaviour, different inference scheme. Fails for the
    /// excluded combination.
    pub fn with_scheme(self, scheme: NormScheme) -> Result<Self> {
        let mut s = NormSpec::new(scheme, self.averaging, self.statistic)?;
        s.epsilon = self.epsilon;
        s.momentum = self.momentum;
        Ok(s)
    }

    /// Short identifier such as `adaptive-instance-mean_std`.
    pub fn label(&self) -> String {
        format!("{}-{}-{}", self.scheme, self.averaging, self.statistic)
    }
}

impl fmt::Display for NormSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// The six valid configurations in table order: non-adaptive batch, adaptive
/// instance and adaptive batch, each with mean/std then mean square.
pub fn enumerate_valid_configs() -> Vec<NormSpec> {
    let pairs = [
        (NormScheme::NonAdaptive, Averaging::Batch),
        (NormScheme::Adaptive, Averaging::Instance),
        (NormScheme::Adaptive, Averaging::Batch),
    ];
    pairs
        .iter()
        .flat_map(|&(scheme, averaging)| {
            [Statistic::MeanStd, Statistic::MeanSquare]
                .into_iter()
                .map(move |st| NormSpec::new(scheme, averaging, st).unwrap())
        })
        .collect()
}

/// Axes reduced when computing statistics for a tensor of rank `rank`.
/// The channel axis (1) is never reduced.
pub fn reduction_axes(averaging: Averaging, rank: usize) -> Result<Vec<usize>> {
    if rank < 2 {
        return Err(config_err!(
            "normalization needs (batch, channel, ...) input, got rank {rank}"
        ));
    }
    match averaging {
        Averaging::Batch => Ok(std::iter::once(0).chain(2..rank).collect()),
        Averaging::Instance if rank == 2 => Err(config_err!(
            "instance averaging needs at least one spatial axis; rank-2 input has none"
        )),
        Averaging::Instance => Ok((2..rank).collect()),
    }
}

/// Per-channel statistics: `mean` and either the variance (mean/std) or the
/// mean square. `mean` is unused for the mean-square statistic.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<T> {
    pub mean: Vec<T>,
    pub sq: Vec<T>,
}

impl<T: Scalar> ChannelStats<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            sq: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.sq.len()
    }
}

/// Running moments maintained for batch averaging.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    /// Running variance (mean/std) or running mean square.
    pub sq: Vec<T>,
    pub updates_seen: u64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            sq: vec![T::one(); channels],
            updates_seen: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.sq.len()
    }

    pub fn as_stats(&self) -> ChannelStats<T> {
        ChannelStats {
            mean: self.mean.clone(),
            sq: self.sq.clone(),
        }
    }

    pub fn update(&mut self, batch: &ChannelStats<T>, statistic: Statistic, momentum: f64) {
        let m = T::from_f64_lossy(momentum);
        let keep = T::one() - m;
        if statistic == Statistic::MeanStd {
            for (r, &s) in self.mean.iter_mut().zip(&batch.mean) {
                *r = keep * *r + m * s;
            }
        }
        for (r, &s) in self.sq.iter_mut().zip(&batch.sq) {
            *r = keep * *r + m * s;
        }
        self.updates_seen += 1;
    }
}

/// Learned affine parameters plus running buffers of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running: RunningStats<T>,
}

impl<T: Scalar> NormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running: RunningStats::new(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Where a forward pass takes its statistics from.
#[derive(Clone, Copy, Debug)]
pub enum StatsSource<'a, T> {
    /// Recompute from the input with the given averaging.
    Compute(Averaging),
    /// Use externally supplied per-channel statistics (treated as constants).
    Fixed(&'a ChannelStats<T>),
}

/// Everything backward needs from a forward call.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    shape: Vec<usize>,
    statistic: Statistic,
    /// `None` when statistics were fixed.
    averaging: Option<Averaging>,
    /// Normalized input before the affine transform.
    xhat: Vec<T>,
    /// Statistics per group (channels for batch, (b, c) pairs for instance).
    stats: ChannelStats<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
}

impl<T: Scalar> NormCache<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn statistic(&self) -> Statistic {
        self.statistic
    }

    pub fn xhat(&self) -> &[T] {
        &self.xhat
    }

    /// Statistics that were used, one entry per normalization group.
    pub fn stats(&self) -> &ChannelStats<T> {
        &self.stats
    }

    pub fn averaging(&self) -> Option<Averaging> {
        self.averaging
    }
}

/// `(batch, channels, positions)` view of a tensor of rank ≥ 2.
fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(config_err!(
            "normalization needs (batch, channel, ...) input, got shape {shape:?}"
        ));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn group_of(averaging: Option<Averaging>, b: usize, c: usize, channels: usize) -> usize {
    match averaging {
        Some(Averaging::Instance) => b * channels + c,
        _ => c,
    }
}

fn compute_stats<T: Scalar>(
    x: &[T],
    (nb, nc, nl): (usize, usize, usize),
    averaging: Averaging,
    statistic: Statistic,
) -> ChannelStats<T> {
    let groups = match averaging {
        Averaging::Batch => nc,
        Averaging::Instance => nb * nc,
    };
    let count = match averaging {
        Averaging::Batch => nb * nl,
        Averaging::Instance => nl,
    };
    let n = T::from_usize_lossy(count);
    let mut sum = vec![T::zero(); groups];
    for b in 0..nb {
        for c in 0..nc {
            let g = group_of(Some(averaging), b, c, nc);
            let row = &x[(b * nc + c) * nl..(b * nc + c + 1) * nl];
            sum[g] = row.iter().fold(sum[g], |acc, &v| acc + v);
        }
    }
    match statistic {
        Statistic::MeanStd => {
            let mean: Vec<T> = sum.iter().map(|&s| s / n).collect();
            let mut dev = vec![T::zero(); groups];
            for b in 0..nb {
                for c in 0..nc {
                    let g = group_of(Some(averaging), b, c, nc);
                    let mu = mean[g];
                    let row = &x[(b * nc + c) * nl..(b * nc + c + 1) * nl];
                    dev[g] = row.iter().fold(dev[g], |acc, &v| {
                        let d = v - mu;
                        acc + d * d
                    });
                }
            }
            ChannelStats {
                mean,
                sq: dev.into_iter().map(|d| d / n).collect(),
            }
        }
        Statistic::MeanSquare => {
            let mut sq = vec![T::zero(); groups];
            for b in 0..nb {
                for c in 0..nc {
                    let g = group_of(Some(averaging), b, c, nc);
                    let row = &x[(b * nc + c) * nl..(b * nc + c + 1) * nl];
                    sq[g] = row.iter().fold(sq[g], |acc, &v| acc + v * v);
                }
            }
            ChannelStats {
                mean: sum.iter().map(|&s| s / n).collect(),
                sq: sq.into_iter().map(|s| s / n).collect(),
            }
        }
    }
}

/// Normalizes `x` and applies the per-channel affine transform.
///
/// `epsilon` may be zero here (useful for exact-arithmetic checks); validated
/// specs always carry a positive value.
pub fn normalize<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    statistic: Statistic,
    epsilon: f64,
    source: StatsSource<'_, T>,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let dims = layout(x.shape())?;
    let (nb, nc, nl) = dims;
    if gamma.len() != nc || beta.len() != nc {
        return Err(config_err!(
            "input has {nc} channels but the layer has {}",
            gamma.len()
        ));
    }
    let (stats, averaging) = match source {
        StatsSource::Compute(avg) => {
            reduction_axes(avg, x.rank())?;
            if avg == Averaging::Batch && nb * nl == 1 {
                log::warn!("degenerate batch statistics: a single element per channel");
            }
            (compute_stats(x.data(), dims, avg, statistic), Some(avg))
        }
        StatsSource::Fixed(s) => {
            if s.channels() != nc || s.mean.len() != nc {
                return Err(config_err!(
                    "fixed statistics cover {} channels, input has {nc}",
                    s.channels()
                ));
            }
            (s.clone(), None)
        }
    };
    let eps = T::from_f64_lossy(epsilon);
    let inv_std: Vec<T> = stats
        .sq
        .iter()
        .map(|&s| T::one() / (s + eps).sqrt())
        .collect();
    let xd = x.data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    for b in 0..nb {
        for c in 0..nc {
            let g = group_of(averaging, b, c, nc);
            let shift = match statistic {
                Statistic::MeanStd => stats.mean[g],
                Statistic::MeanSquare => T::zero(),
            };
            let inv = inv_std[g];
            let (ga, be) = (gamma[c], beta[c]);
            let range = (b * nc + c) * nl..(b * nc + c + 1) * nl;
            for ((h, o), &v) in xhat[range.clone()]
                .iter_mut()
                .zip(&mut y[range.clone()])
                .zip(&xd[range])
            {
                *h = (v - shift) * inv;
                *o = ga * *h + be;
            }
        }
    }
    let y = Tensor::new(x.shape().to_vec(), y)?;
    Ok((
        y,
        NormCache {
            shape: x.shape().to_vec(),
            statistic,
            averaging,
            xhat,
            stats,
            inv_std,
            gamma: gamma.to_vec(),
        },
    ))
}

/// Exact reverse-mode derivatives of [`normalize`], including the paths
/// through the recomputed statistics. Returns `(dx, dgamma, dbeta)`.
pub fn normalize_backward<T: Scalar>(
    dy: &Tensor<T>,
    cache: &NormCache<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    if dy.shape() != cache.shape.as_slice() {
        return Err(Error::Usage(format!(
            "gradient shape {:?} does not match cached forward shape {:?}",
            dy.shape(),
            cache.shape
        )));
    }
    let (nb, nc, nl) = layout(&cache.shape)?;
    let dyd = dy.data();
    let xhat = &cache.xhat;
    let mut dgamma = vec![T::zero(); nc];
    let mut dbeta = vec![T::zero(); nc];
    for b in 0..nb {
        for c in 0..nc {
            let range = (b * nc + c) * nl..(b * nc + c + 1) * nl;
            for (&g, &h) in dyd[range.clone()].iter().zip(&xhat[range]) {
                dgamma[c] = dgamma[c] + g * h;
                dbeta[c] = dbeta[c] + g;
            }
        }
    }

    let mut dx = vec![T::zero(); dyd.len()];
    let groups = cache.inv_std.len();
    // Per-group sums of dxhat and dxhat * xhat, with dxhat = dy * gamma.
    let mut sum_d = vec![T::zero(); groups];
    let mut sum_dh = vec![T::zero(); groups];
    if cache.averaging.is_some() {
        for b in 0..nb {
            for c in 0..nc {
                let g = group_of(cache.averaging, b, c, nc);
                let ga = cache.gamma[c];
                let range = (b * nc + c) * nl..(b * nc + c + 1) * nl;
                for (&d, &h) in dyd[range.clone()].iter().zip(&xhat[range]) {
                    let dh = d * ga;
                    sum_d[g] = sum_d[g] + dh;
                    sum_dh[g] = sum_dh[g] + dh * h;
                }
            }
        }
    }
    let count = match cache.averaging {
        Some(Averaging::Batch) => nb * nl,
        Some(Averaging::Instance) => nl,
        None => 1,
    };
    let n = T::from_usize_lossy(count);
    for b in 0..nb {
        for c in 0..nc {
            let g = group_of(cache.averaging, b, c, nc);
            let ga = cache.gamma[c];
            let inv = cache.inv_std[g];
            let range = (b * nc + c) * nl..(b * nc + c + 1) * nl;
            let (mean_d, mean_dh) = match (cache.averaging, cache.statistic) {
                (None, _) => (T::zero(), T::zero()),
                (Some(_), Statistic::MeanStd) => (sum_d[g] / n, sum_dh[g] / n),
                (Some(_), Statistic::MeanSquare) => (T::zero(), sum_dh[g] / n),
            };
            for ((o, &d), &h) in dx[range.clone()]
                .iter_mut()
                .zip(&dyd[range.clone()])
                .zip(&xhat[range])
            {
                *o = inv * (d * ga - mean_d - h * mean_dh);
            }
        }
    }
    Ok((Tensor::new(cache.shape.clone(), dx)?, dgamma, dbeta))
}

/// Training-mode forward: statistics from this input; running buffers move
/// toward the batch statistics when averaging is batch-based.
pub fn norm_forward_train<T: Scalar>(
    x: &Tensor<T>,
    spec: &NormSpec,
    state: &mut NormState<T>,
) -> Result<(Tensor<T>, NormCache<T>)> {
    check_channels(x, state)?;
    let (y, cache) = normalize(
        x,
        &state.gamma,
        &state.beta,
        spec.statistic,
        spec.epsilon,
        StatsSource::Compute(spec.averaging),
    )?;
    if spec.averaging == Averaging::Batch {
        state
            .running
            .update(&cache.stats, spec.statistic, spec.momentum);
    } else {
        state.running.updates_seen += 1;
    }
    Ok((y, cache))
}

/// Inference-mode forward. Never mutates `state`.
pub fn norm_forward_eval<T: Scalar>(
    x: &Tensor<T>,
    spec: &NormSpec,
    state: &NormState<T>,
) -> Result<Tensor<T>> {
    check_channels(x, state)?;
    let fixed;
    let source = match spec.scheme {
        NormScheme::NonAdaptive => {
            if state.running.updates_seen == 0 {
                return Err(Error::State("uninitialized running statistics".into()));
            }
            fixed = state.running.as_stats();
            StatsSource::Fixed(&fixed)
        }
        NormScheme::Adaptive => StatsSource::Compute(spec.averaging),
    };
    let (y, _) = normalize(
        x,
        &state.gamma,
        &state.beta,
        spec.statistic,
        spec.epsilon,
        source,
    )?;
    Ok(y)
}

/// Backward of [`norm_forward_train`]: `(grad_x, grad_gamma, grad_beta)`.
pub fn norm_backward<T: Scalar>(
    grad_y: &Tensor<T>,
    cache: &NormCache<T>,
    spec: &NormSpec,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    if cache.statistic != spec.statistic
        || cache.averaging.is_some_and(|a| a != spec.averaging)
    {
        return Err(Error::Usage(format!(
            "cache was produced by a different normalization than {spec}"
        )));
    }
    normalize_backward(grad_y, cache)
}

fn check_channels<T: Scalar>(x: &Tensor<T>, state: &NormState<T>) -> Result<()> {
    let (_, nc, _) = layout(x.shape())?;
    if nc != state.channels() {
        return Err(config_err!(
            "input has {nc} channels but the layer has {}",
            state.channels()
        ));
    }
    Ok(())
}
