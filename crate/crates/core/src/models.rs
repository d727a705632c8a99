//! Network architectures whose every normalization slot follows one
//! [`NormSpec`]: the multichannel sensor DenseNet, a small image CNN, and the
//! decoders used for invariance probes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::normalization::{Averaging, ChannelStats, NormSpec, RunningStats, StatsSource};
use crate::tape::{PaddingMode, Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SensorSeq,
    Image,
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    pub per_channel_blocks: usize,
    pub merged_blocks: usize,
    pub convs_per_block: usize,
    pub per_channel_growth: usize,
    pub merged_growth: usize,
    pub kernel_size: usize,
    pub padding: PaddingMode,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            per_channel_blocks: 5,
            merged_blocks: 6,
            convs_per_block: 4,
            per_channel_growth: 32,
            merged_growth: 128,
            kernel_size: 3,
            padding: PaddingMode::Zero,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageConfig {
    pub stage_widths: Vec<usize>,
    pub convs_per_stage: usize,
    pub pool_factor: usize,
    /// Input height and width.
    pub input_size: [usize; 2],
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            stage_widths: vec![16, 32, 64],
            convs_per_stage: 1,
            pool_factor: 2,
            input_size: [28, 28],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Shape of one feature sample (without the batch axis).
    pub feature_shape: Vec<usize>,
    pub conv_widths: Vec<usize>,
    /// Hidden fully connected widths; the output layer is implicit.
    pub fc_widths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    pub input_channels: usize,
    pub num_classes: usize,
    pub norm: NormSpec,
    #[serde(default)]
    pub sensor: SensorConfig,
    #[serde(default)]
    pub image: ImageConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn sensor(input_channels: usize, num_classes: usize, norm: NormSpec) -> Self {
        Self {
            task: Task::SensorSeq,
            input_channels,
            num_classes,
            norm,
            sensor: SensorConfig::default(),
            image: ImageConfig::default(),
            decoder: DecoderConfig::default(),
            seed: 0,
        }
    }

    pub fn image(input_channels: usize, num_classes: usize, norm: NormSpec) -> Self {
        Self {
            task: Task::Image,
            ..Self::sensor(input_channels, num_classes, norm)
        }
    }

    /// Canonical text form (all fields, fixed order).
    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err!("invalid model config: {e}"))
    }
}

/// How normalization layers obtain statistics during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Statistics from the current batch; running buffers updated.
    Train,
    /// Stored running statistics.
    EvalNonAdaptive,
    /// Statistics recomputed from the data being evaluated, with the
    /// averaging the model was trained with.
    EvalAdaptive,
}

/// Lower-level statistics policy, also used by the diagnostics.
#[derive(Clone, Copy, Debug)]
pub enum StatsPolicy<'a, T> {
    Mode(Mode),
    /// Per-layer fixed statistics, indexed like [`Model::norm_layers`].
    Fixed(&'a [ChannelStats<T>]),
    /// Recompute pooled over batch and positions regardless of the
    /// model's averaging.
    BatchPooled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer<T> {
    pub name: String,
    gamma: usize,
    beta: usize,
    pub running: RunningStats<T>,
}

impl<T> NormLayer<T> {
    /// Parameter indices of the affine scale and shift.
    pub fn affine_params(&self) -> (usize, usize) {
        (self.gamma, self.beta)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvUnit {
    weight: usize,
    bias: usize,
    norm: usize,
    pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct DenseBlock {
    units: Vec<ConvUnit>,
}

#[derive(Clone, Debug, PartialEq)]
struct LinearUnit {
    weight: usize,
    bias: usize,
    norm: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
enum Arch {
    Sensor {
        per_channel: Vec<Vec<DenseBlock>>,
        merged: Vec<DenseBlock>,
        head_weight: usize,
        head_bias: usize,
    },
    Image {
        stages: Vec<Vec<ConvUnit>>,
        head: LinearUnit,
    },
    Decoder {
        convs: Vec<ConvUnit>,
        hidden: Vec<LinearUnit>,
        head: LinearUnit,
    },
}

/// Output of a forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub input: Var,
    pub logits: Var,
    /// Tape leaves holding each parameter, indexed like [`Model::params`].
    pub params: Vec<Var>,
    /// Output of every normalization layer, indexed like
    /// [`Model::norm_layers`].
    pub norm_outputs: Vec<Var>,
    /// Named post-activation outputs, in network order.
    pub captures: Vec<(String, Var)>,
}

impl Trace {
    /// Looks up a capture; `"penultimate"` names the features feeding the
    /// classifier.
    pub fn capture(&self, name: &str) -> Option<Var> {
        if name == PENULTIMATE {
            return self.captures.last().map(|(_, v)| *v);
        }
        self.captures.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

pub const PENULTIMATE: &str = "penultimate";

/// An ordered layer graph with checkpointable parameters and running buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    norms: Vec<NormLayer<T>>,
    arch: Arch,
}

struct Builder<T> {
    params: Vec<Param<T>>,
    norms: Vec<NormLayer<T>>,
    rng: ChaCha20Rng,
}

impl<T: Scalar> Builder<T> {
    fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            norms: Vec::new(),
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    fn param(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    /// He fan-in initialization.
    fn he(&mut self, name: String, shape: &[usize]) -> usize {
        let fan_in: usize = shape[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let w = Tensor::from_fn(shape, |_| {
            T::from_f64_lossy(std * rng.sample::<f64, _>(StandardNormal))
        });
        self.param(name, w)
    }

    fn norm(&mut self, name: String, channels: usize) -> usize {
        let gamma = self.param(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = self.param(format!("{name}.beta"), Tensor::zeros(&[channels]));
        self.norms.push(NormLayer {
            name,
            gamma,
            beta,
            running: RunningStats::new(channels),
        });
        self.norms.len() - 1
    }

    fn conv_unit(&mut self, name: &str, cin: usize, cout: usize, kernel: &[usize]) -> ConvUnit {
        let mut shape = vec![cout, cin];
        shape.extend_from_slice(kernel);
        let weight = self.he(format!("{name}.conv.weight"), &shape);
        let bias = self.param(format!("{name}.conv.bias"), Tensor::zeros(&[cout]));
        let norm = self.norm(format!("{name}.norm"), cout);
        ConvUnit {
            weight,
            bias,
            norm,
            pad: kernel[0] / 2,
        }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, normed: bool) -> LinearUnit {
        let weight = self.he(format!("{name}.weight"), &[dout, din]);
        let bias = self.param(format!("{name}.bias"), Tensor::zeros(&[dout]));
        let norm = normed.then(|| self.norm(format!("{name}.norm"), dout));
        LinearUnit { weight, bias, norm }
    }

    fn dense_block(
        &mut self,
        name: &str,
        cin: usize,
        growth: usize,
        convs: usize,
        kernel: usize,
    ) -> DenseBlock {
        let units = (0..convs)
            .map(|j| self.conv_unit(&format!("{name}.u{j}"), cin + j * growth, growth, &[kernel]))
            .collect();
        DenseBlock { units }
    }
}

fn check_positive(fields: &[(&str, usize)]) -> Result<()> {
    for (name, v) in fields {
        if *v == 0 {
            return Err(config_err!("{name} must be at least 1"));
        }
    }
    Ok(())
}

/// Sensor DenseNet: every input channel passes through its own stack of
/// dense blocks, the per-channel embeddings are concatenated, further dense
/// blocks follow, and a 1×1 convolution yields per-timestep class logits.
///
/// Within a dense block each convolution sees the concatenation of the block
/// input and all earlier outputs of the block; the block emits its last
/// convolution's output.
pub fn build_sensor_densenet<T: Scalar>(config: &ModelConfig) -> Result<Model<T>> {
    if config.task != Task::SensorSeq {
        return Err(config_err!("sensor DenseNet needs task sensor_seq"));
    }
    let s = &config.sensor;
    check_positive(&[
        ("input_channels", config.input_channels),
        ("per_channel_blocks", s.per_channel_blocks),
        ("merged_blocks", s.merged_blocks),
        ("convs_per_block", s.convs_per_block),
        ("per_channel_growth", s.per_channel_growth),
        ("merged_growth", s.merged_growth),
        ("kernel_size", s.kernel_size),
    ])?;
    if config.num_classes < 2 {
        return Err(config_err!("num_classes must be at least 2"));
    }
    if s.kernel_size.is_multiple_of(2) {
        return Err(config_err!(
            "kernel_size must be odd so padding preserves length, got {}",
            s.kernel_size
        ));
    }
    let mut b = Builder::<T>::new(config.seed);
    let per_channel = (0..config.input_channels)
        .map(|c| {
            (0..s.per_channel_blocks)
                .map(|k| {
                    let cin = if k == 0 { 1 } else { s.per_channel_growth };
                    b.dense_block(
                        &format!("pc{c}.b{k}"),
                        cin,
                        s.per_channel_growth,
                        s.convs_per_block,
                        s.kernel_size,
                    )
                })
                .collect()
        })
        .collect();
    let merged = (0..s.merged_blocks)
        .map(|k| {
            let cin = if k == 0 {
                config.input_channels * s.per_channel_growth
            } else {
                s.merged_growth
            };
            b.dense_block(
                &format!("merged.b{k}"),
                cin,
                s.merged_growth,
                s.convs_per_block,
                s.kernel_size,
            )
        })
        .collect();
    let head_weight = b.he("head.weight".into(), &[config.num_classes, s.merged_growth, 1]);
    let head_bias = b.param("head.bias".into(), Tensor::zeros(&[config.num_classes]));
    Ok(Model {
        config: config.clone(),
        params: b.params,
        norms: b.norms,
        arch: Arch::Sensor {
            per_channel,
            merged,
            head_weight,
            head_bias,
        },
    })
}

/// Spatial size after each stage of the image CNN.
pub fn image_stage_sizes(image: &ImageConfig) -> Result<Vec<[usize; 2]>> {
    let mut size = image.input_size;
    let mut out = Vec::with_capacity(image.stage_widths.len());
    for (i, _) in image.stage_widths.iter().enumerate() {
        size = [size[0] / image.pool_factor, size[1] / image.pool_factor];
        if size[0] == 0 || size[1] == 0 {
            return Err(config_err!(
                "stage {i} pooling collapses input {:?} below 1 pixel",
                image.input_size
            ));
        }
        out.push(size);
    }
    Ok(out)
}

/// Image CNN: stages of (conv → norm → ReLU) followed by max pooling, then
/// global average pooling and a linear classifier.
pub fn build_image_cnn<T: Scalar>(config: &ModelConfig) -> Result<Model<T>> {
    if config.task != Task::Image {
        return Err(config_err!("image CNN needs task image"));
    }
    let im = &config.image;
    check_positive(&[
        ("input_channels", config.input_channels),
        ("convs_per_stage", im.convs_per_stage),
        ("pool_factor", im.pool_factor),
        ("stages", im.stage_widths.len()),
    ])?;
    if im.stage_widths.contains(&0) {
        return Err(config_err!("stage widths must be positive"));
    }
    if config.num_classes < 2 {
        return Err(config_err!("num_classes must be at least 2"));
    }
    image_stage_sizes(im)?;
    let mut b = Builder::<T>::new(config.seed);
    let mut cin = config.input_channels;
    let mut stages = Vec::new();
    for (i, &width) in im.stage_widths.iter().enumerate() {
        let mut units = Vec::new();
        for j in 0..im.convs_per_stage {
            units.push(b.conv_unit(&format!("s{i}.u{j}"), cin, width, &[3, 3]));
            cin = width;
        }
        stages.push(units);
    }
    let head = b.linear("head", cin, config.num_classes, false);
    Ok(Model {
        config: config.clone(),
        params: b.params,
        norms: b.norms,
        arch: Arch::Image { stages, head },
    })
}

/// Decoder over feature samples of shape `[C, T]`, `[C, H, W]` or `[D]`:
/// optional convolutions, global pooling, hidden linear layers, classifier.
/// Normalization is always non-adaptive batch mean/std.
pub fn build_decoder_model<T: Scalar>(config: &ModelConfig) -> Result<Model<T>> {
    if config.task != Task::Decoder {
        return Err(config_err!("decoder needs task decoder"));
    }
    let d = &config.decoder;
    let rank = d.feature_shape.len();
    if !(1..=3).contains(&rank) || d.feature_shape.contains(&0) {
        return Err(config_err!(
            "decoder features must have 1 to 3 positive dimensions, got {:?}",
            d.feature_shape
        ));
    }
    if rank == 1 && !d.conv_widths.is_empty() {
        return Err(config_err!("flat features cannot feed convolutions"));
    }
    if config.num_classes < 2 {
        return Err(config_err!("num_classes must be at least 2"));
    }
    if config.input_channels != d.feature_shape[0] {
        return Err(config_err!(
            "input_channels {} disagrees with feature shape {:?}",
            config.input_channels,
            d.feature_shape
        ));
    }
    let mut b = Builder::<T>::new(config.seed);
    let kernel: Vec<usize> = vec![3; rank.saturating_sub(1)];
    let mut cin = d.feature_shape[0];
    let mut convs = Vec::new();
    for (j, &w) in d.conv_widths.iter().enumerate() {
        convs.push(b.conv_unit(&format!("conv{j}"), cin, w, &kernel));
        cin = w;
    }
    // Without convolutions, spatial features are pooled directly.
    let mut hidden = Vec::new();
    for (j, &w) in d.fc_widths.iter().enumerate() {
        hidden.push(b.linear(&format!("fc{j}"), cin, w, true));
        cin = w;
    }
    let head = b.linear("head", cin, config.num_classes, false);
    Ok(Model {
        config: config.clone(),
        params: b.params,
        norms: b.norms,
        arch: Arch::Decoder {
            convs,
            hidden,
            head,
        },
    })
}

/// Builds whichever architecture `config.task` names.
pub fn build_model<T: Scalar>(config: &ModelConfig) -> Result<Model<T>> {
    match config.task {
        Task::SensorSeq => build_sensor_densenet(config),
        Task::Image => build_image_cnn(config),
        Task::Decoder => build_decoder_model(config),
    }
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn norm_layers(&self) -> &[NormLayer<T>] {
        &self.norms
    }

    pub fn norm_layers_mut(&mut self) -> &mut [NormLayer<T>] {
        &mut self.norms
    }

    pub fn norm_spec(&self) -> &NormSpec {
        &self.config.norm
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Dense blocks traversed from any input channel to the output.
    pub fn dense_blocks_on_path(&self) -> usize {
        match &self.arch {
            Arch::Sensor {
                per_channel,
                merged,
                ..
            } => per_channel.first().map_or(0, |p| p.len()) + merged.len(),
            _ => 0,
        }
    }

    /// Names accepted by [`Trace::capture`] for this architecture.
    pub fn capture_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        match &self.arch {
            Arch::Sensor {
                per_channel,
                merged,
                ..
            } => {
                for (c, blocks) in per_channel.iter().enumerate() {
                    names.extend((0..blocks.len()).map(|k| format!("pc{c}.b{k}")));
                }
                names.extend((0..merged.len()).map(|k| format!("merged.b{k}")));
            }
            Arch::Image { stages, .. } => {
                names.extend((0..stages.len()).map(|i| format!("s{i}")));
                names.push("pooled".into());
            }
            Arch::Decoder { convs, hidden, .. } => {
                names.extend((0..convs.len()).map(|j| format!("conv{j}")));
                if !convs.is_empty() || self.config.decoder.feature_shape.len() > 1 {
                    names.push("pooled".into());
                }
                names.extend((0..hidden.len()).map(|j| format!("fc{j}")));
            }
        }
        names
    }

    /// Expected input shape for a batch of `batch` samples of spatial extent
    /// `spatial` (ignored for images and decoders).
    pub fn input_shape(&self, batch: usize, spatial: &[usize]) -> Vec<usize> {
        let mut s = vec![batch];
        match self.config.task {
            Task::SensorSeq => {
                s.push(self.config.input_channels);
                s.extend_from_slice(spatial);
            }
            Task::Image => {
                s.push(self.config.input_channels);
                s.extend_from_slice(&self.config.image.input_size);
            }
            Task::Decoder => s.extend_from_slice(&self.config.decoder.feature_shape),
        }
        s
    }

    /// Training forward pass; running buffers move toward this batch's
    /// statistics.
    pub fn forward_train(&mut self, tape: &mut Tape<T>, x: Tensor<T>) -> Result<Trace> {
        let trace = self.run(tape, x, StatsPolicy::Mode(Mode::Train))?;
        let spec = *self.norm_spec();
        for (layer, &out) in self.norms.iter_mut().zip(&trace.norm_outputs) {
            let cache = tape.norm_cache(out).expect("normalization node");
            if spec.averaging() == Averaging::Batch {
                layer
                    .running
                    .update(cache.stats(), spec.statistic(), spec.momentum());
            } else {
                layer.running.updates_seen += 1;
            }
        }
        Ok(trace)
    }

    /// Evaluation forward pass; never mutates the model.
    pub fn forward(&self, tape: &mut Tape<T>, x: Tensor<T>, mode: Mode) -> Result<Trace> {
        if mode == Mode::Train {
            return Err(Error::Usage("use forward_train for training".into()));
        }
        self.run(tape, x, StatsPolicy::Mode(mode))
    }

    /// Evaluation forward pass with an explicit statistics policy.
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        x: Tensor<T>,
        policy: StatsPolicy<'_, T>,
    ) -> Result<Trace> {
        if matches!(policy, StatsPolicy::Mode(Mode::Train)) {
            return Err(Error::Usage("use forward_train for training".into()));
        }
        if let StatsPolicy::Fixed(stats) = policy {
            if stats.len() != self.norms.len() {
                return Err(config_err!(
                    "{} fixed statistics supplied for {} normalization layers",
                    stats.len(),
                    self.norms.len()
                ));
            }
        }
        self.run(tape, x, policy)
    }

    /// Logits for `x` under an evaluation mode.
    pub fn predict(&self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let trace = self.forward(&mut tape, x, mode)?;
        Ok(tape.value(trace.logits).clone())
    }

    fn run(&self, tape: &mut Tape<T>, x: Tensor<T>, policy: StatsPolicy<'_, T>) -> Result<Trace> {
        let expected_rank = match self.config.task {
            Task::SensorSeq => 3,
            Task::Image => 4,
            Task::Decoder => self.config.decoder.feature_shape.len() + 1,
        };
        if x.rank() != expected_rank || x.shape()[1] != self.config.input_channels {
            return Err(config_err!(
                "input shape {:?} does not fit a {:?} model with {} input channels",
                x.shape(),
                self.config.task,
                self.config.input_channels
            ));
        }
        if let StatsPolicy::Mode(Mode::EvalNonAdaptive) = policy {
            if self.config.norm.averaging() == Averaging::Instance {
                return Err(Error::State(
                    "model trained with instance averaging has no running statistics".into(),
                ));
            }
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        let mut ctx = Ctx {
            model: self,
            policy,
            params,
            norm_outputs: vec![None; self.norms.len()],
            captures: Vec::new(),
        };
        let input = tape.leaf(x);
        let logits = match &self.arch {
            Arch::Sensor {
                per_channel,
                merged,
                head_weight,
                head_bias,
            } => {
                let mut embeddings = Vec::with_capacity(per_channel.len());
                for (c, blocks) in per_channel.iter().enumerate() {
                    let mut h = tape.slice_channels(input, c, 1)?;
                    for (k, block) in blocks.iter().enumerate() {
                        h = ctx.dense_block(tape, h, block)?;
                        ctx.captures.push((format!("pc{c}.b{k}"), h));
                    }
                    embeddings.push(h);
                }
                let mut h = tape.concat_channels(&embeddings)?;
                for (k, block) in merged.iter().enumerate() {
                    h = ctx.dense_block(tape, h, block)?;
                    ctx.captures.push((format!("merged.b{k}"), h));
                }
                tape.conv(
                    h,
                    ctx.params[*head_weight],
                    ctx.params[*head_bias],
                    &[1],
                    &[0],
                    PaddingMode::Zero,
                )?
            }
            Arch::Image { stages, head } => {
                let mut h = input;
                for (i, units) in stages.iter().enumerate() {
                    for u in units {
                        h = ctx.conv_unit(tape, h, u)?;
                    }
                    h = tape.max_pool(h, self.config.image.pool_factor)?;
                    ctx.captures.push((format!("s{i}"), h));
                }
                let pooled = tape.global_avg_pool(h)?;
                ctx.captures.push(("pooled".into(), pooled));
                ctx.linear(tape, pooled, head)?
            }
            Arch::Decoder {
                convs,
                hidden,
                head,
            } => {
                let mut h = input;
                for (j, u) in convs.iter().enumerate() {
                    h = ctx.conv_unit(tape, h, u)?;
                    ctx.captures.push((format!("conv{j}"), h));
                }
                if tape.value(h).rank() > 2 {
                    h = tape.global_avg_pool(h)?;
                    ctx.captures.push(("pooled".into(), h));
                }
                for (j, u) in hidden.iter().enumerate() {
                    h = ctx.linear(tape, h, u)?;
                    ctx.captures.push((format!("fc{j}"), h));
                }
                ctx.linear(tape, h, head)?
            }
        };
        Ok(Trace {
            input,
            logits,
            params: ctx.params,
            norm_outputs: ctx
                .norm_outputs
                .into_iter()
                .map(|v| v.expect("every normalization layer runs"))
                .collect(),
            captures: ctx.captures,
        })
    }
}

struct Ctx<'m, 'p, T> {
    model: &'m Model<T>,
    policy: StatsPolicy<'p, T>,
    params: Vec<Var>,
    norm_outputs: Vec<Option<Var>>,
    captures: Vec<(String, Var)>,
}

impl<T: Scalar> Ctx<'_, '_, T> {
    fn norm(&mut self, tape: &mut Tape<T>, x: Var, idx: usize) -> Result<Var> {
        let spec = self.model.config.norm;
        let layer = &self.model.norms[idx];
        let running;
        let source = match self.policy {
            StatsPolicy::Mode(Mode::Train) | StatsPolicy::Mode(Mode::EvalAdaptive) => {
                StatsSource::Compute(spec.averaging())
            }
            StatsPolicy::Mode(Mode::EvalNonAdaptive) => {
                if layer.running.updates_seen == 0 {
                    return Err(Error::State(format!(
                        "uninitialized running statistics in {}",
                        layer.name
                    )));
                }
                running = layer.running.as_stats();
                StatsSource::Fixed(&running)
            }
            StatsPolicy::Fixed(stats) => StatsSource::Fixed(&stats[idx]),
            StatsPolicy::BatchPooled => StatsSource::Compute(Averaging::Batch),
        };
        let y = tape.norm(
            x,
            self.params[layer.gamma],
            self.params[layer.beta],
            spec.statistic(),
            spec.epsilon(),
            source,
        )?;
        self.norm_outputs[idx] = Some(y);
        Ok(y)
    }

    fn conv_unit(&mut self, tape: &mut Tape<T>, x: Var, u: &ConvUnit) -> Result<Var> {
        let rank = tape.value(x).rank() - 2;
        let c = tape.conv(
            x,
            self.params[u.weight],
            self.params[u.bias],
            &vec![1; rank],
            &vec![u.pad; rank],
            self.model.config.sensor.padding,
        )?;
        let n = self.norm(tape, c, u.norm)?;
        Ok(tape.relu(n))
    }

    fn dense_block(&mut self, tape: &mut Tape<T>, x: Var, block: &DenseBlock) -> Result<Var> {
        let mut features = vec![x];
        let mut last = x;
        for u in &block.units {
            let input = if features.len() == 1 {
                x
            } else {
                tape.concat_channels(&features)?
            };
            last = self.conv_unit(tape, input, u)?;
            features.push(last);
        }
        Ok(last)
    }

    fn linear(&mut self, tape: &mut Tape<T>, x: Var, u: &LinearUnit) -> Result<Var> {
        let y = tape.linear(x, self.params[u.weight], self.params[u.bias])?;
        match u.norm {
            Some(idx) => {
                let n = self.norm(tape, y, idx)?;
                Ok(tape.relu(n))
            }
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalization::{NormScheme, Statistic};

    fn tiny_sensor(norm: NormSpec) -> ModelConfig {
        let mut c = ModelConfig::sensor(3, 4, norm);
        c.sensor = SensorConfig {
            per_channel_blocks: 1,
            merged_blocks: 1,
            convs_per_block: 2,
            per_channel_growth: 2,
            merged_growth: 4,
            kernel_size: 3,
            padding: PaddingMode::Zero,
        };
        c.seed = 11;
        c
    }

    fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn default_sensor_has_eleven_blocks_on_path() {
        let cfg = ModelConfig::sensor(76, 15, NormSpec::batch_norm());
        let mut small = cfg.clone();
        // Shrink widths so the build stays cheap; block counts are the defaults.
        small.sensor.per_channel_growth = 1;
        small.sensor.merged_growth = 1;
        let m = build_sensor_densenet::<f32>(&small).unwrap();
        assert_eq!(m.dense_blocks_on_path(), 11);
        assert_eq!(cfg.sensor.per_channel_blocks + cfg.sensor.merged_blocks, 11);
    }

    #[test]
    fn sensor_output_keeps_time_axis() {
        let mut cfg = tiny_sensor(NormSpec::batch_norm());
        cfg.num_classes = 5;
        let mut m = build_sensor_densenet::<f64>(&cfg).unwrap();
        let mut tape = Tape::new();
        let tr = m.forward_train(&mut tape, input(&[2, 3, 200], 1)).unwrap();
        assert_eq!(tape.value(tr.logits).shape(), &[2, 5, 200]);
        let pen = tr.capture(PENULTIMATE).unwrap();
        assert_eq!(tape.value(pen).shape(), &[2, 4, 200]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = tiny_sensor(NormSpec::batch_norm());
        let a = build_sensor_densenet::<f32>(&cfg).unwrap();
        let b = build_sensor_densenet::<f32>(&cfg).unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed = 12;
        assert_ne!(a.params(), build_sensor_densenet::<f32>(&other).unwrap().params());
    }

    #[test]
    fn invalid_sensor_configs_rejected() {
        let mut cfg = tiny_sensor(NormSpec::batch_norm());
        cfg.sensor.kernel_size = 4;
        assert!(build_sensor_densenet::<f32>(&cfg).is_err());
        let mut cfg = tiny_sensor(NormSpec::batch_norm());
        cfg.sensor.merged_blocks = 0;
        assert!(build_sensor_densenet::<f32>(&cfg).is_err());
        let cfg = ModelConfig::image(1, 10, NormSpec::batch_norm());
        assert!(build_sensor_densenet::<f32>(&cfg).is_err());
    }

    #[test]
    fn image_cnn_shapes() {
        let cfg = ModelConfig::image(1, 10, NormSpec::batch_norm());
        assert_eq!(
            image_stage_sizes(&cfg.image).unwrap(),
            vec![[14, 14], [7, 7], [3, 3]]
        );
        let mut m = build_image_cnn::<f64>(&cfg).unwrap();
        let mut tape = Tape::new();
        let tr = m.forward_train(&mut tape, input(&[2, 1, 28, 28], 2)).unwrap();
        assert_eq!(tape.value(tr.logits).shape(), &[2, 10]);
        assert_eq!(tape.value(tr.capture("s2").unwrap()).shape(), &[2, 64, 3, 3]);

        let mut collapse = cfg.clone();
        collapse.image.stage_widths = vec![4; 5];
        assert!(build_image_cnn::<f32>(&collapse).is_err());
    }

    #[test]
    fn parameter_count_independent_of_norm() {
        let counts: Vec<usize> = crate::normalization::enumerate_valid_configs()
            .into_iter()
            .map(|s| build_image_cnn::<f32>(&ModelConfig::image(3, 10, s)).unwrap().parameter_count())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn adaptive_eval_matches_train_forward() {
        let spec = NormSpec::new(NormScheme::Adaptive, Averaging::Batch, Statistic::MeanStd).unwrap();
        let mut m = build_sensor_densenet::<f64>(&tiny_sensor(spec)).unwrap();
        let x = input(&[4, 3, 16], 3);
        let eval = m.predict(x.clone(), Mode::EvalAdaptive).unwrap();
        let mut tape = Tape::new();
        let tr = m.forward_train(&mut tape, x).unwrap();
        assert_eq!(&eval, tape.value(tr.logits));
    }

    #[test]
    fn eval_never_mutates() {
        let mut m = build_sensor_densenet::<f64>(&tiny_sensor(NormSpec::batch_norm())).unwrap();
        let mut tape = Tape::new();
        m.forward_train(&mut tape, input(&[4, 3, 16], 4)).unwrap();
        let before = m.clone();
        m.predict(input(&[2, 3, 16], 5), Mode::EvalNonAdaptive).unwrap();
        m.predict(input(&[2, 3, 16], 5), Mode::EvalAdaptive).unwrap();
        assert_eq!(before, m);
    }

    #[test]
    fn non_adaptive_eval_is_permutation_equivariant() {
        let mut m = build_sensor_densenet::<f64>(&tiny_sensor(NormSpec::batch_norm())).unwrap();
        let mut tape = Tape::new();
        m.forward_train(&mut tape, input(&[4, 3, 16], 6)).unwrap();
        let x = input(&[3, 3, 16], 7);
        let per = 3 * 16;
        let mut swapped = x.clone();
        swapped.data_mut()[..per].copy_from_slice(&x.data()[2 * per..]);
        swapped.data_mut()[2 * per..].copy_from_slice(&x.data()[..per]);
        let a = m.predict(x, Mode::EvalNonAdaptive).unwrap();
        let b = m.predict(swapped, Mode::EvalNonAdaptive).unwrap();
        let out = 4 * 16;
        assert_eq!(&a.data()[..out], &b.data()[2 * out..]);
        assert_eq!(&a.data()[out..2 * out], &b.data()[out..2 * out]);
    }

    #[test]
    fn instance_eval_ignores_other_samples() {
        let spec = NormSpec::new(NormScheme::Adaptive, Averaging::Instance, Statistic::MeanStd).unwrap();
        let m = build_sensor_densenet::<f64>(&tiny_sensor(spec)).unwrap();
        let x = input(&[3, 3, 16], 8);
        let single = Tensor::new(vec![1, 3, 16], x.data()[..48].to_vec()).unwrap();
        let all = m.predict(x, Mode::EvalAdaptive).unwrap();
        let one = m.predict(single, Mode::EvalAdaptive).unwrap();
        assert_eq!(&all.data()[..64], one.data());
        assert!(matches!(
            m.predict(input(&[1, 3, 16], 9), Mode::EvalNonAdaptive),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn non_adaptive_requires_training_first() {
        let m = build_sensor_densenet::<f64>(&tiny_sensor(NormSpec::batch_norm())).unwrap();
        assert!(matches!(
            m.predict(input(&[1, 3, 8], 1), Mode::EvalNonAdaptive),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn circular_trunk_is_time_equivariant() {
        let mut cfg = tiny_sensor(NormSpec::batch_norm());
        cfg.sensor.padding = PaddingMode::Circular;
        let mut m = build_sensor_densenet::<f64>(&cfg).unwrap();
        let mut tape = Tape::new();
        m.forward_train(&mut tape, input(&[4, 3, 16], 10)).unwrap();
        let x = input(&[2, 3, 16], 11);
        let shift = 5;
        let mut shifted = x.clone();
        for row in 0..6 {
            for t in 0..16 {
                shifted.data_mut()[row * 16 + (t + shift) % 16] = x.data()[row * 16 + t];
            }
        }
        for mode in [Mode::EvalNonAdaptive, Mode::EvalAdaptive] {
            let mut ta = Tape::new();
            let fa = m.forward(&mut ta, x.clone(), mode).unwrap();
            let mut tb = Tape::new();
            let fb = m.forward(&mut tb, shifted.clone(), mode).unwrap();
            let pa = ta.value(fa.capture(PENULTIMATE).unwrap());
            let pb = tb.value(fb.capture(PENULTIMATE).unwrap());
            for row in 0..pa.len() / 16 {
                for t in 0..16 {
                    let a = pa.data()[row * 16 + t];
                    let b = pb.data()[row * 16 + (t + shift) % 16];
                    assert!((a - b).abs() < 1e-9, "{mode:?} row {row} t {t}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn decoder_shapes() {
        let mut cfg = ModelConfig::sensor(4, 3, NormSpec::batch_norm());
        cfg.task = Task::Decoder;
        cfg.decoder = DecoderConfig {
            feature_shape: vec![4, 10],
            conv_widths: vec![8, 8],
            fc_widths: vec![6],
        };
        let mut m = build_decoder_model::<f64>(&cfg).unwrap();
        let mut tape = Tape::new();
        let tr = m.forward_train(&mut tape, input(&[5, 4, 10], 1)).unwrap();
        assert_eq!(tape.value(tr.logits).shape(), &[5, 3]);
        assert_eq!(m.norm_layers().len(), 3);
    }
}
