//! Datasets whose samples carry an extraneous tag (subject or corruption
//! id) next to the class label, plus the generators, corruptions and file
//! formats that produce them.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Container, Payload, Record, KIND_DATASET};
use crate::error::{config_err, data_err, Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// `[D, T]` samples with one label per timestep.
    Sequence,
    /// `[C, H, W]` samples with one label.
    Image,
    /// Arbitrary feature tensors with one label, used by decoding probes.
    Features,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Generator config echo or source file digest.
    pub source: String,
    /// Set once per-dimension standardization has been applied.
    #[serde(default)]
    pub standardized: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
    pub extraneous: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaggedDataset {
    pub kind: DatasetKind,
    pub sample_shape: Vec<usize>,
    pub samples: Vec<Sample>,
    pub class_count: usize,
    pub extraneous_count: usize,
    pub provenance: Provenance,
}

impl TaggedDataset {
    pub fn new(
        kind: DatasetKind,
        sample_shape: Vec<usize>,
        samples: Vec<Sample>,
        class_count: usize,
        extraneous_count: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        let ds = Self {
            kind,
            sample_shape,
            samples,
            class_count,
            extraneous_count,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let size: usize = self.sample_shape.iter().product();
        let labels = self.labels_per_sample();
        for (i, s) in self.samples.iter().enumerate() {
            if s.data.len() != size || s.labels.len() != labels {
                return Err(data_err!(
                    "sample {i} has {} values and {} labels, expected {size} and {labels}",
                    s.data.len(),
                    s.labels.len()
                ));
            }
            if let Some(&l) = s.labels.iter().find(|&&l| l >= self.class_count) {
                return Err(data_err!("sample {i} label {l} ≥ class count {}", self.class_count));
            }
            if s.extraneous >= self.extraneous_count {
                return Err(data_err!(
                    "sample {i} extraneous id {} ≥ {}",
                    s.extraneous,
                    self.extraneous_count
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels_per_sample(&self) -> usize {
        match self.kind {
            DatasetKind::Sequence => *self.sample_shape.last().unwrap_or(&1),
            _ => 1,
        }
    }

    /// Same metadata, chosen samples.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.empty_like()
        }
    }

    fn empty_like(&self) -> Self {
        Self {
            kind: self.kind,
            sample_shape: self.sample_shape.clone(),
            samples: Vec::new(),
            class_count: self.class_count,
            extraneous_count: self.extraneous_count,
            provenance: self.provenance.clone(),
        }
    }

    /// Sample indices per extraneous id, ascending.
    pub fn groups(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            g.entry(s.extraneous).or_default().push(i);
        }
        g
    }

    /// Stacks samples into `[B, ...sample_shape]` and flattens their labels
    /// sample-major.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        let mut data = Vec::with_capacity(shape.iter().product());
        let mut labels = Vec::with_capacity(indices.len() * self.labels_per_sample());
        for &i in indices {
            let s = &self.samples[i];
            data.extend(s.data.iter().map(|&v| T::from_f64_lossy(v as f64)));
            labels.extend_from_slice(&s.labels);
        }
        (Tensor::new(shape, data).expect("homogeneous samples"), labels)
    }

    /// Most frequent label of a sample (smallest on ties).
    pub fn majority_label(&self, i: usize) -> usize {
        let mut counts = vec![0usize; self.class_count];
        for &l in &self.samples[i].labels {
            counts[l] += 1;
        }
        let best = counts.iter().copied().max().unwrap_or(0);
        counts.iter().position(|&c| c == best).unwrap_or(0)
    }
}

/// Cuts `[D, T_total]` into `[D, win]` windows at offsets 0, stride, …;
/// a trailing remainder shorter than `win` is dropped.
pub fn window_series(
    series: &Tensor<f32>,
    labels: &[usize],
    win: usize,
    stride: usize,
) -> Result<Vec<(Tensor<f32>, Vec<usize>)>> {
    if series.rank() != 2 {
        return Err(data_err!("series must be [D, T], got {:?}", series.shape()));
    }
    let (d, total) = (series.shape()[0], series.shape()[1]);
    if labels.len() != total {
        return Err(data_err!("{} labels for {total} timesteps", labels.len()));
    }
    if win == 0 || stride == 0 {
        return Err(config_err!("window and stride must be positive"));
    }
    if total < win {
        return Err(data_err!("series of length {total} is shorter than window {win}"));
    }
    let count = (total - win) / stride + 1;
    Ok((0..count)
        .map(|k| {
            let start = k * stride;
            let mut data = Vec::with_capacity(d * win);
            for row in series.data().chunks(total) {
                data.extend_from_slice(&row[start..start + win]);
            }
            (
                Tensor::new(vec![d, win], data).unwrap(),
                labels[start..start + win].to_vec(),
            )
        })
        .collect())
}

/// Windows every recording of a sequence dataset.
pub fn window_dataset(ds: &TaggedDataset, win: usize, stride: usize) -> Result<TaggedDataset> {
    if ds.kind != DatasetKind::Sequence {
        return Err(data_err!("windowing needs a sequence dataset"));
    }
    let mut out = ds.empty_like();
    out.sample_shape = vec![ds.sample_shape[0], win];
    for s in &ds.samples {
        let series = Tensor::new(ds.sample_shape.clone(), s.data.clone())?;
        for (w, labels) in window_series(&series, &s.labels, win, stride)? {
            out.samples.push(Sample {
                data: w.into_data(),
                labels,
                extraneous: s.extraneous,
            });
        }
    }
    Ok(out)
}

/// Per-dimension affine transform fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Divisor per dimension; 1 for (near-)constant dimensions.
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &TaggedDataset) -> Result<Self> {
        if ds.kind != DatasetKind::Sequence {
            return Err(data_err!("standardization needs a sequence dataset"));
        }
        if ds.is_empty() {
            return Err(data_err!("cannot fit standardization on an empty dataset"));
        }
        let (d, t) = (ds.sample_shape[0], ds.sample_shape[1]);
        let n = (ds.len() * t) as f64;
        let mut mean = vec![0.0; d];
        for s in &ds.samples {
            for (k, row) in s.data.chunks(t).enumerate() {
                mean[k] += row.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for s in &ds.samples {
            for (k, row) in s.data.chunks(t).enumerate() {
                var[k] += row.iter().map(|&v| (v as f64 - mean[k]).powi(2)).sum::<f64>();
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd < 1e-8 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    /// Applies the transform once; a second application is refused.
    pub fn apply(&self, ds: &mut TaggedDataset) -> Result<()> {
        if ds.provenance.standardized {
            return Err(Error::State("dataset is already standardized".into()));
        }
        if ds.kind != DatasetKind::Sequence || ds.sample_shape[0] != self.mean.len() {
            return Err(data_err!(
                "standardizer for {} dims cannot apply to shape {:?}",
                self.mean.len(),
                ds.sample_shape
            ));
        }
        let t = ds.sample_shape[1];
        for s in &mut ds.samples {
            for (k, row) in s.data.chunks_mut(t).enumerate() {
                for v in row {
                    *v = ((*v as f64 - self.mean[k]) / self.scale[k]) as f32;
                }
            }
        }
        ds.provenance.standardized = true;
        Ok(())
    }
}

/// Fits on `train` and applies to it and every other split.
pub fn standardize_per_dim(
    train: &mut TaggedDataset,
    others: &mut [&mut TaggedDataset],
) -> Result<Standardizer> {
    let st = Standardizer::fit(train)?;
    st.apply(train)?;
    for ds in others {
        st.apply(ds)?;
    }
    Ok(st)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSensorConfig {
    pub classes: usize,
    pub subjects: usize,
    pub channels: usize,
    pub steps_per_recording: usize,
    /// Recordings per (subject, class) pair; each starts in that class.
    pub recordings_per_pair: usize,
    pub severity: f64,
    /// Window length the segment-length distribution is tied to.
    pub window: usize,
    /// Frobenius bound on the mixing perturbation (bounds its spectral norm).
    pub mixing_bound: f64,
    pub seed: u64,
}

impl Default for SyntheticSensorConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            subjects: 8,
            channels: 6,
            steps_per_recording: 640,
            recordings_per_pair: 2,
            severity: 0.8,
            window: 64,
            mixing_bound: 0.6,
            seed: 0,
        }
    }
}

/// One subject's deterministic distortion of the clean class signals.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectModel {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
    /// Row-major `D × D`.
    pub mixing: Vec<f64>,
    pub lag: usize,
    pub noise: f64,
}

impl SubjectModel {
    pub fn draw(subject: usize, channels: usize, severity: f64, bound: f64, seed: u64) -> Self {
        let mut rng = stream(seed, Purpose::Subject, subject as u64);
        let s = severity;
        let mut normal = || rng.sample::<f64, _>(StandardNormal);
        let gain = (0..channels).map(|_| (s * normal()).exp()).collect();
        let offset = (0..channels).map(|_| 3.0 * s * normal()).collect();
        let mut perturb: Vec<f64> = (0..channels * channels)
            .map(|_| 0.3 * s * normal() / (channels as f64).sqrt())
            .collect();
        let fro = perturb.iter().map(|v| v * v).sum::<f64>().sqrt();
        if fro > bound {
            perturb.iter_mut().for_each(|v| *v *= bound / fro);
        }
        let mixing = perturb
            .iter()
            .enumerate()
            .map(|(i, v)| if i / channels == i % channels { 1.0 + v } else { *v })
            .collect();
        let lag = (10.0 * s * rng.gen::<f64>()).round() as usize;
        let noise = 0.1 + 0.2 * s * rng.gen::<f64>();
        Self {
            gain,
            offset,
            mixing,
            lag,
            noise,
        }
    }

    /// Frobenius distance of the mixing matrix from the identity.
    pub fn mixing_deviation(&self) -> f64 {
        let d = self.gain.len();
        self.mixing
            .iter()
            .enumerate()
            .map(|(i, v)| if i / d == i % d { v - 1.0 } else { *v })
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

struct ClassTemplate {
    /// Per channel, three (frequency in cycles/step, amplitude) pairs.
    components: Vec<[(f64, f64); 3]>,
    envelope_period: f64,
    envelope_depth: f64,
}

fn class_templates(cfg: &SyntheticSensorConfig) -> Vec<ClassTemplate> {
    (0..cfg.classes)
        .map(|c| {
            let mut rng = stream(cfg.seed, Purpose::Template, c as u64);
            let components = (0..cfg.channels)
                .map(|_| {
                    [(); 3].map(|_| (rng.gen_range(0.04..0.3), rng.gen_range(0.5..1.0)))
                })
                .collect();
            ClassTemplate {
                components,
                envelope_period: rng.gen_range(40.0..160.0),
                envelope_depth: rng.gen_range(0.2..0.6),
            }
        })
        .collect()
}

/// Multi-subject sensor recordings: each sample is a full `[D, T]`
/// recording with per-timestep labels, tagged with its subject.
pub fn generate_synthetic_sensor(cfg: &SyntheticSensorConfig) -> Result<TaggedDataset> {
    if cfg.classes < 2 {
        return Err(config_err!("at least 2 classes are required"));
    }
    if cfg.subjects < 3 {
        return Err(config_err!("at least 3 subjects are required for a train/val/test split"));
    }
    if cfg.channels == 0 || cfg.recordings_per_pair == 0 || cfg.window < 2 {
        return Err(config_err!("channels, recordings_per_pair and window must be positive"));
    }
    if cfg.steps_per_recording < cfg.window {
        return Err(config_err!("steps_per_recording must cover at least one window"));
    }
    if !(0.0..=1.0).contains(&cfg.severity) {
        return Err(config_err!("severity must lie in [0, 1], got {}", cfg.severity));
    }
    let templates = class_templates(cfg);
    let (d, t, k) = (cfg.channels, cfg.steps_per_recording, cfg.classes);
    let mut samples = Vec::with_capacity(cfg.subjects * k * cfg.recordings_per_pair);
    for m in 0..cfg.subjects {
        let subject = SubjectModel::draw(m, d, cfg.severity, cfg.mixing_bound, cfg.seed);
        for c in 0..k {
            for r in 0..cfg.recordings_per_pair {
                let index = ((m * k + c) * cfg.recordings_per_pair + r) as u64;
                let mut rng = stream(cfg.seed, Purpose::Recording, index);
                samples.push(recording(cfg, &templates, &subject, c, m, &mut rng));
            }
        }
    }
    TaggedDataset::new(
        DatasetKind::Sequence,
        vec![d, t],
        samples,
        k,
        cfg.subjects,
        Provenance {
            source: toml::to_string(cfg).expect("serializable"),
            standardized: false,
        },
    )
}

fn recording(
    cfg: &SyntheticSensorConfig,
    templates: &[ClassTemplate],
    subject: &SubjectModel,
    first_class: usize,
    subject_id: usize,
    rng: &mut impl Rng,
) -> Sample {
    let (d, t) = (cfg.channels, cfg.steps_per_recording);
    let total = t + subject.lag;
    // Clean signal and labels on an extended clock.
    let mut clean = vec![0.0f64; d * total];
    let mut labels = Vec::with_capacity(total);
    let mut order: Vec<usize> = vec![first_class];
    let mut next = 0;
    while labels.len() < total {
        if next == order.len() {
            let mut perm: Vec<usize> = (0..cfg.classes).collect();
            perm.shuffle(rng);
            order.extend(perm);
        }
        let class = order[next];
        next += 1;
        let len = rng.gen_range(cfg.window / 2..=2 * cfg.window);
        let tpl = &templates[class];
        let phases: Vec<[f64; 3]> = (0..d)
            .map(|_| [(); 3].map(|_| rng.gen_range(0.0..std::f64::consts::TAU)))
            .collect();
        let env_phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let start = labels.len();
        for i in 0..len.min(total - start) {
            let tt = i as f64;
            let env = 1.0
                + tpl.envelope_depth
                    * (std::f64::consts::TAU * tt / tpl.envelope_period + env_phase).sin();
            for ch in 0..d {
                let v: f64 = tpl.components[ch]
                    .iter()
                    .zip(&phases[ch])
                    .map(|(&(f, a), &p)| a * (std::f64::consts::TAU * f * tt + p).cos())
                    .sum();
                clean[ch * total + start + i] = env * v;
            }
            labels.push(class);
        }
    }
    let noise = Normal::new(0.0, subject.noise).expect("positive noise");
    let mut data = vec![0.0f32; d * t];
    for step in 0..t {
        for ch in 0..d {
            let mixed: f64 = (0..d)
                .map(|e| subject.mixing[ch * d + e] * clean[e * total + step])
                .sum();
            let v = subject.gain[ch] * mixed + subject.offset[ch] + noise.sample(rng);
            data[ch * t + step] = v as f32;
        }
    }
    // The subject's movement trails the nominal label timing by `lag` steps.
    let labels = labels[subject.lag..subject.lag + t].to_vec();
    Sample {
        data,
        labels,
        extraneous: subject_id,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    Impulse,
    Brightness,
    Contrast,
    GaussianBlur,
    Pixelate,
    Saturate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::Impulse,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Pixelate,
        CorruptionKind::Saturate,
    ];

    /// Parameter at severities 1 through 5.
    pub fn table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            CorruptionKind::ShotNoise => [250.0, 100.0, 50.0, 25.0, 12.0],
            CorruptionKind::Impulse => [0.01, 0.03, 0.06, 0.10, 0.17],
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            CorruptionKind::Contrast => [0.75, 0.6, 0.45, 0.3, 0.15],
            CorruptionKind::GaussianBlur => [0.5, 0.75, 1.0, 1.5, 2.0],
            CorruptionKind::Pixelate => [0.6, 0.5, 0.4, 0.3, 0.25],
            CorruptionKind::Saturate => [0.3, 0.5, 1.5, 2.0, 3.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(config_err!("corruption severity must be 1..=5, got {severity}"));
        }
        Ok(Self {
            kind,
            severity,
            seed,
        })
    }

    pub fn parameter(&self) -> f64 {
        self.kind.table()[self.severity as usize - 1]
    }
}

/// Applies one corruption to a `[C, H, W]` image with values in `[0, 1]`.
pub fn corrupt_image(img: &Tensor<f32>, spec: &CorruptionSpec) -> Result<Tensor<f32>> {
    if img.rank() != 3 {
        return Err(data_err!("image must be [C, H, W], got {:?}", img.shape()));
    }
    if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(data_err!("image values must lie in [0, 1]"));
    }
    let spec = CorruptionSpec::new(spec.kind, spec.severity, spec.seed)?;
    let p = spec.parameter();
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut rng = stream(spec.seed, Purpose::Corruption, spec.kind as u64);
    let x: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let out: Vec<f64> = match spec.kind {
        CorruptionKind::GaussianNoise => x
            .iter()
            .map(|&v| v + p * rng.sample::<f64, _>(StandardNormal))
            .collect(),
        CorruptionKind::ShotNoise => x
            .iter()
            .map(|&v| {
                let lambda = v * p;
                if lambda > 0.0 {
                    Poisson::new(lambda).unwrap().sample(&mut rng) / p
                } else {
                    0.0
                }
            })
            .collect(),
        CorruptionKind::Impulse => x
            .iter()
            .map(|&v| {
                if rng.gen::<f64>() < p {
                    if rng.gen::<bool>() {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            })
            .collect(),
        CorruptionKind::Brightness => x.iter().map(|&v| v + p).collect(),
        CorruptionKind::Contrast => {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            x.iter().map(|&v| (v - mean) * p + mean).collect()
        }
        CorruptionKind::GaussianBlur => gaussian_blur(&x, c, h, w, p),
        CorruptionKind::Pixelate => pixelate(&x, c, h, w, p),
        CorruptionKind::Saturate => {
            let plane = h * w;
            let mut out = x.clone();
            for i in 0..plane {
                let m = (0..c).map(|k| x[k * plane + i]).sum::<f64>() / c as f64;
                for k in 0..c {
                    out[k * plane + i] = m + p * (x[k * plane + i] - m);
                }
            }
            out
        }
    };
    Ok(Tensor::new(
        img.shape().to_vec(),
        out.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    )
    .unwrap())
}

fn gaussian_blur(x: &[f64], c: usize, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).round() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for r in 0..h {
            for col in 0..w {
                tmp[base + r * w + col] = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, k)| k * x[base + r * w + clamp(col as isize + j as isize - radius, w)])
                    .sum();
            }
        }
        for r in 0..h {
            for col in 0..w {
                out[base + r * w + col] = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, k)| k * tmp[base + clamp(r as isize + j as isize - radius, h) * w + col])
                    .sum();
            }
        }
    }
    out
}

/// Block boundaries partitioning `n` pixels into `m` contiguous blocks.
fn blocks(n: usize, m: usize) -> Vec<(usize, usize)> {
    (0..m).map(|i| (i * n / m, (i + 1) * n / m)).collect()
}

/// Area downsampling onto a block partition followed by nearest
/// upsampling; a projection, so repeating it changes nothing.
fn pixelate(x: &[f64], c: usize, h: usize, w: usize, factor: f64) -> Vec<f64> {
    let rows = blocks(h, ((h as f64 * factor) as usize).max(1));
    let cols = blocks(w, ((w as f64 * factor) as usize).max(1));
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for &(r0, r1) in &rows {
            for &(c0, c1) in &cols {
                let mut sum = 0.0;
                for r in r0..r1 {
                    for col in c0..c1 {
                        sum += x[base + r * w + col];
                    }
                }
                let mean = sum / ((r1 - r0) * (c1 - c0)) as f64;
                for r in r0..r1 {
                    for col in c0..c1 {
                        out[base + r * w + col] = mean;
                    }
                }
            }
        }
    }
    out
}

/// Every image under every listed corruption; the extraneous id is the
/// corruption's position in `kinds`.
pub fn corrupt_dataset(
    ds: &TaggedDataset,
    kinds: &[CorruptionKind],
    severity: u8,
    seed: u64,
) -> Result<TaggedDataset> {
    if ds.kind != DatasetKind::Image {
        return Err(data_err!("corruptions apply to image datasets"));
    }
    if kinds.is_empty() {
        return Err(config_err!("at least one corruption kind is required"));
    }
    let mut out = ds.empty_like();
    out.extraneous_count = kinds.len();
    for (id, &kind) in kinds.iter().enumerate() {
        for (i, s) in ds.samples.iter().enumerate() {
            let sample_seed = crate::rng::derive_seed(seed, Purpose::Corruption, (id * ds.len() + i) as u64);
            let spec = CorruptionSpec::new(kind, severity, sample_seed)?;
            let img = Tensor::new(ds.sample_shape.clone(), s.data.clone())?;
            out.samples.push(Sample {
                data: corrupt_image(&img, &spec)?.into_data(),
                labels: s.labels.clone(),
                extraneous: id,
            });
        }
    }
    out.provenance.source = format!(
        "{}; corrupted {kinds:?} at severity {severity}, seed {seed}",
        ds.provenance.source
    );
    Ok(out)
}

/// Routes samples into train/val/test by extraneous id; ids in none of
/// the sets are dropped.
pub fn split_by_extraneous(
    ds: &TaggedDataset,
    train_ids: &[usize],
    val_ids: &[usize],
    test_ids: &[usize],
) -> Result<(TaggedDataset, TaggedDataset, TaggedDataset)> {
    let mut route = vec![None; ds.extraneous_count];
    for (split, ids) in [train_ids, val_ids, test_ids].iter().enumerate() {
        for &id in *ids {
            if id >= ds.extraneous_count {
                return Err(config_err!(
                    "extraneous id {id} out of range (dataset has {})",
                    ds.extraneous_count
                ));
            }
            if let Some(prev) = route[id] {
                if prev != split {
                    return Err(config_err!("extraneous id {id} appears in more than one split"));
                }
            }
            route[id] = Some(split);
        }
    }
    let mut parts = [ds.empty_like(), ds.empty_like(), ds.empty_like()];
    for s in &ds.samples {
        if let Some(split) = route[s.extraneous] {
            parts[split].samples.push(s.clone());
        }
    }
    let [a, b, c] = parts;
    Ok((a, b, c))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn idx_header(bytes: &[u8], magic: u32, what: &str) -> Result<Vec<usize>> {
    if bytes.len() < 4 {
        return Err(Error::format(0, format!("{what} file truncated before magic")));
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if found != magic {
        return Err(Error::format(
            0,
            format!("{what} file has magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let rank = (magic & 0xFF) as usize;
    let mut dims = Vec::with_capacity(rank);
    for k in 0..rank {
        let at = 4 + 4 * k;
        let b = bytes
            .get(at..at + 4)
            .ok_or_else(|| Error::format(at as u64, format!("{what} file truncated in dimensions")))?;
        dims.push(u32::from_be_bytes(b.try_into().unwrap()) as usize);
    }
    let start = 4 + 4 * rank;
    let need: usize = dims.iter().product();
    if bytes.len() - start < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "{what} payload truncated: {} of {need} bytes",
                bytes.len() - start
            ),
        ));
    }
    Ok(dims)
}

/// Parses an IDX image/label file pair (unsigned-byte payload).
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<TaggedDataset> {
    let idims = idx_header(images, IDX_IMAGES, "image")?;
    let ldims = idx_header(labels, IDX_LABELS, "label")?;
    let (n, h, w) = (idims[0], idims[1], idims[2]);
    if ldims[0] != n {
        return Err(Error::format(
            4,
            format!("label file holds {} labels for {n} images", ldims[0]),
        ));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::format(4, "empty IDX file"));
    }
    let pixels = &images[16..16 + n * h * w];
    let label_bytes = &labels[8..8 + n];
    let class_count = label_bytes.iter().copied().max().unwrap_or(0) as usize + 1;
    let samples = pixels
        .chunks(h * w)
        .zip(label_bytes)
        .map(|(px, &l)| Sample {
            data: px.iter().map(|&p| p as f32 / 255.0).collect(),
            labels: vec![l as usize],
            extraneous: 0,
        })
        .collect();
    TaggedDataset::new(
        DatasetKind::Image,
        vec![1, h, w],
        samples,
        class_count.max(2),
        1,
        Provenance {
            source: format!(
                "idx images sha256 {} labels sha256 {}",
                sha256_hex(images),
                sha256_hex(labels)
            ),
            standardized: false,
        },
    )
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<TaggedDataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, &labels)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    kind: DatasetKind,
    sample_shape: Vec<usize>,
    class_count: usize,
    extraneous_count: usize,
    provenance: Provenance,
}

pub fn dataset_to_container(ds: &TaggedDataset) -> Container {
    let header = toml::to_string(&DatasetHeader {
        kind: ds.kind,
        sample_shape: ds.sample_shape.clone(),
        class_count: ds.class_count,
        extraneous_count: ds.extraneous_count,
        provenance: ds.provenance.clone(),
    })
    .expect("serializable");
    let n = ds.len() as u64;
    let mut dims = vec![n];
    dims.extend(ds.sample_shape.iter().map(|&d| d as u64));
    let records = vec![
        Record {
            kind: KIND_DATASET,
            name: "data".into(),
            dims,
            payload: Payload::F32(ds.samples.iter().flat_map(|s| s.data.iter().copied()).collect()),
        },
        Record {
            kind: KIND_DATASET,
            name: "labels".into(),
            dims: vec![n, ds.labels_per_sample() as u64],
            payload: Payload::U64(
                ds.samples
                    .iter()
                    .flat_map(|s| s.labels.iter().map(|&l| l as u64))
                    .collect(),
            ),
        },
        Record {
            kind: KIND_DATASET,
            name: "extraneous".into(),
            dims: vec![n],
            payload: Payload::U64(ds.samples.iter().map(|s| s.extraneous as u64).collect()),
        },
    ];
    Container { header, records }
}

pub fn dataset_from_container(c: &Container) -> Result<TaggedDataset> {
    let h: DatasetHeader =
        toml::from_str(&c.header).map_err(|e| Error::format(12, format!("dataset header: {e}")))?;
    let size: usize = h.sample_shape.iter().product();
    let (data, labels, extra) = match (
        &c.record("data")?.payload,
        &c.record("labels")?.payload,
        &c.record("extraneous")?.payload,
    ) {
        (Payload::F32(d), Payload::U64(l), Payload::U64(e)) => (d, l, e),
        _ => return Err(Error::format(0, "dataset records have unexpected dtypes")),
    };
    let n = extra.len();
    if size == 0 || data.len() != n * size || n == 0 || labels.len() % n != 0 {
        return Err(Error::format(0, "dataset record sizes disagree"));
    }
    let per = labels.len() / n;
    let samples = (0..n)
        .map(|i| Sample {
            data: data[i * size..(i + 1) * size].to_vec(),
            labels: labels[i * per..(i + 1) * per].iter().map(|&l| l as usize).collect(),
            extraneous: extra[i] as usize,
        })
        .collect();
    TaggedDataset::new(
        h.kind,
        h.sample_shape,
        samples,
        h.class_count,
        h.extraneous_count,
        h.provenance,
    )
    .map_err(|e| Error::format(0, e.to_string()))
}

pub fn dataset_write(ds: &TaggedDataset, path: &Path) -> Result<()> {
    dataset_to_container(ds).write(path)
}

pub fn dataset_read(path: &Path) -> Result<TaggedDataset> {
    dataset_from_container(&Container::read(path)?)
}

/// Manifest CSV with one row per sample: index within its split, majority
/// class, extraneous id and split name.
pub fn write_manifest(path: &Path, splits: &[(&str, &TaggedDataset)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["sample_index", "class", "extraneous_id", "split"])
        .map_err(|e| csv_error(path, e))?;
    for (name, ds) in splits {
        for (i, s) in ds.samples.iter().enumerate() {
            w.write_record([
                i.to_string(),
                ds.majority_label(i).to_string(),
                s.extraneous.to_string(),
                name.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(d: usize, t: usize) -> (Tensor<f32>, Vec<usize>) {
        (
            Tensor::from_fn(&[d, t], |i| i as f32),
            (0..t).map(|i| i % 3).collect(),
        )
    }

    #[test]
    fn window_counts_and_offsets() {
        let (x, l) = series(2, 250);
        let w = window_series(&x, &l, 200, 25).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[1].0.data()[0], 25.0);
        assert_eq!(w[2].0.data()[200], 250.0 + 50.0);
        assert_eq!(w[2].1[0], 50 % 3);
        let (x, l) = series(1, 400);
        assert_eq!(window_series(&x, &l, 200, 200).unwrap().len(), 2);
        let (x, l) = series(1, 199);
        assert!(matches!(window_series(&x, &l, 200, 25), Err(Error::Data(_))));
    }

    fn small_cfg(severity: f64) -> SyntheticSensorConfig {
        SyntheticSensorConfig {
            classes: 3,
            subjects: 4,
            channels: 3,
            steps_per_recording: 200,
            recordings_per_pair: 2,
            severity,
            window: 40,
            ..Default::default()
        }
    }

    #[test]
    fn standardize_uses_training_stats_once() {
        let ds = generate_synthetic_sensor(&small_cfg(0.8)).unwrap();
        let (mut train, mut val, _) = split_by_extraneous(&ds, &[0, 1], &[2], &[3]).unwrap();
        let st = standardize_per_dim(&mut train, &mut [&mut val]).unwrap();
        let refit = Standardizer::fit(&train).unwrap();
        for k in 0..3 {
            assert!(refit.mean[k].abs() < 1e-6);
            assert!((refit.scale[k] - 1.0).abs() < 1e-6);
        }
        assert!(matches!(st.apply(&mut train), Err(Error::State(_))));
    }

    #[test]
    fn constant_dimension_is_only_centered() {
        let samples = vec![
            Sample {
                data: vec![2.0, 2.0, 1.0, 3.0],
                labels: vec![0, 1],
                extraneous: 0,
            };
            3
        ];
        let mut ds = TaggedDataset::new(
            DatasetKind::Sequence,
            vec![2, 2],
            samples,
            2,
            1,
            Provenance {
                source: "test".into(),
                standardized: false,
            },
        )
        .unwrap();
        let st = standardize_per_dim(&mut ds, &mut []).unwrap();
        assert_eq!(st.scale[0], 1.0);
        assert_eq!(&ds.samples[0].data[..2], &[0.0, 0.0]);
        assert_eq!(&ds.samples[0].data[2..], &[-1.0, 1.0]);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic_sensor(&small_cfg(0.5)).unwrap();
        let b = generate_synthetic_sensor(&small_cfg(0.5)).unwrap();
        assert_eq!(a, b);
        let mut other = small_cfg(0.5);
        other.seed = 1;
        assert_ne!(a.samples[0].data, generate_synthetic_sensor(&other).unwrap().samples[0].data);
    }

    #[test]
    fn severity_zero_subjects_share_identity_transform() {
        let id = SubjectModel::draw(0, 4, 0.0, 0.6, 3);
        for m in 1..5 {
            assert_eq!(SubjectModel::draw(m, 4, 0.0, 0.6, 3), id);
        }
        assert!(id.gain.iter().all(|&g| g == 1.0));
        assert!(id.offset.iter().all(|&o| o == 0.0));
        assert_eq!(id.lag, 0);
        assert_eq!(id.mixing_deviation(), 0.0);
        for m in 0..20 {
            let s = SubjectModel::draw(m, 6, 1.0, 0.6, 3);
            assert!(s.mixing_deviation() <= 0.6 + 1e-12);
            assert!(s.gain.iter().all(|&g| g > 0.0));
            assert!(s.lag <= 10);
        }
    }

    fn between_subject_spread(ds: &TaggedDataset) -> f64 {
        let (d, t) = (ds.sample_shape[0], ds.sample_shape[1]);
        let groups = ds.groups();
        let mut total = 0.0;
        for ch in 0..d {
            let means: Vec<f64> = groups
                .values()
                .map(|idx| {
                    idx.iter()
                        .map(|&i| ds.samples[i].data[ch * t..(ch + 1) * t].iter().map(|&v| v as f64).sum::<f64>())
                        .sum::<f64>()
                        / (idx.len() * t) as f64
                })
                .collect();
            let mu = means.iter().sum::<f64>() / means.len() as f64;
            total += (means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / means.len() as f64).sqrt();
        }
        total / d as f64
    }

    #[test]
    fn subject_channel_means_spread_with_severity() {
        let cfg = SyntheticSensorConfig::default();
        let shifted = generate_synthetic_sensor(&cfg).unwrap();
        let clean = generate_synthetic_sensor(&SyntheticSensorConfig { severity: 0.0, ..cfg }).unwrap();
        let (a, b) = (between_subject_spread(&shifted), between_subject_spread(&clean));
        assert!(a >= 5.0 * b, "spread {a} vs {b}");
    }

    #[test]
    fn labels_roughly_balanced() {
        let cfg = SyntheticSensorConfig {
            recordings_per_pair: 20,
            subjects: 3,
            steps_per_recording: 400,
            ..Default::default()
        };
        let ds = generate_synthetic_sensor(&cfg).unwrap();
        let mut counts = vec![0usize; cfg.classes];
        for s in &ds.samples {
            for &l in &s.labels {
                counts[l] += 1;
            }
        }
        let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
        for c in counts {
            assert!((c as f64 - mean).abs() / mean < 0.1, "{c} vs {mean}");
        }
    }

    fn image(seed: u64) -> Tensor<f32> {
        let mut rng = stream(seed, Purpose::Subset, 0);
        Tensor::from_fn(&[3, 12, 12], |_| rng.gen::<f32>())
    }

    #[test]
    fn corruptions_keep_shape_and_range() {
        let img = image(1);
        for kind in CorruptionKind::ALL {
            for sev in 1..=5 {
                let out = corrupt_image(&img, &CorruptionSpec::new(kind, sev, 9).unwrap()).unwrap();
                assert_eq!(out.shape(), img.shape());
                assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)), "{kind:?} {sev}");
                assert_eq!(out, corrupt_image(&img, &CorruptionSpec::new(kind, sev, 9).unwrap()).unwrap());
            }
        }
        assert!(CorruptionSpec::new(CorruptionKind::Impulse, 6, 0).is_err());
        let bad = Tensor::full(&[1, 2, 2], 1.5f32);
        assert!(corrupt_image(&bad, &CorruptionSpec::new(CorruptionKind::Brightness, 1, 0).unwrap()).is_err());
    }

    #[test]
    fn gaussian_noise_grows_with_severity() {
        let img = Tensor::full(&[1, 32, 32], 0.5f32);
        let mad: Vec<f64> = (1..=5)
            .map(|sev| {
                let out = corrupt_image(&img, &CorruptionSpec::new(CorruptionKind::GaussianNoise, sev, 4).unwrap()).unwrap();
                out.data().iter().map(|&v| (v as f64 - 0.5).abs()).sum::<f64>() / out.len() as f64
            })
            .collect();
        assert!(mad.windows(2).all(|w| w[1] > w[0]), "{mad:?}");
    }

    #[test]
    fn brightness_on_black() {
        let img = Tensor::zeros(&[1, 4, 4]);
        let out = corrupt_image(&img, &CorruptionSpec::new(CorruptionKind::Brightness, 1, 0).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.1));
    }

    #[test]
    fn pixelate_is_idempotent() {
        let img = Tensor::from_fn(&[2, 28, 28], |i| ((i * 37) % 101) as f32 / 100.0);
        for sev in 1..=5 {
            let spec = CorruptionSpec::new(CorruptionKind::Pixelate, sev, 0).unwrap();
            let once = corrupt_image(&img, &spec).unwrap();
            assert_eq!(corrupt_image(&once, &spec).unwrap(), once);
        }
    }

    #[test]
    fn split_routes_by_subject() {
        let cfg = SyntheticSensorConfig {
            subjects: 8,
            ..small_cfg(0.3)
        };
        let ds = generate_synthetic_sensor(&cfg).unwrap();
        let (tr, va, te) = split_by_extraneous(&ds, &[0, 1, 2, 3, 4, 5], &[6], &[7]).unwrap();
        assert_eq!(tr.len() + va.len() + te.len(), ds.len());
        assert!(te.samples.iter().all(|s| s.extraneous == 7));
        let again = split_by_extraneous(&ds, &[0, 1, 2, 3, 4, 5], &[6], &[7]).unwrap();
        assert_eq!(again.2, te);
        assert!(matches!(split_by_extraneous(&ds, &[0, 1], &[1], &[2]), Err(Error::Config(_))));
    }

    fn idx_pair(n: usize, labels: usize) -> (Vec<u8>, Vec<u8>) {
        let mut img = IDX_IMAGES.to_be_bytes().to_vec();
        for d in [n as u32, 2, 3] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        img.extend((0..n * 6).map(|i| (i * 40 % 256) as u8));
        let mut lab = IDX_LABELS.to_be_bytes().to_vec();
        lab.extend_from_slice(&(labels as u32).to_be_bytes());
        lab.extend((0..labels).map(|i| (i % 10) as u8));
        (img, lab)
    }

    #[test]
    fn idx_parsing_and_rejections() {
        let (img, lab) = idx_pair(4, 4);
        let ds = parse_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.sample_shape, vec![1, 2, 3]);
        assert_eq!(ds.samples[0].data[1], 40.0 / 255.0);

        let mut bad = img.clone();
        bad[3] = 0x02;
        assert!(matches!(parse_idx(&bad, &lab), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx(&img[..img.len() - 1], &lab), Err(Error::Format { .. })));
        let (_, short) = idx_pair(4, 3);
        assert!(matches!(parse_idx(&img, &short), Err(Error::Format { .. })));
    }

    #[test]
    fn dataset_cache_round_trip() {
        let ds = window_dataset(&generate_synthetic_sensor(&small_cfg(0.2)).unwrap(), 40, 40).unwrap();
        let bytes = dataset_to_container(&ds).to_bytes();
        let back = dataset_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(dataset_to_container(&back).to_bytes(), bytes);
    }
}
