//! Decoding probes: how well can the extraneous id be predicted from a
//! model's intermediate features? Lower accuracy means more invariant
//! features.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::checkpoint_bytes;
use crate::data::{csv_error, sha256_hex, DatasetKind, Provenance, Sample, TaggedDataset};
use crate::error::{config_err, data_err, Error, Result};
use crate::models::{build_decoder_model, DecoderConfig, Model, ModelConfig, Task};
use crate::normalization::NormSpec;
use crate::optim::{eval_batches, evaluate, train, EvalScheme, TrainConfig};
use crate::rng::{derive_seed, stream, Purpose};
use crate::tape::Tape;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub features: Vec<Vec<f32>>,
    pub feature_shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub extraneous_count: usize,
    pub model_digest: String,
    pub layer: String,
    pub scheme: EvalScheme,
}

impl FeatureBank {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn to_dataset(&self) -> Result<TaggedDataset> {
        let samples = self
            .features
            .iter()
            .zip(&self.labels)
            .map(|(f, &l)| Sample {
                data: f.clone(),
                labels: vec![l],
                extraneous: l,
            })
            .collect();
        TaggedDataset::new(
            DatasetKind::Features,
            self.feature_shape.clone(),
            samples,
            self.extraneous_count.max(2),
            self.extraneous_count.max(2),
            Provenance {
                source: format!("features {} of model {}", self.layer, self.model_digest),
                standardized: false,
            },
        )
    }
}

/// Captures a named post-activation output of `model` for every sample,
/// batching as `scheme` requires.
pub fn extract_features<T: Scalar>(
    model: &Model<T>,
    dataset: &TaggedDataset,
    layer: &str,
    scheme: EvalScheme,
    batch_size: usize,
) -> Result<FeatureBank> {
    let names = model.capture_names();
    if layer != crate::models::PENULTIMATE && !names.iter().any(|n| n == layer) {
        return Err(config_err!("unknown layer {layer}; available: penultimate, {}", names.join(", ")));
    }
    if dataset.is_empty() {
        return Err(data_err!("cannot extract features from an empty dataset"));
    }
    let mode = scheme.mode_for(model)?;
    let mut features = vec![Vec::new(); dataset.len()];
    let mut feature_shape = Vec::new();
    for idx in eval_batches(dataset, scheme, batch_size) {
        let (x, _) = dataset.batch::<T>(&idx);
        let mut tape = Tape::new();
        let trace = model.forward(&mut tape, x, mode)?;
        let v = tape.value(trace.capture(layer).expect("validated layer"));
        feature_shape = v.shape()[1..].to_vec();
        let per: usize = feature_shape.iter().product();
        for (k, &i) in idx.iter().enumerate() {
            features[i] = v.data()[k * per..(k + 1) * per]
                .iter()
                .map(|x| x.to_f64_lossy() as f32)
                .collect();
        }
    }
    Ok(FeatureBank {
        features,
        feature_shape,
        labels: dataset.samples.iter().map(|s| s.extraneous).collect(),
        extraneous_count: dataset.extraneous_count,
        model_digest: sha256_hex(&checkpoint_bytes(model)),
        layer: layer.to_string(),
        scheme,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderScale {
    Small,
    PaperLike,
}

pub fn decoder_config(
    feature_shape: &[usize],
    extraneous_count: usize,
    scale: DecoderScale,
    seed: u64,
) -> ModelConfig {
    let (conv_widths, fc_widths) = match (feature_shape.len(), scale) {
        (2, DecoderScale::PaperLike) => (vec![64; 4], vec![64, 64]),
        (2, DecoderScale::Small) => (vec![32; 2], vec![32]),
        (3, DecoderScale::PaperLike) => (vec![64; 2], vec![64, 64]),
        (3, DecoderScale::Small) => (vec![32], vec![32]),
        (_, DecoderScale::PaperLike) => (vec![], vec![128, 64, 64, 32]),
        (_, DecoderScale::Small) => (vec![], vec![64, 32]),
    };
    ModelConfig {
        task: Task::Decoder,
        input_channels: feature_shape.first().copied().unwrap_or(0),
        num_classes: extraneous_count,
        norm: NormSpec::batch_norm(),
        sensor: Default::default(),
        image: Default::default(),
        decoder: DecoderConfig {
            feature_shape: feature_shape.to_vec(),
            conv_widths,
            fc_widths,
        },
        seed,
    }
}

/// Probe network over features of shape `[C, T]`, `[C, H, W]` or `[D]`.
/// Its normalization is always non-adaptive batch mean/std.
pub fn build_decoder(
    feature_shape: &[usize],
    extraneous_count: usize,
    scale: DecoderScale,
    seed: u64,
) -> Result<Model<f32>> {
    build_decoder_model(&decoder_config(feature_shape, extraneous_count, scale, seed))
}

/// Seeded 60/20/20 split, stratified by label.
pub fn stratified_split(
    labels: &[usize],
    classes: usize,
    min_per_class: usize,
    seed: u64,
) -> Result<[Vec<usize>; 3]> {
    let mut parts: [Vec<usize>; 3] = Default::default();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < min_per_class {
            return Err(data_err!(
                "extraneous value {c} has {} samples, at least {min_per_class} are needed",
                idx.len()
            ));
        }
        idx.shuffle(&mut stream(seed, Purpose::Split, c as u64));
        let n = idx.len();
        let train = (0.6 * n as f64).round() as usize;
        let val = (0.2 * n as f64).round() as usize;
        parts[0].extend_from_slice(&idx[..train]);
        parts[1].extend_from_slice(&idx[train..train + val]);
        parts[2].extend_from_slice(&idx[train + val..]);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceResult {
    pub decode_acc: f64,
    pub chance: f64,
    pub test_count: usize,
}

impl InvarianceResult {
    /// Binomial standard deviation of accuracy at chance on the test split.
    pub fn chance_sigma(&self) -> f64 {
        (self.chance * (1.0 - self.chance) / self.test_count as f64).sqrt()
    }
}

/// Trains a decoder on the bank and reports its test decoding accuracy.
pub fn run_invariance(
    bank: &FeatureBank,
    seed: u64,
    train_config: &TrainConfig,
    scale: DecoderScale,
) -> Result<InvarianceResult> {
    if bank.extraneous_count < 2 {
        return Err(data_err!("decoding needs at least 2 extraneous values"));
    }
    let ds = bank.to_dataset()?;
    let [tr, va, te] = stratified_split(&bank.labels, bank.extraneous_count, 5, seed)?;
    let (tr, va, te) = (ds.subset(&tr), ds.subset(&va), ds.subset(&te));
    let mut decoder = build_decoder(
        &bank.feature_shape,
        bank.extraneous_count,
        scale,
        derive_seed(seed, Purpose::Init, 0),
    )?;
    let cfg = TrainConfig {
        seed,
        eval_scheme: EvalScheme::NonAdaptive,
        ..train_config.clone()
    };
    train(&mut decoder, &tr, &va, &cfg)?;
    Ok(InvarianceResult {
        decode_acc: evaluate(&decoder, &te, EvalScheme::NonAdaptive, cfg.eval_batch_size)?,
        chance: 1.0 / bank.extraneous_count as f64,
        test_count: te.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceRow {
    pub model_id: String,
    pub layer: String,
    pub scheme: String,
    pub statistic: String,
    pub decode_acc: f64,
    pub chance: f64,
}

pub fn write_invariance_csv(path: &Path, rows: &[InvarianceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["model_id", "layer", "scheme", "statistic", "decode_acc", "chance"])
        .map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([
            r.model_id.clone(),
            r.layer.clone(),
            r.scheme.clone(),
            r.statistic.clone(),
            r.decode_acc.to_string(),
            r.chance.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
