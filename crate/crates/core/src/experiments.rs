//! The desk-scale synthetic benchmark and the checks built on it.
//!
//! A benchmark run generates multi-subject sensor recordings, splits them
//! by subject, trains a batch-averaged and an instance-averaged DenseNet
//! per seed, then measures test accuracy under every compatible evaluation
//! scheme, per-filter moment concentration, and subject decodability of
//! penultimate features.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_bytes, checkpoint_from_bytes};
use crate::data::{
    corrupt_dataset, generate_synthetic_sensor, load_idx, parse_idx, split_by_extraneous,
    standardize_per_dim, window_dataset, CorruptionKind, SyntheticSensorConfig, TaggedDataset,
};
use crate::diagnostics::{
    collect_normalized_moments, half_split_protocol, pooled_concentration, pooled_dispersion,
    LayerSelection, MomentReport, MomentSource, DEFAULT_TAU,
};
use crate::data::csv_error;
use crate::error::{config_err, Error, Result};
use crate::gradcheck::{finite_diff_grad, relative_error};
use crate::invariance::{extract_features, run_invariance, DecoderScale, FeatureBank, InvarianceResult};
use crate::models::{build_model, Mode, Model, ModelConfig, SensorConfig, Task, PENULTIMATE};
use crate::normalization::{
    enumerate_valid_configs, Averaging, ChannelStats, NormScheme, NormSpec, Statistic, StatsSource,
};
use crate::optim::{evaluate, train, EvalScheme, LrSchedule, TrainConfig, TrainOutcome};
use crate::rng::{derive_seed, stream, Purpose};
use crate::tape::{PaddingMode, Tape};
use crate::tensor::{moment_stats, Tensor};

/// Everything a sensor benchmark run needs besides severity and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorBenchmark {
    /// Generator settings; `severity` and `seed` are set per run.
    pub data: SyntheticSensorConfig,
    pub train_stride: usize,
    /// Recordings per (subject, class) pair for test subjects; more than
    /// the generator's count keeps per-group statistics of the held-out
    /// subject from being dominated by sampling noise.
    pub test_recordings_per_pair: usize,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub model: SensorConfig,
    pub train: TrainConfig,
    pub probe_train: TrainConfig,
    pub probe_scale: DecoderScale,
    pub seeds: Vec<u64>,
    pub heterogeneous_severity: f64,
    pub eval_batch_size: usize,
}

impl Default for SensorBenchmark {
    fn default() -> Self {
        Self {
            data: SyntheticSensorConfig::default(),
            train_stride: 16,
            test_recordings_per_pair: 8,
            train_ids: (0..6).collect(),
            val_ids: vec![6],
            test_ids: vec![7],
            model: SensorConfig {
                per_channel_blocks: 1,
                merged_blocks: 2,
                convs_per_block: 4,
                per_channel_growth: 4,
                merged_growth: 16,
                kernel_size: 3,
                padding: PaddingMode::Zero,
            },
            train: TrainConfig {
                epochs: 20,
                lr_schedule: LrSchedule::Fixed {
                    breakpoints: vec![(0, 5e-3), (10, 5e-4), (15, 5e-5)],
                },
                batch_size: 64,
                early_stop_patience: 0,
                seed: 0,
                eval_scheme: EvalScheme::NonAdaptive,
                eval_batch_size: 64,
            },
            probe_train: TrainConfig {
                epochs: 15,
                lr_schedule: LrSchedule::Plateau {
                    initial: 2e-3,
                    factor: 0.1,
                    patience: 4,
                },
                batch_size: 32,
                early_stop_patience: 6,
                seed: 0,
                eval_scheme: EvalScheme::NonAdaptive,
                eval_batch_size: 128,
            },
            probe_scale: DecoderScale::Small,
            seeds: vec![0, 1, 2],
            heterogeneous_severity: 0.8,
            eval_batch_size: 64,
        }
    }
}

impl SensorBenchmark {
    pub fn data_config(&self, severity: f64, seed: u64) -> SyntheticSensorConfig {
        SyntheticSensorConfig {
            severity,
            seed,
            ..self.data.clone()
        }
    }

    pub fn model_config(&self, norm: NormSpec, seed: u64) -> ModelConfig {
        ModelConfig {
            task: Task::SensorSeq,
            input_channels: self.data.channels,
            num_classes: self.data.classes,
            norm,
            sensor: self.model.clone(),
            image: Default::default(),
            decoder: Default::default(),
            seed: derive_seed(seed, Purpose::Init, 0),
        }
    }
}

/// Windowed, standardized splits of one generated dataset.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: TaggedDataset,
    pub val: TaggedDataset,
    pub test: TaggedDataset,
    /// Non-overlapping windows of every subject, for decoding probes.
    pub all_subjects: TaggedDataset,
}

pub fn prepare_splits(bench: &SensorBenchmark, severity: f64, seed: u64) -> Result<Splits> {
    let r = bench.data.recordings_per_pair;
    let r_test = bench.test_recordings_per_pair.max(r);
    let generated = generate_synthetic_sensor(&SyntheticSensorConfig {
        recordings_per_pair: r_test,
        ..bench.data_config(severity, seed)
    })?;
    // Samples come out subject-major, then class, then recording, so the
    // recording number is the index modulo the per-pair count. Test
    // subjects keep every recording, everyone else the first `r`.
    let keep = |i: usize, everyone: bool| {
        let rec = i % r_test;
        rec < r || (!everyone && bench.test_ids.contains(&generated.samples[i].extraneous))
    };
    let pick = |everyone: bool| {
        let idx: Vec<usize> = (0..generated.len()).filter(|&i| keep(i, everyone)).collect();
        generated.subset(&idx)
    };
    let raw = pick(false);
    let (tr, va, te) = split_by_extraneous(&raw, &bench.train_ids, &bench.val_ids, &bench.test_ids)?;
    let win = bench.data.window;
    let mut train = window_dataset(&tr, win, bench.train_stride)?;
    let mut val = window_dataset(&va, win, win)?;
    let mut test = window_dataset(&te, win, win)?;
    let mut all_subjects = window_dataset(&pick(true), win, win)?;
    standardize_per_dim(&mut train, &mut [&mut val, &mut test, &mut all_subjects])?;
    Ok(Splits {
        train,
        val,
        test,
        all_subjects,
    })
}

pub fn norm_spec(scheme: NormScheme, averaging: Averaging) -> NormSpec {
    NormSpec::new(scheme, averaging, Statistic::MeanStd).expect("valid combination")
}

/// Validation scheme matching how a normalization runs at inference.
pub fn native_scheme(spec: &NormSpec) -> EvalScheme {
    match (spec.scheme(), spec.averaging()) {
        (NormScheme::NonAdaptive, _) => EvalScheme::NonAdaptive,
        (NormScheme::Adaptive, Averaging::Batch) => EvalScheme::AdaptiveBatch,
        (NormScheme::Adaptive, Averaging::Instance) => EvalScheme::AdaptiveInstance,
    }
}

pub fn train_sensor(
    bench: &SensorBenchmark,
    splits: &Splits,
    norm: NormSpec,
    seed: u64,
) -> Result<(Model<f32>, TrainOutcome)> {
    let mut model = build_model::<f32>(&bench.model_config(norm, seed))?;
    let cfg = TrainConfig {
        seed: derive_seed(seed, Purpose::Shuffle, 0),
        eval_scheme: native_scheme(&norm),
        ..bench.train.clone()
    };
    let outcome = train(&mut model, &splits.train, &splits.val, &cfg)?;
    Ok((model, outcome))
}

/// Models and measurements for one seed at one severity.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub splits: Splits,
    pub batch_model: Model<f32>,
    pub instance_model: Model<f32>,
    pub acc_non_adaptive: f64,
    pub acc_adaptive_batch: f64,
    pub acc_adaptive_instance: f64,
    /// Training time of the batch-averaged model alone.
    pub batch_train_secs: f64,
    pub train_secs: f64,
}

#[derive(Clone, Debug)]
pub struct BenchmarkRun {
    pub severity: f64,
    pub seeds: Vec<SeedRun>,
}

impl BenchmarkRun {
    fn mean(&self, f: impl Fn(&SeedRun) -> f64) -> f64 {
        self.seeds.iter().map(f).sum::<f64>() / self.seeds.len() as f64
    }

    pub fn mean_non_adaptive(&self) -> f64 {
        self.mean(|s| s.acc_non_adaptive)
    }

    pub fn mean_adaptive_batch(&self) -> f64 {
        self.mean(|s| s.acc_adaptive_batch)
    }

    pub fn mean_adaptive_instance(&self) -> f64 {
        self.mean(|s| s.acc_adaptive_instance)
    }
}

/// Trains both averaging modes for every configured seed.
pub fn run_benchmark(bench: &SensorBenchmark, severity: f64) -> Result<BenchmarkRun> {
    let mut seeds = Vec::new();
    for &seed in &bench.seeds {
        let start = Instant::now();
        let splits = prepare_splits(bench, severity, seed)?;
        let (batch_model, _) = train_sensor(bench, &splits, NormSpec::batch_norm(), seed)?;
        let batch_train_secs = start.elapsed().as_secs_f64();
        let (instance_model, _) = train_sensor(
            bench,
            &splits,
            norm_spec(NormScheme::Adaptive, Averaging::Instance),
            seed,
        )?;
        let bs = bench.eval_batch_size;
        let run = SeedRun {
            seed,
            acc_non_adaptive: evaluate(&batch_model, &splits.test, EvalScheme::NonAdaptive, bs)?,
            acc_adaptive_batch: evaluate(&batch_model, &splits.test, EvalScheme::AdaptiveBatch, bs)?,
            acc_adaptive_instance: evaluate(&instance_model, &splits.test, EvalScheme::AdaptiveInstance, bs)?,
            batch_train_secs,
            train_secs: start.elapsed().as_secs_f64(),
            splits,
            batch_model,
            instance_model,
        };
        log::info!(
            "severity {severity} seed {seed}: non_adaptive {:.4} adaptive_batch {:.4} adaptive_instance {:.4} ({:.0} s)",
            run.acc_non_adaptive,
            run.acc_adaptive_batch,
            run.acc_adaptive_instance,
            run.train_secs
        );
        seeds.push(run);
    }
    Ok(BenchmarkRun { severity, seeds })
}

/// Outcome of one acceptance check.
#[derive(Clone, Debug, PartialEq)]
pub struct Criterion {
    pub id: &'static str,
    pub status: Status,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

impl Criterion {
    fn new(id: &'static str, passed: bool, detail: String) -> Self {
        Self {
            id,
            status: if passed { Status::Pass } else { Status::Fail },
            detail,
        }
    }

    pub fn passed(&self) -> bool {
        self.status != Status::Fail
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        write!(f, "{} {s}: {}", self.id, self.detail)
    }
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Worst relative error of the normalization backward pass against finite
/// differences, over the input, γ and β, for one configuration and shape.
pub fn norm_gradient_error(spec: &NormSpec, shape: &[usize], fixed: bool, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Purpose::Subset, 1);
    let x = random_tensor(shape, &mut rng);
    let c = shape[1];
    let gamma = Tensor::from_fn(&[c], |_| 0.5 + rng.gen::<f64>());
    let beta = random_tensor(&[c], &mut rng);
    let w = random_tensor(shape, &mut rng);
    let stats = ChannelStats {
        mean: (0..c).map(|_| rng.sample(StandardNormal)).collect(),
        sq: (0..c).map(|_| 0.5 + rng.gen::<f64>()).collect(),
    };
    let source = || {
        if fixed {
            StatsSource::Fixed(&stats)
        } else {
            StatsSource::Compute(spec.averaging())
        }
    };
    let loss = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let (xv, gv, bv) = (tape.leaf(x.clone()), tape.leaf(g.clone()), tape.leaf(b.clone()));
        let y = tape.norm(xv, gv, bv, spec.statistic(), spec.epsilon(), source())?;
        let l = tape.weighted_sum(y, w.clone())?;
        Ok(tape.value(l).item())
    };
    let mut tape = Tape::new();
    let (xv, gv, bv) = (tape.leaf(x.clone()), tape.leaf(gamma.clone()), tape.leaf(beta.clone()));
    let y = tape.norm(xv, gv, bv, spec.statistic(), spec.epsilon(), source())?;
    let l = tape.weighted_sum(y, w.clone())?;
    let grads = tape.backward(l)?;
    let h = 1e-5;
    let fx = finite_diff_grad(|t| loss(t, &gamma, &beta).unwrap(), &x, h);
    let fg = finite_diff_grad(|t| loss(&x, t, &beta).unwrap(), &gamma, h);
    let fb = finite_diff_grad(|t| loss(&x, &gamma, t).unwrap(), &beta, h);
    Ok(relative_error(grads.get(xv).unwrap(), &fx)
        .max(relative_error(grads.get(gv).unwrap(), &fg))
        .max(relative_error(grads.get(bv).unwrap(), &fb)))
}

pub fn tiny_sensor_config(norm: NormSpec) -> ModelConfig {
    let mut cfg = ModelConfig::sensor(2, 3, norm);
    cfg.sensor = SensorConfig {
        per_channel_blocks: 1,
        merged_blocks: 1,
        convs_per_block: 4,
        per_channel_growth: 4,
        merged_growth: 4,
        kernel_size: 3,
        padding: PaddingMode::Zero,
    };
    cfg.seed = 5;
    cfg
}

/// Relative error of the full tiny sensor model's gradients (input and
/// every parameter) under a cross-entropy loss.
pub fn model_gradient_error(norm: NormSpec, seed: u64) -> Result<f64> {
    let model = build_model::<f64>(&tiny_sensor_config(norm))?;
    let mut rng = stream(seed, Purpose::Subset, 2);
    let x = random_tensor(&[2, 2, 16], &mut rng);
    let labels: Vec<usize> = (0..32).map(|_| rng.gen_range(0..3)).collect();
    let loss_of = |m: &Model<f64>, x: &Tensor<f64>| -> f64 {
        let mut m = m.clone();
        let mut tape = Tape::new();
        let tr = m.forward_train(&mut tape, x.clone()).unwrap();
        let l = tape.softmax_cross_entropy(tr.logits, &labels).unwrap();
        tape.value(l).item()
    };
    let mut m = model.clone();
    let mut tape = Tape::new();
    let tr = m.forward_train(&mut tape, x.clone())?;
    let l = tape.softmax_cross_entropy(tr.logits, &labels)?;
    let grads = tape.backward(l)?;
    let h = 1e-5;
    // Compared as one vector: conv biases in front of a centering norm have
    // an exactly zero gradient, where per-tensor ratios only measure noise.
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (i, p) in model.params().iter().enumerate() {
        let fd = finite_diff_grad(
            |t| {
                let mut probe = model.clone();
                probe.params_mut()[i].value = t.clone();
                loss_of(&probe, &x)
            },
            &p.value,
            h,
        );
        analytic.extend_from_slice(grads.get(tr.params[i]).unwrap().data());
        numeric.extend_from_slice(fd.data());
    }
    let fd = finite_diff_grad(|t| loss_of(&model, t), &x, h);
    analytic.extend_from_slice(grads.get(tr.input).unwrap().data());
    numeric.extend_from_slice(fd.data());
    let worst = relative_error(&Tensor::from_vec(analytic), &Tensor::from_vec(numeric));
    Ok(worst)
}

/// A1: normalization backward over random shapes for all six specs (plus
/// the fixed-statistics path of non-adaptive specs), and the tiny model.
pub fn gradient_fidelity(shape_count: usize, seed: u64) -> Result<Criterion> {
    let start = Instant::now();
    let mut rng = stream(seed, Purpose::Subset, 3);
    let mut worst_layer: f64 = 0.0;
    let mut checks = 0;
    for k in 0..shape_count {
        let b = rng.gen_range(2..5);
        let c = rng.gen_range(1..4);
        let mut shape = vec![b, c];
        let spatial_rank = rng.gen_range(1..3);
        for _ in 0..spatial_rank {
            shape.push(rng.gen_range(2..6));
        }
        if shape[2..].iter().product::<usize>() < 4 {
            shape[2] = 4;
        }
        for spec in enumerate_valid_configs() {
            worst_layer = worst_layer.max(norm_gradient_error(&spec, &shape, false, seed + k as u64)?);
            checks += 1;
            if spec.scheme() == NormScheme::NonAdaptive {
                worst_layer = worst_layer.max(norm_gradient_error(&spec, &shape, true, seed + k as u64)?);
                checks += 1;
            }
        }
    }
    let mut worst_model: f64 = 0.0;
    for averaging in [Averaging::Batch, Averaging::Instance] {
        for statistic in [Statistic::MeanStd, Statistic::MeanSquare] {
            let spec = NormSpec::new(NormScheme::Adaptive, averaging, statistic)?;
            worst_model = worst_model.max(model_gradient_error(spec, seed)?);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Criterion::new(
        "A1",
        worst_layer < 1e-4 && worst_model < 1e-3 && shape_count >= 100 && secs < 120.0,
        format!(
            "{checks} layer checks over {shape_count} shapes, worst rel. err {worst_layer:.2e} (< 1e-4); \
             tiny model worst {worst_model:.2e} (< 1e-3); {secs:.1} s"
        ),
    ))
}

/// Filters of every normalization layer under running statistics on the
/// test split.
pub fn running_reports(run: &SeedRun, batch: usize) -> Result<Vec<MomentReport>> {
    collect_normalized_moments(
        &run.batch_model,
        &run.splits.test,
        MomentSource::TrainRunning,
        &LayerSelection::All,
        batch,
    )
}

/// A2: homogeneous control, running statistics on held-out i.i.d. data.
pub fn homogeneous_concentration(run: &SeedRun, batch: usize) -> Result<(Criterion, f64)> {
    let reports = running_reports(run, batch)?;
    let (m, s) = pooled_concentration(&reports, DEFAULT_TAU, 0.15);
    let filters: usize = reports.iter().map(|r| r.filters.len()).sum();
    Ok((
        Criterion::new(
            "A2",
            m >= 0.95 && s >= 0.95,
            format!(
                "severity 0, {filters} filters: |mean|<0.1 for {:.1}%, |std-1|<0.15 for {:.1}% (both ≥ 95%)",
                100.0 * m,
                100.0 * s
            ),
        ),
        m,
    ))
}

/// A3: shifted held-out subject; running statistics lose concentration
/// while the half-split protocol restores it.
pub fn shifted_concentration(run: &SeedRun, homogeneous_frac: f64, batch: usize) -> Result<Criterion> {
    let running = running_reports(run, batch)?;
    let (m_run, _) = pooled_concentration(&running, DEFAULT_TAU, DEFAULT_TAU);
    let split = half_split_protocol(&run.batch_model, &run.splits.test, run.seed, &LayerSelection::All, batch)?;
    let (m_half, s_half) = pooled_concentration(&split, DEFAULT_TAU, DEFAULT_TAU);
    let drop = homogeneous_frac - m_run;
    Ok(Criterion::new(
        "A3",
        drop >= 0.2 && m_half >= 0.95 && s_half >= 0.9,
        format!(
            "running stats frac_mean_ok {m_run:.3} (drop {drop:.3} vs homogeneous, need ≥ 0.2); \
             half split frac_mean_ok {m_half:.3} (≥ 0.95), frac_std_ok {s_half:.3} (≥ 0.9)"
        ),
    ))
}

/// Dispersion of per-filter means under running statistics.
pub fn running_dispersion(model: &Model<f32>, data: &TaggedDataset, batch: usize) -> Result<f64> {
    let reports = collect_normalized_moments(model, data, MomentSource::TrainRunning, &LayerSelection::All, batch)?;
    Ok(pooled_dispersion(&reports))
}

/// A4: adaptive schemes beat non-adaptive batch norm on shifted subjects.
pub fn heterogeneous_ordering(run: &BenchmarkRun) -> Criterion {
    let na = run.mean_non_adaptive();
    let ab = run.mean_adaptive_batch();
    let ai = run.mean_adaptive_instance();
    Criterion::new(
        "A4",
        ab - na >= 0.05 && ai - na >= 0.05,
        format!(
            "severity {}, {} seeds: non_adaptive {:.2}%, adaptive_batch {:.2}% ({:+.2}), adaptive_instance {:.2}% ({:+.2}); need ≥ +5 points",
            run.severity,
            run.seeds.len(),
            100.0 * na,
            100.0 * ab,
            100.0 * (ab - na),
            100.0 * ai,
            100.0 * (ai - na)
        ),
    )
}

/// A5: without shift, non-adaptive batch norm is not worse than instance
/// norm by more than 2 points.
pub fn homogeneous_ordering(run: &BenchmarkRun) -> Criterion {
    let na = run.mean_non_adaptive();
    let ai = run.mean_adaptive_instance();
    Criterion::new(
        "A5",
        na >= ai - 0.02,
        format!(
            "severity 0, {} seeds: non_adaptive {:.2}%, adaptive_instance {:.2}% (need non_adaptive ≥ instance − 2)",
            run.seeds.len(),
            100.0 * na,
            100.0 * ai
        ),
    )
}

fn random_bank(like: &FeatureBank, seed: u64) -> FeatureBank {
    let mut rng = stream(seed, Purpose::Subset, 4);
    let mut bank = like.clone();
    for f in &mut bank.features {
        f.iter_mut().for_each(|v| *v = rng.sample::<f64, _>(StandardNormal) as f32);
    }
    bank.model_digest = "random".into();
    bank
}

#[derive(Clone, Debug)]
pub struct DecodingRun {
    pub non_adaptive: Vec<InvarianceResult>,
    pub adaptive_instance: Vec<InvarianceResult>,
    pub random: InvarianceResult,
}

pub fn decoding(bench: &SensorBenchmark, run: &BenchmarkRun) -> Result<DecodingRun> {
    let bs = bench.eval_batch_size;
    let mut non_adaptive = Vec::new();
    let mut adaptive_instance = Vec::new();
    let mut first_bank = None;
    for s in &run.seeds {
        let na = extract_features(&s.batch_model, &s.splits.all_subjects, PENULTIMATE, EvalScheme::NonAdaptive, bs)?;
        let ai = extract_features(
            &s.instance_model,
            &s.splits.all_subjects,
            PENULTIMATE,
            EvalScheme::AdaptiveInstance,
            bs,
        )?;
        non_adaptive.push(run_invariance(&na, s.seed, &bench.probe_train, bench.probe_scale)?);
        adaptive_instance.push(run_invariance(&ai, s.seed, &bench.probe_train, bench.probe_scale)?);
        log::info!(
            "seed {}: decoding non_adaptive {:.4} adaptive_instance {:.4}",
            s.seed,
            non_adaptive.last().unwrap().decode_acc,
            adaptive_instance.last().unwrap().decode_acc
        );
        first_bank.get_or_insert(na);
    }
    let bank = first_bank.ok_or_else(|| config_err!("benchmark has no seeds"))?;
    let random = run_invariance(&random_bank(&bank, 17), 17, &bench.probe_train, bench.probe_scale)?;
    Ok(DecodingRun {
        non_adaptive,
        adaptive_instance,
        random,
    })
}

/// A6: instance-normalized features leak less subject identity.
pub fn decoding_ordering(d: &DecodingRun) -> Criterion {
    let mean = |v: &[InvarianceResult]| v.iter().map(|r| r.decode_acc).sum::<f64>() / v.len() as f64;
    let (na, ai) = (mean(&d.non_adaptive), mean(&d.adaptive_instance));
    let chance = d.random.chance;
    let off = (d.random.decode_acc - chance).abs() / d.random.chance_sigma();
    Criterion::new(
        "A6",
        ai < na && na >= chance && ai >= chance && off <= 3.0,
        format!(
            "subject decoding: non_adaptive {:.2}%, adaptive_instance {:.2}% (need instance < non_adaptive, both ≥ chance {:.1}%); \
             random control {:.2}% ({off:.2} σ from chance, ≤ 3)",
            100.0 * na,
            100.0 * ai,
            100.0 * chance,
            100.0 * d.random.decode_acc
        ),
    )
}

fn idx_bytes(n: usize, labels: usize, magic: u32) -> (Vec<u8>, Vec<u8>) {
    let mut img = magic.to_be_bytes().to_vec();
    for d in [n as u32, 4, 4] {
        img.extend_from_slice(&d.to_be_bytes());
    }
    img.extend((0..n * 16).map(|i| (i % 251) as u8));
    let mut lab = 0x0000_0801u32.to_be_bytes().to_vec();
    lab.extend_from_slice(&(labels as u32).to_be_bytes());
    lab.extend((0..labels).map(|i| (i % 10) as u8));
    (img, lab)
}

/// A7: exact oracles.
pub fn exact_oracles(bench: &SensorBenchmark) -> Result<Criterion> {
    let mut notes = Vec::new();
    let mut ok = true;

    // (a) Adaptive batch evaluation equals the training forward pass.
    let spec = norm_spec(NormScheme::Adaptive, Averaging::Batch);
    let mut m = build_model::<f32>(&tiny_sensor_config(spec))?;
    let mut rng = stream(1, Purpose::Subset, 5);
    let x = Tensor::from_fn(&[4, 2, 16], |_| rng.sample::<f32, _>(StandardNormal));
    let eval = m.predict(x.clone(), Mode::EvalAdaptive)?;
    let mut tape = Tape::new();
    let tr = m.forward_train(&mut tape, x)?;
    let a = eval.data() == tape.value(tr.logits).data();
    ok &= a;
    notes.push(format!("(a) bit-exact {a}"));

    // (b) mean-square identity.
    let mut worst: f64 = 0.0;
    for k in 0..50 {
        let mut rng = stream(k, Purpose::Subset, 6);
        let n = rng.gen_range(1..200);
        let t = Tensor::from_fn(&[n], |_| rng.gen_range(-10.0f64..10.0));
        let mo = moment_stats(&t, &[0])?;
        worst = worst.max((mo.mean_square.item() - mo.var.item() - mo.mean.item().powi(2)).abs());
    }
    let b = worst < 1e-10;
    ok &= b;
    notes.push(format!("(b) identity err {worst:.1e}"));

    // (c) checkpoint and config round trips.
    let bytes = checkpoint_bytes(&m);
    let back: Model<f32> = checkpoint_from_bytes(&bytes)?;
    let cfg_text = m.config().to_canonical();
    let bench_text = toml::to_string(bench).expect("serializable");
    let bench_back: SensorBenchmark = toml::from_str(&bench_text).map_err(|e| config_err!("{e}"))?;
    let c = checkpoint_bytes(&back) == bytes
        && ModelConfig::from_canonical(&cfg_text)?.to_canonical() == cfg_text
        && toml::to_string(&bench_back).expect("serializable") == bench_text;
    ok &= c;
    notes.push(format!("(c) round trips {c}"));

    // (d) malformed IDX files.
    let (img, lab) = idx_bytes(3, 3, 0x0000_0803);
    let (bad_magic, _) = idx_bytes(3, 3, 0x0000_0802);
    let (_, short_labels) = idx_bytes(3, 2, 0x0000_0803);
    let d = parse_idx(&img, &lab).is_ok()
        && parse_idx(&bad_magic, &lab).is_err()
        && parse_idx(&img[..img.len() - 5], &lab).is_err()
        && parse_idx(&img, &short_labels).is_err();
    ok &= d;
    notes.push(format!("(d) idx rejections {d}"));

    // (e) fixed-seed training is reproducible.
    let small = SensorBenchmark {
        data: SyntheticSensorConfig {
            subjects: 3,
            steps_per_recording: 128,
            recordings_per_pair: 1,
            channels: 2,
            classes: 3,
            window: 32,
            ..bench.data.clone()
        },
        train_ids: vec![0],
        val_ids: vec![1],
        test_ids: vec![2],
        model: tiny_sensor_config(spec).sensor,
        train: TrainConfig {
            epochs: 2,
            ..bench.train.clone()
        },
        ..bench.clone()
    };
    let splits = prepare_splits(&small, 0.5, 3)?;
    let (m1, h1) = train_sensor(&small, &splits, NormSpec::batch_norm(), 3)?;
    let (m2, h2) = train_sensor(&small, &splits, NormSpec::batch_norm(), 3)?;
    let key = |h: &TrainOutcome| h.history.iter().map(|r| r.deterministic_part()).collect::<Vec<_>>();
    let e = checkpoint_bytes(&m1) == checkpoint_bytes(&m2) && key(&h1) == key(&h2);
    ok &= e;
    notes.push(format!("(e) reproducible training {e}"));

    Ok(Criterion::new("A7", ok, notes.join(", ")))
}

/// Fashion-MNIST files looked for by the optional real-data check.
pub const FASHION_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// A8: Fashion-MNIST smoke test; skipped when the files are absent.
pub fn fashion_smoke(dir: &Path) -> Result<Criterion> {
    let paths: Vec<PathBuf> = FASHION_FILES.iter().map(|f| dir.join(f)).collect();
    if paths.iter().any(|p| !p.exists()) {
        return Ok(Criterion {
            id: "A8",
            status: Status::Skip,
            detail: format!("Fashion-MNIST files not found in {}", dir.display()),
        });
    }
    let start = Instant::now();
    let full_train = load_idx(&paths[0], &paths[1])?;
    let full_test = load_idx(&paths[2], &paths[3])?;
    let pick = |n: usize, total: usize, index: u64| {
        let mut idx: Vec<usize> = (0..total).collect();
        rand::seq::SliceRandom::shuffle(&mut idx[..], &mut stream(0, Purpose::Subset, index));
        idx.truncate(n);
        idx
    };
    let train_idx = pick(7000, full_train.len(), 10);
    let train_set = full_train.subset(&train_idx[..6000]);
    let val_set = full_train.subset(&train_idx[6000..]);
    let test_set = full_test.subset(&pick(1000, full_test.len(), 11));
    let cfg = ModelConfig::image(1, full_train.class_count, NormSpec::batch_norm());
    let mut model = build_model::<f32>(&cfg)?;
    let tc = TrainConfig {
        epochs: 5,
        lr_schedule: LrSchedule::Fixed {
            breakpoints: vec![(0, 2e-3)],
        },
        batch_size: 64,
        early_stop_patience: 0,
        seed: 1,
        eval_scheme: EvalScheme::NonAdaptive,
        eval_batch_size: 100,
    };
    train(&mut model, &train_set, &val_set, &tc)?;
    let clean = evaluate(&model, &test_set, EvalScheme::NonAdaptive, 100)?;
    let shifted = corrupt_dataset(&test_set, &CorruptionKind::ALL, 3, 5)?;
    let na = evaluate(&model, &shifted, EvalScheme::NonAdaptive, 100)?;
    let ab = evaluate(&model, &shifted, EvalScheme::AdaptiveBatch, 100)?;
    let secs = start.elapsed().as_secs_f64();
    Ok(Criterion::new(
        "A8",
        clean >= 0.8 && ab >= na,
        format!(
            "clean non_adaptive {:.2}% (≥ 80%); corrupted non_adaptive {:.2}%, adaptive_batch {:.2}%; {secs:.0} s",
            100.0 * clean,
            100.0 * na,
            100.0 * ab
        ),
    ))
}

/// Fails a passing criterion that blew its time budget.
pub fn within_budget(mut c: Criterion, secs: f64, limit_secs: f64) -> Criterion {
    if secs > limit_secs && c.status == Status::Pass {
        c.status = Status::Fail;
    }
    c.detail = format!("{}; {secs:.0} s (budget {limit_secs:.0} s)", c.detail);
    c
}

/// Writes `scheme,averaging,statistic,accuracy` rows for one model.
pub fn write_accuracy_rows(path: &Path, trained: &NormSpec, rows: &[(EvalScheme, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["scheme", "averaging", "statistic", "accuracy"])
        .map_err(|e| csv_error(path, e))?;
    for (scheme, acc) in rows {
        w.write_record([
            scheme.scheme().to_string(),
            scheme.averaging().to_string(),
            trained.statistic().to_string(),
            acc.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Everything one pass of the acceptance pipeline produced.
#[derive(Clone, Debug)]
pub struct SuiteOutput {
    pub criteria: Vec<Criterion>,
    pub homogeneous: BenchmarkRun,
    pub shifted: BenchmarkRun,
    pub decoding: DecodingRun,
}

impl SuiteOutput {
    /// `criteria.txt`, a per-seed accuracy table and decoding results.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let criteria = dir.join("criteria.txt");
        let text: String = self.criteria.iter().map(|c| format!("{c}\n")).collect();
        std::fs::write(&criteria, text).map_err(|e| Error::io(&criteria, e))?;

        let table = dir.join("accuracy_table.csv");
        let mut w = csv::Writer::from_path(&table).map_err(|e| csv_error(&table, e))?;
        w.write_record(["severity", "seed", "scheme", "averaging", "statistic", "accuracy"])
            .map_err(|e| csv_error(&table, e))?;
        for run in [&self.homogeneous, &self.shifted] {
            for s in &run.seeds {
                for (scheme, acc) in [
                    (EvalScheme::NonAdaptive, s.acc_non_adaptive),
                    (EvalScheme::AdaptiveBatch, s.acc_adaptive_batch),
                    (EvalScheme::AdaptiveInstance, s.acc_adaptive_instance),
                ] {
                    w.write_record([
                        run.severity.to_string(),
                        s.seed.to_string(),
                        scheme.scheme().to_string(),
                        scheme.averaging().to_string(),
                        Statistic::MeanStd.to_string(),
                        acc.to_string(),
                    ])
                    .map_err(|e| csv_error(&table, e))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(&table, e))?;

        let decoding = dir.join("decoding.csv");
        let mut w = csv::Writer::from_path(&decoding).map_err(|e| csv_error(&decoding, e))?;
        w.write_record(["seed", "features", "decode_acc", "chance", "test_count"])
            .map_err(|e| csv_error(&decoding, e))?;
        let d = &self.decoding;
        let mut rows: Vec<(String, &str, &InvarianceResult)> = Vec::new();
        for (s, (na, ai)) in self.shifted.seeds.iter().zip(d.non_adaptive.iter().zip(&d.adaptive_instance)) {
            rows.push((s.seed.to_string(), "non_adaptive", na));
            rows.push((s.seed.to_string(), "adaptive_instance", ai));
        }
        rows.push(("-".into(), "random", &d.random));
        for (seed, what, r) in rows {
            w.write_record([
                seed,
                what.to_string(),
                r.decode_acc.to_string(),
                r.chance.to_string(),
                r.test_count.to_string(),
            ])
            .map_err(|e| csv_error(&decoding, e))?;
        }
        w.flush().map_err(|e| Error::io(&decoding, e))?;
        Ok(vec![criteria, table, decoding])
    }
}

/// Runs A1 to A8 in order, handing each result to `on_result` as soon as
/// it is known. A8 is skipped without a Fashion-MNIST directory.
pub fn run_suite(
    bench: &SensorBenchmark,
    fashion_dir: Option<&Path>,
    mut on_result: impl FnMut(&Criterion),
) -> Result<SuiteOutput> {
    let mut criteria = Vec::new();
    let mut report = |c: Criterion, all: &mut Vec<Criterion>| {
        on_result(&c);
        all.push(c);
    };
    report(gradient_fidelity(100, 0)?, &mut criteria);

    let t = Instant::now();
    let homogeneous = run_benchmark(bench, 0.0)?;
    let train_homog = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let shifted = run_benchmark(bench, bench.heterogeneous_severity)?;
    let train_shift = t.elapsed().as_secs_f64();

    // A2 and A3 diagnose the first seed's batch-averaged model; their budget
    // covers training that model plus the diagnosis.
    let bs = bench.eval_batch_size;
    let t = Instant::now();
    let (c, homog_frac) = homogeneous_concentration(&homogeneous.seeds[0], bs)?;
    let secs = homogeneous.seeds[0].batch_train_secs + t.elapsed().as_secs_f64();
    report(within_budget(c, secs, 300.0), &mut criteria);
    let t = Instant::now();
    let c = shifted_concentration(&shifted.seeds[0], homog_frac, bs)?;
    let secs = shifted.seeds[0].batch_train_secs + t.elapsed().as_secs_f64();
    report(within_budget(c, secs, 300.0), &mut criteria);

    report(within_budget(heterogeneous_ordering(&shifted), train_shift, 1200.0), &mut criteria);
    report(within_budget(homogeneous_ordering(&homogeneous), train_homog, 900.0), &mut criteria);

    let t = Instant::now();
    let decoding_run = decoding(bench, &shifted)?;
    report(
        within_budget(decoding_ordering(&decoding_run), t.elapsed().as_secs_f64(), 600.0),
        &mut criteria,
    );

    let t = Instant::now();
    let c = exact_oracles(bench)?;
    report(within_budget(c, t.elapsed().as_secs_f64(), 300.0), &mut criteria);

    let c = match fashion_dir {
        Some(dir) => {
            let t = Instant::now();
            let c = fashion_smoke(dir)?;
            if c.status == Status::Skip {
                c
            } else {
                within_budget(c, t.elapsed().as_secs_f64(), 1500.0)
            }
        }
        None => Criterion {
            id: "A8",
            status: Status::Skip,
            detail: "no Fashion-MNIST directory given".into(),
        },
    };
    report(c, &mut criteria);

    Ok(SuiteOutput {
        criteria,
        homogeneous,
        shifted,
        decoding: decoding_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_gradients_match_on_a_few_shapes() {
        for spec in enumerate_valid_configs() {
            for shape in [[3, 2, 5], [2, 3, 4]] {
                assert!(norm_gradient_error(&spec, &shape, false, 1).unwrap() < 1e-6);
            }
        }
    }

    #[test]
    fn benchmark_config_round_trips() {
        let b = SensorBenchmark::default();
        let text = toml::to_string(&b).unwrap();
        assert_eq!(toml::from_str::<SensorBenchmark>(&text).unwrap(), b);
    }
}
