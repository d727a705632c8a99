use std::path::{Path, PathBuf};

use adanorm_core::checkpoint::{checkpoint_read, checkpoint_write};
use adanorm_core::data::{corrupt_dataset, dataset_write, load_idx, write_manifest, DatasetKind, TaggedDataset};
use adanorm_core::diagnostics::{collect_normalized_moments, emit_report, half_split_protocol, LayerSelection, MomentSource};
use adanorm_core::experiments::{prepare_splits, run_suite, write_accuracy_rows, SensorBenchmark, Splits};
use adanorm_core::invariance::{extract_features, run_invariance, write_invariance_csv, InvarianceRow};
use adanorm_core::models::{build_model, Model, ModelConfig};
use adanorm_core::optim::{evaluate, train, write_history, write_timing, TrainConfig};
use adanorm_core::rng::{derive_seed, stream, Purpose};
use adanorm_core::Error;
use rand::seq::SliceRandom;

use crate::config::{DataSource, DiagnoseMode, ExperimentConfig};
use crate::manifest::{io_error, Manifest};
use crate::{CliError, Common};

pub fn run(command: &str, common: &Common) -> Result<(), CliError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be at least 1".into()));
        }
        // A second initialization only happens in tests; keep the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let needs_checkpoint = matches!(command, "eval" | "diagnose" | "invariance");
    let checkpoint = cfg.checkpoint_path();
    if needs_checkpoint && !checkpoint.exists() {
        return Err(CliError::Validation(format!(
            "checkpoint {} not found; run `adanorm train` first",
            checkpoint.display()
        )));
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| io_error(&cfg.out_dir, e))?;
    let mut manifest = Manifest::new(command, cfg.seed, cfg.canonical());
    if let Some(path) = &common.config {
        manifest.input(path)?;
    }
    if cfg.dataset.source == DataSource::Idx && command != "repro" {
        for f in cfg.dataset.idx.files() {
            manifest.input(f)?;
        }
    }
    if needs_checkpoint {
        manifest.input(&checkpoint)?;
    }
    let outputs = match command {
        "gen-data" => gen_data(&cfg)?,
        "train" => train_cmd(&cfg)?,
        "eval" => eval_cmd(&cfg, &load_checkpoint(&cfg, &checkpoint)?)?,
        "diagnose" => diagnose_cmd(&cfg, &load_checkpoint(&cfg, &checkpoint)?)?,
        "invariance" => invariance_cmd(&cfg, &load_checkpoint(&cfg, &checkpoint)?)?,
        "repro" => repro_cmd(&cfg)?,
        other => unreachable!("unknown command {other}"),
    };
    for p in &outputs {
        manifest.output(p)?;
    }
    let path = manifest.write(&cfg.out_dir)?;
    log::info!("wrote {} artifacts; manifest {}", outputs.len(), path.display());
    Ok(())
}

fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<Model<f32>, CliError> {
    let model: Model<f32> = checkpoint_read(path)?;
    if model.norm_spec() != &cfg.norm {
        return Err(CliError::Validation(format!(
            "checkpoint {} was trained with {} but the config asks for {}",
            path.display(),
            model.norm_spec().label(),
            cfg.norm.label()
        )));
    }
    Ok(model)
}

/// Builds the splits the config describes; deterministic in the config.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Splits, CliError> {
    let d = &cfg.dataset;
    match d.source {
        DataSource::Synthetic => {
            let bench = SensorBenchmark {
                data: d.synthetic.clone(),
                train_stride: d.train_stride,
                test_recordings_per_pair: d.test_recordings_per_pair,
                train_ids: d.train_ids.clone(),
                val_ids: d.val_ids.clone(),
                test_ids: d.test_ids.clone(),
                ..SensorBenchmark::default()
            };
            Ok(prepare_splits(&bench, d.synthetic.severity, d.synthetic.seed)?)
        }
        DataSource::Idx => {
            let idx = &d.idx;
            let train_file = load_idx(&idx.train_images, &idx.train_labels)?;
            let test_file = load_idx(&idx.test_images, &idx.test_labels)?;
            let mut order: Vec<usize> = (0..train_file.len()).collect();
            order.shuffle(&mut stream(cfg.seed, Purpose::Subset, 0));
            if idx.val_count >= order.len() {
                return Err(CliError::Validation(format!(
                    "val_count {} leaves no training samples out of {}",
                    idx.val_count,
                    order.len()
                )));
            }
            let (val_idx, rest) = order.split_at(idx.val_count);
            let train_n = if idx.train_count == 0 { rest.len() } else { idx.train_count.min(rest.len()) };
            let mut test_idx: Vec<usize> = (0..test_file.len()).collect();
            test_idx.shuffle(&mut stream(cfg.seed, Purpose::Subset, 1));
            if idx.test_count > 0 {
                test_idx.truncate(idx.test_count);
            }
            let mut test = test_file.subset(&test_idx);
            if !idx.corruptions.is_empty() {
                test = corrupt_dataset(&test, &idx.corruptions, idx.corruption_severity, cfg.seed)?;
            }
            Ok(Splits {
                train: train_file.subset(&rest[..train_n]),
                val: train_file.subset(val_idx),
                all_subjects: test.clone(),
                test,
            })
        }
    }
}

fn model_config(cfg: &ExperimentConfig, train: &TaggedDataset) -> ModelConfig {
    let mut mc = match train.kind {
        DatasetKind::Image => {
            let mut mc = ModelConfig::image(train.sample_shape[0], train.class_count, cfg.norm);
            mc.image = cfg.model.image.clone();
            mc.image.input_size = [train.sample_shape[1], train.sample_shape[2]];
            mc
        }
        _ => {
            let mut mc = ModelConfig::sensor(train.sample_shape[0], train.class_count, cfg.norm);
            mc.sensor = cfg.model.sensor.clone();
            mc
        }
    };
    mc.seed = derive_seed(cfg.seed, Purpose::Init, 0);
    mc
}

fn gen_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let splits = prepare_data(cfg)?;
    let dir = cfg.out_dir.join("data");
    std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    let mut out = Vec::new();
    for (name, ds) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
        ("probe", &splits.all_subjects),
    ] {
        let path = dir.join(format!("{name}.anrm"));
        dataset_write(ds, &path)?;
        out.push(path);
    }
    let path = dir.join("samples.csv");
    write_manifest(
        &path,
        &[
            ("train", &splits.train),
            ("val", &splits.val),
            ("test", &splits.test),
            ("probe", &splits.all_subjects),
        ],
    )?;
    out.push(path);
    Ok(out)
}

fn train_cmd(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let splits = prepare_data(cfg)?;
    let mut model = build_model::<f32>(&model_config(cfg, &splits.train))?;
    let tc = TrainConfig {
        seed: derive_seed(cfg.seed, Purpose::Shuffle, 0),
        ..cfg.train.clone()
    };
    if tc.eval_scheme.averaging() != cfg.norm.averaging() {
        return Err(CliError::Validation(format!(
            "validation scheme {} does not fit a model trained with {}",
            tc.eval_scheme,
            cfg.norm.label()
        )));
    }
    let outcome = train(&mut model, &splits.train, &splits.val, &tc)?;
    log::info!(
        "best validation accuracy {:.4} at epoch {}",
        outcome.best_val_acc,
        outcome.best_epoch
    );
    let checkpoint = cfg.out_dir.join("checkpoint.anrm");
    checkpoint_write(&model, &checkpoint)?;
    let history = cfg.out_dir.join("history.csv");
    write_history(&history, &outcome.history)?;
    // Wall-clock times vary between runs, so they live outside the
    // reproducible artifacts.
    write_timing(&cfg.out_dir.join("timing.csv"), &outcome.history)?;
    let echo = cfg.out_dir.join("config.toml");
    std::fs::write(&echo, cfg.canonical()).map_err(|e| io_error(&echo, e))?;
    Ok(vec![checkpoint, history, echo])
}

fn eval_cmd(cfg: &ExperimentConfig, model: &Model<f32>) -> Result<Vec<PathBuf>, CliError> {
    let splits = prepare_data(cfg)?;
    let mut rows = Vec::new();
    for scheme in cfg.eval_schemes() {
        let acc = evaluate(model, &splits.test, scheme, cfg.eval.batch_size)?;
        log::info!("{scheme}: {acc:.4}");
        rows.push((scheme, acc));
    }
    let path = cfg.out_dir.join("accuracy.csv");
    write_accuracy_rows(&path, model.norm_spec(), &rows)?;
    Ok(vec![path])
}

fn diagnose_cmd(cfg: &ExperimentConfig, model: &Model<f32>) -> Result<Vec<PathBuf>, CliError> {
    let splits = prepare_data(cfg)?;
    let layers = if cfg.diagnose.layer_prefix.is_empty() {
        LayerSelection::All
    } else {
        LayerSelection::Prefix(cfg.diagnose.layer_prefix.clone())
    };
    let bs = cfg.diagnose.batch_size;
    let mut reports = Vec::new();
    for mode in cfg.diagnose_modes() {
        reports.extend(match mode {
            DiagnoseMode::TrainRunning => {
                collect_normalized_moments(model, &splits.test, MomentSource::TrainRunning, &layers, bs)?
            }
            DiagnoseMode::HalfSplit => half_split_protocol(model, &splits.test, cfg.seed, &layers, bs)?,
        });
    }
    Ok(emit_report(&reports, cfg.diagnose.bins, cfg.diagnose.svg, &cfg.out_dir.join("diagnose"))?)
}

fn invariance_cmd(cfg: &ExperimentConfig, model: &Model<f32>) -> Result<Vec<PathBuf>, CliError> {
    let splits = prepare_data(cfg)?;
    if splits.all_subjects.extraneous_count < 2 {
        return Err(CliError::Validation(
            "the probe set has a single extraneous value; list corruptions or use the synthetic source".into(),
        ));
    }
    let mut rows = Vec::new();
    for scheme in cfg.invariance_schemes() {
        let bank = extract_features(model, &splits.all_subjects, &cfg.invariance.layer, scheme, cfg.eval.batch_size)?;
        let r = run_invariance(&bank, cfg.seed, &cfg.invariance.train, cfg.invariance.scale)?;
        log::info!("{scheme}: decoding accuracy {:.4} (chance {:.4})", r.decode_acc, r.chance);
        rows.push(InvarianceRow {
            model_id: bank.model_digest[..12].to_string(),
            layer: cfg.invariance.layer.clone(),
            scheme: scheme.to_string(),
            statistic: format!("{:?}", model.norm_spec().statistic()).to_lowercase(),
            decode_acc: r.decode_acc,
            chance: r.chance,
        });
    }
    let path = cfg.out_dir.join("invariance.csv");
    write_invariance_csv(&path, &rows)?;
    Ok(vec![path])
}

fn repro_cmd(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let dir = cfg.out_dir.join("repro");
    std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    let fashion = std::env::var_os("ADANORM_FASHION_MNIST").map(PathBuf::from);
    let suite = run_suite(&cfg.repro, fashion.as_deref(), |c| log::info!("{c}"))?;
    let written = suite.write(&dir)?;
    let failed: Vec<_> = suite.criteria.iter().filter(|c| !c.passed()).map(|c| c.id).collect();
    if !failed.is_empty() {
        return Err(CliError::Runtime(Error::Training(format!(
            "criteria not met: {} (see {})",
            failed.join(", "),
            dir.display()
        ))));
    }
    Ok(written)
}

