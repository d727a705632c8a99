//! Experiment configuration files.
//!
//! A config is TOML with every table optional; unknown keys are rejected
//! and missing ones take defaults, so the canonical echo of a parsed file
//! lists every setting.

use std::path::{Path, PathBuf};

use adanorm_core::data::{CorruptionKind, SyntheticSensorConfig};
use adanorm_core::experiments::SensorBenchmark;
use adanorm_core::invariance::DecoderScale;
use adanorm_core::models::{ImageConfig, SensorConfig};
use adanorm_core::optim::{EvalScheme, TrainConfig};
use adanorm_core::{Averaging, NormSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Drives initialization, shuffling and probe splits.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ArchitectureConfig,
    pub norm: NormSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub diagnose: DiagnoseConfig,
    pub invariance: InvarianceConfig,
    pub repro: SensorBenchmark,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            model: ArchitectureConfig::default(),
            norm: NormSpec::batch_norm(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            diagnose: DiagnoseConfig::default(),
            invariance: InvarianceConfig::default(),
            repro: SensorBenchmark::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub synthetic: SyntheticSensorConfig,
    pub train_stride: usize,
    pub test_recordings_per_pair: usize,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub idx: IdxConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let bench = SensorBenchmark::default();
        Self {
            source: DataSource::Synthetic,
            synthetic: bench.data,
            train_stride: bench.train_stride,
            test_recordings_per_pair: bench.test_recordings_per_pair,
            train_ids: bench.train_ids,
            val_ids: bench.val_ids,
            test_ids: bench.test_ids,
            idx: IdxConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdxConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Samples drawn from the training file; 0 keeps all but the
    /// validation samples.
    pub train_count: usize,
    pub val_count: usize,
    /// 0 keeps the whole test file.
    pub test_count: usize,
    /// Each test image appears once per listed corruption.
    pub corruptions: Vec<CorruptionKind>,
    pub corruption_severity: u8,
}

impl Default for IdxConfig {
    fn default() -> Self {
        Self {
            train_images: PathBuf::from("train-images-idx3-ubyte"),
            train_labels: PathBuf::from("train-labels-idx1-ubyte"),
            test_images: PathBuf::from("t10k-images-idx3-ubyte"),
            test_labels: PathBuf::from("t10k-labels-idx1-ubyte"),
            train_count: 6000,
            val_count: 1000,
            test_count: 1000,
            corruptions: Vec::new(),
            corruption_severity: 3,
        }
    }
}

impl IdxConfig {
    pub fn files(&self) -> [&Path; 4] {
        [&self.train_images, &self.train_labels, &self.test_images, &self.test_labels]
    }
}

/// Architecture blocks; the one matching the dataset kind is used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub sensor: SensorConfig,
    pub image: ImageConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Empty means every scheme the checkpoint supports.
    pub schemes: Vec<EvalScheme>,
    pub batch_size: usize,
    /// Defaults to `<out_dir>/checkpoint.anrm`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            schemes: Vec::new(),
            batch_size: 64,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnoseMode {
    TrainRunning,
    HalfSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseConfig {
    /// Empty means every mode the checkpoint supports.
    pub modes: Vec<DiagnoseMode>,
    /// Only layers whose name starts with this prefix; empty keeps all.
    pub layer_prefix: String,
    pub bins: usize,
    pub svg: bool,
    pub batch_size: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            modes: Vec::new(),
            layer_prefix: String::new(),
            bins: adanorm_core::diagnostics::HIST_BINS,
            svg: true,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvarianceConfig {
    pub layer: String,
    /// Empty means every scheme the checkpoint supports.
    pub schemes: Vec<EvalScheme>,
    pub scale: DecoderScale,
    pub train: TrainConfig,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        Self {
            layer: adanorm_core::models::PENULTIMATE.into(),
            schemes: Vec::new(),
            scale: DecoderScale::Small,
            train: SensorBenchmark::default().probe_train,
        }
    }
}

/// Schemes a model trained with `norm` can be evaluated under.
pub fn compatible_schemes(norm: &NormSpec) -> Vec<EvalScheme> {
    EvalScheme::ALL
        .into_iter()
        .filter(|s| s.averaging() == norm.averaging())
        .collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Validation(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every setting, defaults included.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.eval
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoint.anrm"))
    }

    pub fn eval_schemes(&self) -> Vec<EvalScheme> {
        if self.eval.schemes.is_empty() {
            compatible_schemes(&self.norm)
        } else {
            self.eval.schemes.clone()
        }
    }

    pub fn invariance_schemes(&self) -> Vec<EvalScheme> {
        if self.invariance.schemes.is_empty() {
            compatible_schemes(&self.norm)
        } else {
            self.invariance.schemes.clone()
        }
    }

    pub fn diagnose_modes(&self) -> Vec<DiagnoseMode> {
        if !self.diagnose.modes.is_empty() {
            return self.diagnose.modes.clone();
        }
        match self.norm.averaging() {
            Averaging::Batch => vec![DiagnoseMode::TrainRunning, DiagnoseMode::HalfSplit],
            Averaging::Instance => vec![DiagnoseMode::HalfSplit],
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |e: adanorm_core::Error| CliError::Validation(e.to_string());
        self.train.validate().map_err(v)?;
        self.invariance.train.validate().map_err(v)?;
        for (what, schemes) in [("eval", &self.eval.schemes), ("invariance", &self.invariance.schemes)] {
            for s in schemes {
                if s.averaging() != self.norm.averaging() {
                    return Err(CliError::Validation(format!(
                        "{what} scheme {s} needs {:?} averaging but the model is trained with {:?} averaging",
                        s.averaging(),
                        self.norm.averaging()
                    )));
                }
            }
        }
        if self.norm.averaging() == Averaging::Instance && self.diagnose.modes.contains(&DiagnoseMode::TrainRunning) {
            return Err(CliError::Validation(
                "train_running diagnostics need running statistics, which instance-averaged models do not keep".into(),
            ));
        }
        if self.eval.batch_size == 0 || self.diagnose.batch_size == 0 || self.diagnose.bins == 0 {
            return Err(CliError::Validation("batch sizes and bin counts must be at least 1".into()));
        }
        if self.dataset.source == DataSource::Idx {
            let idx = &self.dataset.idx;
            for f in idx.files() {
                if !f.exists() {
                    return Err(CliError::Validation(format!("IDX file {} does not exist", f.display())));
                }
            }
            if !(1..=5).contains(&idx.corruption_severity) {
                return Err(CliError::Validation("corruption_severity must lie in 1..=5".into()));
            }
            if idx.val_count == 0 {
                return Err(CliError::Validation("val_count must be at least 1".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_echoes_every_default() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let text = cfg.canonical();
        for key in ["seed", "[dataset.synthetic]", "[norm]", "[train]", "[eval]", "[repro.model]", "momentum"] {
            assert!(text.contains(key), "canonical echo lacks {key}:\n{text}");
        }
    }

    #[test]
    fn canonical_echo_is_a_fixed_point() {
        let cfg = ExperimentConfig::parse("seed = 4\n[norm]\nscheme = \"adaptive\"\naveraging = \"instance\"\nstatistic = \"mean_square\"\n").unwrap();
        let once = cfg.canonical();
        let twice = ExperimentConfig::parse(&once).unwrap().canonical();
        assert_eq!(once, twice);
    }

    #[test]
    fn excluded_combination_is_rejected_with_the_rule() {
        let err = ExperimentConfig::parse("[norm]\nscheme = \"non_adaptive\"\naveraging = \"instance\"\nstatistic = \"mean_std\"\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains(adanorm_core::normalization::EXCLUDED_COMBINATION), "{err}");
    }

    #[test]
    fn unknown_keys_and_type_mismatches_are_rejected() {
        assert!(ExperimentConfig::parse("sed = 1").is_err());
        assert!(ExperimentConfig::parse("[train]\nepochs = \"many\"").is_err());
        assert!(ExperimentConfig::parse("[train]\nepoch = 3").is_err());
    }

    #[test]
    fn non_adaptive_eval_of_instance_model_is_rejected() {
        let text = "[norm]\nscheme = \"adaptive\"\naveraging = \"instance\"\nstatistic = \"mean_std\"\n[eval]\nschemes = [\"non_adaptive\"]\n";
        assert!(ExperimentConfig::parse(text).is_err());
    }

    #[test]
    fn batch_models_evaluate_both_batch_schemes() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.eval_schemes(), vec![EvalScheme::NonAdaptive, EvalScheme::AdaptiveBatch]);
    }
}
