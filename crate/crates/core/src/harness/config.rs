//! Experiment configuration: a TOML document with nested sections mirroring
//! the sweep parameters. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackSpec;
use crate::data::{load_idx, synthetic_blobs, BlobSpec, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{Architecture, MINI_CNN_ID, MLP_ID};
use crate::prune::{PruneMethod, PruneScope};
use crate::seed;
use crate::train::{TrainConfig, TrainMode};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every stochastic stage derives from it.
    pub seed: u64,
    pub trials: usize,
    /// Also evaluate every model after 8-bit quantization.
    #[serde(default = "default_true")]
    pub quantize: bool,
    /// Emit the unpruned model's three metrics per trial.
    #[serde(default = "default_true")]
    pub unpruned_baseline: bool,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub finetune: TrainSection,
    pub attack: AttackSection,
    pub prune: PruneSection,
}

fn default_true() -> bool {
    true
}

fn default_bins() -> usize {
    64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
pub enum DatasetSection {
    Blobs {
        num_classes: usize,
        per_class_train: usize,
        per_class_test: usize,
        /// (channels, height, width)
        image_shape: [usize; 3],
        noise: f32,
        #[serde(default = "default_sigma")]
        sigma_frac: f32,
        #[serde(default = "default_amplitude")]
        amplitude: f32,
        #[serde(default = "default_background")]
        background: f32,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

fn default_sigma() -> f32 {
    0.13
}

fn default_amplitude() -> f32 {
    0.22
}

fn default_background() -> f32 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// "MiniCNN" or "MLP-784-128-64-10".
    pub architecture: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub base_lr: f32,
    #[serde(default)]
    pub lr_drop_points: Vec<f64>,
    pub weight_decay: f32,
    pub batch_size: usize,
}

impl TrainSection {
    pub fn to_config(&self, mode: TrainMode, run_seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            base_lr: self.base_lr,
            lr_drop_points: if mode == TrainMode::Finetune {
                Vec::new()
            } else {
                self.lr_drop_points.clone()
            },
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed: run_seed,
            mode,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub epsilon: f32,
    pub alpha: f32,
    pub steps: usize,
    pub random_start: bool,
    #[serde(default = "default_clip_min")]
    pub clip_min: f32,
    #[serde(default = "default_clip_max")]
    pub clip_max: f32,
    /// Training samples in the seeded adversarial-evaluation subset.
    #[serde(default = "default_eval_samples")]
    pub eval_sample_size: usize,
}

fn default_clip_min() -> f32 {
    0.0
}

fn default_clip_max() -> f32 {
    1.0
}

fn default_eval_samples() -> usize {
    1024
}

impl AttackSection {
    pub fn to_spec(&self, attack_seed: u64) -> AttackSpec {
        AttackSpec {
            epsilon: self.epsilon,
            alpha: self.alpha,
            steps: self.steps,
            random_start: self.random_start,
            clip_min: self.clip_min,
            clip_max: self.clip_max,
            seed: attack_seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    /// (method, scope) pairs, e.g. `[["magnitude", "global"], ...]`.
    pub pairs: Vec<(String, String)>,
    pub compressions: Vec<f64>,
    #[serde(default = "default_score_samples")]
    pub score_sample_size: usize,
    #[serde(default = "default_score_batch")]
    pub score_batch_size: usize,
}

fn default_score_samples() -> usize {
    2048
}

fn default_score_batch() -> usize {
    256
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The default desk-scale sweep: MiniCNN on synthetic blobs, the six
    /// (method, scope) pairs, compressions {2,4,8}, three trials.
    pub fn desk_default(config_seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            seed: config_seed,
            trials: 3,
            quantize: true,
            unpruned_baseline: true,
            histogram_bins: 64,
            output_dir: output_dir.into(),
            dataset: DatasetSection::Blobs {
                num_classes: 6,
                per_class_train: 200,
                per_class_test: 400,
                image_shape: [3, 16, 16],
                noise: 0.20,
                sigma_frac: 0.30,
                amplitude: 0.24,
                background: 0.5,
            },
            model: ModelSection {
                architecture: MINI_CNN_ID.into(),
            },
            train: TrainSection {
                epochs: 40,
                base_lr: 0.1,
                lr_drop_points: vec![0.25, 0.5],
                weight_decay: 1e-4,
                batch_size: 64,
            },
            finetune: TrainSection {
                epochs: 15,
                base_lr: 0.03,
                lr_drop_points: Vec::new(),
                weight_decay: 1e-4,
                batch_size: 64,
            },
            attack: AttackSection {
                epsilon: 8.0 / 255.0,
                alpha: 2.0 / 255.0,
                steps: 10,
                random_start: true,
                clip_min: 0.0,
                clip_max: 1.0,
                eval_sample_size: 512,
            },
            prune: PruneSection {
                pairs: vec![
                    ("random".into(), "global".into()),
                    ("magnitude".into(), "global".into()),
                    ("magnitude".into(), "layerwise".into()),
                    ("gradient".into(), "global".into()),
                    ("gradient".into(), "layerwise".into()),
                    ("gap".into(), "global".into()),
                ],
                compressions: vec![2.0, 4.0, 8.0],
                score_sample_size: 1024,
                score_batch_size: 256,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::Contract("trials must be >= 1".into()));
        }
        if self.histogram_bins == 0 {
            return Err(Error::Contract("histogram_bins must be >= 1".into()));
        }
        if self.prune.compressions.is_empty() || self.prune.pairs.is_empty() {
            return Err(Error::Contract(
                "prune.pairs and prune.compressions must be non-empty".into(),
            ));
        }
        for &p in &self.prune.compressions {
            if !(p >= 1.0) {
                return Err(Error::Contract(format!("compression {p} must be >= 1")));
            }
        }
        for (m, s) in &self.prune.pairs {
            PruneMethod::parse(m)?;
            PruneScope::parse(s)?;
        }
        self.attack.to_spec(0).validate()?;
        self.train
            .to_config(TrainMode::Train, 0)
            .validate()?;
        self.finetune
            .to_config(TrainMode::Finetune, 0)
            .validate()?;
        match self.model.architecture.as_str() {
            MLP_ID | MINI_CNN_ID => {}
            other => {
                return Err(Error::Contract(format!(
                    "unknown architecture {other:?}"
                )))
            }
        }
        if let DatasetSection::Blobs {
            num_classes,
            per_class_train,
            per_class_test,
            ..
        } = &self.dataset
        {
            if *num_classes == 0 || *per_class_train == 0 || *per_class_test == 0 {
                return Err(Error::Contract("blob dataset sections must be non-zero".into()));
            }
        }
        Ok(())
    }

    /// Materialize the train and test splits.
    pub fn build_datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSection::Blobs {
                num_classes,
                per_class_train,
                per_class_test,
                image_shape,
                noise,
                sigma_frac,
                amplitude,
                background,
            } => {
                let base = BlobSpec {
                    num_classes: *num_classes,
                    per_class: *per_class_train,
                    image_shape: (image_shape[0], image_shape[1], image_shape[2]),
                    noise: *noise,
                    sigma_frac: *sigma_frac,
                    amplitude: *amplitude,
                    background: *background,
                    seed: seed::derive(self.seed, "dataset"),
                };
                let train = synthetic_blobs(&base, Split::Train)?;
                let test = synthetic_blobs(
                    &BlobSpec {
                        per_class: *per_class_test,
                        ..base
                    },
                    Split::Test,
                )?;
                Ok((train, test))
            }
            DatasetSection::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => Ok((
                load_idx(train_images, train_labels, Split::Train)?,
                load_idx(test_images, test_labels, Split::Test)?,
            )),
        }
    }

    pub fn build_architecture(&self, train: &Dataset) -> Result<Architecture> {
        Architecture::from_id(
            &self.model.architecture,
            train.sample_shape(),
            train.num_classes(),
        )
    }
}
