//! Teacher-forced training of [`KuroNet`] with Adam, one page per step.

mod checkpoint;
mod loss;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmentation::{apply_brightness, mixup, sample_brightness, sample_lambda, MixupConfig};
use crate::corpus::{page_tensor, rasterize_labels, CharacterVocabulary, CorpusError, LabelMaps, PageSample};
use crate::model::{Architecture, Gradients, KuroNet, ModelConfig, ModelError};
use crate::tensor::{adam_step, AdamConfig, AdamState, TensorError};
use crate::{Scalar, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, RngState, CHECKPOINT_VERSION};
pub use loss::{compute_loss, loss_and_gradients, LossBreakdown};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set has no labelled pages")]
    EmptyTrainingSet,
    #[error("labels at resolution {labels} but the model expects {model}")]
    ResolutionMismatch { labels: usize, model: usize },
    #[error("non-finite loss on page {page_id} at step {step}")]
    NonFiniteLoss { page_id: String, step: u64 },
    #[error("checkpoint was trained on {expected} classes but the corpus vocabulary has {found}")]
    Vocabulary { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Named configurations of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Residual U-Net with mixup.
    #[default]
    Kuronet,
    /// Residual U-Net without mixup.
    ResunetNomixup,
    /// Concatenation-skip U-Net without mixup, predicting fewer classes.
    UnetSmall,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Kuronet, Preset::ResunetNomixup, Preset::UnetSmall];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Kuronet => "kuronet",
            Preset::ResunetNomixup => "resunet_nomixup",
            Preset::UnetSmall => "unet_small",
        }
    }

    pub fn architecture(self) -> Architecture {
        match self {
            Preset::UnetSmall => Architecture::Plain,
            _ => Architecture::Residual,
        }
    }

    pub fn uses_mixup(self) -> bool {
        self == Preset::Kuronet
    }

    /// Class cap for a configured cap of `k`: unchanged, except that the
    /// small model keeps the 409/4000 fraction of it (at least 2).
    pub fn class_cap(self, k: usize) -> usize {
        match self {
            Preset::UnetSmall => ((k as f64 * 409.0 / 4000.0).round() as usize).max(2),
            _ => k,
        }
    }

    /// Model config this preset trains, starting from `base`.
    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            architecture: self.architecture(),
            num_classes: self.class_cap(base.num_classes),
            ..base.clone()
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown preset {s:?}; expected kuronet, resunet_nomixup or unet_small"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub presence_loss_weight: f64,
    pub seed: u64,
    pub mixup: MixupConfig,
    pub preset: Preset,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 80,
            batch_size: 1,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            presence_loss_weight: 1.0,
            seed: 0,
            mixup: MixupConfig::default(),
            preset: Preset::Kuronet,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.batch_size != 1 {
            return fail(format!("batch_size must be 1, got {}", self.batch_size));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be a finite non-negative number, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.presence_loss_weight >= 0.0 && self.presence_loss_weight.is_finite()) {
            return fail(format!(
                "presence_loss_weight must be non-negative, got {}",
                self.presence_loss_weight
            ));
        }
        self.mixup.validate().map_err(TrainError::Config)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    /// Mixup is applied only when both the preset and the config allow it.
    pub fn mixup_active(&self) -> bool {
        self.mixup.enabled && self.preset.uses_mixup()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based index of the completed epoch.
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_presence_loss: f64,
    pub mean_character_loss: f64,
    pub mean_presence_accuracy: f64,
    pub mean_lambda: f64,
}

struct PreparedPage<T> {
    page_id: String,
    image: Tensor<T>,
    labels: LabelMaps,
}

/// Resizes every labelled page once; unlabelled pages are dropped.
fn prepare<T: Scalar>(samples: &[PageSample], vocab: &CharacterVocabulary, r: usize) -> Result<Vec<PreparedPage<T>>> {
    samples
        .iter()
        .filter(|s| !s.is_excluded())
        .map(|s| {
            Ok(PreparedPage {
                page_id: s.page_id.clone(),
                image: page_tensor(&s.image, r),
                labels: rasterize_labels(s, vocab, r)?,
            })
        })
        .collect()
}

/// Owns the model, optimizer state and data order of a training run.
pub struct Trainer<T> {
    model: KuroNet<T>,
    vocab: CharacterVocabulary,
    config: TrainConfig,
    adam: AdamState<T>,
    grads: Gradients<T>,
    rng: ChaCha8Rng,
    pages: Vec<PreparedPage<T>>,
    epoch: usize,
    step: u64,
}

impl<T: Scalar> Trainer<T> {
    /// Builds the vocabulary from `samples`, initialises the preset's model
    /// from `config.seed` and prepares every labelled page.
    pub fn new(model: &ModelConfig, config: TrainConfig, samples: &[PageSample]) -> Result<Self> {
        config.validate()?;
        let mut model_cfg = config.preset.model_config(model);
        model_cfg.validate()?;
        let vocab = CharacterVocabulary::build(samples, model_cfg.num_classes).map_err(|e| match e {
            CorpusError::NoLabels => TrainError::EmptyTrainingSet,
            e => e.into(),
        })?;
        model_cfg.num_classes = vocab.len();
        let pages = prepare(samples, &vocab, model_cfg.input_resolution)?;
        let net = KuroNet::new(model_cfg, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            adam: AdamState::zeros_like(net.params().values()),
            grads: Gradients::zeros_like(net.params()),
            model: net,
            vocab,
            config,
            rng,
            pages,
            epoch: 0,
            step: 0,
        })
    }

    /// Continues a run from a checkpoint; `samples` must be the same pages.
    pub fn resume(ckpt: Checkpoint, samples: &[PageSample]) -> Result<Self> {
        ckpt.train.validate()?;
        let net: KuroNet<T> = ckpt.model.cast();
        let pages = prepare(samples, &ckpt.vocab, net.resolution())?;
        if pages.is_empty() {
            return Err(TrainError::EmptyTrainingSet);
        }
        if net.num_classes() != ckpt.vocab.len() {
            return Err(TrainError::Vocabulary {
                expected: net.num_classes(),
                found: ckpt.vocab.len(),
            });
        }
        Ok(Self {
            adam: AdamState {
                m: ckpt.adam.m.iter().map(Tensor::cast).collect(),
                v: ckpt.adam.v.iter().map(Tensor::cast).collect(),
                t: ckpt.adam.t,
            },
            grads: Gradients::zeros_like(net.params()),
            model: net,
            vocab: ckpt.vocab,
            config: ckpt.train,
            rng: ckpt.rng.restore(),
            pages,
            epoch: ckpt.epoch,
            step: ckpt.step,
        })
    }

    pub fn model(&self) -> &KuroNet<T> {
        &self.model
    }

    pub fn vocab(&self) -> &CharacterVocabulary {
        &self.vocab
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Changes the epoch target, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    /// One pass over the shuffled training pages.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let mut order: Vec<usize> = (0..self.pages.len()).collect();
        order.shuffle(&mut self.rng);
        let adam = self.config.adam();
        let mixing = self.config.mixup_active();
        let mut sums = [0.0f64; 5];
        for &i2 in &order {
            // drawn unconditionally so the stream is the same with mixup off
            let i1 = self.rng.random_range(0..self.pages.len());
            let lambda = sample_lambda(&self.config.mixup, &mut self.rng);
            let b1 = sample_brightness(&mut self.rng);
            let b2 = sample_brightness(&mut self.rng);
            let lambda = if mixing { lambda } else { 0.0 };
            let x2 = apply_brightness(&self.pages[i2].image, b2);
            let x = if lambda > 0.0 {
                mixup(&apply_brightness(&self.pages[i1].image, b1), &x2, lambda)?
            } else {
                x2
            };

            for g in &mut self.grads.tensors {
                g.data_mut().fill(T::zero());
            }
            let page = &self.pages[i2];
            let loss = loss_and_gradients(
                &self.model,
                &x,
                &page.labels,
                self.config.presence_loss_weight,
                &mut self.grads,
            )?;
            if !loss.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    page_id: page.page_id.clone(),
                    step: self.step,
                });
            }
            adam_step(
                self.model.params_mut().values_mut(),
                &self.grads.tensors,
                &mut self.adam,
                &adam,
            )
            .map_err(|e| match e {
                TensorError::NonFinite { .. } => TrainError::NonFiniteLoss {
                    page_id: page.page_id.clone(),
                    step: self.step,
                },
                e => e.into(),
            })?;
            self.step += 1;
            for (s, v) in sums.iter_mut().zip([
                loss.total,
                loss.presence,
                loss.character,
                loss.presence_accuracy,
                lambda,
            ]) {
                *s += v;
            }
        }
        self.epoch += 1;
        let n = order.len() as f64;
        Ok(EpochLog {
            epoch: self.epoch,
            steps: order.len(),
            mean_loss: sums[0] / n,
            mean_presence_loss: sums[1] / n,
            mean_character_loss: sums[2] / n,
            mean_presence_accuracy: sums[3] / n,
            mean_lambda: sums[4] / n,
        })
    }

    /// Trains until `config.epochs` epochs are complete, reporting each one.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochLog, &Self)) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < self.config.epochs {
            let log = self.run_epoch()?;
            on_epoch(&log, self);
            logs.push(log);
        }
        Ok(logs)
    }

    /// Snapshot of everything needed to continue bit-identically.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.cast(),
            vocab: self.vocab.clone(),
            train: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: RngState::capture(&self.rng),
            adam: AdamState {
                m: self.adam.m.iter().map(Tensor::cast).collect(),
                v: self.adam.v.iter().map(Tensor::cast).collect(),
                t: self.adam.t,
            },
        }
    }
}

/// Summary of a finished [`train`] call.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub logs: Vec<EpochLog>,
    pub seconds: f64,
}

/// Trains from scratch in 32-bit precision.
pub fn train(model: &ModelConfig, config: TrainConfig, samples: &[PageSample]) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut trainer = Trainer::<f32>::new(model, config, samples)?;
    let logs = trainer.run(|_, _| {})?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        logs,
        seconds: start.elapsed().as_secs_f64(),
    })
}
