//! Mini-batch training with optional adversarial augmentation, gradient
//! clipping, validation-based early stopping and checkpointing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advaug::{self, AdvConfig, AdvMethod, StepStats};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::model::{batch_loss, save_checkpoint, Example, Params};

pub use crate::model::load_checkpoint;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Scalar type used for training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumericMode {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub max_epochs: usize,
    /// Non-improving validation epochs tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    pub adv: AdvConfig,
    pub numeric: NumericMode,
    /// Global L2 clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop as soon as the epoch's mean clean training loss drops below this.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            max_epochs: 30,
            patience: 5,
            seed: 42,
            adv: AdvConfig::default(),
            numeric: NumericMode::F32,
            clip_norm: Some(1.0),
            target_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.patience == 0 {
            return Err(Error::InvalidConfig("patience must be >= 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig(format!("clip_norm must be > 0, got {c}")));
            }
        }
        if self.adv.method != AdvMethod::None {
            self.adv.validate()?;
        }
        Ok(())
    }
}

// -------------------------------------------------------------- optimizer

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[allow(clippy::large_enum_variant)]
pub enum Optimizer<F> {
    Sgd { lr: F },
    Adam { lr: F, m: Params<F>, v: Params<F>, t: i32 },
}

impl<F: Float> Optimizer<F> {
    pub fn new(kind: OptimizerKind, lr: f64, params: &Params<F>) -> Self {
        let lr = F::of(lr);
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                m: params.zeros_like(),
                v: params.zeros_like(),
                t: 0,
            },
        }
    }

    pub fn step(&mut self, params: &mut Params<F>, grad: &Params<F>) {
        match self {
            Optimizer::Sgd { lr } => params.axpy(-*lr, grad),
            Optimizer::Adam { lr, m, v, t } => {
                *t += 1;
                let (b1, b2) = (F::of(ADAM_BETA1), F::of(ADAM_BETA2));
                let c1 = F::one() - b1.powi(*t);
                let c2 = F::one() - b2.powi(*t);
                let step = *lr * c2.sqrt() / c1;
                let eps = F::of(ADAM_EPS) * c2.sqrt();
                let iter = params
                    .tensors_mut()
                    .into_iter()
                    .zip(grad.tensors())
                    .zip(m.tensors_mut().into_iter().zip(v.tensors_mut()));
                for ((p, g), (m, v)) in iter {
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
                    for ((p, &g), (m, v)) in it {
                        *m = b1 * *m + (F::one() - b1) * g;
                        *v = b2 * *v + (F::one() - b2) * g * g;
                        *p -= step * *m / (v.sqrt() + eps);
                    }
                }
            }
        }
    }
}

// ------------------------------------------------------------------- logs

/// Line-delimited JSON sink for training records.
pub struct TrainLog {
    out: Box<dyn Write + Send>,
}

impl TrainLog {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: Box::new(BufWriter::new(f)),
        })
    }

    pub fn from_writer(w: impl Write + Send + 'static) -> Self {
        Self { out: Box::new(w) }
    }

    pub fn record<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io("<train log>", e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io("<train log>", e))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub kind: String,
    pub epoch: usize,
    pub step: usize,
    pub clean_loss: f64,
    pub method: AdvMethod,
    pub adversarial: Vec<StepStats>,
    /// `L + ε/2 ‖∂L/∂x‖₁` and the L2 counterpart on the clean batch.
    pub regularized_l1: f64,
    pub regularized_l2: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean clean loss over the epoch's batches, measured before each update.
    pub train_loss: f64,
    /// Mean loss at the perturbed inputs, when a method is active.
    pub adversarial_loss: Option<f64>,
    pub steps: usize,
    pub clipped_steps: usize,
}

// ---------------------------------------------------------------- trainer

pub struct Trainer<F: Float> {
    pub params: Params<F>,
    pub cfg: TrainConfig,
    optimizer: Optimizer<F>,
    epoch: usize,
    log: Option<TrainLog>,
}

impl<F: Float> Trainer<F> {
    pub fn new(params: Params<F>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &params);
        Ok(Self {
            params,
            cfg,
            optimizer,
            epoch: 0,
            log: None,
        })
    }

    pub fn with_log(mut self, log: TrainLog) -> Self {
        self.log = Some(log);
        self
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Batch order for an epoch depends only on the seed and epoch index.
    pub fn batch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }

    /// One optimization step on `batch`. Returns the clean loss, the mean
    /// adversarial loss (if any) and whether the gradient was clipped.
    pub fn step(&mut self, batch: &[Example], batch_id: usize) -> Result<(f64, Option<f64>, bool)> {
        let adv = &self.cfg.adv;
        let gen = advaug::generate(&self.params, batch, adv, Some(batch_id))?;
        let mut grad = advaug::augmented_step_gradient(&gen.clean_grad, &gen, adv)?;
        if !grad.is_finite() {
            return Err(Error::NonFiniteLoss {
                batch: Some(batch_id),
                example: 0,
            });
        }
        let norm = grad.global_l2_norm().as_f64();
        let clipped = match self.cfg.clip_norm {
            Some(c) if norm > c => {
                grad.scale(F::of(c / norm));
                true
            }
            _ => false,
        };
        self.optimizer.step(&mut self.params, &grad);

        let clean = gen.clean_loss.as_f64();
        let adv_loss = (!gen.steps.is_empty())
            .then(|| gen.steps.iter().map(|s| s.loss.as_f64()).sum::<f64>() / gen.steps.len() as f64);
        if let Some(log) = &mut self.log {
            let stats = gen.stats();
            log.record(&StepRecord {
                kind: "step".into(),
                epoch: self.epoch + 1,
                step: batch_id,
                clean_loss: clean,
                method: adv.method,
                adversarial: stats.steps,
                regularized_l1: stats.regularized_l1,
                regularized_l2: stats.regularized_l2,
                grad_norm: norm,
                clipped,
            })?;
            if clipped {
                log::debug!("epoch {} step {batch_id}: clipped gradient norm {norm:.4}", self.epoch + 1);
            }
        }
        Ok((clean, adv_loss, clipped))
    }

    pub fn train_epoch(&mut self, train: &[Example]) -> Result<EpochStats> {
        if train.is_empty() {
            return Err(Error::EmptyDataset("training set"));
        }
        let order = Self::batch_order(self.cfg.seed, self.epoch, train.len());
        let mut clean_sum = 0.0;
        let mut adv_sum = 0.0;
        let mut adv_seen = false;
        let mut clipped_steps = 0;
        let mut steps = 0;
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<Example> = idx.iter().map(|&i| train[i].clone()).collect();
            let (clean, adv, clipped) = self.step(&batch, b)?;
            clean_sum += clean * batch.len() as f64;
            if let Some(a) = adv {
                adv_sum += a * batch.len() as f64;
                adv_seen = true;
            }
            clipped_steps += clipped as usize;
            steps += 1;
        }
        self.epoch += 1;
        let n = train.len() as f64;
        Ok(EpochStats {
            epoch: self.epoch,
            train_loss: clean_sum / n,
            adversarial_loss: adv_seen.then_some(adv_sum / n),
            steps,
            clipped_steps,
        })
    }

    pub fn into_params(self) -> Params<F> {
        self.params
    }
}

// --------------------------------------------------------- early stopping

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    TargetLoss,
}

/// Tracks the best validation loss. Only a strict decrease counts as an
/// improvement. Epochs are 1-based.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
    seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience: patience.max(1),
            best: None,
            since_best: 0,
            seen: 0,
        }
    }

    /// Records the next epoch's loss; returns true when it is the new best.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.seen += 1;
        match self.best {
            Some((_, b)) if !(loss < b) => {
                self.since_best += 1;
                false
            }
            _ => {
                self.best = Some((self.seen, loss));
                self.since_best = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|b| b.0)
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best.map(|b| b.1)
    }

    /// Replays a loss sequence: `(stop epoch, best epoch)`, where the stop
    /// epoch is the last epoch run under `max_epochs`.
    pub fn replay(losses: &[f64], patience: usize) -> (usize, usize) {
        let mut es = EarlyStopping::new(patience);
        for &l in losses {
            es.observe(l);
            if es.should_stop() {
                break;
            }
        }
        (es.seen, es.best_epoch().unwrap_or(0))
    }
}

// -------------------------------------------------------------------- fit

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub kind: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub adversarial_loss: Option<f64>,
    pub valid_loss: f64,
    pub wall_secs: f64,
    pub clipped_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub stop_reason: StopReason,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Best-so-far parameters are written here after each improvement.
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

/// Trains until patience runs out, `max_epochs` is reached or the target
/// loss is met, and returns the parameters of the best validation epoch.
pub fn fit<F: Float>(
    params: Params<F>,
    train: &[Example],
    valid: &[Example],
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<(Params<F>, TrainReport)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    if valid.is_empty() {
        return Err(Error::EmptyDataset("validation set"));
    }
    let mut trainer = Trainer::new(params, cfg.clone())?;
    if let Some(p) = &opts.log {
        trainer = trainer.with_log(TrainLog::create(p)?);
    }
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = trainer.params.clone();
    let mut epochs = Vec::new();
    let mut reason = StopReason::MaxEpochs;

    while trainer.epoch() < cfg.max_epochs {
        let t0 = Instant::now();
        let stats = trainer.train_epoch(train)?;
        let valid_loss = batch_loss(&trainer.params, valid, None)?.as_f64();
        let record = EpochRecord {
            kind: "epoch".into(),
            epoch: stats.epoch,
            train_loss: stats.train_loss,
            adversarial_loss: stats.adversarial_loss,
            valid_loss,
            wall_secs: t0.elapsed().as_secs_f64(),
            clipped_steps: stats.clipped_steps,
        };
        log::info!(
            "epoch {} train {:.4} valid {:.4} ({:.1}s)",
            record.epoch,
            record.train_loss,
            record.valid_loss,
            record.wall_secs
        );
        if let Some(log) = &mut trainer.log {
            log.record(&record)?;
            log.flush()?;
        }
        epochs.push(record);

        if stopper.observe(valid_loss) {
            best = trainer.params.clone();
            if let Some(path) = &opts.checkpoint {
                save_checkpoint(&best, path)?;
            }
        }
        if cfg.target_loss.is_some_and(|t| stats.train_loss < t) {
            reason = StopReason::TargetLoss;
            break;
        }
        if stopper.should_stop() {
            reason = StopReason::Patience;
            break;
        }
    }

    let report = TrainReport {
        epochs,
        best_epoch: stopper.best_epoch().unwrap_or(0),
        best_valid_loss: stopper.best_loss().unwrap_or(f64::NAN),
        stop_reason: reason,
        config: cfg.clone(),
    };
    Ok((best, report))
}
