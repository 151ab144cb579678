//! Optimization loop: three-pass objective, backward, Adam update, metrics,
//! checkpoints and rating intake.

mod adam;
mod checkpoint;
mod dataset;
mod metrics;

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

pub use adam::{adam_update, Adam, AdamConfig};
pub use checkpoint::{Checkpoint, Manifest, RngState, TensorEntry, FORMAT_VERSION};
pub use dataset::{list_images, load_dir, shuffle_seed, Dataset, NamedImage};
pub use metrics::{format_g, read_csv, MetricsRow, MetricsWriter, CSV_HEADER};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::losses::{LossReport, RatingFeedback};
use crate::model::StyleModel;
use crate::params::Graph;
use crate::tensor::{Tape, Tensor};

/// Everything observable about one optimizer step.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub epoch: usize,
    /// Optimizer step count after this update (1-based).
    pub step: u64,
    pub content: String,
    pub style: String,
    pub report: LossReport,
    /// γ used in this step's objective.
    pub gamma: f64,
    pub rating: Option<RatingFeedback>,
    /// Stylized output, present on the last step of every `sample_every`-th
    /// epoch.
    pub sample: Option<Image>,
}

/// Hooks into [`Trainer::run`]. All calls happen on the training thread at
/// step or epoch boundaries.
pub trait TrainingObserver {
    /// Ratings received since the last call. Each queued rating applies to
    /// exactly one subsequent step, in arrival order.
    fn drain_ratings(&mut self) -> Vec<RatingFeedback> {
        Vec::new()
    }

    fn on_step(&mut self, _record: &StepRecord) {}

    /// Called after the epoch's last update with the updated model.
    fn on_epoch_end(&mut self, _row: &MetricsRow, _model: &StyleModel) {}

    /// Checked after every epoch.
    fn should_stop(&mut self) -> bool {
        false
    }
}

pub struct NoObserver;

impl TrainingObserver for NoObserver {}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub report: LossReport,
    pub gamma: f64,
    pub output: Tensor,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub rows: Vec<MetricsRow>,
    pub checkpoint: PathBuf,
    pub stopped: bool,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: StyleModel,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pending: VecDeque<RatingFeedback>,
}

fn adam_config(c: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: c.lr,
        beta1: c.beta1,
        beta2: c.beta2,
        eps: c.adam_eps,
    }
}

pub fn unix_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Median wall-clock seconds of `repeats` full stylizations.
pub fn measure_inference(
    model: &StyleModel,
    content: &Image,
    style: &Image,
    repeats: usize,
) -> Result<f64> {
    let mut times = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        model.stylize(content, style)?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(median(&times))
}

/// Median of sorted samples; the mean of the middle two for even counts.
pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let model = StyleModel::new(&config)?;
        Ok(Self::with_model(config, model))
    }

    pub fn with_model(config: TrainConfig, model: StyleModel) -> Self {
        let adam = Adam::new(adam_config(&config), &model.store);
        Trainer {
            config,
            model,
            adam,
            epoch: 0,
            pending: VecDeque::new(),
        }
    }

    pub fn queue_rating(&mut self, rating: RatingFeedback) {
        self.pending.push_back(rating);
    }

    pub fn pending_ratings(&self) -> usize {
        self.pending.len()
    }

    /// One optimizer step on a single pair. The rating, if any, enters the
    /// objective of this step only.
    pub fn train_step(
        &mut self,
        content: &Tensor,
        style: &Tensor,
        rating: Option<&RatingFeedback>,
    ) -> Result<StepOutcome> {
        let gamma = self.model.gamma();
        let mut tape = Tape::with_precision(self.config.precision);
        let vars = self.model.store.bind(&mut tape);
        let mut g = Graph::new(&mut tape, &vars);
        let obj = match self.model.objective(&mut g, content, style, rating) {
            Err(Error::NonFinite(term)) => return Err(non_finite(&tape, &self.model, &term)),
            other => other?,
        };
        let report = obj.report(&tape)?;
        if !report.l_new.is_finite() {
            return Err(non_finite(&tape, &self.model, "l_new"));
        }
        let grads = tape.backward(obj.augmented)?;
        let mut per_param = Vec::with_capacity(self.model.store.len());
        for id in self.model.store.ids() {
            let g = grads.wrt(vars[id]);
            if g.is_none() && !(id == self.model.gamma_raw && rating.is_none()) {
                return Err(Error::Contract(format!(
                    "parameter {} received no gradient",
                    self.model.store.name(id)
                )));
            }
            per_param.push(g);
        }
        self.adam.update(&mut self.model.store, &per_param);
        Ok(StepOutcome {
            report,
            gamma,
            output: tape.tensor(obj.output),
        })
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.contents.is_empty() || data.styles.is_empty() {
            return Err(Error::Data(
                "dataset needs at least one content and one style image".into(),
            ));
        }
        for img in data.contents.iter().chain(&data.styles) {
            self.model.check_image(&img.image, &img.name)?;
        }
        Ok(())
    }

    /// Train from the next epoch up to `config.epochs`, writing
    /// `metrics.csv`, periodic `checkpoint-epoch{N}.ckpt` files and a final
    /// `checkpoint.ckpt` into `out_dir`.
    pub fn run(
        &mut self,
        data: &Dataset,
        out_dir: &Path,
        observer: &mut dyn TrainingObserver,
    ) -> Result<RunSummary> {
        self.check_dataset(data)?;
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let csv = out_dir.join("metrics.csv");
        let mut writer = if self.epoch == 0 {
            MetricsWriter::create(&csv)?
        } else {
            MetricsWriter::append(&csv)?
        };
        let mut rows = Vec::new();
        let mut stopped = false;
        while self.epoch < self.config.epochs {
            let epoch = self.epoch + 1;
            let mut reports = Vec::new();
            let mut last_gamma = self.model.gamma();
            let order = data.epoch_order(self.config.seed, epoch);
            let publish = epoch.is_multiple_of(self.config.sample_every);
            for (i, &(ci, si)) in order.iter().enumerate() {
                self.pending.extend(observer.drain_ratings());
                let rating = self.pending.pop_front();
                let (c, s) = (&data.contents[ci], &data.styles[si]);
                let outcome =
                    self.train_step(&c.image.to_tensor(), &s.image.to_tensor(), rating.as_ref())?;
                last_gamma = outcome.gamma;
                reports.push(outcome.report);
                let sample = (publish && i + 1 == order.len())
                    .then(|| Image::from_tensor(&outcome.output))
                    .transpose()?;
                observer.on_step(&StepRecord {
                    epoch,
                    step: self.adam.step,
                    content: c.name.clone(),
                    style: s.name.clone(),
                    report: outcome.report,
                    gamma: outcome.gamma,
                    rating,
                    sample,
                });
            }
            let mut row = MetricsRow::from_reports(epoch, &reports, last_gamma);
            if self.config.timing {
                row.inference_seconds = measure_inference(
                    &self.model,
                    &data.contents[0].image,
                    &data.styles[0].image,
                    3,
                )?;
                row.timestamp = unix_seconds();
            }
            writer.write(&row)?;
            log::info!(
                "epoch {epoch}: l_total {} l_new {}",
                format_g(row.l_total),
                format_g(row.l_new)
            );
            self.epoch = epoch;
            observer.on_epoch_end(&row, &self.model);
            rows.push(row);
            if epoch.is_multiple_of(self.config.checkpoint_every) {
                self.checkpoint()
                    .save(out_dir.join(format!("checkpoint-epoch{epoch}.ckpt")))?;
            }
            if observer.should_stop() {
                stopped = true;
                break;
            }
        }
        let path = out_dir.join("checkpoint.ckpt");
        self.checkpoint().save(&path)?;
        Ok(RunSummary {
            rows,
            checkpoint: path,
            stopped,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let store = &self.model.store;
        let mut tensors: Vec<(String, Tensor)> = store
            .names()
            .iter()
            .cloned()
            .zip(
                store
                    .tensors()
                    .iter()
                    .map(|t| t.clone().with_requires_grad(false)),
            )
            .collect();
        for (prefix, moments) in [("adam.m", &self.adam.m), ("adam.v", &self.adam.v)] {
            for ((name, t), data) in store.names().iter().zip(store.tensors()).zip(moments) {
                let m = Tensor::new(t.shape().to_vec(), data.clone()).expect("moment shape");
                tensors.push((format!("{prefix}.{name}"), m));
            }
        }
        Checkpoint {
            manifest: Manifest {
                version: FORMAT_VERSION,
                config: self.config.to_text(),
                epoch: self.epoch,
                adam_step: self.adam.step,
                rng: RngState {
                    shuffle_seed: self.config.seed,
                    next_epoch: self.epoch + 1,
                },
                tensors: Vec::new(),
            },
            tensors,
        }
    }

    /// Rebuild a trainer from a checkpoint. `adjust` may change run-level
    /// settings (epochs, data directories, timing) but not the architecture.
    pub fn from_checkpoint(ck: &Checkpoint, adjust: impl FnOnce(&mut TrainConfig)) -> Result<Self> {
        let saved = TrainConfig::from_text(&ck.manifest.config)?;
        let mut config = saved.clone();
        adjust(&mut config);
        if config.architecture_text() != saved.architecture_text() {
            return Err(Error::Config(
                "configuration does not match the checkpoint architecture".into(),
            ));
        }
        let mut model = StyleModel::new(&config)?;
        let n = model.store.len();
        if ck.tensors.len() != 3 * n {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model expects {}",
                ck.tensors.len(),
                3 * n
            )));
        }
        model.store.load_values(&ck.tensors[..n])?;
        let mut adam = Adam::new(adam_config(&config), &model.store);
        adam.step = ck.manifest.adam_step;
        for (i, (name, t)) in ck.tensors[n..].iter().enumerate() {
            let (k, moments) = if i < n {
                (i, &mut adam.m)
            } else {
                (i - n, &mut adam.v)
            };
            let prefix = if i < n { "adam.m" } else { "adam.v" };
            let want = format!("{prefix}.{}", model.store.names()[k]);
            if name != &want || t.numel() != moments[k].len() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {name} does not match {want}"
                )));
            }
            moments[k].copy_from_slice(t.data());
        }
        let mut trainer = Trainer::with_model(config, model);
        trainer.adam = adam;
        trainer.epoch = ck.manifest.epoch;
        Ok(trainer)
    }

    pub fn load(path: impl AsRef<Path>, adjust: impl FnOnce(&mut TrainConfig)) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, adjust)
    }
}

fn non_finite(tape: &Tape, model: &StyleModel, term: &str) -> Error {
    let origin = match tape.first_non_finite() {
        Some((v, _)) if v.index() < model.store.len() => {
            format!("parameter {}", model.store.names()[v.index()])
        }
        Some((v, kind)) => format!("node {} ({kind})", v.index()),
        None => "no non-finite node recorded".into(),
    };
    Error::NonFinite(format!("{term}; first non-finite tensor: {origin}"))
}
