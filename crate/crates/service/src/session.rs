use std::collections::{HashSet, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;

use base64::Engine;
use pyrstyle::imageio::{encode_png, Image};
use pyrstyle::losses::RatingFeedback;
use pyrstyle::model::StyleModel;
use pyrstyle::trainer::{
    unix_seconds, Dataset, MetricsRow, RunSummary, StepRecord, Trainer, TrainingObserver,
};

use crate::api::{
    AppliedRating, EncodedImage, SampleRecord, StatusReport, StepSummary, TrainingState,
    API_VERSION,
};

pub const RATING_QUEUE: usize = 64;
pub const SAMPLE_QUEUE: usize = 64;
pub const STEP_HISTORY: usize = 4096;

pub(crate) enum RateOutcome {
    Accepted,
    Unknown,
    AlreadyRated,
    QueueFull,
}

#[derive(Default)]
struct SampleBuffer {
    /// Oldest first.
    unrated: VecDeque<SampleRecord>,
    rated: HashSet<String>,
}

#[derive(Default)]
struct History {
    epochs: Vec<MetricsRow>,
    steps: VecDeque<StepSummary>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// State shared between HTTP handlers and the training thread.
pub struct Session {
    capacity: usize,
    status: Mutex<StatusReport>,
    samples: Mutex<SampleBuffer>,
    sample_tx: SyncSender<SampleRecord>,
    sample_rx: Mutex<Receiver<SampleRecord>>,
    rating_tx: SyncSender<RatingFeedback>,
    rating_rx: Mutex<Option<Receiver<RatingFeedback>>>,
    pending: AtomicUsize,
    history: Mutex<History>,
    model: Mutex<Option<Arc<StyleModel>>>,
    stop: AtomicBool,
    next_sample: AtomicU64,
}

impl Session {
    /// An idle session keeping at most `capacity` unrated samples.
    pub fn new(capacity: usize) -> Arc<Self> {
        let (sample_tx, sample_rx) = sync_channel(SAMPLE_QUEUE);
        let (rating_tx, rating_rx) = sync_channel(RATING_QUEUE);
        Arc::new(Session {
            capacity: capacity.max(1),
            status: Mutex::new(StatusReport {
                v: API_VERSION,
                state: TrainingState::Idle,
                epoch: 0,
                latest: None,
                gamma: None,
                pending_ratings: 0,
                error: None,
            }),
            samples: Mutex::default(),
            sample_tx,
            sample_rx: Mutex::new(sample_rx),
            rating_tx,
            rating_rx: Mutex::new(Some(rating_rx)),
            pending: AtomicUsize::new(0),
            history: Mutex::default(),
            model: Mutex::new(None),
            stop: AtomicBool::new(false),
            next_sample: AtomicU64::new(1),
        })
    }

    /// Make `model` available to `/api/stylize`.
    pub fn publish_model(&self, model: StyleModel) {
        lock(&self.status).gamma = Some(model.gamma());
        *lock(&self.model) = Some(Arc::new(model));
    }

    pub fn model(&self) -> Option<Arc<StyleModel>> {
        lock(&self.model).clone()
    }

    /// Ask the training thread to stop after the current epoch.
    pub fn request_stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn status(&self) -> StatusReport {
        let mut s = lock(&self.status).clone();
        s.pending_ratings = self.pending.load(Ordering::SeqCst);
        s
    }

    fn pull_samples(&self, buf: &mut SampleBuffer) {
        let rx = lock(&self.sample_rx);
        while let Ok(rec) = rx.try_recv() {
            buf.unrated.push_back(rec);
            while buf.unrated.len() > self.capacity {
                buf.unrated.pop_front();
            }
        }
    }

    /// Unrated samples, newest first.
    pub fn unrated_samples(&self) -> Vec<SampleRecord> {
        let mut buf = lock(&self.samples);
        self.pull_samples(&mut buf);
        buf.unrated.iter().rev().cloned().collect()
    }

    pub(crate) fn rate(&self, rating: RatingFeedback) -> RateOutcome {
        let mut buf = lock(&self.samples);
        self.pull_samples(&mut buf);
        if buf.rated.contains(&rating.sample_id) {
            return RateOutcome::AlreadyRated;
        }
        let Some(pos) = buf
            .unrated
            .iter()
            .position(|s| s.sample_id == rating.sample_id)
        else {
            return RateOutcome::Unknown;
        };
        let id = rating.sample_id.clone();
        self.pending.fetch_add(1, Ordering::SeqCst);
        match self.rating_tx.try_send(rating) {
            Ok(()) => {
                buf.unrated.remove(pos);
                buf.rated.insert(id);
                RateOutcome::Accepted
            }
            Err(_) => {
                self.pending.fetch_sub(1, Ordering::SeqCst);
                RateOutcome::QueueFull
            }
        }
    }

    pub fn history(&self) -> (Vec<MetricsRow>, Vec<StepSummary>) {
        let h = lock(&self.history);
        (h.epochs.clone(), h.steps.iter().cloned().collect())
    }

    /// Observer feeding this session from the training thread. Only one
    /// observer can take the rating queue.
    pub fn observer(self: &Arc<Self>, sample_dir: Option<PathBuf>) -> Option<ServiceObserver> {
        let ratings = lock(&self.rating_rx).take()?;
        Some(ServiceObserver {
            session: Arc::clone(self),
            ratings,
            sample_dir,
        })
    }
}

pub fn encode_image(img: &Image) -> pyrstyle::Result<EncodedImage> {
    Ok(EncodedImage {
        format: "png".into(),
        width: img.width(),
        height: img.height(),
        data: base64::engine::general_purpose::STANDARD.encode(encode_png(img)?),
    })
}

pub struct ServiceObserver {
    session: Arc<Session>,
    ratings: Receiver<RatingFeedback>,
    sample_dir: Option<PathBuf>,
}

impl ServiceObserver {
    fn publish_sample(&self, record: &StepRecord, img: &Image) {
        let id = self
            .session
            .next_sample
            .fetch_add(1, Ordering::SeqCst)
            .to_string();
        let image = match encode_image(img) {
            Ok(e) => e,
            Err(e) => {
                log::warn!("sample {id} not published: {e}");
                return;
            }
        };
        if let Some(dir) = &self.sample_dir {
            let path = dir.join(format!("sample-{id}.png"));
            if let Err(e) = std::fs::create_dir_all(dir).and_then(|_| {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(&image.data)
                    .expect("own encoding");
                std::fs::write(&path, bytes)
            }) {
                log::warn!("cannot save {}: {e}", path.display());
            }
        }
        let rec = SampleRecord {
            sample_id: id,
            epoch: record.epoch,
            step: record.step,
            content_ref: record.content.clone(),
            style_ref: record.style.clone(),
            image,
            created_at: unix_seconds(),
            rated: false,
        };
        if let Err(TrySendError::Full(rec)) = self.session.sample_tx.try_send(rec) {
            log::warn!("sample queue full; dropping sample {}", rec.sample_id);
        }
    }
}

impl TrainingObserver for ServiceObserver {
    fn drain_ratings(&mut self) -> Vec<RatingFeedback> {
        self.ratings.try_iter().collect()
    }

    fn on_step(&mut self, record: &StepRecord) {
        if record.rating.is_some() {
            self.session.pending.fetch_sub(1, Ordering::SeqCst);
        }
        let r = &record.report;
        {
            let mut h = lock(&self.session.history);
            h.steps.push_back(StepSummary {
                step: record.step,
                epoch: record.epoch,
                l_c: r.l_c,
                l_s: r.l_s,
                l_id1: r.l_id1,
                l_id2: r.l_id2,
                l_total: r.l_total,
                l_new: r.l_new,
                gamma: record.gamma,
                rating: record.rating.as_ref().map(|f| AppliedRating {
                    sample_id: f.sample_id.clone(),
                    rating: f.rating,
                }),
            });
            while h.steps.len() > STEP_HISTORY {
                h.steps.pop_front();
            }
        }
        if let Some(img) = &record.sample {
            self.publish_sample(record, img);
        }
    }

    fn on_epoch_end(&mut self, row: &MetricsRow, model: &StyleModel) {
        lock(&self.session.history).epochs.push(*row);
        self.session.publish_model(model.clone());
        let mut s = lock(&self.session.status);
        s.epoch = row.epoch;
        s.latest = Some(*row);
    }

    fn should_stop(&mut self) -> bool {
        self.session.stop.load(Ordering::SeqCst)
    }
}

/// Run `trainer` on its own thread, reporting into `session`.
pub fn spawn_training(
    session: &Arc<Session>,
    mut trainer: Trainer,
    data: Dataset,
    out_dir: PathBuf,
) -> pyrstyle::Result<JoinHandle<pyrstyle::Result<RunSummary>>> {
    let mut observer = session
        .observer(Some(out_dir.join("samples")))
        .ok_or_else(|| {
            pyrstyle::Error::Contract("training already started for this session".into())
        })?;
    {
        let mut s = lock(&session.status);
        s.state = TrainingState::Training;
        s.epoch = trainer.epoch;
        s.gamma = Some(trainer.model.gamma());
    }
    if trainer.epoch > 0 {
        session.publish_model(trainer.model.clone());
    }
    let session = Arc::clone(session);
    Ok(std::thread::spawn(move || {
        let result = trainer.run(&data, &out_dir, &mut observer);
        let mut s = lock(&session.status);
        s.state = TrainingState::Stopped;
        if let Err(e) = &result {
            log::error!("training stopped: {e}");
            s.error = Some(e.to_string());
        }
        result
    }))
}
