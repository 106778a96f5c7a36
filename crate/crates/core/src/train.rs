//! Minibatch training loop.
//!
//! Windows inside a batch are processed on the [`Execution`] pool, each on
//! its own tape with a random stream derived from `(seed, epoch, window)`.
//! Gradients are reduced in window order, so results do not depend on the
//! number of threads.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

use crate::cvae::{CvaeError, LossComponents};
use crate::data::{normalize_window, TrajectoryWindow};
use crate::exec::Execution;
use crate::model::{HyperSttn, ModelError, PreparedWindow};
use crate::optim::{scheduled_lr, Adam};
use crate::params::ParamStore;
use crate::rng::stream;
use crate::tensor::{ParamGrads, Tape, TensorError};
use crate::config::TrainConfig;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training needs at least one window")]
    NoWindows,
    #[error(transparent)]
    Model(#[from] ModelError),
    /// A loss component or gradient went non-finite. `last_good` holds the
    /// parameters before the failing update.
    #[error("epoch {epoch}: non-finite {component}; training aborted")]
    Diverged {
        epoch: usize,
        component: String,
        last_good: Box<HyperSttn>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub distance: f64,
    pub kl: f64,
    pub angle: f64,
    pub encoder: f64,
    pub total: f64,
    pub val_total: Option<f64>,
}

pub struct TrainOutcome {
    pub model: HyperSttn,
    pub epochs: Vec<EpochRecord>,
    /// Parameters at the epoch with the lowest validation loss.
    pub best: Option<(usize, ParamStore)>,
}

/// Adds i.i.d. Gaussian noise to observed positions only.
pub fn jitter_observations(w: &TrajectoryWindow, std: f64, rng: &mut impl rand::Rng) -> TrajectoryWindow {
    if std == 0.0 {
        return w.clone();
    }
    let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
    let obs = w.horizon.obs;
    w.map_present(|_, t, p| {
        if t < obs {
            [p[0] + normal.sample(rng), p[1] + normal.sample(rng)]
        } else {
            p
        }
    })
}

fn non_finite_component(e: ModelError) -> std::result::Result<String, ModelError> {
    match e {
        ModelError::Cvae(CvaeError::NonFinite(c)) => Ok(c.to_string()),
        ModelError::Tensor(TensorError::NonFinite { op }) | ModelError::Cvae(CvaeError::Tensor(TensorError::NonFinite { op })) => {
            Ok(format!("forward value in {op}"))
        }
        other => Err(other),
    }
}

#[derive(Debug)]
struct WindowStep {
    grads: ParamGrads,
    components: LossComponents,
}

fn window_step(model: &HyperSttn, w: &TrajectoryWindow, cfg: &TrainConfig, epoch: usize, idx: usize) -> Result<WindowStep, ModelError> {
    let mut rng = stream(cfg.seed, &[epoch as u64, idx as u64]);
    let noisy = jitter_observations(w, cfg.noise_std, &mut rng);
    let prepared = PreparedWindow::new(&noisy);
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, &model.params, &prepared, &mut rng)?;
    let components = loss.components;
    let grads = tape.backward(loss.total)?.into_param_grads(&model.params);
    Ok(WindowStep { grads, components })
}

/// Mean loss over `windows` without noise, using a fixed latent stream.
pub fn validation_loss(model: &HyperSttn, windows: &[TrajectoryWindow], seed: u64, exec: Execution) -> Result<f64, ModelError> {
    let losses = exec.map(windows.len(), |i| -> Result<f64, ModelError> {
        let mut rng = stream(seed, &[u64::MAX, i as u64]);
        let mut tape = Tape::new();
        let p = PreparedWindow::new(&windows[i]);
        Ok(model.loss(&mut tape, &model.params, &p, &mut rng)?.components.total())
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / windows.len().max(1) as f64)
}

/// Trains a fresh model on `windows` (normalised internally).
pub fn train(
    cfg: &TrainConfig,
    windows: &[TrajectoryWindow],
    exec: Execution,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::NoWindows);
    }
    let normalized: Vec<TrajectoryWindow> = windows.iter().map(|w| normalize_window(w).0).collect();
    let n_val = if cfg.val_fraction > 0.0 && normalized.len() > 1 {
        ((normalized.len() as f64 * cfg.val_fraction).ceil() as usize).min(normalized.len() - 1)
    } else {
        0
    };
    let (train_set, val_set) = normalized.split_at(normalized.len() - n_val);

    let mut model = HyperSttn::new(&cfg.model, cfg.seed)?;
    let mut adam = Adam::new(&model.params);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = scheduled_lr(cfg.learning_rate, epoch, cfg.lr_decay_epochs, cfg.lr_decay_factor);
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, &[epoch as u64]));
        let mut epoch_loss = LossComponents::default();
        for batch in order.chunks(cfg.batch_size) {
            let steps = exec.map(batch.len(), |b| window_step(&model, &train_set[batch[b]], cfg, epoch, batch[b]));
            let mut grads = ParamGrads::zeros(&model.params);
            for step in steps {
                let step = match step {
                    Ok(s) => s,
                    Err(e) => {
                        let component = non_finite_component(e)?;
                        return Err(TrainError::Diverged {
                            epoch,
                            component,
                            last_good: Box::new(model),
                        });
                    }
                };
                grads.add_assign(&step.grads);
                epoch_loss.add(&step.components);
            }
            grads.scale(1.0 / batch.len() as f64);
            if grads.0.iter().flatten().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged {
                    epoch,
                    component: "gradient".into(),
                    last_good: Box::new(model),
                });
            }
            adam.step(&mut model.params, &grads, lr);
        }
        epoch_loss.scale(1.0 / train_set.len() as f64);
        let val_total = if val_set.is_empty() {
            None
        } else {
            let v = validation_loss(&model, val_set, cfg.seed, exec)?;
            if best.as_ref().is_none_or(|b| v < b.1) {
                best = Some((epoch, v, model.params.clone()));
            }
            Some(v)
        };
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            distance: epoch_loss.distance,
            kl: epoch_loss.kl,
            angle: epoch_loss.angle,
            encoder: epoch_loss.encoder,
            total: epoch_loss.total(),
            val_total,
        };
        on_epoch(&record);
        records.push(record);
    }
    Ok(TrainOutcome {
        model,
        epochs: records,
        best: best.map(|(e, _, p)| (e, p)),
    })
}
