//! Supervised training: MSE loss, classic momentum SGD, per-epoch
//! checkpoints and a loss log.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::{batch_ids, make_batch, FrameCache, FrameRecord};
use crate::error::{Error, Result};
use crate::nmfnet::{InputVars, ModalitySet, Model, NetConfig};
use crate::simworld::derive_seed;
use crate::tensor::{Graph, Mode, ParamId, ParamKind, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub modalities: ModalitySet,
    /// When false, records rendered with randomized textures are skipped.
    pub dr_training: bool,
    /// Global gradient-norm clip; off unless set.
    pub clip: Option<f32>,
    /// Branch sizes. Its modality set is replaced by `modalities`.
    pub net: NetConfig,
    /// Written after every epoch.
    pub checkpoint: Option<PathBuf>,
    /// Loss curve TSV, rewritten after every epoch.
    pub loss_log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            modalities: ModalitySet::ALL,
            dr_training: true,
            clip: None,
            net: NetConfig::default(),
            checkpoint: None,
            loss_log: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip must be positive, got {c}")));
            }
        }
        self.net_config().validate()
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            modalities: self.modalities,
            ..self.net.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Renders a loss curve as `epoch\tstep\tloss` rows.
pub fn loss_curve_tsv(curve: &[LossPoint]) -> String {
    let mut out = String::from("epoch\tstep\tloss\n");
    for p in curve {
        let _ = writeln!(out, "{}\t{}\t{}", p.epoch, p.step, p.loss);
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    /// One buffer per store entry; `None` for non-trainable entries.
    pub velocity: Vec<Option<Tensor<f32>>>,
    pub epoch: usize,
    pub step: usize,
    pub losses: Vec<LossPoint>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let velocity = model
            .params
            .ids()
            .map(|id| match model.params.kind(id) {
                ParamKind::Trainable => Some(Tensor::zeros(model.params.get(id).shape())),
                ParamKind::Buffer => None,
            })
            .collect();
        Self {
            model,
            velocity,
            epoch: 0,
            step: 0,
            losses: Vec::new(),
        }
    }
}

/// `(1/m)·Σ (target − pred)²` on graph nodes of equal shape.
pub fn mse_loss(g: &mut Graph<f32>, pred: Var, target: Var) -> Result<Var> {
    g.mse(pred, target)
}

/// Classic momentum: `v ← momentum·v + g`, `p ← p − lr·v`. Every trainable
/// parameter must have a gradient.
pub fn sgd_step<'a, F>(state: &mut TrainState, grads: F, cfg: &TrainConfig) -> Result<()>
where
    F: Fn(ParamId) -> Option<&'a [f32]>,
{
    let ids: Vec<ParamId> = state
        .model
        .params
        .ids()
        .filter(|&id| state.model.params.kind(id) == ParamKind::Trainable)
        .collect();
    let mut gs = Vec::with_capacity(ids.len());
    for &id in &ids {
        let g = grads(id).ok_or_else(|| Error::IncompleteBackward(state.model.params.name(id).to_string()))?;
        gs.push(g);
    }
    let scale = match cfg.clip {
        Some(c) => {
            let norm = gs
                .iter()
                .flat_map(|g| g.iter())
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            if norm > f64::from(c) {
                (f64::from(c) / norm) as f32
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    for (&id, g) in ids.iter().zip(gs) {
        let v = state.velocity[id.index()]
            .as_mut()
            .expect("trainable parameter has a velocity buffer");
        let p = state.model.params.get_mut(id).data_mut();
        for ((p, v), &g) in p.iter_mut().zip(v.data_mut()).zip(g) {
            *v = cfg.momentum * *v + scale * g;
            *p -= cfg.lr * *v;
        }
    }
    state.step += 1;
    Ok(())
}

/// Forward and backward on one batch in train mode. Returns the loss and
/// the graph holding gradients; batchnorm running statistics are updated.
pub fn forward_backward(model: &mut Model, batch: &crate::dataset::Batch) -> Result<(f64, Graph<f32>)> {
    let mut g = Graph::new();
    let vars = InputVars::bind(&mut g, &batch.input);
    let out = model.net.forward(&model.params, &mut g, vars, Mode::Train)?;
    let target = g.input(batch.targets.clone());
    let loss = mse_loss(&mut g, out.steering, target)?;
    let value = f64::from(g.value(loss).data()[0]);
    if value.is_finite() {
        g.backward(loss)?;
    }
    let updates = g.take_updates();
    model.params.apply_updates(updates);
    Ok((value, g))
}

/// Records the trainer will use under `cfg`.
pub fn training_records(records: &[FrameRecord], cfg: &TrainConfig) -> Vec<FrameRecord> {
    records
        .iter()
        .filter(|r| cfg.dr_training || !r.dr_flag)
        .cloned()
        .collect()
}

/// Summary handed to the per-epoch observer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

pub fn train(cache: &FrameCache, records: &[FrameRecord], cfg: &TrainConfig) -> Result<TrainState> {
    train_with(cache, records, cfg, |_| {})
}

/// Runs `cfg.epochs` shuffled passes over `records`. A trailing batch of a
/// single frame is skipped because batchnorm needs two samples.
pub fn train_with(
    cache: &FrameCache,
    records: &[FrameRecord],
    cfg: &TrainConfig,
    mut observer: impl FnMut(EpochReport),
) -> Result<TrainState> {
    cfg.validate()?;
    let used = training_records(records, cfg);
    if used.is_empty() {
        return Err(Error::Config("no training records".into()));
    }
    let mut state = TrainState::new(Model::new(&cfg.net_config(), cfg.seed)?);
    for epoch in 0..cfg.epochs {
        let order = batch_ids(&used, cfg.batch_size, derive_seed(cfg.seed, 0xE0C, epoch as u64))?;
        let mut sum = 0.0;
        let mut steps = 0;
        for ids in order {
            if ids.len() == 1 && cfg.batch_size > 1 {
                continue;
            }
            let batch = make_batch(cache, &ids, cfg.modalities)?;
            let (loss, g) = forward_backward(&mut state.model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step: state.step, loss });
            }
            sgd_step(&mut state, |id| g.param_grad(id), cfg)?;
            state.losses.push(LossPoint {
                epoch,
                step: state.step,
                loss,
            });
            sum += loss;
            steps += 1;
        }
        state.epoch = epoch + 1;
        if let Some(path) = &cfg.checkpoint {
            state.model.save(path)?;
        }
        if let Some(path) = &cfg.loss_log {
            write_atomic(path, loss_curve_tsv(&state.losses).as_bytes())?;
        }
        observer(EpochReport {
            epoch,
            steps,
            mean_loss: if steps > 0 { sum / steps as f64 } else { f64::NAN },
        });
    }
    Ok(state)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
