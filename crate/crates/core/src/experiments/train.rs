//! Mini-batch training and evaluation.

use rand::seq::SliceRandom;

use crate::data::{apply_random_transform_on, pad_canvas, LabeledDataset, TransformKind};
use crate::error::{Error, Result};
use crate::models::{ModelInstance, NetworkSpec};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub const fn sgd_momentum() -> Self {
        Optimizer::SgdMomentum { momentum: 0.9 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::SgdMomentum { .. } => "sgd_momentum",
            Optimizer::Adam { .. } => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(Self::adam()),
            "sgd_momentum" | "sgd" => Some(Self::sgd_momentum()),
            _ => None,
        }
    }
}

/// Per-epoch learning-rate multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate at epoch 1 toward zero after the last epoch.
    Cosine,
}

impl LrSchedule {
    pub fn name(&self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(LrSchedule::Constant),
            "cosine" => Some(LrSchedule::Cosine),
            _ => None,
        }
    }

    /// Rate for 1-based `epoch` out of `epochs`.
    pub fn rate(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = (epoch - 1) as f64 / epochs.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Model name as accepted by [`NetworkSpec::named`].
    pub model: String,
    pub augmentation: TransformKind,
    /// Radians for rotations, pixels for translations.
    pub augmentation_range: f64,
    /// Examples drawn from the training split; 0 keeps all of them.
    pub train_size: usize,
    pub test_size: usize,
    /// Square canvas the digits are centered on before augmentation.
    pub canvas: usize,
    /// Seed of the subset and augmentation streams, kept apart from `seed`
    /// so model seeds can vary over a fixed dataset.
    pub data_seed: u64,
    /// Redraw the training transforms every epoch instead of fixing them once.
    pub online_augmentation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            batch_size: 64,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Constant,
            optimizer: Optimizer::adam(),
            seed: 0,
            model: "cnn".into(),
            augmentation: TransformKind::None,
            augmentation_range: 0.0,
            train_size: 0,
            test_size: 0,
            canvas: 28,
            data_seed: 0,
            online_augmentation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("train", format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train", "batch_size must be >= 1"));
        }
        Ok(())
    }

    /// Subsets, pads and augments the raw splits. Train and test draw their
    /// transforms from different streams of `data_seed`; with online
    /// augmentation the training split is returned untransformed.
    pub fn prepare_data(&self, train: &LabeledDataset, test: &LabeledDataset) -> Result<(LabeledDataset, LabeledDataset)> {
        let prep = |ds: &LabeledDataset, size: usize, subset: &str, augment: Option<&str>| -> Result<LabeledDataset> {
            let ds = if size > 0 && size < ds.len() {
                let mut idx = rand::seq::index::sample(&mut rng::stream(self.data_seed, subset), ds.len(), size).into_vec();
                idx.sort_unstable();
                ds.select(&idx)
            } else {
                ds.clone()
            };
            let ds = pad_canvas(&ds, self.canvas)?;
            match augment {
                Some(stream) => apply_random_transform_on(&ds, self.augmentation, self.augmentation_range, self.data_seed, stream),
                None => Ok(ds),
            }
        };
        let train_stream = (!self.online_augmentation).then_some(rng::AUGMENT);
        Ok((
            prep(train, self.train_size, rng::SUBSET, train_stream)?,
            prep(test, self.test_size, "subset.test", Some("augment.test"))?,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: ModelInstance,
    pub history: Vec<EpochRecord>,
}

/// Per-parameter optimizer state.
struct State {
    opt: Optimizer,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl State {
    fn new(opt: Optimizer, lr: f64, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        State { opt, lr, step: 0, m: zeros(), v: zeros() }
    }

    fn apply(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) {
        self.step += 1;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[k];
            match self.opt {
                Optimizer::SgdMomentum { momentum } => {
                    for ((w, &gi), mi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *mi = momentum * *mi + gi;
                        *w -= self.lr * *mi;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let v = &mut self.v[k];
                    let c1 = 1.0 - beta1.powi(self.step);
                    let c2 = 1.0 - beta2.powi(self.step);
                    for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

pub(crate) fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Trains from `ModelInstance::build(spec, cfg.seed)`, reshuffling each epoch
/// from the seed's shuffle stream.
pub fn train(spec: &NetworkSpec, cfg: &TrainConfig, data: &LabeledDataset) -> Result<TrainOutcome> {
    train_with(spec, cfg, data, &mut |_, _| {})
}

/// [`train`] with a hook called after every epoch.
pub fn train_with(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    data: &LabeledDataset,
    on_epoch: &mut dyn FnMut(&ModelInstance, &EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    let mut model = ModelInstance::build(spec, cfg.seed)?;
    let mut state = State::new(cfg.optimizer, cfg.learning_rate, model.params().tensors());
    let mut shuffle = rng::stream(cfg.seed, rng::SHUFFLE);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let redrawn;
        let data = if cfg.online_augmentation {
            let stream = format!("{}.epoch{epoch}", rng::AUGMENT);
            redrawn = apply_random_transform_on(data, cfg.augmentation, cfg.augmentation_range, cfg.data_seed, &stream)?;
            &redrawn
        } else {
            data
        };
        state.lr = cfg.lr_schedule.rate(cfg.learning_rate, epoch, cfg.epochs);
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let images = data.images.select_outer(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let out = model.forward_on(&mut tape, &images, true).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence { epoch },
                e => e,
            })?;
            let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            loss_sum += lv * chunk.len() as f64;
            correct += argmax_rows(tape.value(out.logits))
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            tape.backward(loss)?;
            let grads: Vec<Option<Tensor>> = out.params.iter().map(|&v| tape.grad(v)).collect();
            state.apply(model.params_mut().tensors_mut(), &grads);
            if model.params().tensors().iter().any(|t| !t.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        };
        on_epoch(&model, &record);
        history.push(record);
    }
    Ok(TrainOutcome { model, history })
}

/// Anything that assigns class labels to a batch of images.
pub trait Classifier {
    fn predict(&self, images: &Tensor) -> Result<Vec<usize>>;
}

const EVAL_BATCH: usize = 256;

impl Classifier for ModelInstance {
    fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let n = images.shape().first().copied().unwrap_or(0);
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(EVAL_BATCH) {
            let batch = images.slice_outer(start, (start + EVAL_BATCH).min(n));
            out.extend(argmax_rows(&self.forward(&batch)?.logits));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub error_rate: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

pub fn evaluate(model: &impl Classifier, data: &LabeledDataset) -> Result<EvalReport> {
    let preds = model.predict(&data.images)?;
    let k = data.num_classes;
    let mut confusion = vec![vec![0u64; k]; k];
    let mut wrong = 0usize;
    for (&p, &l) in preds.iter().zip(&data.labels) {
        if p != l {
            wrong += 1;
        }
        if p < k {
            confusion[l][p] += 1;
        }
    }
    let error_rate = if data.is_empty() { 0.0 } else { wrong as f64 / data.len() as f64 };
    Ok(EvalReport { error_rate, confusion })
}
