//! Adam with per-step cosine annealing and global-norm clipping, used for
//! next-day pretraining and for head-only fine-tuning.

use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cohort::{Feature, Target, WindowSample};
use crate::derive_seed;
use crate::ndgrad::{clip_global_norm, GradError, Mode, Tape, Tensor};
use crate::transformer::{self, encode, expect_head, HeadKind, ModelError, ModelParams, Trainable};

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const HEAD_STREAM: u64 = 3;
/// Windows per eval-mode forward when extracting features.
const ENCODE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    NextDay(Feature),
    Ili,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::NextDay(f) => f.as_str(),
            Objective::Ili => "ili",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ili" => Some(Objective::Ili),
            _ => Feature::parse(s).map(Objective::NextDay),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub objective: Objective,
}

impl TrainConfig {
    pub fn pretrain(feature: Feature, seed: u64) -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr0: 1e-3,
            clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed,
            objective: Objective::NextDay(feature),
        }
    }

    /// Head-only training; the higher initial rate suits a single linear
    /// layer on fixed features.
    pub fn finetune(seed: u64) -> Self {
        Self {
            epochs: 30,
            lr0: 1e-2,
            objective: Objective::Ili,
            ..Self::pretrain(Feature::Rhr, seed)
        }
    }

    /// Same settings with the initial learning rate of 1.
    pub fn with_unit_lr(self) -> Self {
        Self { lr0: 1.0, ..self }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip {} must be positive", self.clip));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 {} must be finite and non-negative", self.lr0));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps {} must be positive", self.eps));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("training set has only label {0}")]
    SingleClass(u8),
    #[error("window {index} has the wrong target kind or size")]
    BadWindow { index: usize },
    #[error("total_steps must be positive")]
    ZeroSteps,
    #[error("parameter {index} has {params} values but its gradient has {grads}")]
    ShapeMismatch { index: usize, params: usize, grads: usize },
    #[error("non-finite loss at step {step}: {reason}")]
    NonFinite { step: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<GradError> for TrainError {
    fn from(e: GradError) -> Self {
        TrainError::Model(ModelError::Grad(e))
    }
}

/// `lr0 * (1 + cos(pi * step / total_steps)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64, TrainError> {
    if total_steps == 0 {
        return Err(TrainError::ZeroSteps);
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// First and second moment buffers, kept in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { m, v, t: 0 }
    }
}

/// One bias-corrected Adam update of every buffer in `params`.
pub fn adam_step(
    params: &mut [&mut [f32]],
    grads: &[&[f32]],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    for (index, (p, g)) in params.iter().zip(grads).enumerate() {
        let moments = state.m.get(index).map_or(0, Vec::len);
        if p.len() != g.len() || moments != p.len() {
            return Err(TrainError::ShapeMismatch {
                index,
                params: p.len(),
                grads: g.len(),
            });
        }
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::ShapeMismatch {
            index: params.len().min(grads.len()),
            params: params.len(),
            grads: grads.len(),
        });
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for i in 0..p.len() {
            let gi = g[i] as f64;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] = (p[i] as f64 - lr * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Mean loss per epoch over all samples.
    pub epoch_loss: Vec<f64>,
    /// Learning rate used at every step.
    pub lr: Vec<f64>,
    /// Global gradient norm at every step, before clipping.
    pub grad_norm: Vec<f64>,
    /// Global gradient norm at every step, after clipping.
    pub clipped_norm: Vec<f64>,
    pub steps_per_epoch: usize,
    pub wall_seconds: f64,
}

impl PartialEq for TrainReport {
    /// Wall time is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.epoch_loss == other.epoch_loss
            && self.lr == other.lr
            && self.grad_norm == other.grad_norm
            && self.clipped_norm == other.clipped_norm
            && self.steps_per_epoch == other.steps_per_epoch
    }
}

impl TrainReport {
    /// Learning rate at the first step of `epoch`.
    pub fn epoch_lr(&self, epoch: usize) -> f64 {
        self.lr[epoch * self.steps_per_epoch]
    }

    /// Mean pre-clip gradient norm over the steps of `epoch`.
    pub fn epoch_grad_norm(&self, epoch: usize) -> f64 {
        let steps = &self.grad_norm[epoch * self.steps_per_epoch..(epoch + 1) * self.steps_per_epoch];
        steps.iter().sum::<f64>() / steps.len() as f64
    }
}

/// Gradients of the trainable parameters for one batch, plus the batch loss.
type StepFn<'a> = dyn FnMut(&ModelParams, &[usize], &mut ChaCha8Rng) -> Result<(f64, Vec<Vec<f32>>), TrainError> + 'a;

/// Shuffled minibatches over `n_samples`, updating `model.params()[trainable]`.
fn optimize(
    model: &mut ModelParams,
    trainable: Range<usize>,
    n_samples: usize,
    cfg: &TrainConfig,
    step_fn: &mut StepFn,
) -> Result<TrainReport, TrainError> {
    // wasm32 has no clock; its runs report zero wall time.
    let start = (!cfg!(target_arch = "wasm32")).then(Instant::now);
    let steps_per_epoch = n_samples.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SHUFFLE_STREAM]));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[DROPOUT_STREAM]));
    let mut state = AdamState::new(model.params()[trainable.clone()].iter().map(|p| p.tensor.numel()));
    let mut report = TrainReport {
        epoch_loss: Vec::with_capacity(cfg.epochs),
        lr: Vec::with_capacity(total_steps),
        grad_norm: Vec::with_capacity(total_steps),
        clipped_norm: Vec::with_capacity(total_steps),
        steps_per_epoch,
        wall_seconds: 0.0,
    };
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, mut grads) = step_fn(model, batch, &mut dropout_rng).map_err(|e| match e {
                TrainError::Model(ModelError::Grad(GradError::NonFinite { op })) => TrainError::NonFinite {
                    step,
                    reason: format!("{op} produced a non-finite value"),
                },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    reason: format!("loss = {loss}"),
                });
            }
            loss_sum += loss * batch.len() as f64;
            let mut views: Vec<&mut [f32]> = grads.iter_mut().map(|g| g.as_mut_slice()).collect();
            let norm = clip_global_norm(&mut views, cfg.clip);
            let clipped = crate::ndgrad::global_norm(grads.iter().map(|g| g.as_slice()));
            let lr = cosine_lr(step, total_steps, cfg.lr0)?;
            let mut params: Vec<&mut [f32]> = model.params_mut()[trainable.clone()]
                .iter_mut()
                .map(|p| p.tensor.data_mut())
                .collect();
            let grad_views: Vec<&[f32]> = grads.iter().map(|g| g.as_slice()).collect();
            adam_step(&mut params, &grad_views, &mut state, lr, cfg)?;
            report.lr.push(lr);
            report.grad_norm.push(norm);
            report.clipped_norm.push(clipped);
            step += 1;
        }
        report.epoch_loss.push(loss_sum / n_samples as f64);
    }
    report.wall_seconds = start.map_or(0.0, |s| s.elapsed().as_secs_f64());
    Ok(report)
}

fn check_inputs(windows: &[WindowSample], model: &ModelParams) -> Result<(), TrainError> {
    let size = model.config().seq_len * model.config().n_channels;
    match windows.iter().position(|w| w.inputs.len() != size) {
        Some(index) => Err(TrainError::BadWindow { index }),
        None => Ok(()),
    }
}

/// Stacks the inputs of `windows[indices]` into `[batch, seq_len, channels]`.
pub fn batch_inputs(windows: &[WindowSample], indices: &[usize], seq_len: usize, channels: usize) -> Tensor {
    let mut data = Vec::with_capacity(indices.len() * seq_len * channels);
    for &i in indices {
        data.extend_from_slice(&windows[i].inputs);
    }
    Tensor::new(&[indices.len(), seq_len, channels], data).expect("window sizes checked")
}

/// Next-day regression on `windows` with every parameter trainable.
pub fn pretrain(
    model: &ModelParams,
    windows: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport), TrainError> {
    cfg.validate()?;
    expect_head(model, HeadKind::Regression)?;
    if windows.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_inputs(windows, model)?;
    let targets: Vec<f32> = windows
        .iter()
        .enumerate()
        .map(|(index, w)| match w.target {
            Target::Value(v) => Ok(v),
            Target::Label(_) => Err(TrainError::BadWindow { index }),
        })
        .collect::<Result<_, _>>()?;

    let mut trained = model.clone();
    let all = 0..trained.params().len();
    let (seq, ch) = (model.config().seq_len, model.config().n_channels);
    let mut step = |params: &ModelParams, batch: &[usize], rng: &mut ChaCha8Rng| {
        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape, Trainable::All)?;
        let input = tape.constant(batch_inputs(windows, batch, seq, ch))?;
        let pred = transformer::forward(&mut tape, &bound, params.config(), input, Mode::Train, rng)?;
        let target = Tensor::new(&[batch.len()], batch.iter().map(|&i| targets[i]).collect())?;
        let loss = tape.mse_loss(pred, &target)?;
        let value = tape.value(loss).data()[0] as f64;
        tape.backward(loss)?;
        let grads = bound.vars().iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
        Ok((value, grads))
    };
    let report = optimize(&mut trained, all, windows.len(), cfg, &mut step)?;
    Ok((trained, report))
}

/// Eval-mode backbone features at the last position, `[windows, d_model]`.
pub fn encode_windows(model: &ModelParams, windows: &[WindowSample]) -> Result<Tensor, TrainError> {
    check_inputs(windows, model)?;
    let cfg = model.config();
    let mut data = Vec::with_capacity(windows.len() * cfg.d_model);
    let indices: Vec<usize> = (0..windows.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in indices.chunks(ENCODE_CHUNK) {
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, Trainable::Nothing)?;
        let input = tape.constant(batch_inputs(windows, chunk, cfg.seq_len, cfg.n_channels))?;
        let rep = encode(&mut tape, &bound, cfg, input, Mode::Eval, &mut rng)?;
        data.extend_from_slice(tape.value(rep).data());
    }
    if windows.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(Tensor::new(&[windows.len(), cfg.d_model], data)?)
}

fn check_labels(labels: &[u8]) -> Result<(), TrainError> {
    let first = *labels.first().ok_or(TrainError::EmptyDataset)?;
    if labels.iter().all(|&l| l == first) {
        return Err(TrainError::SingleClass(first));
    }
    Ok(())
}

/// Cross-entropy training of the classification head of `model` on fixed
/// `[n, d_model]` features. Backbone parameters are never touched.
pub fn train_head(
    model: &mut ModelParams,
    features: &Tensor,
    labels: &[u8],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    expect_head(model, HeadKind::Classification)?;
    check_labels(labels)?;
    let d = model.config().d_model;
    if features.shape() != [labels.len(), d] {
        return Err(TrainError::BadWindow { index: 0 });
    }
    let n = model.params().len();
    let mut step = |params: &ModelParams, batch: &[usize], _: &mut ChaCha8Rng| {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(params.params()[n - 2].tensor.clone().with_requires_grad(true))?;
        let b = tape.leaf(params.params()[n - 1].tensor.clone().with_requires_grad(true))?;
        let mut rows = Vec::with_capacity(batch.len() * d);
        for &i in batch {
            rows.extend_from_slice(&features.data()[i * d..(i + 1) * d]);
        }
        let x = tape.constant(Tensor::new(&[batch.len(), d], rows)?)?;
        let h = tape.matmul(x, w)?;
        let logits = tape.add_broadcast(h, b)?;
        let batch_labels: Vec<u8> = batch.iter().map(|&i| labels[i]).collect();
        let loss = tape.cross_entropy_loss(logits, &batch_labels)?;
        let value = tape.value(loss).data()[0] as f64;
        tape.backward(loss)?;
        Ok((value, vec![tape.grad(w).unwrap().to_vec(), tape.grad(b).unwrap().to_vec()]))
    };
    optimize(model, n - 2..n, labels.len(), cfg, &mut step)
}

/// Labels of classification windows.
pub fn window_labels(windows: &[WindowSample]) -> Result<Vec<u8>, TrainError> {
    windows
        .iter()
        .enumerate()
        .map(|(index, w)| match w.target {
            Target::Label(l) => Ok(l),
            Target::Value(_) => Err(TrainError::BadWindow { index }),
        })
        .collect()
}

/// Attaches a fresh classification head to the frozen backbone of
/// `pretrained` and trains only that head on `windows`.
///
/// The backbone runs in eval mode as a fixed feature extractor.
pub fn finetune(
    pretrained: &ModelParams,
    windows: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport), TrainError> {
    cfg.validate()?;
    let labels = window_labels(windows)?;
    check_labels(&labels)?;
    let mut head_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[HEAD_STREAM]));
    let mut model = pretrained.swap_head(HeadKind::Classification, &mut head_rng);
    let features = encode_windows(&model, windows)?;
    let report = train_head(&mut model, &features, &labels, cfg)?;
    Ok((model, report))
}
