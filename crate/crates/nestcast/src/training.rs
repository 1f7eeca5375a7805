//! Normalization, relative-L2 losses, single-step supervised training with a
//! cosine-annealed learning rate, and autoregressive rollout.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldio::{FieldSeries, FieldTensor};
use crate::network::{ForwardPass, GraphTensors, Model};
use crate::rng::substream;
use crate::tensorcore::{ParamStore, Real, Tape, Tensor2, Var};

/// Guard added to the per-point denominator of the pointwise relative loss.
pub const LOSS_DENOM_GUARD: f64 = 1e-6;

/// Per-channel mean and standard deviation in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose variance collapsed and had std clamped to 1e-8.
    pub clamped: Vec<usize>,
}

/// Population mean/std per channel over all steps of a training series.
pub fn fit_norm(series: &FieldSeries) -> NormStats {
    assert!(!series.is_empty(), "cannot fit stats on an empty series");
    let c = series.steps[0].c;
    let mut mean = vec![0.0; c];
    let mut count = vec![0usize; c];
    for f in &series.steps {
        for ch in 0..c {
            for &v in f.channel(ch) {
                mean[ch] += v;
                count[ch] += 1;
            }
        }
    }
    for ch in 0..c {
        mean[ch] /= count[ch] as f64;
    }
    let mut var = vec![0.0; c];
    for f in &series.steps {
        for ch in 0..c {
            for &v in f.channel(ch) {
                var[ch] += (v - mean[ch]) * (v - mean[ch]);
            }
        }
    }
    let mut std = vec![0.0; c];
    let mut clamped = Vec::new();
    for ch in 0..c {
        std[ch] = (var[ch] / count[ch] as f64).sqrt();
        if std[ch] < 1e-8 {
            eprintln!("warning: channel {ch} has zero variance, std clamped to 1e-8");
            std[ch] = 1e-8;
            clamped.push(ch);
        }
    }
    NormStats { mean, std, clamped }
}

pub fn normalize(field: &FieldTensor, stats: &NormStats) -> FieldTensor {
    assert_eq!(field.c, stats.mean.len());
    let mut out = field.clone();
    for ch in 0..field.c {
        let (m, s) = (stats.mean[ch], stats.std[ch]);
        for v in out.channel_mut(ch) {
            *v = (*v - m) / s;
        }
    }
    out
}

pub fn denormalize(field: &FieldTensor, stats: &NormStats) -> FieldTensor {
    assert_eq!(field.c, stats.mean.len());
    let mut out = field.clone();
    for ch in 0..field.c {
        let (m, s) = (stats.mean[ch], stats.std[ch]);
        for v in out.channel_mut(ch) {
            *v = *v * s + m;
        }
    }
    out
}

/// Pointwise relative L2: mean over channels and grid points of
/// `(pred − target)² / (target² + guard)`.
pub fn relative_l2_loss(pred: &FieldTensor, target: &FieldTensor) -> f64 {
    assert!(pred.same_shape(target), "loss shapes must match");
    let n = pred.data.len() as f64;
    let mut acc = 0.0;
    for (p, t) in pred.data.iter().zip(&target.data) {
        let d = p - t;
        acc += d * d / (t * t + LOSS_DENOM_GUARD);
    }
    acc / n
}

/// Which training objective to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// ‖pred − target‖² / ‖target‖² per pair (the rollout objective).
    Global,
    /// The pointwise relative loss with the denominator guard.
    Pointwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Gradient descent with momentum 0.9.
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub batch: usize,
    pub seed: u64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossKind,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr0: 1e-3,
            batch: 1,
            seed: 0,
            momentum: 0.9,
            optimizer: OptimizerKind::Sgd,
            loss: LossKind::Global,
            shuffle: true,
        }
    }
}

/// Cosine annealing from `lr0` down to 0 across `total` steps.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr0;
    }
    let x = step.min(total - 1) as f64 / (total - 1) as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Optimizer state, one slot per parameter leaf.
struct OptState<T: Real> {
    velocity: Vec<Tensor2<T>>,
    second: Vec<Tensor2<T>>,
    step: usize,
}

impl<T: Real> OptState<T> {
    fn new(store: &ParamStore<T>) -> Self {
        let velocity = store
            .ids()
            .map(|id| {
                let (r, c) = store.leaf(id).value.shape();
                Tensor2::zeros(r, c)
            })
            .collect::<Vec<_>>();
        let second = velocity.clone();
        OptState {
            velocity,
            second,
            step: 0,
        }
    }

    fn apply(&mut self, store: &mut ParamStore<T>, cfg: &TrainConfig, lr: f64) {
        self.step += 1;
        let ids: Vec<_> = store.ids().collect();
        match cfg.optimizer {
            OptimizerKind::Sgd => {
                let mu = T::from_f64(cfg.momentum);
                let lr_t = T::from_f64(lr);
                for (slot, id) in ids.iter().enumerate() {
                    let leaf = store.leaf_mut(*id);
                    let vel = &mut self.velocity[slot];
                    for (v, &g) in vel.data_mut().iter_mut().zip(leaf.grad.data()) {
                        *v = *v * mu + g;
                    }
                    for (p, &v) in leaf.value.data_mut().iter_mut().zip(vel.data()) {
                        *p = *p - lr_t * v;
                    }
                }
            }
            OptimizerKind::Adam => {
                let b1 = T::from_f64(0.9);
                let b2 = T::from_f64(0.999);
                let eps = T::from_f64(1e-8);
                let t = self.step as i32;
                let bc1 = T::one() - T::from_f64(0.9f64.powi(t));
                let bc2 = T::one() - T::from_f64(0.999f64.powi(t));
                let lr_t = T::from_f64(lr);
                for (slot, id) in ids.iter().enumerate() {
                    let leaf = store.leaf_mut(*id);
                    let m = &mut self.velocity[slot];
                    let v = &mut self.second[slot];
                    for k in 0..leaf.value.len() {
                        let g = leaf.grad.data()[k];
                        let mk = b1 * m.data()[k] + (T::one() - b1) * g;
                        let vk = b2 * v.data()[k] + (T::one() - b2) * g * g;
                        m.data_mut()[k] = mk;
                        v.data_mut()[k] = vk;
                        let m_hat = mk / bc1;
                        let v_hat = vk / bc2;
                        leaf.value.data_mut()[k] =
                            leaf.value.data()[k] - lr_t * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Build the training loss on the tape. Targets enter as constants.
pub fn loss_on_tape<T: Real>(
    tape: &Tape<T>,
    pred: Var,
    target: &Tensor2<T>,
    kind: LossKind,
) -> Var {
    let (rows, cols) = target.shape();
    assert_eq!(tape.shape(pred), (rows, cols), "loss shape mismatch");
    let t = tape.leaf(target.clone());
    let d = tape.sub(pred, t);
    let sq = tape.mul(d, d);
    match kind {
        LossKind::Global => {
            let den: f64 = target.data().iter().map(|v| {
                let x = v.as_f64();
                x * x
            }).sum();
            let num = tape.sum_all(sq);
            tape.scale(num, T::from_f64(1.0 / den.max(1e-30)))
        }
        LossKind::Pointwise => {
            let n = (rows * cols) as f64;
            let w = Tensor2::from_fn(rows, cols, |r, c| {
                let x = target.get(r, c).as_f64();
                T::from_f64(1.0 / ((x * x + LOSS_DENOM_GUARD) * n))
            });
            let wl = tape.leaf(w);
            let weighted = tape.mul(sq, wl);
            tape.sum_all(weighted)
        }
    }
}

/// Per-step record of the loss curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Mean training loss per optimizer step.
    pub loss_curve: Vec<f64>,
    pub final_lr: f64,
}

/// One-step supervised training over `(input, target)` node-matrix pairs in
/// normalized space. Deterministic given the config seed.
pub fn train<T: Real>(
    model: &Model,
    store: &mut ParamStore<T>,
    gt: &GraphTensors<T>,
    pairs: &[(Tensor2<T>, Tensor2<T>)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    assert!(!pairs.is_empty(), "training needs at least one pair");
    let mut opt = OptState::new(store);
    let batches_per_epoch = pairs.len().div_ceil(cfg.batch);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut shuffle_rng = substream(cfg.seed, "train/shuffle");
    let mut loss_curve = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    let mut final_lr = cfg.lr0;

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        if cfg.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        for chunk in order.chunks(cfg.batch) {
            let lr = cosine_lr(cfg.lr0, step, total_steps);
            final_lr = lr;
            store.zero_grads();
            let mut batch_loss = 0.0;
            for &pi in chunk {
                let (input, target) = &pairs[pi];
                let tape = Tape::new();
                let bind = store.bind(&tape);
                let pass = ForwardPass {
                    tape: &tape,
                    bind: &bind,
                    model,
                    gt,
                };
                let iv = tape.leaf(input.clone());
                let out = pass.forward(iv)?;
                let loss = loss_on_tape(&tape, out, target, cfg.loss);
                let scaled = tape.scale(loss, T::from_f64(1.0 / chunk.len() as f64));
                let lv = tape.value(loss).get(0, 0).as_f64();
                if !lv.is_finite() {
                    return Err(Error::NonFinite {
                        stage: "train".into(),
                        at: Some(format!("step {step}, pair {pi}")),
                    });
                }
                batch_loss += lv / chunk.len() as f64;
                let grads = tape.backward(scaled);
                store.accumulate(&bind, &grads);
            }
            opt.apply(store, cfg, lr);
            loss_curve.push(batch_loss);
            step += 1;
        }
    }
    Ok(TrainOutcome {
        loss_curve,
        final_lr,
    })
}

/// Autoregressive rollout: feed each forecast back as the next input.
/// Returns `steps` outputs (the input state itself is not included).
pub fn rollout<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    gt: &GraphTensors<T>,
    z0: &Tensor2<T>,
    steps: usize,
) -> Result<Vec<Tensor2<T>>> {
    let mut out = Vec::with_capacity(steps);
    let mut state = z0.clone();
    for _ in 0..steps {
        state = crate::network::forward(model, store, gt, &state)?;
        out.push(state.clone());
    }
    Ok(out)
}

/// Turn a normalized series into consecutive (Z_t, Z_{t+1}) node-matrix
/// pairs.
pub fn pairs_from_series<T: Real>(
    series: &FieldSeries,
    stats: &NormStats,
    range: std::ops::Range<usize>,
) -> Vec<(Tensor2<T>, Tensor2<T>)> {
    assert!(range.end < series.len(), "pair range exceeds series");
    range
        .map(|t| {
            let a = normalize(&series.steps[t], stats).to_node_matrix();
            let b = normalize(&series.steps[t + 1], stats).to_node_matrix();
            (a, b)
        })
        .collect()
}
