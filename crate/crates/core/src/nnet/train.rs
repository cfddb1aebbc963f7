use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::TokenLoss;
use crate::scalar::Scalar;
use crate::textproc::TokenIds;

use super::model::Seq2SeqModel;
use super::params::Params;
use super::NnetError;

/// A source/target id pair; targets carry BOS and EOS.
pub type EncodedPair = (TokenIds, TokenIds);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub warmup_epochs: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 8,
            lr_init: 1e-4,
            lr_min: 1e-5,
            warmup_epochs: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnetError> {
        let ok = self.batch_size > 0
            && self.lr_init >= 0.0
            && self.lr_min >= 0.0
            && self.lr_min <= self.lr_init
            && self.warmup_epochs >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip.map_or(true, |c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(NnetError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// Linear warmup followed by cosine decay to a floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr_init: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr_init * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.lr_min
            + 0.5 * (self.lr_init - self.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// AdamW with decoupled weight decay on matrices only.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<P: Scalar>(
        params: &Params<P>,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    ) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: params
                .tensors()
                .iter()
                .map(|t| vec![T::zero(); t.len()])
                .collect(),
            v: params
                .tensors()
                .iter()
                .map(|t| vec![T::zero(); t.len()])
                .collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update; `lr_of(i)` gives the learning rate of parameter tensor i.
    pub fn step(
        &mut self,
        params: &mut Params<T>,
        grads: &[Option<Vec<T>>],
        lr_of: impl Fn(usize) -> f64,
    ) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let eps = T::of(self.eps);
        for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let Some(g) = grads.get(i).and_then(Option::as_ref) else {
                continue;
            };
            let lr = T::of(lr_of(i));
            let decay = if tensor.shape.len() >= 2 {
                T::one() - lr * T::of(self.weight_decay)
            } else {
                T::one()
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                tensor.data[j] = tensor.data[j] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

pub fn global_norm<T: Scalar>(grads: &[Option<Vec<T>>]) -> T {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&x| x * x)
        .sum::<T>()
        .sqrt()
}

/// Rescale gradients so their global norm is at most `max_norm`.
pub fn clip_grads<T: Scalar>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> T {
    let norm = global_norm(grads);
    let max = T::of(max_norm);
    if norm > max {
        let s = max / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Visiting order of training examples within an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    Shuffled,
    Sequential,
}

/// Optimizer state plus a learning-rate schedule spanning every epoch the
/// trainer will run, across curriculum stages.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub schedule: LrSchedule,
    opt: AdamW<T>,
    step: usize,
    batches_seen: usize,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        params: &Params<T>,
        cfg: TrainConfig,
        total_steps: usize,
        steps_per_epoch: usize,
    ) -> Result<Self, NnetError> {
        cfg.validate()?;
        let warmup_steps =
            ((cfg.warmup_epochs * steps_per_epoch as f64).round() as usize).min(total_steps);
        Ok(Self {
            schedule: LrSchedule {
                lr_init: cfg.lr_init,
                lr_min: cfg.lr_min,
                warmup_steps,
                total_steps,
            },
            opt: AdamW::new(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay),
            step: 0,
            batches_seen: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
        })
    }

    /// A trainer whose schedule covers `epochs` passes over `n_examples`.
    pub fn for_data(
        params: &Params<T>,
        cfg: TrainConfig,
        n_examples: usize,
    ) -> Result<Self, NnetError> {
        let per_epoch = n_examples.div_ceil(cfg.batch_size.max(1)).max(1);
        let total = per_epoch * cfg.epochs;
        Self::new(params, cfg, total, per_epoch)
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    /// One optimizer step. Returns the loss before the update. A non-finite
    /// loss or gradient leaves the model untouched.
    pub fn train_step<L: TokenLoss<T> + ?Sized>(
        &mut self,
        model: &mut Seq2SeqModel<T>,
        batch: &[EncodedPair],
        loss: &L,
    ) -> Result<T, NnetError> {
        let batch_index = self.batches_seen;
        self.batches_seen += 1;
        let (value, mut grads) = model.loss_and_grads(batch, loss)?;
        if !value.is_finite()
            || grads
                .iter()
                .flatten()
                .any(|g| g.iter().any(|x| !x.is_finite()))
        {
            return Err(NnetError::NonFiniteLoss { batch_index });
        }
        if let Some(c) = self.cfg.grad_clip {
            clip_grads(&mut grads, c);
        }
        let lr = self.schedule.lr_at(self.step);
        self.opt.step(&mut model.params, &grads, |_| lr);
        self.step += 1;
        Ok(value)
    }

    /// One pass over `data`; returns the mean batch loss.
    pub fn run_epoch<L: TokenLoss<T> + ?Sized>(
        &mut self,
        model: &mut Seq2SeqModel<T>,
        data: &[EncodedPair],
        loss: &L,
        order: Order,
    ) -> Result<f64, NnetError> {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        if order == Order::Shuffled {
            idx.shuffle(&mut self.rng);
        }
        let mut total = 0.0;
        let mut n = 0usize;
        for chunk in idx.chunks(self.cfg.batch_size) {
            let batch: Vec<EncodedPair> = chunk.iter().map(|&i| data[i].clone()).collect();
            total += self.train_step(model, &batch, loss)?.f64();
            n += 1;
        }
        Ok(if n == 0 { 0.0 } else { total / n as f64 })
    }
}

/// Train for `cfg.epochs` shuffled epochs; returns per-epoch mean losses.
pub fn fit<T: Scalar, L: TokenLoss<T> + ?Sized>(
    model: &mut Seq2SeqModel<T>,
    data: &[EncodedPair],
    cfg: &TrainConfig,
    loss: &L,
) -> Result<Vec<f64>, NnetError> {
    let mut trainer = Trainer::for_data(&model.params, cfg.clone(), data.len())?;
    (0..cfg.epochs)
        .map(|_| trainer.run_epoch(model, data, loss, Order::Shuffled))
        .collect()
}
