//! Minibatch training loop shared by pretraining and fine-tuning.

use crate::autodiff::Graph;
use crate::bench::DomainDataset;
use crate::error::{Error, Result};
use crate::model::{build_forward, init_params, ModelSpec};
use crate::optim::{adamw_step, clip_global_norm, OptState, ScheduleSpec};
use crate::params::ParamMap;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Stop once the mean loss over a window of this many steps improves on
    /// the previous window by less than `plateau_tol` (relative).
    pub plateau_window: Option<usize>,
    pub plateau_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 64,
            peak_lr: 3e-4,
            warmup: 50,
            weight_decay: 0.0,
            clip_norm: 1.0,
            seed: 0,
            plateau_window: None,
            plateau_tol: 1e-3,
        }
    }
}

/// A differentiable training objective over a minibatch.
pub trait Objective {
    /// Loss on `(x, y)` and its gradient for every tensor of `trainable`.
    fn loss_and_grad(&self, trainable: &ParamMap, x: &Tensor, y: &[usize]) -> Result<(f64, ParamMap)>;
}

/// Mean cross-entropy of the full model.
pub struct CrossEntropy<'a> {
    pub spec: &'a ModelSpec,
}

impl Objective for CrossEntropy<'_> {
    fn loss_and_grad(&self, trainable: &ParamMap, x: &Tensor, y: &[usize]) -> Result<(f64, ParamMap)> {
        let mut g = Graph::new();
        let vars = g.bind(trainable)?;
        let xv = g.input(x.clone())?;
        let out = build_forward(&mut g, self.spec, &vars, None, xv)?;
        let loss = g.cross_entropy(out.logits, y)?;
        let names: Vec<&str> = trainable.names().collect();
        Ok((g.value(loss).item()?, g.gradient(loss, &names)?))
    }
}

/// Endless stream of minibatch indices: reshuffled epochs, deterministic
/// under the seed.
pub struct Batcher {
    rng: Rng,
    n: usize,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: Rng::derived(seed, "batches"),
            n,
            order: Vec::new(),
            pos: 0,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order = self.rng.permutation(self.n);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamMap,
    pub losses: Vec<f64>,
    pub steps_run: usize,
}

/// Runs AdamW on `objective` over minibatches of `data`. `on_step` sees the
/// parameters after each completed update (1-based step index).
pub fn train_loop(
    mut params: ParamMap,
    data: &DomainDataset,
    config: &TrainConfig,
    objective: &dyn Objective,
    mut on_step: impl FnMut(usize, &ParamMap) -> Result<()>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "training on empty domain `{}`",
            data.domain
        )));
    }
    if config.steps == 0 {
        return Ok(TrainOutcome {
            params,
            losses: Vec::new(),
            steps_run: 0,
        });
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size 0".into()));
    }
    let schedule = ScheduleSpec::fitted(config.peak_lr, config.warmup, config.steps.max(2))?;
    let mut state = OptState::new(&params, config.weight_decay);
    let mut batcher = Batcher::new(data.len(), config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    let mut prev_window: Option<f64> = None;

    for step in 1..=config.steps {
        let idx = batcher.next_batch(config.batch_size.min(data.len()));
        let (x, y) = data.gather(&idx)?;
        let (loss, grads) = match objective.loss_and_grad(&params, &x, &y) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let grads = clip_global_norm(&grads, config.clip_norm)?;
        adamw_step(&mut params, &grads, &mut state, schedule.lr_at_step(step)?)?;
        losses.push(loss);
        on_step(step, &params)?;

        if let Some(w) = config.plateau_window.filter(|&w| w > 0 && step % w == 0) {
            let window = losses[losses.len() - w..].iter().sum::<f64>() / w as f64;
            if let Some(prev) = prev_window {
                if prev - window < config.plateau_tol * prev.abs() {
                    return Ok(TrainOutcome {
                        params,
                        losses,
                        steps_run: step,
                    });
                }
            }
            prev_window = Some(window);
        }
    }
    Ok(TrainOutcome {
        params,
        losses,
        steps_run: config.steps,
    })
}

/// Trains a fresh model on the pretraining mixture and returns `θ0`.
pub fn pretrain(spec: &ModelSpec, data: &DomainDataset, config: &TrainConfig) -> Result<ParamMap> {
    let init = init_params(spec, derive_seed(config.seed, "pretrain_init"))?;
    let objective = CrossEntropy { spec };
    Ok(train_loop(init, data, config, &objective, |_, _| Ok(()))?.params)
}
