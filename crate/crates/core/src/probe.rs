//! Linear probing of frozen features.
//!
//! For a checkpoint `[Φ, v]`, fit the best linear head `v̄` on `Φ`'s
//! features of a target domain and compare its accuracy with that of the
//! carried head `v`. A probe accuracy that falls along a fine-tuning
//! trajectory means the features themselves lost target-domain information,
//! not just the head.
//!
//! The probe objective is `mean CE(F Wᵀ + b, y) + λ ‖W‖²`, minimized over the
//! full batch along limited-memory BFGS directions with Armijo backtracking.
//! Probe-train splits are usually linearly separable, so only the small `λ`
//! keeps the optimum finite and the problem is badly conditioned; plain
//! gradient steps do not reach the gradient tolerance in budget.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::autodiff::log_sum_exp;
use crate::bench::DomainDataset;
use crate::error::{Error, Result};
use crate::methods::Trajectory;
use crate::model::{forward, ModelSpec};
use crate::params::ParamMap;
use crate::rng::{hash_u64, Rng};
use crate::tensor::Tensor;

const EXTRACT_CHUNK: usize = 256;
const ARMIJO_C: f64 = 1e-4;
const LBFGS_MEMORY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbeInit {
    Zeros,
    /// `N(0, 0.01²)` weights and biases from the given seed.
    Random(u64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub lambda: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub init: ProbeInit,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            max_iters: 10_000,
            grad_tol: 1e-6,
            init: ProbeInit::Zeros,
        }
    }
}

/// Features `Φ(x)` of every example, n × h.
pub fn extract_features(spec: &ModelSpec, params: &ParamMap, data: &DomainDataset) -> Result<Tensor> {
    let n = data.len();
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = EXTRACT_CHUNK.min(n - start);
        parts.push(forward(spec, params, &data.x.slice_rows(start, len)?)?.features);
        start += len;
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat_rows(&refs)
}

/// A fitted linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `head.W` (C × h) and `head.b` (C).
    pub head: ParamMap,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Probe objective and its gradient at `(w, b)`.
fn objective(
    features: &Tensor,
    labels: &[usize],
    w: &Tensor,
    b: &Tensor,
    lambda: f64,
) -> Result<(f64, Tensor, Tensor)> {
    let n = labels.len() as f64;
    let logits = features.matmul(&w.transpose()?)?.add_row_vector(b)?;
    let c = w.shape()[0];
    let mut ce = 0.0;
    let mut dz = logits.clone();
    for (i, &y) in labels.iter().enumerate() {
        let row = &mut dz.data_mut()[i * c..(i + 1) * c];
        let lse = log_sum_exp(row);
        ce += lse - row[y];
        for v in row.iter_mut() {
            *v = (*v - lse).exp() / n;
        }
        row[y] -= 1.0 / n;
    }
    let loss = ce / n + lambda * w.sq_norm();
    let gw = dz.transpose()?.matmul(features)?.add(&w.scale(2.0 * lambda))?;
    let gb = dz.sum_rows()?;
    Ok((loss, gw, gb))
}

/// Probe objective of an existing head on `(features, labels)`.
pub fn probe_loss(features: &Tensor, labels: &[usize], head: &ParamMap, lambda: f64) -> Result<f64> {
    Ok(objective(
        features,
        labels,
        head.require("head.W")?,
        head.require("head.b")?,
        lambda,
    )?
    .0)
}

fn check_probe_inputs(features: &Tensor, labels: &[usize], classes: usize) -> Result<usize> {
    let (n, h) = features.dims2("train_linear_probe")?;
    if n != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{n} feature rows, {} labels",
            labels.len()
        )));
    }
    if n < classes {
        return Err(Error::InvalidArgument(format!("{n} examples for {classes} classes")));
    }
    if let Some(y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!("label {y} with {classes} classes")));
    }
    Ok(h)
}

pub fn train_linear_probe(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> Result<LinearProbe> {
    let h = check_probe_inputs(features, labels, classes)?;
    let (w, b) = match config.init {
        ProbeInit::Zeros => (Tensor::zeros(&[classes, h]), Tensor::zeros(&[classes])),
        ProbeInit::Random(seed) => {
            let mut rng = Rng::derived(seed, "probe_init");
            (
                Tensor::new(&[classes, h], rng.normals(classes * h, 0.01))?,
                Tensor::vector(rng.normals(classes, 0.01)),
            )
        }
    };
    let lambda = config.lambda;
    let split = classes * h;
    let eval = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let w = Tensor::new(&[classes, h], theta[..split].to_vec())?;
        let b = Tensor::vector(theta[split..].to_vec());
        let (loss, gw, gb) = objective(features, labels, &w, &b, lambda)?;
        let mut g = gw.into_data();
        g.extend_from_slice(gb.data());
        Ok((loss, g))
    };

    let mut theta = w.into_data();
    theta.extend_from_slice(b.data());
    let (mut loss, mut grad) = eval(&theta)?;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    loop {
        let grad_norm = norm(&grad);
        if grad_norm <= config.grad_tol {
            break;
        }
        if iterations >= config.max_iters {
            return Err(Error::ProbeNotConverged { iterations, grad_norm });
        }
        iterations += 1;

        let mut dir = lbfgs_direction(&grad, &history);
        let mut slope = dot(&grad, &dir);
        if slope.is_nan() || slope >= 0.0 {
            history.clear();
            dir = grad.iter().map(|g| -g / grad_norm.max(1.0)).collect();
            slope = dot(&grad, &dir);
        }

        let mut t = 1.0;
        let (next, next_loss, next_grad) = loop {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(x, d)| x + t * d).collect();
            let (cl, cg) = eval(&cand)?;
            if cl <= loss + ARMIJO_C * t * slope {
                break (cand, cl, cg);
            }
            t *= 0.5;
            if t < 1e-20 {
                return Err(Error::ProbeNotConverged { iterations, grad_norm });
            }
        };

        let s: Vec<f64> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if history.len() == LBFGS_MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        theta = next;
        loss = next_loss;
        grad = next_grad;
    }
    let b = Tensor::vector(theta.split_off(split));
    let mut head = ParamMap::new();
    head.insert("head.W", Tensor::new(&[classes, h], theta)?);
    head.insert("head.b", b);
    Ok(LinearProbe {
        head,
        loss,
        grad_norm: norm(&grad),
        iterations,
    })
}

/// Two-loop recursion: `-H g` for the inverse-Hessian estimate built from
/// the stored `(s, y, 1/sᵀy)` pairs, oldest first.
fn lbfgs_direction(grad: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    let gamma = match history.back() {
        Some((_, y, rho)) => 1.0 / (rho * dot(y, y)),
        None => 1.0 / norm(grad).max(1.0),
    };
    q.iter_mut().for_each(|qi| *qi *= gamma);
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let beta = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - beta) * si);
    }
    q.iter_mut().for_each(|qi| *qi = -*qi);
    q
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Accuracy of a linear head on fixed features.
pub fn head_accuracy(features: &Tensor, labels: &[usize], head: &ParamMap) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty split".into()));
    }
    let logits = features
        .matmul(&head.require("head.W")?.transpose()?)?
        .add_row_vector(head.require("head.b")?)?;
    let pred = logits.argmax_rows()?;
    Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

/// Deterministic 50/50 split of example indices into (probe-train,
/// probe-eval), decided by a hash of each index.
pub fn probe_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|&i| hash_u64(i as u64) & 1 == 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub step: usize,
    pub target: String,
    /// Accuracy of the checkpoint's own head on the probe-eval split.
    pub carried_acc: f64,
    /// Accuracy of the fitted probe on the probe-eval split.
    pub probe_acc: f64,
    /// Probe objective at the fitted head, on the probe-train split.
    pub probe_loss: f64,
    /// Probe objective at the checkpoint's own head, on the probe-train split.
    pub carried_loss: f64,
}

fn probe_checkpoint(
    spec: &ModelSpec,
    step: usize,
    params: &ParamMap,
    target: &DomainDataset,
    split: &(Vec<usize>, Vec<usize>),
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    let features = extract_features(spec, params, target)?;
    let (train_idx, eval_idx) = split;
    let pick = |idx: &[usize]| -> Result<(Tensor, Vec<usize>)> {
        let h = features.shape()[1];
        let mut data = Vec::with_capacity(idx.len() * h);
        for &i in idx {
            data.extend_from_slice(features.row(i));
        }
        Ok((
            Tensor::new(&[idx.len(), h], data)?,
            idx.iter().map(|&i| target.y[i]).collect(),
        ))
    };
    let (f_train, y_train) = pick(train_idx)?;
    let (f_eval, y_eval) = pick(eval_idx)?;
    let probe = train_linear_probe(&f_train, &y_train, spec.classes, config)?;
    let carried = params.filter_prefix("head.");
    Ok(ProbeResult {
        step,
        target: target.domain.clone(),
        carried_acc: head_accuracy(&f_eval, &y_eval, &carried)?,
        probe_acc: head_accuracy(&f_eval, &y_eval, &probe.head)?,
        probe_loss: probe.loss,
        carried_loss: probe_loss(&f_train, &y_train, &carried, config.lambda)?,
    })
}

/// Probes every checkpoint on every target; results ordered by
/// (target, step).
pub fn probe_trajectory(
    spec: &ModelSpec,
    trajectory: &Trajectory,
    targets: &[DomainDataset],
    config: &ProbeConfig,
) -> Result<Vec<ProbeResult>> {
    if trajectory.checkpoints.is_empty() || targets.is_empty() {
        return Err(Error::InvalidArgument("probing needs checkpoints and targets".into()));
    }
    let jobs: Vec<(&DomainDataset, usize, &ParamMap)> = targets
        .iter()
        .flat_map(|t| trajectory.checkpoints.iter().map(move |(s, p)| (t, *s, p)))
        .collect();
    let splits: Vec<_> = targets.iter().map(|t| probe_split(t.len())).collect();
    jobs.par_iter()
        .map(|&(target, step, params)| {
            let ti = targets
                .iter()
                .position(|t| std::ptr::eq(t, target))
                .expect("from targets");
            probe_checkpoint(spec, step, params, target, &splits[ti], config)
        })
        .collect()
}
