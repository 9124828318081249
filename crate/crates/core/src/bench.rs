//! Synthetic multi-style domain-shift benchmark.
//!
//! Every class has a prototype in a `k`-dimensional semantic space. A style
//! is an affine map from that space into `d` input dimensions: a random
//! orthonormal frame scaled by singular values in `[1/κ, κ]`, plus a random
//! offset. A sample of class `c` under style `s` is
//!
//! ```text
//! x = M_s (μ_c + σ_core ε) + b_s + σ_noise η,   ε ~ N(0, I_k), η ~ N(0, I_d)
//! ```
//!
//! The pretraining mixture draws from several styles, fine-tuning uses one
//! (the source), and held-out target styles measure the shift.
//!
//! All randomness is keyed by `(seed, purpose, style)`, so a style's
//! transform and samples do not depend on which other styles are requested
//! or in what order.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{forward, ModelSpec};
use crate::params::ParamMap;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub classes: usize,
    pub core_dim: usize,
    pub input_dim: usize,
    pub styles: usize,
    pub pretrain_styles: Vec<usize>,
    pub source_style: usize,
    pub target_styles: Vec<usize>,
    /// Samples per (class, style) in the pretraining and source splits.
    pub train_per_class: usize,
    /// Samples per (class, style) in the id-test and target splits.
    pub test_per_class: usize,
    pub sigma_core: f64,
    pub sigma_noise: f64,
    pub kappa: f64,
}

impl BenchSpec {
    /// The frozen reference benchmark.
    pub fn reference() -> Self {
        Self {
            classes: 10,
            core_dim: 16,
            input_dim: 32,
            styles: 8,
            pretrain_styles: (0..6).collect(),
            source_style: 0,
            target_styles: (1..8).collect(),
            train_per_class: 100,
            test_per_class: 50,
            sigma_core: 0.9,
            sigma_noise: 0.1,
            kappa: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.classes == 0 || self.core_dim == 0 || self.input_dim == 0 || self.styles == 0 {
            return bad("benchmark dimensions must be positive".into());
        }
        if self.core_dim > self.input_dim {
            return bad(format!(
                "core dim {} exceeds input dim {}",
                self.core_dim, self.input_dim
            ));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("sample counts must be positive".into());
        }
        let all = self
            .pretrain_styles
            .iter()
            .chain(&self.target_styles)
            .chain(std::iter::once(&self.source_style));
        if let Some(s) = all.into_iter().find(|&&s| s >= self.styles) {
            return bad(format!("style {s} out of range 0..{}", self.styles));
        }
        if !self.pretrain_styles.contains(&self.source_style) {
            return bad(format!("source style {} is not a pretraining style", self.source_style));
        }
        if self.target_styles.contains(&self.source_style) {
            return bad("the source style cannot also be a target".into());
        }
        if self.target_styles.is_empty() || self.pretrain_styles.is_empty() {
            return bad("need at least one pretraining and one target style".into());
        }
        if !(self.sigma_core >= 0.0 && self.sigma_noise >= 0.0 && self.kappa >= 1.0) {
            return bad(format!(
                "need σ_core, σ_noise >= 0 and κ >= 1 (got {}, {}, {})",
                self.sigma_core, self.sigma_noise, self.kappa
            ));
        }
        Ok(())
    }
}

/// Labeled examples from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain: String,
    /// n × d
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Rows `idx` as a new batch.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let d = self.x.shape()[1];
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        Ok((
            Tensor::new(&[idx.len(), d], data)?,
            idx.iter().map(|&i| self.y[i]).collect(),
        ))
    }

    pub fn subset(&self, idx: &[usize], domain: impl Into<String>) -> Result<Self> {
        let (x, y) = self.gather(idx)?;
        Ok(Self {
            domain: domain.into(),
            x,
            y,
        })
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &y in &self.y {
            counts[y] += 1;
        }
        counts
    }

    /// Comma-separated export: header `label,x0,...,x{d-1}`, values with 17
    /// significant digits.
    pub fn to_csv(&self) -> String {
        let d = self.x.shape()[1];
        let mut out = String::from("label");
        for j in 0..d {
            write!(out, ",x{j}").unwrap();
        }
        out.push('\n');
        for (i, y) in self.y.iter().enumerate() {
            write!(out, "{y}").unwrap();
            for v in self.x.row(i) {
                write!(out, ",{v:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn export_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domains {
    pub pretrain: DomainDataset,
    pub source: DomainDataset,
    /// One dataset per target style, in the order of `BenchSpec::target_styles`.
    pub targets: Vec<DomainDataset>,
    pub target_styles: Vec<usize>,
    /// Held-out source-style split.
    pub id_test: DomainDataset,
}

struct Style {
    /// d × k
    transform: Tensor,
    offset: Vec<f64>,
}

/// Orthonormal columns of a Gaussian d × k matrix (modified Gram–Schmidt).
fn random_frame(d: usize, k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v = rng.normals(d, 1.0);
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (vi, ci) in v.iter_mut().zip(c) {
                *vi -= dot * ci;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    cols
}

fn make_style(spec: &BenchSpec, seed: u64, style: usize) -> Result<Style> {
    let (d, k) = (spec.input_dim, spec.core_dim);
    let mut rng = Rng::derived(seed, &format!("style/{style}"));
    let frame = random_frame(d, k, &mut rng);
    let log_kappa = spec.kappa.ln();
    let singular: Vec<f64> = (0..k).map(|_| rng.uniform_range(-log_kappa, log_kappa).exp()).collect();
    let mut m = vec![0.0; d * k];
    for (j, (col, s)) in frame.iter().zip(&singular).enumerate() {
        for i in 0..d {
            m[i * k + j] = col[i] * s;
        }
    }
    Ok(Style {
        transform: Tensor::new(&[d, k], m)?,
        offset: rng.normals(d, 1.0),
    })
}

fn sample_split(
    spec: &BenchSpec,
    seed: u64,
    prototypes: &[Vec<f64>],
    styles: &[(usize, &Style)],
    per_class: usize,
    split: &str,
    domain: String,
) -> Result<DomainDataset> {
    let (d, k) = (spec.input_dim, spec.core_dim);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for &(id, style) in styles {
        let mut rng = Rng::derived(seed, &format!("sample/{split}/{id}"));
        let m = style.transform.data();
        for (c, mu) in prototypes.iter().enumerate() {
            for _ in 0..per_class {
                let z: Vec<f64> = mu.iter().map(|m| m + spec.sigma_core * rng.normal()).collect();
                for i in 0..d {
                    let row = &m[i * k..(i + 1) * k];
                    let mz: f64 = row.iter().zip(&z).map(|(a, b)| a * b).sum();
                    data.push(mz + style.offset[i] + spec.sigma_noise * rng.normal());
                }
                labels.push(c);
            }
        }
    }
    Ok(DomainDataset {
        domain,
        x: Tensor::new(&[labels.len(), d], data)?,
        y: labels,
    })
}

pub fn generate_domains(spec: &BenchSpec, seed: u64) -> Result<Domains> {
    spec.validate()?;
    let mut proto_rng = Rng::derived(seed, "prototypes");
    let prototypes: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| proto_rng.normals(spec.core_dim, 1.0))
        .collect();

    let mut wanted: Vec<usize> = spec
        .pretrain_styles
        .iter()
        .chain(&spec.target_styles)
        .copied()
        .collect();
    wanted.sort_unstable();
    wanted.dedup();
    let styles: Vec<(usize, Style)> = wanted
        .into_iter()
        .map(|s| Ok((s, make_style(spec, seed, s)?)))
        .collect::<Result<_>>()?;
    let style = |id: usize| -> (usize, &Style) {
        let (_, s) = styles.iter().find(|(s, _)| *s == id).expect("generated above");
        (id, s)
    };

    let mut pre_ids = spec.pretrain_styles.clone();
    pre_ids.sort_unstable();
    pre_ids.dedup();
    let pre: Vec<_> = pre_ids.iter().map(|&s| style(s)).collect();
    let pretrain = sample_split(
        spec,
        seed,
        &prototypes,
        &pre,
        spec.train_per_class,
        "train",
        "pretrain".into(),
    )?;

    let src = [style(spec.source_style)];
    let source = sample_split(
        spec,
        seed,
        &prototypes,
        &src,
        spec.train_per_class,
        "source",
        "source".into(),
    )?;
    let id_test = sample_split(
        spec,
        seed,
        &prototypes,
        &src,
        spec.test_per_class,
        "test",
        "id_test".into(),
    )?;
    let targets = spec
        .target_styles
        .iter()
        .map(|&s| {
            sample_split(
                spec,
                seed,
                &prototypes,
                &[style(s)],
                spec.test_per_class,
                "test",
                format!("target_{s}"),
            )
        })
        .collect::<Result<_>>()?;

    Ok(Domains {
        pretrain,
        source,
        targets,
        target_styles: spec.target_styles.clone(),
        id_test,
    })
}

const EVAL_CHUNK: usize = 256;

/// Predicted class per example (ties toward the lowest class index).
pub fn predict(spec: &ModelSpec, params: &ParamMap, x: &Tensor) -> Result<Vec<usize>> {
    let n = x.shape()[0];
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        let logits = forward(spec, params, &x.slice_rows(start, len)?)?.logits;
        out.extend(logits.argmax_rows()?);
        start += len;
    }
    Ok(out)
}

/// Fraction of examples whose arg-max logit equals the label.
pub fn evaluate(spec: &ModelSpec, params: &ParamMap, data: &DomainDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "evaluating on empty domain `{}`",
            data.domain
        )));
    }
    let pred = predict(spec, params, &data.x)?;
    let hits = pred.iter().zip(&data.y).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Unweighted mean of per-target accuracies.
pub fn aggregate_ood(per_target: &[f64]) -> Result<f64> {
    if per_target.is_empty() {
        return Err(Error::InvalidArgument("no target accuracies to aggregate".into()));
    }
    Ok(per_target.iter().sum::<f64>() / per_target.len() as f64)
}
