//! Fine-tuning methods that try to keep the pretrained features intact.
//!
//! - `L1` / `L2`: anchor penalties `λ Σ|θ − θ0|` and `λ ‖θ − θ0‖²`.
//! - `Kd`: `λ · mean_batch ‖out_θ(x) − out_θ0(x)‖²` against the frozen
//!   pretrained model on the same batch.
//! - `Lora`: only low-rank factors on the attention query/value projections
//!   (and optionally the head) are trained.
//! - `WiseFt`: vanilla fine-tuning followed by weight-space interpolation
//!   `(1 − α) θ0 + α θ`.

use crate::autodiff::{sign, Graph, Var};
use crate::bench::DomainDataset;
use crate::error::{shape_err, Error, Result};
use crate::model::{apply_lora, build_forward, forward, init_lora, LoraAdapter, LoraRouting, ModelSpec};
use crate::params::ParamMap;
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::train::{train_loop, Objective, TrainConfig};

/// Which model output the distillation penalty ties to the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KdMatch {
    #[default]
    Logits,
    Features,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Vanilla,
    L1 { lambda: f64 },
    L2 { lambda: f64 },
    Kd { lambda: f64, target: KdMatch },
    Lora { rank: usize, scale: f64, freeze_head: bool },
    WiseFt { alphas: Vec<f64> },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::L1 { .. } => "l1",
            Method::L2 { .. } => "l2",
            Method::Kd { .. } => "kd",
            Method::Lora { .. } => "lora",
            Method::WiseFt { .. } => "wiseft",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        match self {
            Method::L1 { lambda } | Method::L2 { lambda } | Method::Kd { lambda, .. }
                if !(*lambda >= 0.0 && lambda.is_finite()) =>
            {
                bad(format!("penalty weight {lambda} must be finite and >= 0"))
            }
            Method::Lora { rank: 0, .. } => bad("LoRA rank must be >= 1".into()),
            Method::Lora { scale, .. } if !scale.is_finite() => bad(format!("LoRA scale {scale}")),
            Method::WiseFt { alphas } => match alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                Some(a) => bad(format!("interpolation weight {a} outside [0, 1]")),
                None if alphas.is_empty() => bad("empty α grid".into()),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    pub train: TrainConfig,
    /// Evenly spaced checkpoints recorded after step 0; the last one is the
    /// final step.
    pub checkpoints: usize,
    /// Leave `head.*` out of the L1/L2 anchor penalties.
    pub exempt_head: bool,
}

impl MethodConfig {
    pub fn new(method: Method, train: TrainConfig) -> Self {
        Self {
            method,
            train,
            checkpoints: 10,
            exempt_head: false,
        }
    }
}

fn penalty_scope(map: &ParamMap, exempt_head: bool) -> ParamMap {
    if !exempt_head {
        return map.clone();
    }
    map.iter()
        .filter(|(n, _)| !n.starts_with("head."))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
}

/// `λ Σ|θ − θ0|` and its subgradient `λ sign(θ − θ0)` (with `sign(0) = 0`).
pub fn l1_penalty(theta: &ParamMap, theta0: &ParamMap, lambda: f64) -> Result<(f64, ParamMap)> {
    let delta = theta.zip_map(theta0, |a, b| a - b)?;
    let value = delta
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|d| d.abs())
        .sum::<f64>();
    Ok((lambda * value, delta.map(|d| lambda * sign(d))))
}

/// `λ ‖θ − θ0‖²` and its gradient `2λ (θ − θ0)`.
pub fn l2_penalty(theta: &ParamMap, theta0: &ParamMap, lambda: f64) -> Result<(f64, ParamMap)> {
    let delta = theta.zip_map(theta0, |a, b| a - b)?;
    let value = delta.iter().map(|(_, t)| t.sq_norm()).sum::<f64>();
    Ok((lambda * value, delta.map(|d| 2.0 * lambda * d)))
}

fn output_var(out: crate::model::ForwardVars, target: KdMatch) -> Var {
    match target {
        KdMatch::Logits => out.logits,
        KdMatch::Features => out.features,
    }
}

/// Records the distillation term on `g` for student outputs `student`,
/// with teacher outputs held constant.
fn kd_term(g: &mut Graph, student: Var, teacher: &Tensor, lambda: f64) -> Result<Var> {
    let n = teacher.shape()[0];
    let t = g.input(teacher.clone())?;
    let se = g.squared_error(student, t)?;
    g.scale(se, lambda / n as f64)
}

fn teacher_outputs(spec: &ModelSpec, theta0: &ParamMap, x: &Tensor, target: KdMatch) -> Result<Tensor> {
    let out = forward(spec, theta0, x)?;
    Ok(match target {
        KdMatch::Logits => out.logits,
        KdMatch::Features => out.features,
    })
}

/// `λ · mean_i ‖out_θ(x_i) − out_θ0(x_i)‖²`, and its gradient for every
/// entry of `theta`. No gradient reaches `theta0`.
pub fn kd_penalty(
    spec: &ModelSpec,
    theta: &ParamMap,
    theta0: &ParamMap,
    x: &Tensor,
    lambda: f64,
    target: KdMatch,
) -> Result<(f64, ParamMap)> {
    theta.check_compatible(theta0)?;
    let teacher = teacher_outputs(spec, theta0, x, target)?;
    let mut g = Graph::new();
    let vars = g.bind(theta)?;
    let xv = g.input(x.clone())?;
    let out = build_forward(&mut g, spec, &vars, None, xv)?;
    let root = kd_term(&mut g, output_var(out, target), &teacher, lambda)?;
    let names: Vec<&str> = theta.names().collect();
    Ok((g.value(root).item()?, g.gradient(root, &names)?))
}

/// `(1 − α) θ0 + α θ` over every tensor. The endpoints return exact copies.
pub fn wise_ft_interpolate(theta0: &ParamMap, theta: &ParamMap, alpha: f64) -> Result<ParamMap> {
    theta0.check_compatible(theta)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "interpolation weight {alpha} outside [0, 1]"
        )));
    }
    if alpha == 0.0 {
        return Ok(theta0.clone());
    }
    if alpha == 1.0 {
        return Ok(theta.clone());
    }
    theta0.zip_map(theta, |a, b| (1.0 - alpha) * a + alpha * b)
}

/// Checkpoints recorded during one fine-tuning run, starting at step 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub checkpoints: Vec<(usize, ParamMap)>,
}

impl Trajectory {
    pub fn initial(&self) -> &ParamMap {
        &self.checkpoints[0].1
    }

    pub fn last(&self) -> &ParamMap {
        &self.checkpoints[self.checkpoints.len() - 1].1
    }

    pub fn steps(&self) -> Vec<usize> {
        self.checkpoints.iter().map(|(s, _)| *s).collect()
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub trajectory: Trajectory,
    /// `(α, params)` for each point of a WiSE-FT grid; empty otherwise.
    pub interpolated: Vec<(f64, ParamMap)>,
    /// Trained adapters of a LoRA run; empty otherwise.
    pub adapters: Vec<LoraAdapter>,
    pub losses: Vec<f64>,
}

impl FinetuneRun {
    /// Parameters after the last training step.
    pub fn final_params(&self) -> &ParamMap {
        self.trajectory.last()
    }
}

/// Steps `round(i · total / n)` for `i = 1..=n`, deduplicated, plus 0.
pub fn checkpoint_steps(total: usize, n: usize) -> Vec<usize> {
    let mut steps = vec![0];
    for i in 1..=n.max(1) {
        let s = ((i * total) as f64 / n.max(1) as f64).round() as usize;
        if s > *steps.last().unwrap() {
            steps.push(s);
        }
    }
    steps
}

struct FinetuneObjective<'a> {
    spec: &'a ModelSpec,
    theta0: &'a ParamMap,
    /// Constant tensors bound alongside the trainable ones.
    frozen: ParamMap,
    method: &'a Method,
    exempt_head: bool,
    lora: Option<LoraRouting>,
}

impl Objective for FinetuneObjective<'_> {
    fn loss_and_grad(&self, trainable: &ParamMap, x: &Tensor, y: &[usize]) -> Result<(f64, ParamMap)> {
        let mut g = Graph::new();
        let mut vars = g.bind_constants(&self.frozen)?;
        for (name, t) in trainable.iter() {
            let v = g.parameter(name, t.clone())?;
            vars.insert(name, v);
        }
        let xv = g.input(x.clone())?;
        let out = build_forward(&mut g, self.spec, &vars, self.lora.as_ref(), xv)?;
        let mut loss = g.cross_entropy(out.logits, y)?;
        if let Method::Kd { lambda, target } = self.method {
            let teacher = teacher_outputs(self.spec, self.theta0, x, *target)?;
            let kd = kd_term(&mut g, output_var(out, *target), &teacher, *lambda)?;
            loss = g.add(loss, kd)?;
        }
        let names: Vec<&str> = trainable.names().collect();
        let mut value = g.value(loss).item()?;
        let mut grads = g.gradient(loss, &names)?;

        type Penalty = fn(&ParamMap, &ParamMap, f64) -> Result<(f64, ParamMap)>;
        let anchor: Option<(Penalty, f64)> = match self.method {
            Method::L1 { lambda } => Some((l1_penalty, *lambda)),
            Method::L2 { lambda } => Some((l2_penalty, *lambda)),
            _ => None,
        };
        if let Some((penalty, lambda)) = anchor {
            let theta = penalty_scope(trainable, self.exempt_head);
            let theta0 = penalty_scope(self.theta0, self.exempt_head);
            let (pv, pg) = penalty(&theta, &theta0, lambda)?;
            value += pv;
            for (name, t) in pg.iter() {
                grads
                    .get_mut(name)
                    .ok_or_else(|| Error::UnboundLeaf(name.to_string()))?
                    .add_assign(t)?;
            }
        }
        Ok((value, grads))
    }
}

/// Assembles the full parameter map of a LoRA run with adapters merged.
fn merged_lora_view(theta0: &ParamMap, trainable: &ParamMap, targets: &[String], scale: f64) -> Result<ParamMap> {
    let mut base = theta0.clone();
    for (name, t) in trainable.iter().filter(|(n, _)| n.starts_with("head.")) {
        base.insert(name, t.clone());
    }
    let adapters = lora_adapters(trainable, targets)?;
    apply_lora(&base, &adapters, scale)
}

fn lora_adapters(trainable: &ParamMap, targets: &[String]) -> Result<Vec<LoraAdapter>> {
    targets
        .iter()
        .map(|t| {
            Ok(LoraAdapter {
                target: t.clone(),
                a: trainable.require(&crate::model::lora_a_name(t))?.clone(),
                b: trainable.require(&crate::model::lora_b_name(t))?.clone(),
            })
        })
        .collect()
}

/// Fine-tunes `θ0` on `source` with the configured method.
///
/// The returned trajectory always holds complete, `θ0`-compatible parameter
/// maps (LoRA checkpoints are stored merged). `theta0` is never modified.
pub fn finetune(
    spec: &ModelSpec,
    theta0: &ParamMap,
    source: &DomainDataset,
    config: &MethodConfig,
) -> Result<FinetuneRun> {
    spec.check_params(theta0)?;
    config.method.validate()?;
    if source.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning on an empty dataset".into()));
    }
    let (_, width) = source.x.dims2("finetune")?;
    if width != spec.input_dim {
        return Err(shape_err(
            "finetune",
            format!("data width {width} vs model {}", spec.input_dim),
        ));
    }

    let mut trainable = theta0.clone();
    let mut frozen = ParamMap::new();
    let mut lora = None;
    if let Method::Lora {
        rank,
        scale,
        freeze_head,
    } = &config.method
    {
        let adapters = init_lora(spec, theta0, *rank, derive_seed(config.train.seed, "lora"))?;
        trainable = ParamMap::new();
        for (name, t) in theta0.iter() {
            if name.starts_with("head.") && !freeze_head {
                trainable.insert(name, t.clone());
            } else {
                frozen.insert(name, t.clone());
            }
        }
        for ad in &adapters {
            trainable.insert(ad.a_name(), ad.a.clone());
            trainable.insert(ad.b_name(), ad.b.clone());
        }
        lora = Some(LoraRouting {
            targets: adapters.iter().map(|a| a.target.clone()).collect(),
            scale: *scale,
        });
    }

    let full_view = |trainable: &ParamMap| -> Result<ParamMap> {
        match &lora {
            Some(route) => merged_lora_view(theta0, trainable, &route.targets, route.scale),
            None => Ok(trainable.clone()),
        }
    };

    let steps = checkpoint_steps(config.train.steps, config.checkpoints);
    let mut checkpoints = vec![(0, full_view(&trainable)?)];
    let objective = FinetuneObjective {
        spec,
        theta0,
        frozen,
        method: &config.method,
        exempt_head: config.exempt_head,
        lora: lora.clone(),
    };
    let outcome = train_loop(trainable, source, &config.train, &objective, |step, params| {
        if steps.binary_search(&step).is_ok() {
            checkpoints.push((step, full_view(params)?));
        }
        Ok(())
    })?;

    let adapters = match &lora {
        Some(route) => lora_adapters(&outcome.params, &route.targets)?,
        None => Vec::new(),
    };
    let trajectory = Trajectory { checkpoints };
    let interpolated = match &config.method {
        Method::WiseFt { alphas } => alphas
            .iter()
            .map(|&a| Ok((a, wise_ft_interpolate(theta0, trajectory.last(), a)?)))
            .collect::<Result<_>>()?,
        _ => Vec::new(),
    };
    Ok(FinetuneRun {
        trajectory,
        interpolated,
        adapters,
        losses: outcome.losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::rng::Rng;

    fn vec_map(data: Vec<f64>) -> ParamMap {
        let mut p = ParamMap::new();
        p.insert("w", Tensor::vector(data));
        p
    }

    #[test]
    fn l1_by_hand() {
        let (v, g) = l1_penalty(&vec_map(vec![3.0, -4.0, 1.0]), &vec_map(vec![0.0, 0.0, 1.0]), 1.0).unwrap();
        assert_eq!(v, 7.0);
        assert_eq!(g.get("w").unwrap().data(), &[1.0, -1.0, 0.0]);
    }

    #[test]
    fn l2_by_hand() {
        let (v, g) = l2_penalty(&vec_map(vec![3.0, 4.0]), &vec_map(vec![0.0, 0.0]), 1.0).unwrap();
        assert_eq!(v, 25.0);
        assert_eq!(g.get("w").unwrap().data(), &[6.0, 8.0]);
        let (v, g) = l2_penalty(&vec_map(vec![3.0, 4.0]), &vec_map(vec![3.0, 4.0]), 2.0).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.global_norm(), 0.0);
    }

    #[test]
    fn l1_matches_elementwise_sum() {
        let mut rng = Rng::new(17);
        let a = vec_map(rng.normals(10, 1.0));
        let b = vec_map(rng.normals(10, 1.0));
        let mut brute = 0.0;
        for (x, y) in a.get("w").unwrap().data().iter().zip(b.get("w").unwrap().data()) {
            brute += (x - y).abs();
        }
        let (v, _) = l1_penalty(&a, &b, 0.5).unwrap();
        assert!((v - 0.5 * brute).abs() <= 1e-12);
    }

    #[test]
    fn penalties_reject_incompatible() {
        let mut other = vec_map(vec![1.0]);
        other.insert("z", Tensor::scalar(0.0));
        assert!(l1_penalty(&vec_map(vec![1.0]), &other, 1.0).is_err());
        assert!(l2_penalty(&vec_map(vec![1.0]), &vec_map(vec![1.0, 2.0]), 1.0).is_err());
    }

    #[test]
    fn kd_bias_shift() {
        let spec = ModelSpec::mlp(3, 4, 5);
        let theta0 = init_params(&spec, 1).unwrap();
        let mut theta = theta0.clone();
        let c = 0.25;
        theta.insert("head.b", Tensor::full(&[5], c));
        let x = Tensor::new(&[4, 3], Rng::new(2).normals(12, 1.0)).unwrap();
        let (v, _) = kd_penalty(&spec, &theta, &theta0, &x, 2.0, KdMatch::Logits).unwrap();
        assert!((v - 2.0 * 5.0 * c * c).abs() <= 1e-12, "{v}");
        let (vf, _) = kd_penalty(&spec, &theta, &theta0, &x, 2.0, KdMatch::Features).unwrap();
        assert_eq!(vf, 0.0);
    }

    #[test]
    fn kd_null_case() {
        let spec = ModelSpec::attn(4, 2, 3, 2);
        let theta0 = init_params(&spec, 1).unwrap();
        let x = Tensor::new(&[3, 4], Rng::new(2).normals(12, 1.0)).unwrap();
        let (v, g) = kd_penalty(&spec, &theta0, &theta0, &x, 10.0, KdMatch::Logits).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|(_, t)| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = vec_map(vec![2.0, -0.0]);
        let b = vec_map(vec![6.0, 5.0]);
        assert!(wise_ft_interpolate(&a, &b, 0.0).unwrap().bit_eq(&a));
        assert!(wise_ft_interpolate(&a, &b, 1.0).unwrap().bit_eq(&b));
        assert_eq!(
            wise_ft_interpolate(&a, &b, 0.5).unwrap().get("w").unwrap().data(),
            &[4.0, 2.5]
        );
        assert!(wise_ft_interpolate(&a, &b, 1.5).is_err());
        assert!(wise_ft_interpolate(&a, &vec_map(vec![1.0]), 0.5).is_err());
    }

    #[test]
    fn checkpoint_schedule() {
        assert_eq!(
            checkpoint_steps(100, 10),
            vec![0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100]
        );
        assert_eq!(checkpoint_steps(5, 10), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(checkpoint_steps(0, 10), vec![0]);
    }

    #[test]
    fn method_validation() {
        assert!(Method::L2 { lambda: -1.0 }.validate().is_err());
        assert!(Method::WiseFt { alphas: vec![0.2, 1.2] }.validate().is_err());
        assert!(Method::WiseFt { alphas: vec![] }.validate().is_err());
        assert!(Method::Lora {
            rank: 0,
            scale: 1.0,
            freeze_head: false
        }
        .validate()
        .is_err());
        assert!(Method::Kd {
            lambda: 0.1,
            target: KdMatch::Logits
        }
        .validate()
        .is_ok());
    }
}
