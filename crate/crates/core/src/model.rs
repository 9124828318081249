//! Classifiers factored into a feature extractor and a linear head.
//!
//! Parameter names follow a fixed scheme so that checkpoints, penalties and
//! interpolation can align tensors by name:
//!
//! | arch | feature extractor (`phi.*`)                         | head (`head.*`)         |
//! |------|-----------------------------------------------------|-------------------------|
//! | mlp  | `phi.0.W` h×d, `phi.0.b`, `phi.1.W` h×h, `phi.1.b`  | `head.W` C×h, `head.b`  |
//! | attn | `phi.q.W`, `phi.k.W`, `phi.v.W` (each t×t), `phi.ff.W` h×t, `phi.ff.b` | same |
//!
//! where `t` is the token width. The attention model reads an input row as
//! `T` tokens of width `t`, runs one head of scaled dot-product attention,
//! a token-wise ReLU feed-forward layer, then mean-pools over tokens.

use crate::autodiff::{Graph, ParamVars, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamMap;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Names of the projections LoRA adapters may target.
pub const LORA_TARGETS: [&str; 2] = ["phi.q.W", "phi.v.W"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Mlp,
    /// Single-head self-attention over `tokens` tokens.
    Attn {
        tokens: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            arch: Architecture::Mlp,
            input_dim,
            hidden,
            classes,
        }
    }

    pub fn attn(input_dim: usize, tokens: usize, hidden: usize, classes: usize) -> Self {
        Self {
            arch: Architecture::Attn { tokens },
            input_dim,
            hidden,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.classes == 0 {
            return Err(Error::InvalidArgument(format!("non-positive model dims in {self:?}")));
        }
        if let Architecture::Attn { tokens } = self.arch {
            if tokens == 0 || !self.input_dim.is_multiple_of(tokens) {
                return Err(Error::InvalidArgument(format!(
                    "input dim {} is not divisible into {tokens} tokens",
                    self.input_dim
                )));
            }
        }
        Ok(())
    }

    /// Width of one token for the attention model.
    pub fn token_dim(&self) -> Option<usize> {
        match self.arch {
            Architecture::Attn { tokens } => Some(self.input_dim / tokens),
            Architecture::Mlp => None,
        }
    }

    /// Canonical `(name, shape, fan_in)` for every parameter.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        let (d, h, c) = (self.input_dim, self.hidden, self.classes);
        let mut out = match self.arch {
            Architecture::Mlp => vec![
                ("phi.0.W", vec![h, d], d),
                ("phi.0.b", vec![h], d),
                ("phi.1.W", vec![h, h], h),
                ("phi.1.b", vec![h], h),
            ],
            Architecture::Attn { tokens } => {
                let t = d / tokens;
                vec![
                    ("phi.q.W", vec![t, t], t),
                    ("phi.k.W", vec![t, t], t),
                    ("phi.v.W", vec![t, t], t),
                    ("phi.ff.W", vec![h, t], t),
                    ("phi.ff.b", vec![h], t),
                ]
            }
        };
        out.push(("head.W", vec![c, h], h));
        out.push(("head.b", vec![c], h));
        out
    }

    pub fn check_params(&self, params: &ParamMap) -> Result<()> {
        let layout = self.layout();
        for (name, shape, _) in &layout {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Incompatible(format!("missing `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Incompatible(format!(
                    "`{name}` has shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
        }
        if params.len() != layout.len() {
            return Err(Error::Incompatible(format!(
                "{} tensors for a model with {}",
                params.len(),
                layout.len()
            )));
        }
        Ok(())
    }
}

/// He-normal weights `N(0, 2/fan_in)`, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamMap> {
    spec.validate()?;
    let mut rng = Rng::derived(seed, "init_params");
    let mut params = ParamMap::new();
    for (name, shape, fan_in) in spec.layout() {
        let numel = shape.iter().product();
        let t = if name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            Tensor::new(&shape, rng.normals(numel, (2.0 / fan_in as f64).sqrt()))?
        };
        params.insert(name, t);
    }
    Ok(params)
}

/// Low-rank update `ΔW = B·A` of one attention projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    /// r × k
    pub a: Tensor,
    /// d × r
    pub b: Tensor,
}

impl LoraAdapter {
    /// Gaussian `A ~ N(0, 1/k)`, zero `B`.
    pub fn init(target: &str, weight_shape: &[usize], rank: usize, rng: &mut Rng) -> Result<Self> {
        let [d, k] = weight_shape else {
            return Err(shape_err("lora", format!("target shape {weight_shape:?}")));
        };
        let (d, k) = (*d, *k);
        if rank == 0 || rank >= d.min(k) {
            return Err(Error::InvalidArgument(format!(
                "LoRA rank {rank} must satisfy 1 <= r < min({d}, {k})"
            )));
        }
        Ok(Self {
            target: target.to_string(),
            a: Tensor::new(&[rank, k], rng.normals(rank * k, (1.0 / k as f64).sqrt()))?,
            b: Tensor::zeros(&[d, rank]),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn a_name(&self) -> String {
        lora_a_name(&self.target)
    }

    pub fn b_name(&self) -> String {
        lora_b_name(&self.target)
    }
}

pub fn lora_a_name(target: &str) -> String {
    format!("lora.{target}.A")
}

pub fn lora_b_name(target: &str) -> String {
    format!("lora.{target}.B")
}

/// Fresh zero-`B` adapters on every attention projection in [`LORA_TARGETS`].
pub fn init_lora(spec: &ModelSpec, params: &ParamMap, rank: usize, seed: u64) -> Result<Vec<LoraAdapter>> {
    if spec.arch == Architecture::Mlp {
        return Err(Error::InvalidArgument(
            "LoRA adapts attention projections; the mlp architecture has none".into(),
        ));
    }
    let mut rng = Rng::derived(seed, "lora_init");
    LORA_TARGETS
        .iter()
        .map(|&t| LoraAdapter::init(t, params.require(t)?.shape(), rank, &mut rng))
        .collect()
}

/// Merged view: each target weight becomes `W0 + scale·B·A`. `params` itself
/// is left untouched.
pub fn apply_lora(params: &ParamMap, adapters: &[LoraAdapter], scale: f64) -> Result<ParamMap> {
    let mut out = params.clone();
    if scale == 0.0 {
        return Ok(out);
    }
    for ad in adapters {
        let w0 = params.require(&ad.target)?;
        let delta = ad.b.matmul(&ad.a)?.scale(scale);
        if delta.shape() != w0.shape() {
            return Err(shape_err(
                "apply_lora",
                format!("B·A is {:?}, `{}` is {:?}", delta.shape(), ad.target, w0.shape()),
            ));
        }
        out.insert(ad.target.clone(), w0.add(&delta)?);
    }
    Ok(out)
}

/// How projections consult LoRA factors while building a graph: for each
/// target present here, `x W0ᵀ + scale·(x Aᵀ) Bᵀ` replaces `x Wᵀ`, with `A`
/// and `B` looked up under [`lora_a_name`] / [`lora_b_name`].
#[derive(Debug, Clone)]
pub struct LoraRouting {
    pub targets: Vec<String>,
    pub scale: f64,
}

/// Graph nodes of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub features: Var,
    pub logits: Var,
}

/// Concrete outputs of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub features: Tensor,
    pub logits: Tensor,
}

fn check_input(spec: &ModelSpec, x: &Tensor) -> Result<()> {
    let (_, w) = x.dims2("forward")?;
    if w != spec.input_dim {
        return Err(shape_err(
            "forward",
            format!("input width {w}, model expects {}", spec.input_dim),
        ));
    }
    Ok(())
}

/// Records `f(x) = v(Φ(x))` on `g`, reading parameters from `vars`.
pub fn build_forward(
    g: &mut Graph,
    spec: &ModelSpec,
    vars: &ParamVars,
    lora: Option<&LoraRouting>,
    x: Var,
) -> Result<ForwardVars> {
    check_input(spec, g.value(x))?;
    let features = match spec.arch {
        Architecture::Mlp => {
            let mut h = x;
            for layer in ["phi.0", "phi.1"] {
                let z = g.matmul_t(h, vars.get(&format!("{layer}.W"))?)?;
                let z = g.add(z, vars.get(&format!("{layer}.b"))?)?;
                h = g.relu(z)?;
            }
            h
        }
        Architecture::Attn { tokens } => attention_features(g, spec, vars, lora, x, tokens)?,
    };
    let logits = g.matmul_t(features, vars.get("head.W")?)?;
    let logits = g.add(logits, vars.get("head.b")?)?;
    Ok(ForwardVars { features, logits })
}

fn projection(g: &mut Graph, vars: &ParamVars, lora: Option<&LoraRouting>, x: Var, name: &str) -> Result<Var> {
    let base = g.matmul_t(x, vars.get(name)?)?;
    match lora {
        Some(route) if route.targets.iter().any(|t| t == name) => {
            let xa = g.matmul_t(x, vars.get(&lora_a_name(name))?)?;
            let xab = g.matmul_t(xa, vars.get(&lora_b_name(name))?)?;
            let xab = g.scale(xab, route.scale)?;
            g.add(base, xab)
        }
        _ => Ok(base),
    }
}

fn attention_features(
    g: &mut Graph,
    spec: &ModelSpec,
    vars: &ParamVars,
    lora: Option<&LoraRouting>,
    x: Var,
    tokens: usize,
) -> Result<Var> {
    let batch = g.value(x).shape()[0];
    let width = spec.input_dim / tokens;
    let xt = g.reshape(x, &[batch * tokens, width])?;
    let q = projection(g, vars, lora, xt, "phi.q.W")?;
    let k = projection(g, vars, lora, xt, "phi.k.W")?;
    let v = projection(g, vars, lora, xt, "phi.v.W")?;
    let inv_sqrt = 1.0 / (width as f64).sqrt();

    let mut contexts = Vec::with_capacity(batch);
    for i in 0..batch {
        let qi = g.slice_rows(q, i * tokens, tokens)?;
        let ki = g.slice_rows(k, i * tokens, tokens)?;
        let vi = g.slice_rows(v, i * tokens, tokens)?;
        let scores = g.matmul_t(qi, ki)?;
        let scores = g.scale(scores, inv_sqrt)?;
        let weights = g.softmax(scores)?;
        contexts.push(g.matmul(weights, vi)?);
    }
    let context = g.concat_rows(&contexts)?;

    let ff = g.matmul_t(context, vars.get("phi.ff.W")?)?;
    let ff = g.add(ff, vars.get("phi.ff.b")?)?;
    let ff = g.relu(ff)?;

    let mut pool = Tensor::zeros(&[batch, batch * tokens]);
    let cols = batch * tokens;
    for i in 0..batch {
        for j in 0..tokens {
            pool.data_mut()[i * cols + i * tokens + j] = 1.0 / tokens as f64;
        }
    }
    let pool = g.input(pool)?;
    g.matmul(pool, ff)
}

fn run_forward(spec: &ModelSpec, params: &ParamMap, lora: Option<&LoraRouting>, x: &Tensor) -> Result<Output> {
    let mut g = Graph::new();
    let vars = g.bind_constants(params)?;
    let xv = g.input(x.clone())?;
    let out = build_forward(&mut g, spec, &vars, lora, xv)?;
    Ok(Output {
        features: g.value(out.features).clone(),
        logits: g.value(out.logits).clone(),
    })
}

/// Features `Φ(x)` (batch × h) and logits `v(Φ(x))` (batch × C).
pub fn forward(spec: &ModelSpec, params: &ParamMap, x: &Tensor) -> Result<Output> {
    spec.check_params(params)?;
    check_input(spec, x)?;
    run_forward(spec, params, None, x)
}

/// [`forward`] restricted to the attention architecture.
pub fn attention_forward(spec: &ModelSpec, params: &ParamMap, x: &Tensor) -> Result<Output> {
    if spec.arch == Architecture::Mlp {
        return Err(Error::InvalidArgument("attention_forward on an mlp spec".into()));
    }
    forward(spec, params, x)
}

/// Forward pass that keeps adapters factored: projections compute
/// `x W0ᵀ + scale·(x Aᵀ) Bᵀ` instead of using a merged weight.
pub fn forward_with_adapters(
    spec: &ModelSpec,
    base: &ParamMap,
    adapters: &[LoraAdapter],
    scale: f64,
    x: &Tensor,
) -> Result<Output> {
    spec.check_params(base)?;
    check_input(spec, x)?;
    let mut all = base.clone();
    for ad in adapters {
        let (d, k) = base.require(&ad.target)?.dims2("lora")?;
        if ad.b.shape() != [d, ad.rank()] || ad.a.shape() != [ad.rank(), k] {
            return Err(shape_err(
                "lora",
                format!("adapter for `{}` does not fit {d}x{k}", ad.target),
            ));
        }
        all.insert(ad.a_name(), ad.a.clone());
        all.insert(ad.b_name(), ad.b.clone());
    }
    let route = LoraRouting {
        targets: adapters.iter().map(|a| a.target.clone()).collect(),
        scale,
    };
    run_forward(spec, &all, Some(&route), x)
}
