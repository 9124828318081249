//! Line-based `key = value` experiment configs.
//!
//! Keys are dotted (`method.l2.lambda = 0.01, 0.1`); `#` starts a comment.
//! Lists are comma-separated. Keys not mentioned keep the reference values
//! of [`SweepConfig::reference`], except that a config naming any `method.*`
//! key replaces the whole method list.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::bench::BenchSpec;
use crate::error::{Error, Result};
use crate::methods::{KdMatch, Method};
use crate::model::ModelSpec;
use crate::probe::ProbeConfig;
use crate::train::TrainConfig;

/// One method with its hyperparameter grid.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodGrid {
    Vanilla,
    L1 {
        lambdas: Vec<f64>,
    },
    L2 {
        lambdas: Vec<f64>,
    },
    Kd {
        lambdas: Vec<f64>,
        target: KdMatch,
    },
    Lora {
        ranks: Vec<usize>,
        scale: f64,
        freeze_head: bool,
    },
    /// One vanilla run, interpolated at each α.
    WiseFt {
        alphas: Vec<f64>,
    },
}

impl MethodGrid {
    pub fn name(&self) -> &'static str {
        match self {
            MethodGrid::Vanilla => "vanilla",
            MethodGrid::L1 { .. } => "l1",
            MethodGrid::L2 { .. } => "l2",
            MethodGrid::Kd { .. } => "kd",
            MethodGrid::Lora { .. } => "lora",
            MethodGrid::WiseFt { .. } => "wiseft",
        }
    }

    /// Training runs needed for this grid, each with its hyper value.
    pub fn runs(&self) -> Vec<(Option<f64>, Method)> {
        match self {
            MethodGrid::Vanilla => vec![(None, Method::Vanilla)],
            MethodGrid::L1 { lambdas } => lambdas.iter().map(|&l| (Some(l), Method::L1 { lambda: l })).collect(),
            MethodGrid::L2 { lambdas } => lambdas.iter().map(|&l| (Some(l), Method::L2 { lambda: l })).collect(),
            MethodGrid::Kd { lambdas, target } => lambdas
                .iter()
                .map(|&l| {
                    (
                        Some(l),
                        Method::Kd {
                            lambda: l,
                            target: *target,
                        },
                    )
                })
                .collect(),
            MethodGrid::Lora {
                ranks,
                scale,
                freeze_head,
            } => ranks
                .iter()
                .map(|&r| {
                    let m = Method::Lora {
                        rank: r,
                        scale: *scale,
                        freeze_head: *freeze_head,
                    };
                    (Some(r as f64), m)
                })
                .collect(),
            MethodGrid::WiseFt { alphas } => vec![(None, Method::WiseFt { alphas: alphas.clone() })],
        }
    }

    fn grid_len(&self) -> usize {
        match self {
            MethodGrid::Vanilla => 1,
            MethodGrid::L1 { lambdas } | MethodGrid::L2 { lambdas } | MethodGrid::Kd { lambdas, .. } => lambdas.len(),
            MethodGrid::Lora { ranks, .. } => ranks.len(),
            MethodGrid::WiseFt { alphas } => alphas.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub bench: BenchSpec,
    pub model: ModelSpec,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Trajectory checkpoints per fine-tuning run (besides step 0).
    pub checkpoints: usize,
    pub methods: Vec<MethodGrid>,
    /// Also report the pretrained model itself as a `pretrained` row.
    pub include_pretrained: bool,
    pub exempt_head: bool,
    pub probe: ProbeConfig,
    pub seeds: Vec<u64>,
    pub parallel: bool,
}

impl SweepConfig {
    /// The frozen reference experiment.
    pub fn reference() -> Self {
        let bench = BenchSpec::reference();
        Self {
            model: ModelSpec::mlp(bench.input_dim, 128, bench.classes),
            bench,
            pretrain: TrainConfig {
                steps: 20_000,
                batch_size: 64,
                peak_lr: 1e-2,
                warmup: 50,
                plateau_window: Some(100),
                plateau_tol: 1e-3,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                steps: 600,
                batch_size: 50,
                peak_lr: 2e-3,
                warmup: 30,
                ..TrainConfig::default()
            },
            checkpoints: 10,
            methods: vec![
                MethodGrid::Vanilla,
                MethodGrid::L1 {
                    lambdas: vec![1e-4, 1e-3, 1e-2],
                },
                MethodGrid::L2 {
                    lambdas: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0],
                },
                MethodGrid::Kd {
                    lambdas: vec![1e-2, 1e-1, 1.0],
                    target: KdMatch::Logits,
                },
                MethodGrid::WiseFt {
                    alphas: vec![0.2, 0.4, 0.6, 0.8],
                },
            ],
            include_pretrained: true,
            exempt_head: false,
            probe: ProbeConfig::default(),
            seeds: vec![42],
            parallel: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.bench.validate().map_err(cfg)?;
        self.model.validate().map_err(cfg)?;
        if self.model.input_dim != self.bench.input_dim || self.model.classes != self.bench.classes {
            return Err(Error::Config("model input/classes do not match the benchmark".into()));
        }
        if self.methods.is_empty() && !self.include_pretrained {
            return Err(Error::Config("no methods configured".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("sweep.seeds is empty".into()));
        }
        for m in &self.methods {
            if m.grid_len() == 0 {
                return Err(Error::Config(format!("empty hyper grid for `{}`", m.name())));
            }
            for (_, method) in m.runs() {
                method.validate().map_err(cfg)?;
            }
            if let MethodGrid::Lora { .. } = m {
                if self.model.token_dim().is_none() {
                    return Err(Error::Config("LoRA needs the attention model".into()));
                }
            }
        }
        for (name, t) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if t.batch_size == 0
                || !(t.peak_lr > 0.0 && t.peak_lr.is_finite())
                || t.clip_norm.is_nan()
                || t.clip_norm <= 0.0
            {
                return Err(Error::Config(format!("invalid {name} settings")));
            }
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = parse_pairs(text)?;
        let mut c = Self::reference();
        let mut hidden = c.model.hidden;
        let mut arch = "mlp".to_string();
        let mut tokens = 4usize;

        macro_rules! set {
            ($key:expr, $field:expr) => {
                if let Some(v) = kv.take($key) {
                    $field = parse_value($key, &v)?;
                }
            };
        }
        set!("bench.classes", c.bench.classes);
        set!("bench.core_dim", c.bench.core_dim);
        set!("bench.input_dim", c.bench.input_dim);
        set!("bench.styles", c.bench.styles);
        if let Some(v) = kv.take("bench.pretrain_styles") {
            c.bench.pretrain_styles = parse_list("bench.pretrain_styles", &v)?;
        }
        set!("bench.source_style", c.bench.source_style);
        if let Some(v) = kv.take("bench.target_styles") {
            c.bench.target_styles = parse_list("bench.target_styles", &v)?;
        }
        set!("bench.train_per_class", c.bench.train_per_class);
        set!("bench.test_per_class", c.bench.test_per_class);
        set!("bench.sigma_core", c.bench.sigma_core);
        set!("bench.sigma_noise", c.bench.sigma_noise);
        set!("bench.kappa", c.bench.kappa);

        set!("model.arch", arch);
        set!("model.hidden", hidden);
        set!("model.tokens", tokens);
        c.model = match arch.as_str() {
            "mlp" => ModelSpec::mlp(c.bench.input_dim, hidden, c.bench.classes),
            "attn" => ModelSpec::attn(c.bench.input_dim, tokens, hidden, c.bench.classes),
            other => return Err(Error::Config(format!("model.arch `{other}` (expected mlp or attn)"))),
        };

        for (prefix, t) in [("pretrain", &mut c.pretrain), ("finetune", &mut c.finetune)] {
            set!(&format!("{prefix}.steps"), t.steps);
            set!(&format!("{prefix}.batch_size"), t.batch_size);
            set!(&format!("{prefix}.lr"), t.peak_lr);
            set!(&format!("{prefix}.warmup"), t.warmup);
            set!(&format!("{prefix}.weight_decay"), t.weight_decay);
            set!(&format!("{prefix}.clip_norm"), t.clip_norm);
            if let Some(v) = kv.take(&format!("{prefix}.plateau_window")) {
                let w: usize = parse_value(&format!("{prefix}.plateau_window"), &v)?;
                t.plateau_window = (w > 0).then_some(w);
            }
            set!(&format!("{prefix}.plateau_tol"), t.plateau_tol);
        }
        set!("finetune.checkpoints", c.checkpoints);

        if kv.has_prefix("method.") {
            c.methods = parse_methods(&mut kv, &mut c.include_pretrained)?;
        }
        set!("penalty.exempt_head", c.exempt_head);
        set!("probe.lambda", c.probe.lambda);
        set!("probe.max_iters", c.probe.max_iters);
        set!("probe.grad_tol", c.probe.grad_tol);
        if let Some(v) = kv.take("sweep.seeds") {
            c.seeds = parse_list("sweep.seeds", &v)?;
        }
        set!("sweep.parallel", c.parallel);

        if let Some((key, line)) = kv.leftover() {
            return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
        }
        c.validate()?;
        Ok(c)
    }
}

fn parse_methods(kv: &mut Pairs, include_pretrained: &mut bool) -> Result<Vec<MethodGrid>> {
    let mut methods = Vec::new();
    *include_pretrained = false;
    if let Some(v) = kv.take("method.pretrained") {
        *include_pretrained = parse_value("method.pretrained", &v)?;
    }
    if let Some(v) = kv.take("method.vanilla") {
        if parse_value::<bool>("method.vanilla", &v)? {
            methods.push(MethodGrid::Vanilla);
        }
    }
    if let Some(v) = kv.take("method.l1.lambda") {
        methods.push(MethodGrid::L1 {
            lambdas: parse_list("method.l1.lambda", &v)?,
        });
    }
    if let Some(v) = kv.take("method.l2.lambda") {
        methods.push(MethodGrid::L2 {
            lambdas: parse_list("method.l2.lambda", &v)?,
        });
    }
    let kd_match = match kv.take("method.kd.match").as_deref() {
        None | Some("logits") => KdMatch::Logits,
        Some("features") => KdMatch::Features,
        Some(other) => {
            return Err(Error::Config(format!(
                "method.kd.match `{other}` (expected logits or features)"
            )))
        }
    };
    if let Some(v) = kv.take("method.kd.lambda") {
        methods.push(MethodGrid::Kd {
            lambdas: parse_list("method.kd.lambda", &v)?,
            target: kd_match,
        });
    }
    let scale = match kv.take("method.lora.scale") {
        Some(v) => parse_value("method.lora.scale", &v)?,
        None => 1.0,
    };
    let freeze_head = match kv.take("method.lora.freeze_head") {
        Some(v) => parse_value("method.lora.freeze_head", &v)?,
        None => false,
    };
    if let Some(v) = kv.take("method.lora.rank") {
        methods.push(MethodGrid::Lora {
            ranks: parse_list("method.lora.rank", &v)?,
            scale,
            freeze_head,
        });
    }
    if let Some(v) = kv.take("method.wiseft.alpha") {
        methods.push(MethodGrid::WiseFt {
            alphas: parse_list("method.wiseft.alpha", &v)?,
        });
    }
    Ok(methods)
}

/// Key/value pairs with the line each came from; keys are consumed as they
/// are recognised so that leftovers can be reported.
struct Pairs {
    entries: BTreeMap<String, (String, usize)>,
}

impl Pairs {
    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(v, _)| v)
    }

    fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.keys().any(|k| k.starts_with(prefix))
    }

    fn leftover(&self) -> Option<(&str, usize)> {
        self.entries
            .iter()
            .min_by_key(|(_, (_, line))| *line)
            .map(|(k, (_, line))| (k.as_str(), *line))
    }
}

fn parse_pairs(text: &str) -> Result<Pairs> {
    let mut entries = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::Config(format!("line {}: bad key `{key}`", i + 1)));
        }
        if value.is_empty() {
            return Err(Error::Config(format!("line {}: `{key}` has no value", i + 1)));
        }
        if entries.insert(key.to_string(), (value.to_string(), i + 1)).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
        }
    }
    Ok(Pairs { entries })
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse_value(key, v)).collect()
}
