use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ftlab::bench::generate_domains;
use ftlab::harness::sweep::{parse_report, pretrain_config, run_method, score, summarize, TradeoffRecord};
use ftlab::harness::{read_checkpoint, run_probe_report, run_sweep, write_checkpoint, MethodGrid, SweepConfig};
use ftlab::methods::{wise_ft_interpolate, KdMatch, Method};
use ftlab::train::pretrain;
use ftlab::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ftlab",
    version,
    about = "Robust fine-tuning experiments on a synthetic domain-shift benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (`key = value` lines); the reference setup if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data, initialization and shuffling; the config's first seed
    /// if omitted.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train θ0 on the pretraining mixture.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune θ0 on the source style with one method.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// vanilla, l1, l2, kd, lora or wiseft.
        #[arg(long, default_value = "vanilla")]
        method: String,
        /// λ for l1/l2/kd, rank for lora.
        #[arg(long)]
        hyper: Option<f64>,
        /// Start from this checkpoint instead of pretraining.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Weight-space interpolation (1 − α) θ0 + α θ.
    Interpolate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        theta0: PathBuf,
        #[arg(long)]
        theta: PathBuf,
        #[arg(long)]
        alpha: f64,
    },
    /// Linear probes along a saved trajectory.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Directory holding `step_NNNNNN.ftck` files.
        #[arg(long)]
        trajectory: PathBuf,
    },
    /// ID and per-target accuracy of a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Full method × hyper × seed sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Rounded summary of a sweep report.
    Report {
        #[command(flatten)]
        common: Common,
        /// Report CSV; `<out>/report.csv` if omitted.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

struct Context {
    config: SweepConfig,
    seed: u64,
    out: PathBuf,
}

impl Context {
    fn load(common: &Common) -> Result<Self> {
        let config = match &common.config {
            Some(p) => SweepConfig::from_file(p)?,
            None => SweepConfig::reference(),
        };
        let seed = common.seed.unwrap_or(config.seeds[0]);
        std::fs::create_dir_all(&common.out)?;
        Ok(Self {
            config,
            seed,
            out: common.out.clone(),
        })
    }
}

fn print_record(r: &TradeoffRecord) {
    let targets: Vec<String> = r.targets.iter().map(|(t, a)| format!("{t}={a:.4}")).collect();
    println!("id {:.4}  avg_ood {:.4}  {}", r.id_acc, r.avg_ood, targets.join(" "));
}

fn method_from_args(config: &SweepConfig, name: &str, hyper: Option<f64>) -> Result<Method> {
    let need = || Error::Config(format!("method `{name}` needs --hyper"));
    let grid = config.methods.iter().find(|g| g.name() == name);
    let method = match name {
        "vanilla" => Method::Vanilla,
        "l1" => Method::L1 {
            lambda: hyper.ok_or_else(need)?,
        },
        "l2" => Method::L2 {
            lambda: hyper.ok_or_else(need)?,
        },
        "kd" => {
            let target = match grid {
                Some(MethodGrid::Kd { target, .. }) => *target,
                _ => KdMatch::Logits,
            };
            Method::Kd {
                lambda: hyper.ok_or_else(need)?,
                target,
            }
        }
        "lora" => {
            let rank = hyper.ok_or_else(need)?;
            if rank.fract() != 0.0 || rank < 1.0 {
                return Err(Error::Config(format!("LoRA rank {rank}")));
            }
            let (scale, freeze_head) = match grid {
                Some(MethodGrid::Lora { scale, freeze_head, .. }) => (*scale, *freeze_head),
                _ => (1.0, false),
            };
            Method::Lora {
                rank: rank as usize,
                scale,
                freeze_head,
            }
        }
        "wiseft" => match grid {
            Some(MethodGrid::WiseFt { alphas }) => Method::WiseFt { alphas: alphas.clone() },
            _ => Method::WiseFt {
                alphas: vec![0.2, 0.4, 0.6, 0.8],
            },
        },
        other => return Err(Error::Config(format!("unknown method `{other}`"))),
    };
    method.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(method)
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Pretrain { common } => {
            let ctx = Context::load(&common)?;
            let domains = generate_domains(&ctx.config.bench, ctx.seed)?;
            let theta0 = pretrain(
                &ctx.config.model,
                &domains.pretrain,
                &pretrain_config(&ctx.config, ctx.seed),
            )?;
            let path = ctx.out.join("pretrained.ftck");
            write_checkpoint(&path, &theta0)?;
            let pre = ftlab::bench::evaluate(&ctx.config.model, &theta0, &domains.pretrain)?;
            println!("pretrain accuracy {pre:.4}");
            print_record(&score(
                &ctx.config.model,
                &theta0,
                &domains,
                "pretrained",
                None,
                ctx.seed,
                String::new(),
            )?);
            println!("wrote {}", path.display());
        }
        Command::Finetune {
            common,
            method,
            hyper,
            init,
        } => {
            let ctx = Context::load(&common)?;
            let method = method_from_args(&ctx.config, &method, hyper)?;
            let domains = generate_domains(&ctx.config.bench, ctx.seed)?;
            let theta0 = match init {
                Some(p) => read_checkpoint(&p)?,
                None => pretrain(
                    &ctx.config.model,
                    &domains.pretrain,
                    &pretrain_config(&ctx.config, ctx.seed),
                )?,
            };
            let run = run_method(&ctx.config, &theta0, &domains, method, ctx.seed, &ctx.out)?;
            write_checkpoint(&ctx.out.join("final.ftck"), run.final_params())?;
            print_record(&score(
                &ctx.config.model,
                run.final_params(),
                &domains,
                "",
                None,
                ctx.seed,
                String::new(),
            )?);
            for (alpha, p) in &run.interpolated {
                print!("alpha {alpha}: ");
                print_record(&score(
                    &ctx.config.model,
                    p,
                    &domains,
                    "",
                    None,
                    ctx.seed,
                    String::new(),
                )?);
            }
            println!("wrote trajectory to {}", ctx.out.display());
        }
        Command::Interpolate {
            common,
            theta0,
            theta,
            alpha,
        } => {
            let ctx = Context::load(&common)?;
            let mixed = wise_ft_interpolate(&read_checkpoint(&theta0)?, &read_checkpoint(&theta)?, alpha)?;
            let path = ctx.out.join(format!("interpolated_{alpha}.ftck"));
            write_checkpoint(&path, &mixed)?;
            let domains = generate_domains(&ctx.config.bench, ctx.seed)?;
            print_record(&score(
                &ctx.config.model,
                &mixed,
                &domains,
                "",
                None,
                ctx.seed,
                String::new(),
            )?);
            println!("wrote {}", path.display());
        }
        Command::Probe { common, trajectory } => {
            let ctx = Context::load(&common)?;
            let domains = generate_domains(&ctx.config.bench, ctx.seed)?;
            let path = ctx.out.join("probe.csv");
            let rows = run_probe_report(
                &trajectory,
                &ctx.config.model,
                &domains.targets,
                &ctx.config.probe,
                &path,
            )?;
            for r in &rows {
                println!(
                    "{:<10} step {:>6}  carried {:.4}  probe {:.4}",
                    r.target, r.step, r.carried_acc, r.probe_acc
                );
            }
            println!("wrote {}", path.display());
        }
        Command::Evaluate { common, checkpoint } => {
            let ctx = Context::load(&common)?;
            let params = read_checkpoint(&checkpoint)?;
            let domains = generate_domains(&ctx.config.bench, ctx.seed)?;
            let rec = score(
                &ctx.config.model,
                &params,
                &domains,
                "checkpoint",
                None,
                ctx.seed,
                String::new(),
            )?;
            print_record(&rec);
            let cols: Vec<String> = domains.targets.iter().map(|t| t.domain.clone()).collect();
            let path = ctx.out.join("evaluate.csv");
            std::fs::write(&path, ftlab::harness::sweep::records_to_csv(&[rec], &cols))?;
            println!("wrote {}", path.display());
        }
        Command::Sweep { common } => {
            let mut ctx = Context::load(&common)?;
            if let Some(seed) = common.seed {
                ctx.config.seeds = vec![seed];
            }
            let outcome = run_sweep(&ctx.config, &ctx.out)?;
            print!("{}", summarize(&outcome.records));
            for r in outcome.records.iter().filter(|r| !r.is_ok()) {
                if let ftlab::harness::RunStatus::Failed(why) = &r.status {
                    eprintln!("failed: {} {} seed {}: {why}", r.method, r.hyper, r.seed);
                }
            }
            println!("wrote {}", outcome.report.display());
            if outcome.any_failed() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Report { common, input } => {
            let input = input.unwrap_or_else(|| common.out.join("report.csv"));
            let text = std::fs::read_to_string(&input)?;
            let records = parse_report(&text)?;
            let summary = summarize(&records);
            print!("{summary}");
            std::fs::create_dir_all(&common.out)?;
            std::fs::write(common.out.join("summary.txt"), &summary)?;
            if records.iter().any(|r| !r.is_ok()) {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
