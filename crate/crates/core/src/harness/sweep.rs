//! Sweeps over methods × hyperparameters × seeds, and the CSV reports they
//! produce.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::checkpoint::{read_checkpoint, write_checkpoint};
use super::config::SweepConfig;
use crate::bench::{aggregate_ood, evaluate, generate_domains, DomainDataset, Domains};
use crate::error::{Error, Result};
use crate::methods::{finetune, FinetuneRun, Method, MethodConfig, Trajectory};
use crate::model::ModelSpec;
use crate::params::ParamMap;
use crate::probe::{probe_trajectory, ProbeConfig, ProbeResult};
use crate::train::{pretrain, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Ok,
    Failed(String),
}

/// One row of the trade-off report.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffRecord {
    pub method: String,
    /// Display form of the swept hyperparameter (`-` if none).
    pub hyper: String,
    pub hyper_value: Option<f64>,
    pub seed: u64,
    /// Output subdirectory of the run, relative to the sweep directory.
    pub run_id: String,
    pub id_acc: f64,
    /// `(domain, accuracy)` per target, in benchmark order.
    pub targets: Vec<(String, f64)>,
    pub avg_ood: f64,
    pub status: RunStatus,
}

impl TradeoffRecord {
    fn failed(method: &str, hyper: Option<f64>, seed: u64, run_id: String, targets: &[String], why: String) -> Self {
        Self {
            method: method.into(),
            hyper: hyper_string(hyper),
            hyper_value: hyper,
            seed,
            run_id,
            id_acc: f64::NAN,
            targets: targets.iter().map(|t| (t.clone(), f64::NAN)).collect(),
            avg_ood: f64::NAN,
            status: RunStatus::Failed(why),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }

    fn sort_key(&self) -> (&str, f64, u64) {
        (&self.method, self.hyper_value.unwrap_or(f64::NEG_INFINITY), self.seed)
    }
}

fn hyper_string(h: Option<f64>) -> String {
    h.map_or_else(|| "-".to_string(), |v| v.to_string())
}

/// Scores `params` on the ID test split and every target.
pub fn score(
    spec: &ModelSpec,
    params: &ParamMap,
    domains: &Domains,
    method: &str,
    hyper: Option<f64>,
    seed: u64,
    run_id: String,
) -> Result<TradeoffRecord> {
    let id_acc = evaluate(spec, params, &domains.id_test)?;
    let targets = domains
        .targets
        .iter()
        .map(|t| Ok((t.domain.clone(), evaluate(spec, params, t)?)))
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = targets.iter().map(|(_, a)| *a).collect();
    Ok(TradeoffRecord {
        method: method.into(),
        hyper: hyper_string(hyper),
        hyper_value: hyper,
        seed,
        run_id,
        id_acc,
        avg_ood: aggregate_ood(&accs)?,
        targets,
        status: RunStatus::Ok,
    })
}

pub fn checkpoint_name(step: usize) -> String {
    format!("step_{step:06}.ftck")
}

pub fn write_trajectory(dir: &Path, trajectory: &Trajectory) -> Result<()> {
    for (step, params) in &trajectory.checkpoints {
        write_checkpoint(&dir.join(checkpoint_name(*step)), params)?;
    }
    Ok(())
}

/// Loads every `step_NNNNNN.ftck` under `dir`, ordered by step.
pub fn read_trajectory(dir: &Path) -> Result<Trajectory> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_")?.strip_suffix(".ftck")?.parse::<usize>().ok());
        if let Some(step) = step {
            found.push((step, path));
        }
    }
    if found.is_empty() {
        return Err(Error::InvalidArgument(format!("no checkpoints in {}", dir.display())));
    }
    found.sort();
    let checkpoints = found
        .into_iter()
        .map(|(s, p)| Ok((s, read_checkpoint(&p)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { checkpoints })
}

/// Per-run training settings for `seed`.
pub fn finetune_config(config: &SweepConfig, method: Method, seed: u64) -> MethodConfig {
    MethodConfig {
        method,
        train: TrainConfig {
            seed,
            ..config.finetune.clone()
        },
        checkpoints: config.checkpoints,
        exempt_head: config.exempt_head,
    }
}

pub fn pretrain_config(config: &SweepConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..config.pretrain.clone()
    }
}

/// Runs one fine-tuning job and writes its trajectory (and, for WiSE-FT,
/// the interpolated models) under `dir`.
pub fn run_method(
    config: &SweepConfig,
    theta0: &ParamMap,
    domains: &Domains,
    method: Method,
    seed: u64,
    dir: &Path,
) -> Result<FinetuneRun> {
    let run = finetune(
        &config.model,
        theta0,
        &domains.source,
        &finetune_config(config, method, seed),
    )?;
    write_trajectory(dir, &run.trajectory)?;
    for (alpha, params) in &run.interpolated {
        write_checkpoint(&dir.join(format!("alpha_{alpha}.ftck")), params)?;
    }
    Ok(run)
}

fn run_dir_name(method: &str, hyper: Option<f64>) -> String {
    match hyper {
        Some(h) => format!("{method}_{h}"),
        None => method.to_string(),
    }
}

fn sweep_seed(config: &SweepConfig, seed: u64, out: &Path) -> Result<Vec<TradeoffRecord>> {
    let seed_dir = format!("seed_{seed}");
    let domains = generate_domains(&config.bench, seed)?;
    let target_names: Vec<String> = domains.targets.iter().map(|t| t.domain.clone()).collect();

    let theta0 = pretrain(&config.model, &domains.pretrain, &pretrain_config(config, seed)).and_then(|t| {
        write_checkpoint(&out.join(&seed_dir).join("pretrained.ftck"), &t)?;
        Ok(t)
    });

    let mut jobs = Vec::new();
    for grid in &config.methods {
        for (hyper, method) in grid.runs() {
            jobs.push((grid.name(), hyper, method));
        }
    }

    let theta0 = match theta0 {
        Ok(t) => t,
        Err(e) => {
            let why = format!("pretraining failed: {e}");
            let mut rows = Vec::new();
            if config.include_pretrained {
                rows.push(TradeoffRecord::failed(
                    "pretrained",
                    None,
                    seed,
                    seed_dir.clone(),
                    &target_names,
                    why.clone(),
                ));
            }
            for (name, hyper, method) in jobs {
                let id = format!("{seed_dir}/{}", run_dir_name(name, hyper));
                if let Method::WiseFt { alphas } = method {
                    for a in alphas {
                        rows.push(TradeoffRecord::failed(
                            name,
                            Some(a),
                            seed,
                            id.clone(),
                            &target_names,
                            why.clone(),
                        ));
                    }
                } else {
                    rows.push(TradeoffRecord::failed(
                        name,
                        hyper,
                        seed,
                        id,
                        &target_names,
                        why.clone(),
                    ));
                }
            }
            return Ok(rows);
        }
    };

    let mut rows = Vec::new();
    if config.include_pretrained {
        rows.push(score(
            &config.model,
            &theta0,
            &domains,
            "pretrained",
            None,
            seed,
            seed_dir.clone(),
        )?);
    }

    let run_job = |(name, hyper, method): &(&'static str, Option<f64>, Method)| -> Vec<TradeoffRecord> {
        let run_id = format!("{seed_dir}/{}", run_dir_name(name, *hyper));
        let fail = |h: Option<f64>, e: &Error| {
            TradeoffRecord::failed(name, h, seed, run_id.clone(), &target_names, e.to_string())
        };
        let run = run_method(config, &theta0, &domains, method.clone(), seed, &out.join(&run_id));
        match (method, run) {
            (Method::WiseFt { alphas }, Err(e)) => alphas.iter().map(|&a| fail(Some(a), &e)).collect(),
            (_, Err(e)) => vec![fail(*hyper, &e)],
            (Method::WiseFt { .. }, Ok(run)) => run
                .interpolated
                .iter()
                .map(|(a, p)| {
                    score(&config.model, p, &domains, name, Some(*a), seed, run_id.clone())
                        .unwrap_or_else(|e| fail(Some(*a), &e))
                })
                .collect(),
            (_, Ok(run)) => vec![score(
                &config.model,
                run.final_params(),
                &domains,
                name,
                *hyper,
                seed,
                run_id.clone(),
            )
            .unwrap_or_else(|e| fail(*hyper, &e))],
        }
    };
    let results: Vec<Vec<TradeoffRecord>> = if config.parallel {
        jobs.par_iter().map(run_job).collect()
    } else {
        jobs.iter().map(run_job).collect()
    };
    rows.extend(results.into_iter().flatten());
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub records: Vec<TradeoffRecord>,
    pub report: PathBuf,
}

impl SweepOutcome {
    pub fn any_failed(&self) -> bool {
        self.records.iter().any(|r| !r.is_ok())
    }
}

/// Pretrains once per seed, fine-tunes every configured run, and writes
/// checkpoints plus `report.csv` under `out`. Failed runs become
/// `status=failed` rows; only I/O on the report itself aborts the sweep.
pub fn run_sweep(config: &SweepConfig, out: &Path) -> Result<SweepOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    let mut records = Vec::new();
    for &seed in &config.seeds {
        records.extend(sweep_seed(config, seed, out)?);
    }
    records.sort_by(|a, b| {
        let (ma, ha, sa) = a.sort_key();
        let (mb, hb, sb) = b.sort_key();
        ma.cmp(mb).then(ha.total_cmp(&hb)).then(sa.cmp(&sb))
    });
    let report = out.join("report.csv");
    let columns: Vec<String> = config
        .bench
        .target_styles
        .iter()
        .map(|s| format!("target_{s}"))
        .collect();
    std::fs::write(&report, records_to_csv(&records, &columns))?;
    Ok(SweepOutcome { records, report })
}

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// Report CSV: `method,hyper,seed,id_acc,target_<id>_acc...,avg_ood,status`.
pub fn records_to_csv(records: &[TradeoffRecord], target_columns: &[String]) -> String {
    let mut s = String::from("method,hyper,seed,id_acc");
    for t in target_columns {
        let _ = write!(s, ",{t}_acc");
    }
    s.push_str(",avg_ood,status\n");
    for r in records {
        let _ = write!(s, "{},{},{},{}", r.method, r.hyper, r.seed, num(r.id_acc));
        for t in target_columns {
            let acc = r.targets.iter().find(|(d, _)| d == t).map_or(f64::NAN, |(_, a)| *a);
            let _ = write!(s, ",{}", num(acc));
        }
        let status = if r.is_ok() { "ok" } else { "failed" };
        let _ = writeln!(s, ",{},{status}", num(r.avg_ood));
    }
    s
}

/// Parses a report written by [`records_to_csv`]. Run ids are not stored in
/// the report and come back empty.
pub fn parse_report(text: &str) -> Result<Vec<TradeoffRecord>> {
    let bad = |line: usize, what: &str| Error::Config(format!("report line {line}: {what}"));
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad(1, "empty report"))?.split(',').collect();
    let n = header.len();
    if n < 6 || header[..4] != ["method", "hyper", "seed", "id_acc"] || header[n - 2..] != ["avg_ood", "status"] {
        return Err(bad(1, "unexpected header"));
    }
    let targets: Vec<String> = header[4..n - 2]
        .iter()
        .map(|c| {
            c.strip_suffix("_acc")
                .map(str::to_string)
                .ok_or_else(|| bad(1, "target column"))
        })
        .collect::<Result<_>>()?;
    let float = |line: usize, v: &str| -> Result<f64> {
        if v.is_empty() {
            Ok(f64::NAN)
        } else {
            v.parse().map_err(|_| bad(line, "bad number"))
        }
    };
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let ln = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != n {
            return Err(bad(ln, "wrong field count"));
        }
        let hyper_value = if f[1] == "-" { None } else { Some(float(ln, f[1])?) };
        out.push(TradeoffRecord {
            method: f[0].into(),
            hyper: f[1].into(),
            hyper_value,
            seed: f[2].parse().map_err(|_| bad(ln, "bad seed"))?,
            run_id: String::new(),
            id_acc: float(ln, f[3])?,
            targets: targets
                .iter()
                .zip(&f[4..n - 2])
                .map(|(t, v)| Ok((t.clone(), float(ln, v)?)))
                .collect::<Result<_>>()?,
            avg_ood: float(ln, f[n - 2])?,
            status: match f[n - 1] {
                "ok" => RunStatus::Ok,
                "failed" => RunStatus::Failed(String::new()),
                _ => return Err(bad(ln, "bad status")),
            },
        });
    }
    Ok(out)
}

/// Human-facing table: accuracies in percent, two decimals.
pub fn summarize(records: &[TradeoffRecord]) -> String {
    let mut s = format!(
        "{:<12} {:>8} {:>6} {:>8} {:>8}\n",
        "method", "hyper", "seed", "ID", "AvgOOD"
    );
    for r in records {
        if r.is_ok() {
            let _ = writeln!(
                s,
                "{:<12} {:>8} {:>6} {:>8.2} {:>8.2}",
                r.method,
                r.hyper,
                r.seed,
                100.0 * r.id_acc,
                100.0 * r.avg_ood
            );
        } else {
            let _ = writeln!(
                s,
                "{:<12} {:>8} {:>6} {:>8} {:>8}",
                r.method, r.hyper, r.seed, "failed", "-"
            );
        }
    }
    s
}

/// Probes every checkpoint of the trajectory in `trajectory_dir` on each
/// target, checks loss dominance per row, and writes the probing CSV.
pub fn run_probe_report(
    trajectory_dir: &Path,
    spec: &ModelSpec,
    targets: &[DomainDataset],
    probe: &ProbeConfig,
    out_csv: &Path,
) -> Result<Vec<ProbeResult>> {
    let trajectory = read_trajectory(trajectory_dir)?;
    let rows = probe_trajectory(spec, &trajectory, targets, probe)?;
    if let Some(r) = rows.iter().find(|r| r.probe_loss > r.carried_loss + 1e-6) {
        return Err(Error::InvalidArgument(format!(
            "probe loss {} exceeds carried loss {} at step {} on {}",
            r.probe_loss, r.carried_loss, r.step, r.target
        )));
    }
    let mut s = String::from("step,target,carried_acc,probe_acc,probe_loss,carried_loss\n");
    for r in &rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step, r.target, r.carried_acc, r.probe_acc, r.probe_loss, r.carried_loss
        );
    }
    if let Some(dir) = out_csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out_csv, s)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::MethodGrid;

    fn row(method: &str, h: Option<f64>, accs: [f64; 2]) -> TradeoffRecord {
        TradeoffRecord {
            method: method.into(),
            hyper: hyper_string(h),
            hyper_value: h,
            seed: 7,
            run_id: String::new(),
            id_acc: 0.125,
            targets: vec![("target_1".into(), accs[0]), ("target_2".into(), accs[1])],
            avg_ood: aggregate_ood(&accs).unwrap(),
            status: RunStatus::Ok,
        }
    }

    #[test]
    fn csv_round_trip() {
        let cols = vec!["target_1".to_string(), "target_2".to_string()];
        let mut rows = vec![row("l2", Some(0.1), [0.1, 0.7]), row("vanilla", None, [1.0 / 3.0, 0.2])];
        rows.push(TradeoffRecord::failed(
            "kd",
            Some(1.0),
            7,
            String::new(),
            &cols,
            "boom".into(),
        ));
        let csv = records_to_csv(&rows, &cols);
        assert!(csv.starts_with("method,hyper,seed,id_acc,target_1_acc,target_2_acc,avg_ood,status\n"));
        assert!(csv.contains("kd,1,7,,,,,failed\n"));
        let back = parse_report(&csv).unwrap();
        assert_eq!(records_to_csv(&back, &cols), csv);
        assert_eq!(back[1].targets[0].1, 1.0 / 3.0);
        assert!(summarize(&back).contains("failed"));
    }

    #[test]
    fn tiny_sweep_isolation_and_failures() {
        let mut c = SweepConfig::parse(
            "bench.train_per_class = 10\nbench.test_per_class = 6\nmodel.hidden = 8\n\
             pretrain.steps = 30\nfinetune.steps = 10\nfinetune.checkpoints = 2\n\
             method.vanilla = true\nmethod.l2.lambda = 1, 0.1\nsweep.seeds = 3",
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let full = run_sweep(&c, dir.path()).unwrap();
        assert_eq!(
            full.records.iter().map(|r| r.hyper.as_str()).collect::<Vec<_>>(),
            ["0.1", "1", "-"]
        );
        assert!(dir.path().join("seed_3/l2_0.1/step_000010.ftck").exists());
        assert!(dir.path().join("seed_3/pretrained.ftck").exists());

        c.methods = vec![MethodGrid::L2 {
            lambdas: vec![1.0, 0.1],
        }];
        let dir2 = tempfile::tempdir().unwrap();
        let part = run_sweep(&c, dir2.path()).unwrap();
        assert_eq!(part.records[..], full.records[..2]);

        c.finetune.peak_lr = 1e300;
        c.methods = vec![
            MethodGrid::Vanilla,
            MethodGrid::WiseFt {
                alphas: vec![0.5, 0.25],
            },
        ];
        let failed = run_sweep(&c, tempfile::tempdir().unwrap().path()).unwrap();
        assert!(failed.any_failed());
        assert_eq!(failed.records.len(), 3);
    }
}
