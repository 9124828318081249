//! Acceptance suite: one PASS/FAIL line per criterion, then a single
//! assertion that all of them passed.
//!
//! Run with `cargo test -p ftlab --test acceptance -- --nocapture` to see the
//! report.

use std::path::Path;
use std::time::Instant;

use ftlab::autodiff::{finite_difference_check, Graph};
use ftlab::bench::{aggregate_ood, generate_domains, BenchSpec};
use ftlab::harness::checkpoint::{decode_checkpoint, encode_checkpoint};
use ftlab::harness::{read_checkpoint, run_probe_report, run_sweep, write_checkpoint, SweepConfig, TradeoffRecord};
use ftlab::methods::{
    finetune, kd_penalty, l1_penalty, l2_penalty, wise_ft_interpolate, KdMatch, Method, MethodConfig,
};
use ftlab::model::{
    apply_lora, build_forward, forward, forward_with_adapters, init_lora, init_params, LoraRouting, ModelSpec,
    LORA_TARGETS,
};
use ftlab::optim::{clip_global_norm, ScheduleSpec};
use ftlab::probe::{probe_trajectory, ProbeConfig, ProbeInit};
use ftlab::rng::Rng;
use ftlab::train::TrainConfig;
use ftlab::{ParamMap, Result, Tensor};

const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-6;

struct Report {
    lines: Vec<(String, bool, String)>,
}

impl Report {
    fn record(&mut self, id: &str, started: Instant, outcome: Result<(bool, String)>) {
        let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        let detail = format!("{detail} [{:.2?}]", started.elapsed());
        println!("{} {id}: {detail}", if ok { "PASS" } else { "FAIL" });
        self.lines.push((id.into(), ok, detail));
    }
}

fn random_params(spec: &ModelSpec, rng: &mut Rng, std: f64) -> Result<ParamMap> {
    spec.layout()
        .into_iter()
        .map(|(name, shape, _)| {
            let n = shape.iter().product();
            Ok((name.to_string(), Tensor::new(&shape, rng.normals(n, std))?))
        })
        .collect()
}

fn random_input(spec: &ModelSpec, rows: usize, rng: &mut Rng) -> Result<Tensor> {
    Tensor::new(&[rows, spec.input_dim], rng.normals(rows * spec.input_dim, 1.0))
}

/// Largest `|fd − g| / max(1, |g|)` for a closed-form value/gradient pair.
fn closed_form_fd(f: impl Fn(&ParamMap) -> Result<(f64, ParamMap)>, at: &ParamMap) -> Result<f64> {
    let (_, grad) = f(at)?;
    let mut worst = 0.0_f64;
    let mut probe = at.clone();
    let names: Vec<String> = at.names().map(str::to_string).collect();
    for name in &names {
        for i in 0..at.require(name)?.numel() {
            let orig = at.require(name)?.data()[i];
            let mut eval = |x: f64| -> Result<f64> {
                probe.get_mut(name).expect("present").data_mut()[i] = x;
                Ok(f(&probe)?.0)
            };
            let fd = (eval(orig + FD_EPS)? - eval(orig - FD_EPS)?) / (2.0 * FD_EPS);
            eval(orig)?;
            let g = grad.require(name)?.data()[i];
            worst = worst.max((fd - g).abs() / g.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn criterion_1() -> Result<(bool, String)> {
    let round2 = |x: f64| (x * 100.0).round() / 100.0;
    let full = round2(aggregate_ood(&[70.89, 65.34, 36.92, 45.83, 50.18])?);
    let zero = round2(aggregate_ood(&[62.00, 77.62, 49.96, 48.26, 53.77])?);
    let ok = (full - 53.83).abs() <= 0.005 && (zero - 58.32).abs() <= 0.005;
    Ok((
        ok,
        format!("full fine-tune {full:.2} (53.83), zero-shot {zero:.2} (58.32)"),
    ))
}

fn criterion_2() -> Result<(bool, String)> {
    let mut worst = 0.0_f64;
    let mut instances = 0;
    let mut rng = Rng::new(2024);
    let specs = [ModelSpec::mlp(6, 5, 3), ModelSpec::attn(8, 2, 5, 3)];

    // Cross-entropy through each architecture.
    for spec in &specs {
        for _ in 0..4 {
            let params = random_params(spec, &mut rng, 0.5)?;
            let x = random_input(spec, 4, &mut rng)?;
            let y: Vec<usize> = (0..4).map(|_| rng.below(spec.classes)).collect();
            let names: Vec<&str> = params.names().collect();
            let build = |g: &mut Graph, v: &ftlab::autodiff::ParamVars| {
                let xv = g.input(x.clone())?;
                let out = build_forward(g, spec, v, None, xv)?;
                g.cross_entropy(out.logits, &y)
            };
            worst = worst.max(finite_difference_check(build, &params, &names, FD_EPS)?);
            instances += 1;
        }
    }

    // Attention with LoRA adapters routed through the projections.
    let spec = specs[1];
    for rank in [1, 2, 3] {
        let mut params = random_params(&spec, &mut rng, 0.5)?;
        for target in LORA_TARGETS {
            let (d, k) = params.require(target)?.dims2("lora")?;
            params.insert(
                format!("lora.{target}.A"),
                Tensor::new(&[rank, k], rng.normals(rank * k, 0.5))?,
            );
            params.insert(
                format!("lora.{target}.B"),
                Tensor::new(&[d, rank], rng.normals(d * rank, 0.5))?,
            );
        }
        let x = random_input(&spec, 3, &mut rng)?;
        let y = vec![0, 2, 1];
        let route = LoraRouting {
            targets: LORA_TARGETS.iter().map(|s| s.to_string()).collect(),
            scale: 0.7,
        };
        let names: Vec<&str> = params.names().collect();
        let build = |g: &mut Graph, v: &ftlab::autodiff::ParamVars| {
            let xv = g.input(x.clone())?;
            let out = build_forward(g, &spec, v, Some(&route), xv)?;
            g.cross_entropy(out.logits, &y)
        };
        worst = worst.max(finite_difference_check(build, &params, &names, FD_EPS)?);
        instances += 1;
    }

    // Anchor penalties; L1 away from zero-delta coordinates.
    for spec in &specs {
        for _ in 0..2 {
            let theta0 = random_params(spec, &mut rng, 1.0)?;
            let theta = random_params(spec, &mut rng, 1.0)?;
            worst = worst.max(closed_form_fd(|t| l2_penalty(t, &theta0, 0.3), &theta)?);
            let away = theta.zip_map(&theta0, |t, t0| if (t - t0).abs() < 1e-3 { t0 + 0.1 } else { t })?;
            worst = worst.max(closed_form_fd(|t| l1_penalty(t, &theta0, 0.3), &away)?);
            instances += 2;
        }
    }

    // Distillation against a frozen teacher.
    for spec in &specs {
        for target in [KdMatch::Logits, KdMatch::Features] {
            let theta0 = random_params(spec, &mut rng, 0.5)?;
            let theta = random_params(spec, &mut rng, 0.5)?;
            let x = random_input(spec, 3, &mut rng)?;
            worst = worst.max(closed_form_fd(
                |t| kd_penalty(spec, t, &theta0, &x, 0.8, target),
                &theta,
            )?);
            instances += 1;
        }
    }
    Ok((
        instances >= 20 && worst <= FD_TOL,
        format!("{instances} instances, max rel err {worst:.2e} (<= 1e-6)"),
    ))
}

fn criterion_3() -> Result<(bool, String)> {
    let spec = ModelSpec::mlp(8, 16, 4);
    let theta0 = init_params(&spec, 1)?;
    let theta = init_params(&spec, 2)?;
    let at0 = wise_ft_interpolate(&theta0, &theta, 0.0)?.bit_eq(&theta0);
    let at1 = wise_ft_interpolate(&theta0, &theta, 1.0)?.bit_eq(&theta);
    let mid = wise_ft_interpolate(&theta0, &theta, 0.5)?;
    let oracle: ParamMap = theta0
        .iter()
        .zip(theta.iter())
        .map(|((n, a), (_, b))| {
            let data = a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * x + 0.5 * y).collect();
            (n.to_string(), Tensor::new(a.shape(), data).expect("same shape"))
        })
        .collect();
    let mid_exact = mid.bit_eq(&oracle);
    let x = random_input(&spec, 16, &mut Rng::new(3))?;
    let mut out_diff = 0.0_f64;
    for alpha in [0.2, 0.4, 0.6, 0.8] {
        let oracle: ParamMap = theta0
            .iter()
            .zip(theta.iter())
            .map(|((n, a), (_, b))| {
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (1.0 - alpha) * x + alpha * y)
                    .collect();
                (n.to_string(), Tensor::new(a.shape(), data).expect("same shape"))
            })
            .collect();
        let got = forward(&spec, &wise_ft_interpolate(&theta0, &theta, alpha)?, &x)?.logits;
        out_diff = out_diff.max(got.max_abs_diff(&forward(&spec, &oracle, &x)?.logits)?);
    }
    let ok = at0 && at1 && mid_exact && out_diff <= 1e-12;
    Ok((
        ok,
        format!("α=0 exact {at0}, α=1 exact {at1}, α=0.5 exact {mid_exact}, output diff {out_diff:.1e}"),
    ))
}

fn criterion_4() -> Result<(bool, String)> {
    let spec = ModelSpec::attn(32, 4, 16, 10);
    let base = init_params(&spec, 5)?;
    let x = random_input(&spec, 12, &mut Rng::new(6))?;
    let plain = forward(&spec, &base, &x)?.logits;

    let fresh = init_lora(&spec, &base, 2, 7)?;
    let zero_b = forward_with_adapters(&spec, &base, &fresh, 1.0, &x)?
        .logits
        .max_abs_diff(&plain)?;

    let mut merge_diff = 0.0_f64;
    let mut rng = Rng::new(8);
    for rank in [1, 2, 4] {
        let mut adapters = init_lora(&spec, &base, rank, 9)?;
        for ad in &mut adapters {
            let shape = ad.b.shape().to_vec();
            ad.b = Tensor::new(&shape, rng.normals(shape.iter().product(), 0.3))?;
        }
        let merged = forward(&spec, &apply_lora(&base, &adapters, 0.5)?, &x)?.logits;
        let factored = forward_with_adapters(&spec, &base, &adapters, 0.5, &x)?.logits;
        merge_diff = merge_diff.max(merged.max_abs_diff(&factored)?);
    }

    let bench = BenchSpec {
        train_per_class: 8,
        test_per_class: 4,
        ..BenchSpec::reference()
    };
    let data = generate_domains(&bench, 3)?;
    let train = TrainConfig {
        steps: 30,
        batch_size: 16,
        peak_lr: 1e-2,
        warmup: 3,
        ..TrainConfig::default()
    };
    let mut untouched = true;
    for freeze_head in [false, true] {
        let method = Method::Lora {
            rank: 2,
            scale: 1.0,
            freeze_head,
        };
        let run = finetune(&spec, &base, &data.source, &MethodConfig::new(method, train.clone()))?;
        for (step, params) in &run.trajectory.checkpoints {
            for (name, t) in params.iter() {
                let adapted = LORA_TARGETS.contains(&name) || (name.starts_with("head.") && !freeze_head);
                if !adapted && !t.bit_eq(base.require(name)?) {
                    untouched = false;
                    println!("    `{name}` changed at step {step}");
                }
            }
        }
    }
    let ok = zero_b <= 1e-12 && merge_diff <= 1e-9 && untouched;
    Ok((
        ok,
        format!("zero-B diff {zero_b:.1e}, merged vs factored {merge_diff:.1e}, frozen tensors bitwise unchanged {untouched}"),
    ))
}

fn criterion_5() -> Result<(bool, String)> {
    let mut rng = Rng::new(11);
    let mut ok = true;
    for spec in [ModelSpec::mlp(8, 6, 3), ModelSpec::attn(8, 2, 6, 3)] {
        let theta0 = random_params(&spec, &mut rng, 0.7)?;
        for rows in [1, 5, 17] {
            for target in [KdMatch::Logits, KdMatch::Features] {
                let x = random_input(&spec, rows, &mut rng)?;
                let (value, grad) = kd_penalty(&spec, &theta0, &theta0, &x, 2.5, target)?;
                ok &= value == 0.0 && grad.iter().all(|(_, t)| t.data().iter().all(|&g| g == 0.0));
            }
        }
    }
    Ok((ok, "value exactly 0 and gradient exactly 0 on 12 batches".into()))
}

struct ReferenceRun {
    records: Vec<TradeoffRecord>,
    csv: Vec<u8>,
    probe: Vec<ftlab::probe::ProbeResult>,
    probe_alt: Vec<ftlab::probe::ProbeResult>,
}

fn reference_run(dir: &Path) -> Result<ReferenceRun> {
    let config = SweepConfig::reference();
    let outcome = run_sweep(&config, dir)?;
    let domains = generate_domains(&config.bench, config.seeds[0])?;
    let traj_dir = dir.join(format!("seed_{}/vanilla", config.seeds[0]));
    let probe = run_probe_report(
        &traj_dir,
        &config.model,
        &domains.targets,
        &config.probe,
        &dir.join("probe.csv"),
    )?;
    let alt = ProbeConfig {
        init: ProbeInit::Random(99),
        ..config.probe
    };
    let traj = ftlab::harness::read_trajectory(&traj_dir)?;
    let probe_alt = probe_trajectory(&config.model, &traj, &domains.targets, &alt)?;
    Ok(ReferenceRun {
        records: outcome.records,
        csv: std::fs::read(&outcome.report)?,
        probe,
        probe_alt,
    })
}

fn criterion_6(run: &ReferenceRun) -> Result<(bool, String)> {
    let worst_gap = run
        .probe
        .iter()
        .map(|r| r.probe_loss - r.carried_loss)
        .fold(f64::NEG_INFINITY, f64::max);
    let init_gap = run
        .probe
        .iter()
        .zip(&run.probe_alt)
        .map(|(a, b)| (a.probe_loss - b.probe_loss).abs())
        .fold(0.0_f64, f64::max);
    let ok = worst_gap <= 1e-6 && init_gap <= 1e-6 && run.probe.len() == run.probe_alt.len();
    Ok((
        ok,
        format!(
            "{} probes, max(probe − carried loss) {worst_gap:.3e} (<= 1e-6), init disagreement {init_gap:.1e} (<= 1e-6)",
            run.probe.len()
        ),
    ))
}

fn find<'a>(records: &'a [TradeoffRecord], method: &str, hyper: &str) -> &'a TradeoffRecord {
    records
        .iter()
        .find(|r| r.method == method && r.hyper == hyper)
        .unwrap_or_else(|| panic!("no {method} {hyper} row"))
}

fn criterion_7(run: &ReferenceRun, report: &mut Report, started: Instant) {
    let recs = &run.records;
    let pre = find(recs, "pretrained", "-");
    let van = find(recs, "vanilla", "-");

    let a = van.id_acc > pre.id_acc && van.avg_ood < pre.avg_ood;
    report.record(
        "7a vanilla fine-tuning trade-off",
        started,
        Ok((
            a,
            format!(
                "ID {:.4} > {:.4} pretrained, Avg OOD {:.4} < {:.4} pretrained",
                van.id_acc, pre.id_acc, van.avg_ood, pre.avg_ood
            ),
        )),
    );

    let config = SweepConfig::reference();
    let unseen: Vec<String> = config
        .bench
        .target_styles
        .iter()
        .filter(|s| !config.bench.pretrain_styles.contains(s))
        .map(|s| format!("target_{s}"))
        .collect();
    let last = run.probe.iter().map(|r| r.step).max().unwrap_or(0);
    let mut declines = Vec::new();
    let mut b = false;
    for t in &unseen {
        let at = |step: usize| {
            run.probe
                .iter()
                .find(|r| &r.target == t && r.step == step)
                .map(|r| r.probe_acc)
        };
        if let (Some(first), Some(end)) = (at(0), at(last)) {
            declines.push(format!("{t} {first:.3} -> {end:.3}"));
            b |= end < first;
        }
    }
    report.record(
        "7b probing accuracy declines on an unseen style",
        started,
        Ok((b, declines.join(", "))),
    );

    let wise: Vec<&TradeoffRecord> = recs.iter().filter(|r| r.method == "wiseft").collect();
    let best = wise
        .iter()
        .max_by(|x, y| x.avg_ood.total_cmp(&y.avg_ood))
        .expect("wiseft rows");
    let c = best.avg_ood > pre.avg_ood && best.avg_ood > van.avg_ood;
    report.record(
        "7c WiSE-FT interior α beats both endpoints on Avg OOD",
        started,
        Ok((
            c,
            format!(
                "α={} Avg OOD {:.4} vs α=0 {:.4}, α=1 {:.4}",
                best.hyper, best.avg_ood, pre.avg_ood, van.avg_ood
            ),
        )),
    );

    let winners: Vec<String> = recs
        .iter()
        .filter(|r| r.method == "l2" && r.avg_ood > van.avg_ood && r.id_acc > pre.id_acc)
        .map(|r| format!("λ={} (ID {:.4}, OOD {:.4})", r.hyper, r.id_acc, r.avg_ood))
        .collect();
    let d = !winners.is_empty();
    report.record(
        "7d L2 anchor beats vanilla OOD and pretrained ID",
        started,
        Ok((
            d,
            if d {
                winners.join(", ")
            } else {
                "no λ qualifies".into()
            },
        )),
    );
}

fn criterion_8(run: &ReferenceRun, rerun_dir: &Path) -> Result<(bool, String)> {
    let again = run_sweep(&SweepConfig::reference(), rerun_dir)?;
    let identical = std::fs::read(&again.report)? == run.csv;

    let spec = ModelSpec::attn(32, 4, 16, 10);
    let mut params = init_params(&spec, 4)?;
    params.insert("odd", Tensor::new(&[1], vec![-0.0])?);
    params.insert("tiny", Tensor::new(&[2], vec![f64::MIN_POSITIVE / 4.0, 1e308])?);
    let path = rerun_dir.join("roundtrip.ftck");
    write_checkpoint(&path, &params)?;
    let round_trip = read_checkpoint(&path)?.bit_eq(&params);
    let empty = decode_checkpoint(&encode_checkpoint(&ParamMap::new())?, Path::new("empty"))?.is_empty();
    let truncated = decode_checkpoint(&std::fs::read(&path)?[..40], &path).is_err();
    let ok = identical && round_trip && empty && truncated;
    Ok((
        ok,
        format!("CSV byte-identical {identical}, round trip bitwise {round_trip}, empty map {empty}, truncation rejected {truncated}"),
    ))
}

fn criterion_9() -> Result<(bool, String)> {
    let s = ScheduleSpec::new(3e-4, 50, 450)?;
    let sched = s.lr_at_step(0)? == 0.0
        && s.lr_at_step(50)? == 3e-4
        && s.lr_at_step(450)? == 0.0
        && s.lr_at_step(250)? == 1.5e-4
        && s.lr_at_step(25)? == 1.5e-4;
    let mut g = ParamMap::new();
    g.insert("g", Tensor::vector(vec![3.0, 4.0]));
    let clipped = clip_global_norm(&g, 1.0)?;
    let clip = clipped.require("g")?.data() == [0.6, 0.8];
    Ok((
        sched && clip,
        format!(
            "schedule landmarks exact {sched}, clip(3,4) = {:?}",
            clipped.require("g")?.data()
        ),
    ))
}

#[test]
fn acceptance_criteria() {
    let mut report = Report { lines: Vec::new() };
    let t = Instant::now();
    report.record("1 Avg-OOD arithmetic", t, criterion_1());
    let t = Instant::now();
    report.record("2 gradient correctness", t, criterion_2());
    let t = Instant::now();
    report.record("3 interpolation identities", t, criterion_3());
    let t = Instant::now();
    report.record("4 LoRA identities", t, criterion_4());
    let t = Instant::now();
    report.record("5 KD null case", t, criterion_5());

    let dir = tempfile::tempdir().expect("tempdir");
    let t = Instant::now();
    match reference_run(&dir.path().join("first")) {
        Ok(run) => {
            println!("     reference sweep and probes took {:.2?}", t.elapsed());
            report.record("6 probe convexity", t, criterion_6(&run));
            criterion_7(&run, &mut report, t);
            let t = Instant::now();
            report.record(
                "8 determinism and persistence",
                t,
                criterion_8(&run, &dir.path().join("second")),
            );
        }
        Err(e) => {
            for id in [
                "6 probe convexity",
                "7 desk-scale phenomenon",
                "8 determinism and persistence",
            ] {
                report.record(
                    id,
                    t,
                    Err(ftlab::Error::InvalidArgument(format!("reference run failed: {e}"))),
                );
            }
        }
    }
    let t = Instant::now();
    report.record("9 scheduler and clipping values", t, criterion_9());

    let failed: Vec<&str> = report
        .lines
        .iter()
        .filter(|(_, ok, _)| !ok)
        .map(|(id, _, _)| id.as_str())
        .collect();
    println!(
        "{} of {} criteria passed",
        report.lines.len() - failed.len(),
        report.lines.len()
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
