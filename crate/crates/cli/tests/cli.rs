use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ftlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftlab"))
        .args(args)
        .output()
        .expect("run ftlab")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(
        &path,
        format!(
            "bench.train_per_class = 12\nbench.test_per_class = 6\nmodel.hidden = 8\n\
             pretrain.steps = 60\nfinetune.steps = 20\nfinetune.checkpoints = 2\nsweep.seeds = 3\n{extra}"
        ),
    )
    .unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn sweep_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "method.pretrained = true\nmethod.vanilla = true\nmethod.l2.lambda = 0.1",
    );
    let out = dir.path().join("out");
    let run = ftlab(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let rep = ftlab(&["report", "--config", s(&cfg), "--seed", "3", "--out", s(&out)]);
    assert_eq!(rep.status.code(), Some(0));
    let summary = String::from_utf8(rep.stdout).unwrap();
    assert!(summary.contains("pretrained"));
    assert_eq!(std::fs::read_to_string(out.join("summary.txt")).unwrap(), summary);
}

#[test]
fn seed_flag_overrides_config_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "method.vanilla = true");
    let out = dir.path().join("out");
    assert_eq!(
        ftlab(&["sweep", "--config", s(&cfg), "--seed", "11", "--out", s(&out)])
            .status
            .code(),
        Some(0)
    );
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("vanilla,-,11,"));
}

#[test]
fn failed_runs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "method.vanilla = true\nfinetune.lr = 1e300");
    let run = ftlab(&["sweep", "--config", s(&cfg), "--out", s(&dir.path().join("out"))]);
    assert_eq!(run.status.code(), Some(2));
    assert!(std::fs::read_to_string(dir.path().join("out/report.csv"))
        .unwrap()
        .contains(",failed"));
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "method.bogus = 1");
    let out = s(dir.path());
    assert_eq!(
        ftlab(&["sweep", "--config", s(&cfg), "--out", out]).status.code(),
        Some(1)
    );
    assert_eq!(
        ftlab(&["sweep", "--config", "/no/such.cfg", "--out", out])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(ftlab(&["sweep", "--seed", "x"]).status.code(), Some(1));
    let good = write_config(dir.path(), "");
    assert_eq!(
        ftlab(&["finetune", "--config", s(&good), "--method", "l2", "--out", out])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn single_step_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let c = s(&cfg);
    let pre = dir.path().join("pre");
    let ft = dir.path().join("ft");
    let mix = dir.path().join("mix");

    let ok = |args: &[&str]| {
        let r = ftlab(args);
        assert_eq!(
            r.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&r.stderr)
        );
        String::from_utf8(r.stdout).unwrap()
    };
    ok(&["pretrain", "--config", c, "--seed", "3", "--out", s(&pre)]);
    let theta0 = pre.join("pretrained.ftck");
    ok(&[
        "finetune",
        "--config",
        c,
        "--seed",
        "3",
        "--out",
        s(&ft),
        "--method",
        "l2",
        "--hyper",
        "0.1",
        "--init",
        s(&theta0),
    ]);
    assert!(ft.join("step_000000.ftck").exists() && ft.join("step_000020.ftck").exists());
    let theta = ft.join("final.ftck");
    ok(&[
        "interpolate",
        "--config",
        c,
        "--seed",
        "3",
        "--out",
        s(&mix),
        "--theta0",
        s(&theta0),
        "--theta",
        s(&theta),
        "--alpha",
        "0",
    ]);
    assert_eq!(
        std::fs::read(mix.join("interpolated_0.ftck")).unwrap(),
        std::fs::read(&theta0).unwrap()
    );

    let eval = ok(&[
        "evaluate",
        "--config",
        c,
        "--seed",
        "3",
        "--out",
        s(&mix),
        "--checkpoint",
        s(&theta),
    ]);
    assert!(eval.contains("avg_ood"));
    assert!(std::fs::read_to_string(mix.join("evaluate.csv"))
        .unwrap()
        .starts_with("method,hyper,seed,id_acc,"));

    ok(&[
        "probe",
        "--config",
        c,
        "--seed",
        "3",
        "--out",
        s(&mix),
        "--trajectory",
        s(&ft),
    ]);
    let probe = std::fs::read_to_string(mix.join("probe.csv")).unwrap();
    assert_eq!(probe.lines().count(), 1 + 3 * 7);

    let bad = ftlab(&[
        "interpolate",
        "--config",
        c,
        "--out",
        s(&mix),
        "--theta0",
        s(&theta0),
        "--theta",
        s(&theta),
        "--alpha",
        "2",
    ]);
    assert_eq!(bad.status.code(), Some(1));
}
