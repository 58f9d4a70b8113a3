use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use daf_core::checkpoint;
use daf_core::config::ExperimentConfig;

const STREAM: &str = r#"
[stream]
num_tasks = 3
classes_per_task = 2
input_dim = 6
samples_per_class = 12
test_samples_per_class = 4
pretrain_classes = 3
nuisance_dims = 1
shared_nuisance_dims = 1

[backbone]
input_dim = 6
feature_dim = 6
num_blocks = 1

[backbone.pretrain]
epochs = 2
lr = 0.01
momentum = 0.9
batch_size = 16
"#;

fn run_block(strategy: &str, init: &str) -> String {
    format!(
        "\n[[runs]]\nstrategy = \"{strategy}\"\ninit = \"{init}\"\nadapter_rank = 2\nalign_samples = 16\n\n[runs.sgd]\nepochs = 2\nlr = 0.01\nmomentum = 0.9\nbatch_size = 8\n"
    )
}

fn config(extra: &str, runs: &[(&str, &str)]) -> String {
    let mut s = format!("{STREAM}{extra}");
    for (strategy, init) in runs {
        s.push_str(&run_block(strategy, init));
    }
    s
}

fn daf<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_daf"))
        .args(args)
        .env_remove("DAF_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn count(dir: &Path, suffix: &str) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(suffix))
        .count()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn minimal_config_writes_one_of_each() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "min.toml", &config("", &[("daf", "robust")]));
    let out = tmp.path().join("out");
    let o = daf(&["run", s(&cfg), "--output-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(count(&out, ".accuracy.csv"), 1);
    assert_eq!(count(&out, ".report.json"), 1);
    assert_eq!(count(&out, ".ckpt"), 1);
    assert_eq!(count(&out, ".ckpt.bin"), 1);
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 4);
}

#[test]
fn same_config_twice_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &config("", &[("daf", "robust"), ("ema", "robust")]));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&daf(&["run", s(&cfg), "--output-dir", s(&a)])), 0);
    assert_eq!(code(&daf(&["run", s(&cfg), "--output-dir", s(&b)])), 0);
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 8);
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn seed_flag_changes_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &config("", &[("finetune", "previous_task")]));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&daf(&["run", s(&cfg), "--output-dir", s(&a)])), 0);
    assert_eq!(code(&daf(&["run", s(&cfg), "--output-dir", s(&b), "--seed", "9"])), 0);
    let f = "finetune-previous_task.report.json";
    assert_ne!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
}

#[test]
fn six_run_ablation_writes_six_sets() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = [
        ("finetune", "previous_task"),
        ("static_fusion", "previous_task"),
        ("daf", "random"),
        ("daf", "previous_task"),
        ("daf", "robust"),
        ("last_task", "robust"),
    ];
    let cfg = write_config(tmp.path(), "ablation.toml", &config("", &runs));
    let out = tmp.path().join("out");
    let o = daf(&["run", s(&cfg), "--output-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for suffix in [".accuracy.csv", ".report.json", ".ckpt"] {
        assert_eq!(count(&out, suffix), 6, "{suffix}");
    }
    let r = daf(&["report", s(&out)]);
    assert_eq!(code(&r), 0);
    assert_eq!(String::from_utf8_lossy(&r.stdout).lines().count(), 7);
}

#[test]
fn output_dir_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "exp.toml", &config("", &[("finetune", "random")]));
    let root = tmp.path().join("root");
    let o = Command::new(env!("CARGO_BIN_EXE_daf"))
        .args(["run", s(&cfg)])
        .env("DAF_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(count(&root.join("exp"), ".report.json"), 1);

    let cfg = write_config(tmp.path(), "dir.toml", &config("[output]\ndir = \"here\"\n", &[("finetune", "random")]));
    assert_eq!(code(&daf(&["run", s(&cfg)])), 0);
    assert_eq!(count(&tmp.path().join("here"), ".report.json"), 1);
}

#[test]
fn invalid_config_exits_2_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let text = config("", &[("daf", "robust")]).replace("num_tasks = 3", "num_taks = 3");
    let cfg = write_config(tmp.path(), "bad.toml", &text);
    let o = daf(&["run", s(&cfg), "--output-dir", s(&tmp.path().join("o"))]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("bad.toml") && err.contains("line 3"), "{err}");

    let o = daf(&["run", s(&tmp.path().join("missing.toml"))]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&daf(&["run"])), 2);
}

#[test]
fn divergence_exits_3_with_task() {
    let tmp = tempfile::tempdir().unwrap();
    let text = config("", &[("finetune", "previous_task")])
        .replace("lr = 0.01\nmomentum = 0.9\nbatch_size = 8", "lr = 1e12\nmomentum = 0.9\nbatch_size = 4")
        .replace("align_samples = 16", "align_samples = 16\nhead = \"linear\"");
    let cfg = write_config(tmp.path(), "nan.toml", &text);
    let o = daf(&["run", s(&cfg), "--output-dir", s(&tmp.path().join("o"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("task 1"), "{}", stderr(&o));
}

#[test]
fn verify_passes_and_is_deterministic() {
    let a = daf(&["verify", "--seed", "5"]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stdout));
    let b = daf(&["verify", "--seed", "5"]);
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8_lossy(&a.stdout);
    assert_eq!(text.lines().filter(|l| l.ends_with("PASS")).count(), 10);
}

#[test]
fn injected_clip_range_fails_verify() {
    let o = daf(&["verify", "--inject-clip-range", "0,1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("beta_clipping"), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().filter(|l| l.ends_with("FAIL")).count(), 1);
}

#[test]
fn verify_enabled_in_config_runs_first() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "v.toml",
        &config("[verify]\nenabled = true\nseed = 2\n", &[("finetune", "random")]),
    );
    let o = daf(&["run", s(&cfg), "--output-dir", s(&tmp.path().join("o"))]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("10 of 10 checks passed"));
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn fuse_offline_properties() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "f.toml",
        &config("[output]\nrecord_fusion_inputs = true\n", &[("daf", "robust")]),
    );
    let out = tmp.path().join("out");
    assert_eq!(code(&daf(&["run", s(&cfg), "--output-dir", s(&out)])), 0);
    let inputs = out.join("daf-robust.fusion");
    let p = |n: &str| inputs.join(n);
    let stats = p("stats.ckpt");
    let fuse = |a: &Path, b: &Path, c: &Path, extra: &[&str], dest: &Path| {
        let mut args = vec![
            "fuse-offline", "--theta-p", s(a), "--theta-prev", s(b), "--theta-t", s(c),
            "--stats", s(&stats), "--out", s(dest),
        ];
        args.extend_from_slice(extra);
        daf(&args)
    };

    // Replay equals the run's global adapter, bit for bit.
    let replay = tmp.path().join("replay.ckpt");
    let o = fuse(&p("theta_p.ckpt"), &p("theta_prev.ckpt"), &p("theta_t.ckpt"), &[], &replay);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(tmp.path().join("replay.beta.json").exists());
    let run = checkpoint::load(&out.join("daf-robust.ckpt")).unwrap();
    let fused = checkpoint::load(&replay).unwrap();
    assert_eq!(bits(fused.primary_adapter().unwrap().data()), bits(run.primary_adapter().unwrap().data()));

    // gamma = 0.5 gives the same payload as the default rule.
    let half = tmp.path().join("half.ckpt");
    assert_eq!(code(&fuse(&p("theta_p.ckpt"), &p("theta_prev.ckpt"), &p("theta_t.ckpt"), &["--gamma", "0.5"], &half)), 0);
    let half = checkpoint::load(&half).unwrap();
    assert_eq!(bits(half.primary_adapter().unwrap().data()), bits(fused.primary_adapter().unwrap().data()));

    // Three copies of one checkpoint fuse to itself.
    let same = tmp.path().join("same.ckpt");
    let t = p("theta_t.ckpt");
    assert_eq!(code(&fuse(&t, &t, &t, &["--alpha", "2.0"], &same)), 0);
    let same = checkpoint::load(&same).unwrap();
    let orig = checkpoint::load(&t).unwrap();
    assert_eq!(bits(same.primary_adapter().unwrap().data()), bits(orig.primary_adapter().unwrap().data()));

    // A checkpoint of another layout is a usage error.
    let other = tmp.path().join("other");
    let text = config("", &[("daf", "robust")]).replace("adapter_rank = 2", "adapter_rank = 3");
    let cfg = write_config(tmp.path(), "g.toml", &text);
    assert_eq!(code(&daf(&["run", s(&cfg), "--output-dir", s(&other)])), 0);
    let o = fuse(&p("theta_p.ckpt"), &other.join("daf-robust.ckpt"), &t, &[], &tmp.path().join("x.ckpt"));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("layout"), "{}", stderr(&o));
}

#[test]
fn report_command() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(code(&daf(&["report", s(&empty)])), 2);

    let cfg = write_config(tmp.path(), "r.toml", &config("", &[("daf", "robust")]));
    let out = tmp.path().join("out");
    assert_eq!(code(&daf(&["run", s(&cfg), "--output-dir", s(&out)])), 0);
    let csv = tmp.path().join("cmp.csv");
    let o = daf(&["report", s(&out), "--csv", s(&csv)]);
    assert_eq!(code(&o), 0);
    let table = String::from_utf8_lossy(&o.stdout);
    assert_eq!(table.lines().count(), 2, "{table}");
    assert!(table.lines().nth(1).unwrap().starts_with("daf-robust"));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 2);

    // Editing the matrix without the report is caught by the recomputation.
    let path = out.join("daf-robust.accuracy.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[1] = "1,0.123,,".into();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    assert_eq!(code(&daf(&["report", s(&out)])), 1);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::parse(&std::fs::read_to_string(&path).unwrap());
        assert!(cfg.is_ok(), "{}: {:?}", path.display(), cfg.err());
        n += 1;
    }
    assert!(n >= 2);
    let ablation = ExperimentConfig::parse(include_str!("../../../configs/ablation.toml")).unwrap();
    assert_eq!(ablation.runs.len(), 6);
}
