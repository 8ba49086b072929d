use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use svdcomp::autodiff::{certify, degenerate_case, BackwardConfig};
use svdcomp::io::ModelContainer;
use svdcomp::model::{evaluate, Dataset, ForwardMode, TaskKind, ToyModel};
use svdcomp::pack::pack;
use svdcomp::pipeline::packed_loss;
use svdcomp::rank::{IntegerAllocation, RatioCounting};
use svdcomp::update::{update_all_weights, UpdateConfig};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_svdcomp"));
    cmd.env_remove("DOBI_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn regression(&self) -> (PathBuf, PathBuf) {
        let data = self.path("data.json");
        let model = self.path("model.svdc");
        run_ok(&["gen-data", "--kind", "teacher_student_regression", "--seed", "3", "--count", "12", "--out", p(&data)]);
        run_ok(&["init-model", "--kind", "teacher_student_regression", "--out", p(&model)]);
        (model, data)
    }
}

fn load_data(path: &Path) -> Dataset {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_matches_library_and_is_reproducible() {
    let fx = Fixture::new();
    let a = fx.path("a.json");
    let b = fx.path("b.json");
    run_ok(&["gen-data", "--kind", "char_lm", "--seed", "11", "--count", "5", "--out", p(&a)]);
    run_ok(&["gen-data", "--kind", "char_lm", "--seed", "11", "--count", "5", "--out", p(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(load_data(&a), Dataset::generate(TaskKind::CharLm, 11, 5));

    let held = fx.path("held.json");
    run_ok(&["gen-data", "--kind", "char_lm", "--seed", "11", "--count", "5", "--held-out", "--out", p(&held)]);
    assert_eq!(load_data(&held), Dataset::held_out(TaskKind::CharLm, 11, 5));
}

#[test]
fn eval_reports_the_library_loss_exactly() {
    let fx = Fixture::new();
    let (model, data) = fx.regression();
    let v = run_ok(&["eval", "--model", p(&model), "--data", p(&data)]);
    let expected = evaluate(
        &ToyModel::teacher(TaskKind::TeacherStudentRegression),
        &load_data(&data),
        &ForwardMode::Dense,
    )
    .unwrap();
    assert_eq!(v["mode"], "dense");
    // The teacher round-trips through f32 storage, so compare against the
    // container's own dense model as well.
    let stored = ModelContainer::load(&model).unwrap().dense_model().unwrap();
    let from_container = evaluate(&stored, &load_data(&data), &ForwardMode::Dense).unwrap();
    assert_eq!(v["loss"].as_f64().unwrap(), from_container.loss);
    assert!((from_container.loss - expected.loss).abs() <= 1e-6 * expected.loss.max(1.0));
}

#[test]
fn step_by_step_commands_match_library_calls() {
    let fx = Fixture::new();
    let (model, data) = fx.regression();
    let alloc = fx.path("alloc.json");
    let ranks = fx.path("ranks.json");
    let traj = fx.path("traj.csv");
    let v = run_ok(&[
        "train-ranks", "--model", p(&model), "--data", p(&data), "--epochs", "15", "--target-ratio", "0.5",
        "--out", p(&alloc), "--rounded-out", p(&ranks), "--trajectory", p(&traj),
    ]);
    assert_eq!(v["epochs"], 15);
    let csv = std::fs::read_to_string(&traj).unwrap();
    assert!(csv.starts_with("epoch,layer,k,task_loss,ratio\n"));
    assert_eq!(csv.lines().count(), 1 + 15 * 3);

    let updated = fx.path("updated.svdc");
    run_ok(&["update-weights", "--model", p(&model), "--data", p(&data), "--alloc", p(&ranks), "--out", p(&updated)]);
    let packed_path = fx.path("packed.svdc");
    let summary = run_ok(&["pack", "--model", p(&updated), "--out", p(&packed_path)]);

    // The same steps through the library.
    let base = ModelContainer::load(&model).unwrap().dense_model().unwrap();
    let int_alloc = IntegerAllocation::from_json(&std::fs::read_to_string(&ranks).unwrap()).unwrap();
    let outcome = update_all_weights(&base, &load_data(&data), &int_alloc, &UpdateConfig::default()).unwrap();
    let mut expect_updated = ModelContainer::from_model(&outcome.model, Some(TaskKind::TeacherStudentRegression));
    expect_updated.allocation = Some(int_alloc.clone());
    assert_eq!(std::fs::read(&updated).unwrap(), expect_updated.to_bytes().unwrap());

    // The CLI packs what it reads back, i.e. the f32-rounded weights.
    let reread = ModelContainer::from_bytes(&expect_updated.to_bytes().unwrap()).unwrap();
    let stored = reread.dense_model().unwrap();
    let packed: Vec<_> = stored
        .layers()
        .iter()
        .map(|l| {
            int_alloc.get(&l.name).map(|e| {
                pack(&svdcomp::update::UpdatedWeight { w_tilde: l.weight.clone(), k: e.k }).unwrap()
            })
        })
        .collect();
    let expect_packed =
        ModelContainer::with_packed(&stored, Some(TaskKind::TeacherStudentRegression), &packed, Some(int_alloc))
            .unwrap();
    assert_eq!(std::fs::read(&packed_path).unwrap(), expect_packed.to_bytes().unwrap());
    assert_eq!(
        summary["packed_ratio"].as_f64().unwrap(),
        svdcomp::pipeline::packed_storage_ratio(&packed)
    );

    let v = run_ok(&["eval", "--model", p(&packed_path), "--data", p(&data)]);
    assert_eq!(v["mode"], "factored");
    assert_eq!(v["loss"].as_f64().unwrap(), packed_loss(&stored, &packed, &load_data(&data)).unwrap());
}

#[test]
fn gradcheck_degenerate_set_is_finite_and_matches_library() {
    let v = run_ok(&["gradcheck", "--degenerate", "--seed", "5"]);
    assert_eq!(v["cases"], 20);
    assert_eq!(v["all_finite"], true);
    let lib = certify(20, |i| degenerate_case(5, i), &BackwardConfig::default(), 1e-5).unwrap();
    assert_eq!(v["max_gain"].as_f64().unwrap(), lib.max_gain);
    assert_eq!(v["degenerate_cases"].as_u64().unwrap() as usize, lib.degenerate_cases);
}

#[test]
fn hard_and_smooth_eval_modes_need_an_allocation() {
    let fx = Fixture::new();
    let (model, data) = fx.regression();
    let out = run(&["eval", "--model", p(&model), "--data", p(&data), "--mode", "hard"]);
    assert_eq!(out.status.code(), Some(1));

    let ranks = fx.path("r.json");
    let shapes = ToyModel::teacher(TaskKind::TeacherStudentRegression).compressible_shapes();
    let alloc = IntegerAllocation::uniform_fraction(&shapes, 0.5);
    std::fs::write(&ranks, alloc.to_json().unwrap()).unwrap();
    let v = run_ok(&["eval", "--model", p(&model), "--data", p(&data), "--mode", "hard", "--alloc", p(&ranks)]);
    let stored = ModelContainer::load(&model).unwrap().dense_model().unwrap();
    let lib = evaluate(&stored, &load_data(&data), &ForwardMode::HardTruncated(&alloc)).unwrap();
    assert_eq!(v["loss"].as_f64().unwrap(), lib.loss);

    let smooth = fx.path("s.json");
    std::fs::write(&smooth, alloc.to_continuous().to_json().unwrap()).unwrap();
    let v = run_ok(&[
        "eval", "--model", p(&model), "--data", p(&data), "--mode", "smooth", "--alloc", p(&smooth), "--beta", "30",
    ]);
    let cont = alloc.to_continuous();
    let lib = evaluate(&stored, &load_data(&data), &ForwardMode::SmoothTruncated { alloc: &cont, beta: 30.0 }).unwrap();
    assert_eq!(v["loss"].as_f64().unwrap(), lib.loss);
}

#[test]
fn compare_trunc_defaults_to_the_remapped_budget() {
    let fx = Fixture::new();
    let (model, data) = fx.regression();
    let v = run_ok(&["compare-trunc", "--model", p(&model), "--data", p(&data), "--target-ratio", "0.6"]);
    let shapes = ToyModel::teacher(TaskKind::TeacherStudentRegression).compressible_shapes();
    let alloc = svdcomp::pipeline::budget_allocation(&shapes, 0.6, RatioCounting::Remapped);
    let ks: Vec<u64> = alloc.entries.iter().map(|e| e.k as u64).collect();
    let got: Vec<u64> = v["full"]["k"].as_array().unwrap().iter().map(|k| k.as_u64().unwrap()).collect();
    assert_eq!(got, ks);
    assert_eq!(v["sweep"].as_array().unwrap().len(), 3 * 3);
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let fx = Fixture::new();
    let (model, data) = fx.regression();

    assert_eq!(run(&["eval", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["gen-data", "--kind", "nonsense", "--out", "x"]).status.code(), Some(1));
    assert_eq!(run(&["gen-data", "--target-ratio", "1.5", "--out", "x"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    let missing = fx.path("missing.svdc");
    assert_eq!(run(&["eval", "--model", p(&missing), "--data", p(&data)]).status.code(), Some(2));

    let corrupt = fx.path("corrupt.svdc");
    let mut bytes = std::fs::read(&model).unwrap();
    bytes[0] ^= 0xFF;
    std::fs::write(&corrupt, bytes).unwrap();
    let out = run(&["eval", "--model", p(&corrupt), "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));

    // Targets whose squared error overflows are a numerical failure.
    let mut raw: Value = serde_json::from_str(&std::fs::read_to_string(&data).unwrap()).unwrap();
    for x in raw["samples"][0]["target"]["value"]["data"].as_array_mut().unwrap() {
        *x = Value::from(1e300);
    }
    let huge = fx.path("huge.json");
    std::fs::write(&huge, raw.to_string()).unwrap();
    assert_eq!(run(&["eval", "--model", p(&model), "--data", p(&huge)]).status.code(), Some(3));
}

#[test]
fn flags_override_config_which_overrides_env_seed() {
    let fx = Fixture::new();
    let cfg = fx.path("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 21, "kind": "teacher_student_regression", "count": 3}"#).unwrap();
    let out = fx.path("d.json");

    let v = run_ok(&["gen-data", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(v["seed"], 21);
    assert_eq!(v["count"], 3);
    assert_eq!(v["kind"], "teacher_student_regression");

    let v = run_ok(&["gen-data", "--config", p(&cfg), "--seed", "4", "--out", p(&out)]);
    assert_eq!(v["seed"], 4);

    let env_run = |args: &[&str]| -> Value {
        let o = bin().env("DOBI_SEED", "99").args(args).output().unwrap();
        assert!(o.status.success());
        serde_json::from_slice(&o.stdout).unwrap()
    };
    assert_eq!(env_run(&["gen-data", "--config", p(&cfg), "--out", p(&out)])["seed"], 21);
    assert_eq!(env_run(&["gen-data", "--count", "2", "--out", p(&out)])["seed"], 99);

    let o = bin().env("DOBI_SEED", "abc").args(["gen-data", "--out", p(&out)]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn pipeline_hits_the_target_and_writes_loadable_artifacts() {
    let fx = Fixture::new();
    let dir = fx.path("run");
    let v = run_ok(&[
        "pipeline", "--kind", "teacher_student_regression", "--seed", "1", "--target-ratio", "0.6", "--out-dir",
        p(&dir),
    ]);
    let rounded = v["rounded_ratio"].as_f64().unwrap();
    assert!((rounded - 0.6).abs() < 0.02, "rounded ratio {rounded}");
    for name in ["trajectory.csv", "allocation.json", "ranks.json", "ipca_objective.csv", "packed.svdc", "report.json"] {
        assert!(dir.join(name).exists(), "{name} missing");
    }
    let eval_path = fx.path("eval.json");
    run_ok(&[
        "gen-data", "--kind", "teacher_student_regression", "--seed", "1", "--count", "64", "--held-out", "--out",
        p(&eval_path),
    ]);
    let e = run_ok(&["eval", "--model", p(&dir.join("packed.svdc")), "--data", p(&eval_path)]);
    let reported = v["packed_loss"].as_f64().unwrap();
    // The container stores the unquantized layers as f32, so the reloaded
    // model differs from the in-memory one only by that rounding.
    assert!((e["loss"].as_f64().unwrap() - reported).abs() <= 1e-4 * reported.max(1e-3));
}
