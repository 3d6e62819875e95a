use std::fs;
use std::path::Path;
use std::process::Command;

use ditto2::bench::{read_records, sweep, task_target, GridCell, ModelZoo, SweepGrid, SynthDatasetSpec};
use ditto2::controls::{write_target, Task};
use ditto2::diffusion::{train_teacher, TrainConfig};
use ditto2::distill::{distill, DistillConfig, DistillMethod};
use ditto2::ito::{run_ditto2, ItoConfig, Method, OptSteps};
use ditto2::scorenet::{load_checkpoint, save_checkpoint, DenoiserModel};

fn tiny_train() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 32,
        dataset_size: 128,
        hidden: 16,
        blocks: 1,
        ..TrainConfig::default()
    }
}

fn tiny_distill(method: DistillMethod) -> DistillConfig {
    DistillConfig { method, steps: 6, batch_size: 8, log_every: 2, ..DistillConfig::default() }
}

fn tiny_models(dir: &Path) -> (DenoiserModel, DenoiserModel, DenoiserModel) {
    let data = SynthDatasetSpec::new(128, 0).generate();
    let teacher = train_teacher(&data, &tiny_train()).unwrap().model;
    let cm = distill(&teacher, &data, &tiny_distill(DistillMethod::Cm)).unwrap().shadow;
    let ctm = distill(&teacher, &data, &tiny_distill(DistillMethod::Ctm)).unwrap().shadow;
    save_checkpoint(&teacher, &dir.join("teacher.ckpt")).unwrap();
    save_checkpoint(&cm, &dir.join("cm.ckpt")).unwrap();
    save_checkpoint(&ctm, &dir.join("ctm.ckpt")).unwrap();
    (teacher, cm, ctm)
}

#[test]
fn train_distill_optimize_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, ctm) = tiny_models(dir.path());
    let loaded = load_checkpoint(&dir.path().join("ctm.ckpt")).unwrap();
    assert_eq!(loaded.params(), ctm.params());

    let (target, cond) = task_target(Task::Intensity, 7, 0).unwrap();
    let config = ItoConfig { k: 4, t_decode: 2, cond, ..ItoConfig::default() };
    let a = run_ditto2(&ctm, Method::Ditto2Ctm, &target, &config).unwrap();
    let b = run_ditto2(&loaded, Method::Ditto2Ctm, &target, &config).unwrap();
    assert_eq!(a.x0, b.x0);
    assert_eq!(a.loss_trajectory.len(), 4);
    assert_eq!(a.accounted_units, 4 + 2);
}

#[test]
fn sweep_records_failures_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    tiny_models(dir.path());
    let grid = SweepGrid {
        teacher: dir.path().join("teacher.ckpt"),
        cm_student: Some(dir.path().join("cm.ckpt")),
        // a teacher in the student slot makes every CTM cell fail
        ctm_student: Some(dir.path().join("teacher.ckpt")),
        tasks: vec!["intensity".into()],
        seeds: vec![0, 1],
        k: 8,
        workers: 2,
        timing_repeats: 1,
        reference_count: 320,
        fad_samples: 320,
        cells: vec![
            GridCell { method: "ditto".into(), m: "1".into(), t: 2 },
            GridCell { method: "ditto2-cm".into(), m: "adaptive".into(), t: 1 },
            GridCell { method: "ditto2-ctm".into(), m: "1".into(), t: 1 },
        ],
        ..SweepGrid::default()
    };
    let zoo = ModelZoo::load(&grid).unwrap();

    let out1 = dir.path().join("run1");
    let rows = sweep(&grid, &zoo, &out1).unwrap();
    assert_eq!(rows.len(), 6);
    let on_disk = read_records(&out1.join("results.csv")).unwrap();
    assert_eq!(on_disk.len(), 6);
    for r in &on_disk {
        if r.method == "ditto2-ctm" {
            assert_eq!(r.status, "failed");
            assert!(!r.error.is_empty());
        } else {
            assert_eq!(r.status, "ok", "{r:?}");
            assert!(r.control_loss.is_finite());
        }
    }
    assert!(out1.join("tradeoff.csv").exists());
    assert!(fs::read_to_string(out1.join("tradeoff.svg")).unwrap().starts_with("<svg"));

    let out2 = dir.path().join("run2");
    sweep(&grid, &zoo, &out2).unwrap();
    let key = |rs: Vec<ditto2::bench::RunRecord>| {
        let mut v: Vec<_> = rs
            .into_iter()
            .filter(|r| r.status == "ok")
            .map(|r| (r.method, r.seed, r.control_loss.to_bits(), r.accounted_units))
            .collect();
        v.sort();
        v
    };
    assert_eq!(key(on_disk), key(read_records(&out2.join("results.csv")).unwrap()));
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ditto2")).args(args).output().unwrap()
}

#[test]
fn cli_data_optimize_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();

    fs::write(d.join("spec.toml"), "count = 3\nseed = 5\n").unwrap();
    let o = cli(&["bench", "data", "--spec", &p("spec.toml"), "--out", &p("data")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("data/sample_00002.csv").exists());
    assert_eq!(fs::read_to_string(d.join("data/tags.csv")).unwrap().lines().count(), 4);

    let data = SynthDatasetSpec::new(128, 0).generate();
    let teacher = train_teacher(&data, &tiny_train()).unwrap().model;
    save_checkpoint(&teacher, &d.join("teacher.ckpt")).unwrap();
    let (target, _) = task_target(Task::Melody, 7, 0).unwrap();
    write_target(&d.join("target.csv"), &target).unwrap();

    let o = cli(&[
        "optimize", "--task", "melody", "--method", "ditto", "--model", &p("teacher.ckpt"),
        "--steps-decode", "2", "--k", "3", "--cond", "1,2", "--target", &p("target.csv"), "--out", &p("opt"),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let recs = read_records(&d.join("opt/record.csv")).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].accounted_units, 4 * 3 * 2);
    assert_eq!(fs::read_to_string(d.join("opt/trajectory.csv")).unwrap().lines().count(), 4);

    // a teacher cannot drive the distilled surrogate
    let o = cli(&[
        "optimize", "--task", "melody", "--method", "ditto2-ctm", "--model", &p("teacher.ckpt"),
        "--target", &p("target.csv"), "--out", &p("bad"),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let o = cli(&["optimize", "--task", "melody", "--method", "ditto", "--model", &p("missing.ckpt"),
        "--target", &p("target.csv"), "--out", &p("bad")]);
    assert!(!o.status.success());
}

#[test]
fn adaptive_schedule_reaches_the_surrogate() {
    let data = SynthDatasetSpec::new(128, 0).generate();
    let teacher = train_teacher(&data, &tiny_train()).unwrap().model;
    let ctm = distill(&teacher, &data, &tiny_distill(DistillMethod::Ctm)).unwrap().shadow;
    let (target, cond) = task_target(Task::Structure, 7, 0).unwrap();
    let config = ItoConfig { k: 8, m: OptSteps::Adaptive, cond, ..ItoConfig::default() };
    let r = run_ditto2(&ctm, Method::Ditto2Ctm, &target, &config).unwrap();
    assert_eq!(r.m_schedule, vec![1, 1, 1, 1, 2, 2, 2, 4]);
    assert_eq!(r.accounted_units, 14 + 1);
}
