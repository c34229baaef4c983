//! End-to-end runs of the command-line front end on a tiny dataset.

use std::path::Path;

use routed_dit::cli::{run, RunManifest, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use routed_dit::data::load_test_cases;

fn argv(args: &[&str]) -> Vec<String> {
    std::iter::once("routed-dit").chain(args.iter().copied()).map(String::from).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn manifest(path: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(path).expect("manifest")).expect("manifest json")
}

#[test]
fn build_train_sample_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");

    let code = run(argv(&["build-dataset", "--out", s(&data), "--subjects", "12", "--seed", "3", "--test-cases", "1"]));
    assert_eq!(code, EXIT_OK);
    assert_eq!(manifest(&data.join("manifest.json")).subcommand, "build-dataset");

    let code = run(argv(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run_dir),
        "--pretrain-iters",
        "20",
        "--stage-iters",
        "20,15,15",
        "--audit",
        "--seed",
        "3",
    ]));
    assert_eq!(code, EXIT_OK);
    let loss = std::fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 51);
    assert!(loss.starts_with("iter,stage,loss\n"));
    for f in ["base.ckpt", "stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "manifest.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let m = manifest(&run_dir.join("manifest.json"));
    assert_eq!(m.seed, Some(3));
    assert_eq!(m.config["train"]["stage_iters"], serde_json::json!([20, 15, 15]));

    let ckpt = run_dir.join("stage3.ckpt");
    let case = data.join("test").join("0001");
    let out = dir.path().join("sample.png");
    let trace = dir.path().join("trace");
    let code = run(argv(&[
        "sample",
        "--ckpt",
        s(&ckpt),
        "--cond",
        &format!("{}:a red solid ball", s(&case.join("cond_0.png"))),
        "--cond",
        &format!("{}:a blue dotted cup", s(&case.join("cond_1.png"))),
        "--prompt",
        "a red solid ball and a blue dotted cup",
        "--steps",
        "3",
        "--out",
        s(&out),
        "--trace",
        s(&trace),
    ]));
    assert_eq!(code, EXIT_OK);
    assert!(out.exists());
    let heatmaps = std::fs::read_dir(&trace).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")).count();
    assert_eq!(heatmaps, 3 * 4 * 2);

    let trace2 = dir.path().join("trace2");
    let code = run(argv(&[
        "trace-affinity",
        "--ckpt",
        s(&ckpt),
        "--cond",
        &format!("{}:a red solid ball", s(&case.join("cond_0.png"))),
        "--cond",
        &format!("{}:another blue dotted ball", s(&case.join("cond_1.png"))),
        "--prompt",
        "a red solid ball and another blue dotted ball",
        "--steps",
        "4",
        "--every",
        "2",
        "--out",
        s(&trace2),
    ]));
    assert_eq!(code, EXIT_OK);
    assert!(trace2.join("trace.json").exists());
    assert!(trace2.join("step002_layer3_cond1.pgm").exists());

    let metrics = dir.path().join("metrics.csv");
    let code = run(argv(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--no-diptych-ckpt",
        s(&run_dir.join("stage1.ckpt")),
        "--no-bias-ckpt",
        s(&run_dir.join("stage2.ckpt")),
        "--data",
        s(&data),
        "--out",
        s(&metrics),
        "--seeds",
        "2",
        "--steps",
        "2",
    ]));
    assert_eq!(code, EXIT_OK);
    let csv = std::fs::read_to_string(&metrics).unwrap();
    assert!(csv.starts_with("variant,scenario,seed,identity_sim,attr_match\n"));
    assert_eq!(csv.lines().count(), 1 + 4 * 4 * 2);
    let summary = std::fs::read_to_string(dir.path().join("metrics_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 16);
    // with one condition, dynamic routing has nothing to choose between
    let row = |variant: &str| -> String {
        summary
            .lines()
            .find(|l| l.starts_with(&format!("{variant},c1,")))
            .unwrap()
            .split_once(",c1,")
            .unwrap()
            .1
            .to_string()
    };
    assert_eq!(row("full"), row("no-dynamic-routing"));
    assert_eq!(load_test_cases(&data).unwrap().len(), 4);
}

#[test]
fn mismatched_condition_prompt_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(run(argv(&["build-dataset", "--out", s(&data), "--subjects", "4", "--test-cases", "1"])), EXIT_OK);
    let run_dir = dir.path().join("run");
    let code = run(argv(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run_dir),
        "--pretrain-iters",
        "1",
        "--stage-iters",
        "1,0,0",
        "--no-diptych",
    ]));
    assert_eq!(code, EXIT_OK);
    let cond = data.join("test").join("0000").join("cond_0.png");
    let code = run(argv(&[
        "sample",
        "--ckpt",
        s(&run_dir.join("stage1.ckpt")),
        "--cond",
        &format!("{}:a red solid ball", s(&cond)),
        "--prompt",
        "a green solid ball",
        "--out",
        s(&dir.path().join("x.png")),
    ]));
    assert_eq!(code, EXIT_USAGE);
    let code = run(argv(&["sample", "--ckpt", s(&dir.path().join("missing.ckpt")), "--prompt", "a red solid ball", "--out", s(&dir.path().join("y.png"))]));
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn inspect_mask_worked_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mask.pgm");
    let args = ["inspect-mask", "--c", "2", "--n-prime", "2", "--m-prime", "1", "--m", "2", "--n", "3", "--assignment", "0,1,0", "--out", s(&out)];
    assert_eq!(run(argv(&args)), EXIT_OK);
    assert!(out.exists());
    assert!(dir.path().join("mask_combined.pgm").exists());
    let bad = ["inspect-mask", "--c", "2", "--n-prime", "2", "--m-prime", "1", "--m", "2", "--n", "3", "--assignment", "0,1", "--out", s(&out)];
    assert_eq!(run(argv(&bad)), EXIT_USAGE);
}

#[test]
fn unknown_flag_and_empty_args() {
    assert_eq!(run(argv(&[])), EXIT_USAGE);
    assert_eq!(run(argv(&["sample", "--frobnicate"])), EXIT_USAGE);
}
