use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flexsdr::eval::EvalReport;
use flexsdr::trainer::EpisodeLog;
use flexsdr_cli::RunConfig;

fn flexsdr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexsdr")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = flexsdr(args);
    assert!(
        out.status.success(),
        "flexsdr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    flexsdr(args).status.code().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

struct Fixture {
    dir: tempfile::TempDir,
    dataset: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("data/ds.jsonl");
    ok(&[
        "synth",
        "--out",
        &s(&dataset),
        "--concepts",
        "2",
        "--instances-per-concept",
        "40",
        "--seed",
        "1",
    ]);
    Fixture { dir, dataset }
}

fn train(f: &Fixture, name: &str, extra: &[&str]) -> PathBuf {
    let run = f.dir.path().join(name);
    let mut args = vec![
        "train",
        "--dataset",
        f.dataset.to_str().unwrap(),
        "--episodes",
        "4",
        "--hidden",
        "8",
    ];
    let run_s = s(&run);
    args.extend(["--run-dir", &run_s]);
    args.extend(extra);
    ok(&args);
    run
}

#[test]
fn synth_writes_a_loadable_dataset() {
    let f = fixture();
    let ds = flexsdr::dataset::load_dataset(&f.dataset).unwrap();
    assert_eq!(ds.instances.len(), 80);
    assert_eq!(ds.banks.len(), 2);
    assert_eq!(
        code(&["synth", "--out", &s(&f.dir.path().join("x.jsonl")), "--concepts", "0"]),
        2
    );
}

#[test]
fn train_writes_config_log_and_checkpoints() {
    let f = fixture();
    let run = train(&f, "run", &["--algo", "reticl"]);
    let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg.train.reward.gamma, 1.0);
    assert!(!cfg.train.reward.stop_enabled);
    let log: Vec<EpisodeLog> = std::fs::read_to_string(run.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(log.len(), 4);
    assert!(log.iter().all(|e| e.config_hash == cfg.hash()));
    assert!(log.iter().all(|e| e.mean_shots == 4.0));
    assert!(run.join("final.ckpt").exists());
}

#[test]
fn flags_override_the_config_file_and_the_preset() {
    let f = fixture();
    let path = f.dir.path().join("c.json");
    std::fs::write(&path, r#"{"train": {"episodes": 2, "hidden": 8, "reward": {"gamma": 0.5, "omega": 2.0, "intermediate_rewards": true, "stop_enabled": true, "max_shots": 3}}}"#).unwrap();
    let run = train(
        &f,
        "run",
        &["--config", &s(&path), "--algo", "flexreticr", "--omega", "0.5"],
    );
    let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    let r = cfg.train.reward;
    assert_eq!((r.gamma, r.omega, r.max_shots), (0.5, 0.5, 3));
    assert!(!r.intermediate_rewards);
    assert_eq!(cfg.train.episodes, 4);
}

#[test]
fn timestamped_run_dirs_carry_the_config_hash() {
    let f = fixture();
    let out = f.dir.path().join("runs");
    let cfg = RunConfig {
        dataset: Some(f.dataset.clone()),
        output_dir: out.clone(),
        train: flexsdr::trainer::TrainConfig {
            episodes: 1,
            hidden: 8,
            ..Default::default()
        },
        ..Default::default()
    };
    let path = f.dir.path().join("c.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    ok(&["train", "--config", &s(&path)]);
    let dirs: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].ends_with(&format!("-{}", cfg.hash())), "{dirs:?}");
}

#[test]
fn evaluate_writes_reports_and_csv() {
    let f = fixture();
    let run = train(&f, "run", &[]);
    let ev = f.dir.path().join("eval");
    let csv = ok(&[
        "evaluate",
        "--dataset",
        &s(&f.dataset),
        "--checkpoint",
        &s(&run.join("final.ckpt")),
        "--retriever",
        "policy",
        "--retriever",
        "random",
        "--retriever",
        "zero-shot",
        "--retriever",
        "similarity-qq",
        "--k",
        "2",
        "--csv",
        "--run-dir",
        &s(&ev),
    ]);
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(std::fs::read_to_string(ev.join("eval.csv")).unwrap(), csv);
    let random: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(ev.join("eval-random.json")).unwrap()).unwrap();
    assert_eq!(random.mean_shots, 2.0);
    assert!(random.is_consistent());
    assert!(!random.config_hash.is_empty());
    let zs: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(ev.join("eval-zero-shot.json")).unwrap()).unwrap();
    assert_eq!(zs.mean_shots, 0.0);
}

#[test]
fn eta_can_be_searched_on_the_evaluated_split() {
    let f = fixture();
    let ev = f.dir.path().join("eval");
    let args = |extra: &'static str| {
        let mut v = vec![
            "evaluate".to_string(),
            "--dataset".into(),
            s(&f.dataset),
            "--retriever".into(),
            "similarity-kq".into(),
        ];
        v.extend(["--run-dir".into(), s(&ev), extra.into()]);
        v
    };
    let on_test = args("--eta-on-test");
    ok(&on_test.iter().map(String::as_str).collect::<Vec<_>>());
    let searched: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(ev.join("eval-similarity-kq.json")).unwrap()).unwrap();
    assert!(searched.is_consistent());
    assert_eq!(searched.predictions.len(), 20);
    let mut clash = args("--eta-on-test");
    clash.extend(["--eta".into(), "0.5".into()]);
    assert_eq!(code(&clash.iter().map(String::as_str).collect::<Vec<_>>()), 2);
}

#[test]
fn promptpg_checkpoints_evaluate_with_k_shots() {
    let f = fixture();
    let run = train(&f, "pg", &["--algo", "promptpg"]);
    let ev = f.dir.path().join("eval");
    ok(&[
        "evaluate",
        "--dataset",
        &s(&f.dataset),
        "--checkpoint",
        &s(&run.join("final.ckpt")),
        "--retriever",
        "promptpg",
        "--k",
        "3",
        "--run-dir",
        &s(&ev),
    ]);
    let rep: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(ev.join("eval-promptpg.json")).unwrap()).unwrap();
    assert_eq!(rep.mean_shots, 3.0);
    // A PromptPG checkpoint is not a sequential policy.
    assert_eq!(
        code(&[
            "evaluate",
            "--dataset",
            &s(&f.dataset),
            "--checkpoint",
            &s(&run.join("final.ckpt")),
            "--retriever",
            "policy"
        ]),
        2
    );
}

#[test]
fn configuration_errors_exit_with_two() {
    let f = fixture();
    let ds = s(&f.dataset);
    assert_eq!(code(&["evaluate", "--dataset", &ds, "--retriever", "nearest"]), 2);
    let out = flexsdr(&["evaluate", "--dataset", &ds, "--retriever", "nearest"]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("policy, promptpg, random, similarity-order, zero-shot, similarity-kq, similarity-qq"));
    assert_eq!(code(&["evaluate", "--dataset", &ds, "--retriever", "policy"]), 2);
    assert_eq!(code(&["train", "--dataset", "missing.jsonl"]), 2);
    assert_eq!(code(&["train"]), 2);
    assert_eq!(code(&["train", "--dataset", &ds, "--algo", "ppo"]), 2);
    assert_eq!(code(&["train", "--dataset", &ds, "--gamma", "0"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    let bad = f.dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"episodes": 3}"#).unwrap();
    assert_eq!(code(&["train", "--config", &s(&bad)]), 2);
}

#[test]
fn checkpoint_dimension_must_match_the_embedder() {
    let f = fixture();
    let run = train(&f, "run", &["--embed-dim", "16"]);
    let ckpt = s(&run.join("final.ckpt"));
    assert_eq!(
        code(&[
            "evaluate",
            "--dataset",
            &s(&f.dataset),
            "--checkpoint",
            &ckpt,
            "--retriever",
            "policy"
        ]),
        2
    );
    ok(&[
        "evaluate",
        "--dataset",
        &s(&f.dataset),
        "--checkpoint",
        &ckpt,
        "--retriever",
        "policy",
        "--embed-dim",
        "16",
        "--run-dir",
        &s(&f.dir.path().join("e")),
    ]);
}

#[test]
fn tag_reports_the_verdict() {
    let f = fixture();
    let run = train(&f, "run", &[]);
    let json = ok(&[
        "tag",
        "--dataset",
        &s(&f.dataset),
        "--instance",
        "k01-q003",
        "--checkpoint",
        &s(&run.join("final.ckpt")),
        "--json",
    ]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["instance_id"], "k01-q003");
    assert_eq!(
        v["shots"].as_u64().unwrap() as usize,
        v["demo_ids"].as_array().unwrap().len()
    );
    assert!(matches!(v["answer"].as_str(), Some("Yes" | "No")));
    let plain = ok(&["tag", "--dataset", &s(&f.dataset), "--instance", "k01-q003"]);
    assert!(plain.trim() == "Yes" || plain.trim() == "No");
    // The simulated judge has no ground truth for free text.
    assert_eq!(
        code(&[
            "tag",
            "--dataset",
            &s(&f.dataset),
            "--knowledge",
            "k00",
            "--question",
            "What is 2/3 of 9?"
        ]),
        2
    );
    assert_eq!(code(&["tag", "--dataset", &s(&f.dataset), "--instance", "nope"]), 2);
}

#[test]
fn runtime_failures_exit_with_one() {
    let f = fixture();
    let path = f.dir.path().join("c.json");
    // A remote judge pointed at a closed port fails at judging time.
    std::fs::write(
        &path,
        format!(
            r#"{{"dataset": {:?}, "judge": {{"kind": "remote", "base_url": "http://127.0.0.1:9", "api_key_env": "PATH", "retry": {{"max_attempts": 1, "initial_backoff_ms": 1, "max_backoff_ms": 1, "timeout_secs": 1}}}}}}"#,
            f.dataset
        ),
    )
    .unwrap();
    assert_eq!(
        code(&[
            "evaluate",
            "--config",
            &s(&path),
            "--retriever",
            "zero-shot",
            "--run-dir",
            &s(&f.dir.path().join("e"))
        ]),
        1
    );
}
