use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn root(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn trajq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajq")).args(args).output().unwrap()
}

fn trajq_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_trajq"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn tiny_config(dir: &Path, pooling: &str) -> PathBuf {
    let cfg = serde_json::json!({
        "game": root("games/egg.json"),
        "preset": "egg",
        "encoder": {"embed_dim": 8, "filters_per_size": 4, "pooling": pooling},
        "train": {
            "observation_steps": 20,
            "replay_capacity": 300,
            "epsilon_decay_steps": 300,
            "max_episode_steps": 20,
            "eval_period": 100,
            "eval_episodes": 2,
            "batch_size": 4,
            "learning_rate": 0.001,
            "total_steps": 200
        },
        "output_dir": dir.join("out")
    });
    let path = dir.join(format!("run-{pooling}.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn train_tiny(dir: &Path, pooling: &str) -> PathBuf {
    let cfg = tiny_config(dir, pooling);
    let out = dir.join(format!("out-{pooling}"));
    let o = trajq(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn reorder_golden_sentence() {
    let o = trajq(&["reorder", root("fixtures/facing.conllu").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "facing you are side O O side the north house O O house of a white\n");
}

#[test]
fn reorder_empty_and_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.conllu");
    std::fs::write(&empty, "").unwrap();
    let o = trajq(&["reorder", empty.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "");

    let bad = dir.path().join("bad.conllu");
    std::fs::write(&bad, "1\tyou\tyou\tPRON\t_\t_\t0\troot\t_\t_\n2\tare\tbe\n\n").unwrap();
    let o = trajq(&["reorder", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn reorder_writes_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("reordered.txt");
    let o = trajq(&["reorder", root("fixtures/facing.conllu").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "");
    assert!(std::fs::read_to_string(out).unwrap().starts_with("facing you are side"));
}

#[test]
fn play_egg_transcript() {
    let game = root("games/egg.json");
    let o = trajq_stdin(
        &["play", "--game", game.to_str().unwrap()],
        "go north\nfly\ngo north\nclimb tree\ntake the egg\n",
    );
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("Taken. (Score: 5, Moves: 4)"), "{text}");
    assert!(text.contains("Unknown action \"fly\""));
    assert!(text.contains("  climb tree"));
}

#[test]
fn play_quit_exits_cleanly() {
    let game = root("games/egg.json");
    let o = trajq_stdin(&["play", "--game", game.to_str().unwrap()], "go north\nquit\ngo north\n");
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("(Score: 0, Moves: 1)"));
    assert!(!text.contains("Moves: 2"));
}

#[test]
fn train_writes_metrics_checkpoints_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), "max");
    for f in ["metrics.jsonl", "ckpt-100.bin", "ckpt-200.bin", "config.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "episode", "epsilon", "loss", "eval_mean_score", "eval_scores", "repeat_bad_rate"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }
    let leftovers: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with('.'))
        .collect();
    assert!(leftovers.is_empty(), "temporary files left: {leftovers:?}");
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "max");
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = trajq(&["train", "--config", cfg.to_str().unwrap(), "--seed", seed, "--out-dir", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(out.join("metrics.jsonl")).unwrap()
    };
    assert_eq!(run("a", "7"), run("b", "7"));
    assert_ne!(run("a", "7"), run("c", "8"));
}

#[test]
fn missing_game_is_a_usage_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "max");
    let o = trajq(&["train", "--config", cfg.to_str().unwrap(), "--set", "game=/no/such/quest.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/quest.json"));
}

#[test]
fn bad_invocations_exit_with_two() {
    assert_eq!(trajq(&["fly"]).status.code(), Some(2));
    assert_eq!(trajq(&["train"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "max");
    let o = trajq(&["train", "--config", cfg.to_str().unwrap(), "--set", "train.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = trajq(&["train", "--config", cfg.to_str().unwrap(), "--set", "no-equals-sign"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), "max");
    let ckpt = out.join("ckpt-200.bin");
    let game = root("games/egg.json");
    let o = trajq(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--game", game.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["scores"].as_array().unwrap().len(), 10);
    assert!(v["mean_score"].is_number());

    let args = ["eval", "--checkpoint", ckpt.to_str().unwrap(), "--game", game.to_str().unwrap(), "--episodes", "1", "--epsilon", "0"];
    let o = trajq(&args);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["scores"].as_array().unwrap().len(), 1);
    assert_eq!(stdout(&o), stdout(&trajq(&args)));
}

#[test]
fn eval_rejects_corrupt_and_incompatible_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), "max");
    let bytes = std::fs::read(out.join("ckpt-100.bin")).unwrap();
    let cut = dir.path().join("cut.bin");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let egg = root("games/egg.json");
    let o = trajq(&["eval", "--checkpoint", cut.to_str().unwrap(), "--game", egg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("corrupt"), "{}", stderr(&o));

    let troll = root("games/troll.json");
    let ckpt = out.join("ckpt-100.bin");
    let o = trajq(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--game", troll.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn attention_records_spans() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), "max");
    let ckpt = out.join("ckpt-200.bin");
    let game = root("games/egg.json");
    let base = ["attention", "--checkpoint", ckpt.to_str().unwrap(), "--game", game.to_str().unwrap(), "--steps", "5"];
    let o = trajq(&base);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!lines.is_empty() && lines.len() <= 5);
    for (k, rec) in lines.iter().enumerate() {
        assert_eq!(rec["step"], k as u64);
        assert!(rec["action"].is_string());
        let spans = rec["spans"].as_array().unwrap();
        assert!(!spans.is_empty() && spans.len() <= 3);
        for s in spans {
            let (a, b) = (s["start"].as_u64().unwrap(), s["end"].as_u64().unwrap());
            assert_eq!(s["tokens"].as_array().unwrap().len() as u64, b - a + 1);
        }
    }
    let mut one = base.to_vec();
    one.extend(["--topk", "1"]);
    let o = trajq(&one);
    assert!(stdout(&o).lines().all(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["spans"].as_array().unwrap().len() == 1));
}

#[test]
fn attention_rejects_mean_pooling() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), "mean");
    let ckpt = out.join("ckpt-100.bin");
    let game = root("games/egg.json");
    let o = trajq(&["attention", "--checkpoint", ckpt.to_str().unwrap(), "--game", game.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("max-pool"), "{}", stderr(&o));
}

#[test]
fn inspect_replay_dumps_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "max");
    let dump = dir.path().join("replay.jsonl");
    let out = dir.path().join("o");
    let o = trajq(&[
        "inspect-replay",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "train.total_steps=50",
        "--set",
        "train.eval_period=50",
        "--out-dir",
        out.to_str().unwrap(),
        "--out",
        dump.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dump).unwrap();
    let recs: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 50);
    for (k, r) in recs.iter().enumerate() {
        assert_eq!(r["index"], k as u64);
        let reward = r["reward"].as_f64().unwrap();
        assert!((-1.0..=1.0).contains(&reward));
        assert!(r["priority"].as_f64().unwrap() > 0.0);
        assert!(r["terminal"].is_boolean() && r["action"].is_u64());
    }
}
