use std::io::Write;
use std::process::{Command, Output, Stdio};
use std::sync::Arc;

use serde_json::Value;

use ltm_core::{Engine, EngineConfig, Speaker};
use ltm_server::Users;

fn ltm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltm")).args(args).output().unwrap()
}

fn json_stdout(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn simulate_is_deterministic() {
    let args = ["simulate", "--episodes", "1", "--sessions", "1", "--rounds", "1", "--seed", "3"];
    let a = json_stdout(&ltm(&args));
    let b = json_stdout(&ltm(&args));
    assert_eq!(a, b);
    let utterances = a["transcripts"][0]["sessions"][0]["utterances"].as_array().unwrap();
    assert_eq!(utterances.len(), 2);
}

#[test]
fn simulate_without_memory_carries_nothing() {
    let out = json_stdout(&ltm(&["simulate", "--episodes", "2", "--sessions", "3", "--rounds", "4", "--no-memory"]));
    for r in out["carryover"].as_array().unwrap() {
        assert_eq!(r["carried_persona_count"], 0);
    }
    assert_eq!(out["planted_persona_sessions"], serde_json::json!([[1], [1]]));
}

#[test]
fn eval_gen_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.txt");
    let lp = dir.path().join("lp.jsonl");
    std::fs::write(&pred, "我是一名画家\n今天天气不错\n").unwrap();
    std::fs::write(&lp, "[-0.5,-0.5]\n[-1.0]\n").unwrap();
    let p = pred.to_str().unwrap();
    let out = json_stdout(&ltm(&["eval-gen", p, p, "--logprobs", lp.to_str().unwrap()]));
    assert_eq!(out["bleu_1"], 1.0);
    assert_eq!(out["f1"], 1.0);
    assert!((out["perplexity"].as_f64().unwrap() - (2.0f64 / 3.0).exp()).abs() < 1e-12);
}

#[test]
fn corpus_commands() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    let line = r#"{"dialogue_id":"d1","bot_personas":["B1: 我是一名画家","B2: 我喜欢游泳"],"user_personas_seen":["我住在上海"],"user_personas_unseen":[],"turns":[{"speaker":"user","text":"你是做什么的"},{"speaker":"bot","text":"我是画家","grounded_persona_ids":["B1"]}]}"#;
    std::fs::write(&corpus, format!("{line}\n")).unwrap();
    let c = corpus.to_str().unwrap();

    let stats = json_stdout(&ltm(&["stats", c]));
    assert_eq!(stats["n_dialogues"], 1);
    assert_eq!(stats["avg_turns"], 2.0);
    let ingest = json_stdout(&ltm(&["ingest", c]));
    assert_eq!(ingest["personas"], 3);
    let rank = json_stdout(&ltm(&["eval-rank", c]));
    assert_eq!(rank["n_examples"], 1);

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, format!("{line}\n{{\"dialogue_id\": 1}}\n")).unwrap();
    let out = ltm(&["stats", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn extract_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("u.txt");
    std::fs::write(&file, "我是一名画家，你呢？\nbot\t我喜欢音乐\n今天天气不错\n").unwrap();
    let out = json_stdout(&ltm(&["extract", file.to_str().unwrap()]));
    assert_eq!(out[0]["personas"], serde_json::json!(["我是一名画家"]));
    assert_eq!(out[1]["speaker"], "bot");
    assert_eq!(out[2]["personas"], serde_json::json!([]));

    assert!(!ltm(&["stats", "/definitely/missing.jsonl"]).status.success());
    assert!(!ltm(&["simulate", "--episodes", "x"]).status.success());
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "sim_threshold = 3\n").unwrap();
    assert!(!ltm(&["--config", cfg.to_str().unwrap(), "simulate", "--episodes", "1"]).status.success());
}

#[test]
fn repl_matches_the_service_path() {
    let lines = ["我是一名画家，我喜欢画油画。", "今天天气不错", "你记得我是一名画家吗"];
    let mut child = Command::new(env!("CARGO_BIN_EXE_ltm"))
        .args(["repl", "--user", "local"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    {
        let mut stdin = child.stdin.take().unwrap();
        for l in lines {
            writeln!(stdin, "{l}").unwrap();
        }
        writeln!(stdin, ":bot 我也喜欢画画").unwrap();
    }
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let repl: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();

    let users = Arc::new(Users::new(Engine::reference(EngineConfig::default()).unwrap(), None));
    users.start_session("local").unwrap();
    let mut service: Vec<Value> = lines
        .iter()
        .map(|l| serde_json::to_value(users.turn("local", Speaker::User, l).unwrap()).unwrap())
        .collect();
    service.push(serde_json::to_value(users.turn("local", Speaker::Bot, "我也喜欢画画").unwrap()).unwrap());
    assert_eq!(repl, service);
}
