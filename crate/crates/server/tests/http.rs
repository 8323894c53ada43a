use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use ltm_core::remote::HttpGenerator;
use ltm_core::{Engine, EngineConfig};
use ltm_server::{api, Users};

fn app_with(engine: Engine, data_dir: Option<std::path::PathBuf>) -> Router {
    api::router(Arc::new(Users::new(engine, data_dir)))
}

fn app() -> Router {
    app_with(Engine::reference(EngineConfig::default()).unwrap(), None)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn say(app: &Router, user: &str, text: &str) -> (StatusCode, Value) {
    call(app, "POST", &format!("/sessions/{user}/turns"), Some(json!({"speaker": "user", "text": text}))).await
}

#[tokio::test]
async fn first_turn_extracts_and_stores() {
    let app = app();
    let (status, created) = call(&app, "POST", "/sessions/alice", None).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(created["session_id"], "alice-s1");

    let (status, reply) = say(&app, "alice", "我是一名画家。").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(reply["extracted"][0]["text"], "我是一名画家");
    assert_eq!(reply["retrieved"]["user"][0]["persona"]["text"], "我是一名画家");
    assert!(reply["response_text"].is_string());
    let (_, mem) = call(&app, "GET", "/memories/alice/user", None).await;
    assert_eq!(mem["entries"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn later_session_retrieves_earlier_persona() {
    let app = app();
    call(&app, "POST", "/sessions/alice", None).await;
    say(&app, "alice", "我是一名画家。").await;
    let (_, s2) = call(&app, "POST", "/sessions/alice", None).await;
    assert_eq!(s2["session_id"], "alice-s2");
    let (_, reply) = say(&app, "alice", "你记得我是一名画家吗").await;
    assert_eq!(reply["turn_index"], 0);
    assert!(reply["extracted"].as_array().unwrap().is_empty());
    assert_eq!(reply["retrieved"]["user"][0]["persona"]["session_id"], "alice-s1");
}

#[tokio::test]
async fn non_persona_turn_changes_nothing() {
    let app = app();
    call(&app, "POST", "/sessions/bob", None).await;
    let (_, reply) = say(&app, "bob", "今天天气不错").await;
    assert!(reply["extracted"].as_array().unwrap().is_empty());
    for who in ["user", "bot"] {
        let (_, mem) = call(&app, "GET", &format!("/memories/bob/{who}"), None).await;
        assert!(mem["entries"].as_array().unwrap().is_empty());
    }
}

#[tokio::test]
async fn list_purge_and_not_found() {
    let app = app();
    call(&app, "POST", "/sessions/carol", None).await;
    for line in ["我是一名画家", "我养了一只猫", "我住在北京"] {
        say(&app, "carol", line).await;
    }
    let (_, mem) = call(&app, "GET", "/memories/carol/user", None).await;
    assert_eq!(mem["entries"].as_array().unwrap().len(), 3);
    let (status, _) = call(&app, "DELETE", "/memories/carol", None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (_, mem) = call(&app, "GET", "/memories/carol/user", None).await;
    assert!(mem["entries"].as_array().unwrap().is_empty());

    assert_eq!(call(&app, "GET", "/memories/nobody/user", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "DELETE", "/memories/nobody", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(say(&app, "nobody", "你好").await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/memories/carol/robot", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "POST", "/sessions/..", None).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn generator_outage_is_502_without_writes() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let engine = Engine::reference(EngineConfig::default())
        .unwrap()
        .with_generator(Arc::new(HttpGenerator::new(format!("http://127.0.0.1:{port}/generate"))));
    let app = app_with(engine, None);
    call(&app, "POST", "/sessions/dave", None).await;
    let (status, body) = say(&app, "dave", "我是一名画家").await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert!(body["error"].as_str().unwrap().contains("generator"));
    let (_, mem) = call(&app, "GET", "/memories/dave/user", None).await;
    assert!(mem["entries"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn memories_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::reference(EngineConfig::default()).unwrap();
    {
        let app = app_with(engine.clone(), Some(dir.path().to_path_buf()));
        call(&app, "POST", "/sessions/erin", None).await;
        say(&app, "erin", "我是一名画家，我养了一只猫。").await;
    }
    let wal = dir.path().join("erin").join("wal.log");
    assert!(wal.exists());
    let app = app_with(engine, Some(dir.path().to_path_buf()));
    let (status, mem) = call(&app, "GET", "/memories/erin/user", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(mem["entries"].as_array().unwrap().len(), 2);
    call(&app, "DELETE", "/memories/erin", None).await;
    assert!(std::fs::read(&wal).map_or(true, |b| b.is_empty()));
    assert!(!dir.path().join("erin").join("user.mem").exists());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn users_are_isolated_under_concurrency() {
    let app = app();
    let users: Vec<String> = (0..8).map(|i| format!("u{i}")).collect();
    for u in &users {
        call(&app, "POST", &format!("/sessions/{u}"), None).await;
    }
    let tasks: Vec<_> = users
        .iter()
        .map(|u| {
            let (app, u) = (app.clone(), u.clone());
            tokio::spawn(async move {
                for line in ["我是一名画家", "我养了一只猫", "我住在北京"] {
                    assert_eq!(say(&app, &u, line).await.0, StatusCode::OK);
                }
            })
        })
        .collect();
    for t in tasks {
        t.await.unwrap();
    }
    for u in &users {
        let (_, mem) = call(&app, "GET", &format!("/memories/{u}/user"), None).await;
        let entries = mem["entries"].as_array().unwrap();
        assert_eq!(entries.len(), 3);
        assert!(entries.iter().all(|e| e["persona"]["session_id"] == format!("{u}-s1")));
    }
}
