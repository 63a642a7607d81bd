use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use genclass_service::{router, AnnotationRecord, Event, Store};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        Self { dir }
    }

    fn data(&self) -> std::path::PathBuf {
        self.dir.path().join("data")
    }

    fn store(&self) -> Arc<Store> {
        Arc::new(Store::open(self.data(), self.dir.path().join("images")).unwrap())
    }

    fn image(&self, name: &str) -> String {
        let p = self.dir.path().join("images").join(name);
        std::fs::write(&p, format!("bytes-of-{name}")).unwrap();
        name.to_string()
    }

    /// Items i0..i{n-1}; even indices are real, odd synthetic with
    /// intended class "a" or "b".
    fn turing_spec(&self, id: &str, n: usize) -> Value {
        let items: Vec<Value> = (0..n)
            .map(|i| {
                json!({
                    "item_id": format!("{id}-i{i}"),
                    "image_path": self.image(&format!("{id}-{i}.png")),
                    "truth_is_real": i % 2 == 0,
                    "intended_class": if i % 2 == 0 { Value::Null } else { json!(if i % 4 == 1 { "a" } else { "b" }) },
                })
            })
            .collect();
        json!({ "study_id": id, "items": items, "mode": "turing", "classes": ["a", "b"] })
    }
}

async fn call(store: &Arc<Store>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = router(store.clone()).oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, v)
}

async fn session(store: &Arc<Store>, study: &str, rater: &str) -> Value {
    let (s, v) = call(store, "POST", &format!("/studies/{study}/sessions"), Some(json!({ "rater_id": rater }))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["schema_version"], 1);
    v
}

async fn next(store: &Arc<Store>, token: &str) -> Value {
    let (s, v) = call(store, "GET", &format!("/sessions/{token}/next"), None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["schema_version"], 1);
    v
}

async fn judge(store: &Arc<Store>, token: &str, body: Value) -> (StatusCode, Value) {
    let (s, v) = call(store, "POST", &format!("/sessions/{token}/judgments"), Some(body)).await;
    assert_eq!(v["schema_version"], 1, "{v}");
    (s, v)
}

fn item_index(item_id: &str) -> usize {
    item_id.rsplit('i').next().unwrap().parse().unwrap()
}

#[tokio::test]
async fn scripted_turing_session_matches_hand_computation() {
    let env = Env::new();
    let store = env.store();
    let (s, v) = call(&store, "POST", "/studies", Some(env.turing_spec("t1", 10))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["n_items"], 10);

    let info = session(&store, "t1", "alice").await;
    let token = info["token"].as_str().unwrap().to_string();
    // Guesses "real" for items 0..6 and "synthetic" for 6..10; class "a"
    // always.
    let mut expected_correct = 0;
    let mut real_hits = 0;
    let mut synth_hits = 0;
    let mut agree = 0;
    for step in 0..10 {
        let n = next(&store, &token).await;
        assert_eq!(n["position"], step);
        assert!(n.get("truth_is_real").is_none());
        let item = n["item_id"].as_str().unwrap().to_string();
        let i = item_index(&item);
        let guess_real = i < 6;
        let truth = i % 2 == 0;
        if guess_real == truth {
            expected_correct += 1;
        }
        if truth && guess_real {
            real_hits += 1;
        }
        if !truth && !guess_real {
            synth_hits += 1;
        }
        if !truth && i % 4 == 1 {
            agree += 1;
        }
        let (s, ack) = judge(
            &store,
            &token,
            json!({ "item_id": item, "guessed_real": guess_real, "guessed_class": "a" }),
        )
        .await;
        assert_eq!(s, StatusCode::OK, "{ack}");
        assert_eq!(ack["status"], "stored");
        assert_eq!(ack["answered"], step + 1);
    }
    assert_eq!(next(&store, &token).await["done"], true);

    let (s, v) = call(&store, "GET", "/studies/t1/report", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"]["kind"], "study_open");
    let (s, v) = call(&store, "POST", "/studies/t1/close", None).await;
    assert_eq!((s, v["closed"].clone()), (StatusCode::OK, json!(true)));

    let (s, v) = call(&store, "GET", "/studies/t1/report", None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let r = &v["report"];
    assert_eq!(r["mode"], "turing");
    assert_eq!(r["n"], 10);
    assert_eq!(r["n_correct"], expected_correct);
    assert_eq!(r["accuracy"], expected_correct as f64 / 10.0);
    assert_eq!(r["sensitivity"], real_hits as f64 / 5.0);
    assert_eq!(r["specificity"], synth_hits as f64 / 5.0);
    assert_eq!(r["agreement_rate"], agree as f64 / 5.0);
}

#[tokio::test]
async fn duplicates_conflicts_and_order_are_enforced() {
    let env = Env::new();
    let store = env.store();
    call(&store, "POST", "/studies", Some(env.turing_spec("t2", 4))).await;
    let info = session(&store, "t2", "bob").await;
    let token = info["token"].as_str().unwrap();
    let order: Vec<String> = serde_json::from_value(info["item_order"].clone()).unwrap();

    let (s, v) = judge(&store, token, json!({ "item_id": order[1], "guessed_real": true, "guessed_class": "a" })).await;
    assert_eq!((s, v["error"]["kind"].as_str()), (StatusCode::CONFLICT, Some("out_of_order")));

    let rec = json!({ "item_id": order[0], "guessed_real": true, "guessed_class": "a" });
    assert_eq!(judge(&store, token, rec.clone()).await.1["status"], "stored");
    let (s, v) = judge(&store, token, rec).await;
    assert_eq!((s, v["status"].as_str()), (StatusCode::OK, Some("duplicate")));
    let (s, v) = judge(&store, token, json!({ "item_id": order[0], "guessed_real": false, "guessed_class": "a" })).await;
    assert_eq!((s, v["error"]["kind"].as_str()), (StatusCode::CONFLICT, Some("conflict")));
    assert_eq!(store.records("t2").unwrap()["bob"].len(), 1);

    let (s, _) = judge(&store, token, json!({ "item_id": order[1], "guessed_class": "a" })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = judge(&store, token, json!({ "item_id": order[1], "guessed_real": true, "guessed_class": "zebra" })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = judge(&store, token, json!({ "item_id": order[1], "bogus": 1 })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{v}");

    let (s, _) = call(&store, "GET", "/sessions/nope/next", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, v) = call(&store, "POST", "/studies/missing/sessions", Some(json!({ "rater_id": "x" }))).await;
    assert_eq!((s, v["schema_version"].clone()), (StatusCode::NOT_FOUND, json!(1)));
}

#[tokio::test]
async fn reload_resumes_at_the_correct_item() {
    let env = Env::new();
    let token;
    let expected;
    {
        let store = env.store();
        call(&store, "POST", "/studies", Some(env.turing_spec("t3", 6))).await;
        let info = session(&store, "t3", "carol").await;
        token = info["token"].as_str().unwrap().to_string();
        for _ in 0..3 {
            let item = next(&store, &token).await["item_id"].clone();
            judge(&store, &token, json!({ "item_id": item, "guessed_real": false, "guessed_class": "b" })).await;
        }
        expected = next(&store, &token).await;
    }
    let store = env.store();
    let again = session(&store, "t3", "carol").await;
    assert_eq!(again["token"], token.as_str());
    assert_eq!(again["answered"], 3);
    assert_eq!(next(&store, &token).await, expected);
}

#[tokio::test]
async fn crash_after_durable_write_keeps_exactly_one_record() {
    let env = Env::new();
    let token;
    let item;
    {
        let store = env.store();
        call(&store, "POST", "/studies", Some(env.turing_spec("t4", 4))).await;
        let info = session(&store, "t4", "dan").await;
        token = info["token"].as_str().unwrap().to_string();
        item = info["item_order"][0].as_str().unwrap().to_string();
        let record = AnnotationRecord {
            item_id: item.clone(),
            guessed_real: Some(true),
            guessed_class: "a".into(),
            confidence: None,
            timestamp: None,
        };
        store
            .append_unacknowledged(
                "t4",
                &Event::Judgment {
                    rater_id: "dan".into(),
                    record,
                    received_ms: 0,
                },
            )
            .unwrap();
        // A second, torn write that never completed.
        let mut f = std::fs::OpenOptions::new().append(true).open(store.log_path("t4")).unwrap();
        std::io::Write::write_all(&mut f, b"{\"event\":\"judgment\",\"rater_id\":\"da").unwrap();
    }
    let store = env.store();
    assert_eq!(store.records("t4").unwrap()["dan"].len(), 1);
    let (s, v) = judge(&store, &token, json!({ "item_id": item, "guessed_real": true, "guessed_class": "a" })).await;
    assert_eq!((s, v["status"].as_str()), (StatusCode::OK, Some("duplicate")));
    let second = next(&store, &token).await["item_id"].clone();
    assert_eq!(judge(&store, &token, json!({ "item_id": second, "guessed_real": true, "guessed_class": "a" })).await.0, StatusCode::OK);
    let live = store.records("t4").unwrap();
    drop(store);
    assert_eq!(env.store().records("t4").unwrap(), live);
    let text = std::fs::read_to_string(env.data().join("t4.jsonl")).unwrap();
    assert!(text.ends_with('\n'));
    assert!(text.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));
}

#[tokio::test]
async fn permutations_are_per_rater_and_reproducible() {
    let env = Env::new();
    let store = env.store();
    call(&store, "POST", "/studies", Some(env.turing_spec("t5", 10))).await;
    let mut seen = std::collections::HashSet::new();
    for r in 0..100 {
        let info = session(&store, "t5", &format!("rater{r}")).await;
        assert!(seen.insert(info["item_order"].to_string()), "collision at rater {r}");
    }
    let a = session(&store, "t5", "rater7").await;
    assert_eq!(a, session(&store, "t5", "rater7").await);
}

#[tokio::test]
async fn invalid_studies_are_rejected() {
    let env = Env::new();
    let store = env.store();
    let empty = json!({ "study_id": "e", "items": [], "mode": "turing", "classes": ["a"] });
    assert_eq!(call(&store, "POST", "/studies", Some(empty)).await.0, StatusCode::BAD_REQUEST);
    let mut unbalanced = env.turing_spec("u", 4);
    unbalanced["items"][1]["truth_is_real"] = json!(true);
    assert_eq!(call(&store, "POST", "/studies", Some(unbalanced)).await.0, StatusCode::BAD_REQUEST);
    let spec = env.turing_spec("ok", 2);
    assert_eq!(call(&store, "POST", "/studies", Some(spec.clone())).await.0, StatusCode::CREATED);
    assert_eq!(call(&store, "POST", "/studies", Some(spec.clone())).await.0, StatusCode::CREATED);
    let mut changed = spec;
    changed["classes"] = json!(["a", "b", "c"]);
    assert_eq!(call(&store, "POST", "/studies", Some(changed)).await.0, StatusCode::CONFLICT);
    let (s, v) = call(&store, "POST", "/studies", Some(json!({ "nonsense": true }))).await;
    assert_eq!((s, v["schema_version"].clone()), (StatusCode::BAD_REQUEST, json!(1)));
}

#[tokio::test]
async fn labelling_report_counts_pairs_and_votes() {
    let env = Env::new();
    let store = env.store();
    let items: Vec<Value> = (0..5)
        .map(|i| json!({ "item_id": format!("l-i{i}"), "image_path": env.image(&format!("l{i}.png")) }))
        .collect();
    let spec = json!({ "study_id": "lab", "items": items, "mode": "labelling", "classes": ["a", "b"] });
    assert_eq!(call(&store, "POST", "/studies", Some(spec)).await.0, StatusCode::CREATED);
    for (rater, years, label, conf) in [("junior", 2.0, "a", "High"), ("senior", 30.0, "b", "Low")] {
        let (_, info) = call(
            &store,
            "POST",
            "/studies/lab/sessions",
            Some(json!({ "rater_id": rater, "seniority_years": years })),
        )
        .await;
        let token = info["token"].as_str().unwrap();
        for item in info["item_order"].as_array().unwrap() {
            let (s, v) = judge(&store, token, json!({ "item_id": item, "guessed_class": label })).await;
            assert_eq!(s, StatusCode::BAD_REQUEST, "{v}");
            let (s, _) = judge(&store, token, json!({ "item_id": item, "guessed_class": label, "confidence": conf })).await;
            assert_eq!(s, StatusCode::OK);
        }
    }
    call(&store, "POST", "/studies/lab/close", None).await;
    let (s, v) = call(&store, "GET", "/studies/lab/report", None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let r = &v["report"];
    assert_eq!(r["mode"], "labelling");
    assert_eq!(r["n_records"], 10);
    assert_eq!(r["confidence_matrix"]["total"], 5);
    // High is index 0, Low index 2.
    assert_eq!(r["confidence_matrix"]["counts"][0][2], 5);
    for i in 0..5 {
        assert_eq!(r["majority_votes"][format!("l-i{i}")], "b");
    }
}

#[tokio::test]
async fn all_synthetic_guesses_and_image_endpoint() {
    let env = Env::new();
    let store = env.store();
    call(&store, "POST", "/studies", Some(env.turing_spec("t6", 4))).await;
    let info = session(&store, "t6", "eve").await;
    let token = info["token"].as_str().unwrap();
    for item in info["item_order"].as_array().unwrap() {
        judge(&store, token, json!({ "item_id": item, "guessed_real": false, "guessed_class": "a" })).await;
    }
    let (s, _) = judge(&store, token, json!({ "item_id": "t6-i0", "guessed_real": true, "guessed_class": "a" })).await;
    assert_eq!(s, StatusCode::CONFLICT);
    call(&store, "POST", "/studies/t6/close", None).await;
    let (_, v) = call(&store, "GET", "/studies/t6/report", None).await;
    assert_eq!(v["report"]["specificity"], 1.0);
    assert_eq!(v["report"]["sensitivity"], 0.0);

    let req = Request::builder().uri("/items/t6-i1/image").body(Body::empty()).unwrap();
    let res = router(store.clone()).oneshot(req).await.unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    assert_eq!(res.headers()["content-type"], "image/png");
    assert_eq!(res.headers()["x-schema-version"], "1");
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&bytes[..], b"bytes-of-t6-1.png");
    let (s, _) = call(&store, "GET", "/items/none/image", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, v) = call(&store, "POST", "/studies/t6/sessions", Some(json!({ "rater_id": "late" }))).await;
    assert_eq!((s, v["error"]["kind"].as_str()), (StatusCode::CONFLICT, Some("study_closed")));
    assert!(Path::new(&env.data().join("t6.jsonl")).exists());
}
