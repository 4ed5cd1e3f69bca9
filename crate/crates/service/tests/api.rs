use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use themetopic_core::corpus::write_jsonl;
use themetopic_core::synth::{planted_corpus, PlantedSpec};
use themetopic_service::{router, Storage, Workbench, REQUEST_ID};
use tower::ServiceExt;

const CORPUS: &str = r#"{"doc_id":"d1","thread_id":"t1","text":"dinner with my boss after work was awkward","geo":[40.0,-73.0]}
{"doc_id":"d2","thread_id":"t1","text":"a first date over dinner at the new place"}
{"doc_id":"d3","thread_id":"t2","text":"my boss wants the report before the meeting","geo":[41.0,-74.0]}
{"doc_id":"d4","thread_id":"t2","text":"late night work on the report again"}
{"doc_id":"d5","thread_id":"t3","text":"date night dinner and a movie"}
{"doc_id":"d6","thread_id":"t3","text":"the meeting with my boss ran late at work"}
"#;

struct Client {
    app: Router,
    wb: Arc<Workbench>,
}

impl Client {
    fn new(wb: Workbench) -> Self {
        let wb = Arc::new(wb);
        Self {
            app: router(Arc::clone(&wb)),
            wb,
        }
    }

    async fn send(&self, method: Method, uri: &str, body: Option<Body>, request_id: Option<&str>) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(format!("/api/v1{uri}"));
        if let Some(id) = request_id {
            req = req.header(REQUEST_ID, id);
        }
        let req = match body {
            Some(b) => req.header("content-type", "application/json").body(b),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        (status, value)
    }

    async fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.send(Method::GET, uri, None, None).await
    }

    async fn post(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        self.send(Method::POST, uri, Some(Body::from(body.to_string())), None).await
    }

    async fn setup(&self) {
        let (s, _) = self.post("/projects", json!({"name": "Demo", "project_id": "demo"})).await;
        assert_eq!(s, StatusCode::CREATED);
        let (s, v) = self
            .send(Method::POST, "/projects/demo/documents:import", Some(Body::from(CORPUS)), None)
            .await;
        assert_eq!(s, StatusCode::OK, "{v}");
        assert_eq!(v["documents"], 6);
    }

    async fn train(&self, overrides: Value) -> Value {
        let (s, job) = self.post("/projects/demo/train", overrides).await;
        assert_eq!(s, StatusCode::ACCEPTED, "{job}");
        let id = job["job_id"].as_u64().unwrap();
        let done = self.wb.wait_for_job("demo", id).await.unwrap();
        serde_json::to_value(done).unwrap()
    }
}

fn quick() -> Value {
    json!({"k_free": 1, "rng_seed": 3, "max_em_iters": 30})
}

#[tokio::test(flavor = "multi_thread")]
async fn create_and_list_projects() {
    let c = Client::new(Workbench::in_memory());
    let (s, v) = c.post("/projects", json!({"name": "Field Notes"})).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["project_id"], "field-notes");
    let (_, v2) = c.post("/projects", json!({"name": "Field Notes"})).await;
    assert_eq!(v2["project_id"], "field-notes-2");

    let (s, v) = c.post("/projects", json!({"name": "x", "project_id": "field-notes"})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "validation");
    let (s, _) = c.post("/projects", json!({"name": "x", "project_id": "../etc"})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, list) = c.get("/projects").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(list.as_array().unwrap().len(), 2);
    let (s, one) = c.get("/projects/field-notes").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(one["job_status"]["status"], "idle");
    let (s, err) = c.get("/projects/nope").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(err["code"], "not_found");
}

#[tokio::test(flavor = "multi_thread")]
async fn import_route_and_parse_errors() {
    let c = Client::new(Workbench::in_memory());
    c.setup().await;
    let bad = "{\"doc_id\":\"d9\",\"text\":\"fine\"}\nnot json\n";
    let (s, v) = c
        .send(Method::POST, "/projects/demo/documents:import", Some(Body::from(bad)), None)
        .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "parse_error");
    assert!(v["message"].as_str().unwrap().contains('2'), "{v}");

    let dup = "{\"doc_id\":\"d1\",\"text\":\"again\"}\n";
    let (s, v) = c
        .send(Method::POST, "/projects/demo/documents:import", Some(Body::from(dup)), None)
        .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "duplicate_id");
    let (_, v) = c.get("/projects/demo").await;
    assert_eq!(v["documents"], 6);
}

#[tokio::test(flavor = "multi_thread")]
async fn document_search_filters() {
    let c = Client::new(Workbench::in_memory());
    c.setup().await;
    let ids = |v: &Value| -> Vec<String> {
        v["items"].as_array().unwrap().iter().map(|h| h["doc_id"].as_str().unwrap().to_owned()).collect()
    };
    let (s, v) = c.get("/projects/demo/documents?terms=Boss").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ids(&v), ["d1", "d3", "d6"]);
    let (_, v) = c.get("/projects/demo/documents?terms=boss,work").await;
    assert_eq!(ids(&v), ["d1", "d6"]);
    let (_, v) = c.get("/projects/demo/documents?thread=t2").await;
    assert_eq!(ids(&v), ["d3", "d4"]);
    let (_, v) = c.get("/projects/demo/documents?bbox=39.5,-73.5,40.5,-72.5").await;
    assert_eq!(ids(&v), ["d1"]);
    let (_, v) = c.get("/projects/demo/documents?limit=2&offset=2").await;
    assert_eq!(v["total"], 6);
    assert_eq!(ids(&v), ["d3", "d4"]);
    let (s, v) = c.get("/projects/demo/documents?bbox=1,2,3").await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "validation");
    let (s, v) = c.get("/projects/demo/documents?topic=0").await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["code"], "stale_model");
}

#[tokio::test(flavor = "multi_thread")]
async fn model_views_need_a_snapshot() {
    let c = Client::new(Workbench::in_memory());
    c.setup().await;
    for uri in [
        "/projects/demo/topics",
        "/projects/demo/topics/0/top-words",
        "/projects/demo/topics/0/documents",
    ] {
        let (s, v) = c.get(uri).await;
        assert_eq!(s, StatusCode::CONFLICT, "{uri}");
        assert_eq!(v["code"], "stale_model");
    }
    let (s, v) = c.get("/projects/demo/documents/d1").await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["snapshot_version"].is_null());
    assert_eq!(v["topics"], json!([]));
    assert_eq!(v["annotations"], json!([]));
    let (s, _) = c.get("/projects/demo/documents/zzz").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn coding_then_training_shows_every_origin() {
    let c = Client::new(Workbench::in_memory());
    c.setup().await;
    // "dinner" in d1 starts at 0
    let (s, v) = c
        .post("/projects/demo/documents/d1/codes", json!({"span": {"start": 0, "end": 6}, "label": "Dating"}))
        .await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    let dating_code = v["code"]["code_id"].as_u64().unwrap();
    let dating_theme = v["theme"]["theme_id"].as_u64().unwrap();
    assert_eq!(v["annotation"]["origin"], "manual");
    // "boss" in d3 at 3..7
    let (s, v) = c
        .post("/projects/demo/documents/d3/codes", json!({"span": {"start": 3, "end": 7}, "label": "Work"}))
        .await;
    assert_eq!(s, StatusCode::CREATED);
    let work_theme = v["theme"]["theme_id"].as_u64().unwrap();

    let (s, v) = c
        .post("/projects/demo/documents/d1/codes", json!({"span": {"start": 6, "end": 7}, "label": "x"}))
        .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "empty_selection");
    let (s, v) = c
        .post("/projects/demo/documents/d1/codes", json!({"span": {"start": 3, "end": 3}, "label": "x"}))
        .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "span_out_of_range");

    let job = c.train(json!({"k_free": 1, "rng_seed": 3, "max_em_iters": 50, "tau_token": 0.3})).await;
    assert_eq!(job["state"], "done", "{job}");
    assert_eq!(job["version"], 1);
    assert!(job["trace"]["elbo"].as_array().unwrap().len() >= 2);

    let (_, topics) = c.get("/projects/demo/topics?n=3").await;
    let topics = topics.as_array().unwrap();
    assert_eq!(topics.len(), 3);
    assert_eq!(topics[0]["theme_id"], dating_theme);
    assert_eq!(topics[1]["theme_id"], work_theme);
    assert_eq!(topics[0]["words"].as_array().unwrap().len(), 3);

    let (_, themes) = c.get("/projects/demo/themes").await;
    assert_eq!(themes[0]["topic"], 0);

    let (_, doc) = c.get("/projects/demo/documents/d5").await;
    assert_eq!(doc["snapshot_version"], 1);
    let shares: f64 = doc["topics"].as_array().unwrap().iter().map(|t| t["share"].as_f64().unwrap()).sum();
    assert!((shares - 1.0).abs() < 1e-9);
    let autos: Vec<&Value> = doc["annotations"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|a| a["origin"] == "auto")
        .collect();
    let auto = autos
        .iter()
        .find(|a| a["theme_id"] == dating_theme)
        .expect("dating suggested for d5");
    assert_eq!(auto["version"], 1);
    assert!(!auto["highlights"].as_array().unwrap().is_empty());

    let uri = format!("/projects/demo/documents/d5/codes/{}", auto["code_id"]);
    let (s, v) = c.send(Method::DELETE, &uri, None, None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["origin"], "deleted");
    let (_, doc) = c.get("/projects/demo/documents/d5").await;
    let origins: Vec<&str> = doc["annotations"].as_array().unwrap().iter().map(|a| a["origin"].as_str().unwrap()).collect();
    assert!(origins.contains(&"deleted"));
    let deleted = doc["annotations"].as_array().unwrap().iter().find(|a| a["origin"] == "deleted").unwrap();
    assert!(!deleted["words"].as_array().unwrap().is_empty());
    assert!(!deleted["highlights"].as_array().unwrap().is_empty());

    let (_, doc1) = c.get("/projects/demo/documents/d1").await;
    let first = &doc1["annotations"][0];
    assert_eq!(first["origin"], "manual");
    assert_eq!(first["code_id"], dating_code);
    assert_eq!(first["span"], json!({"start": 0, "end": 6}));

    let (s, exp) = c.get(&format!("/projects/demo/documents/d1/explain/{dating_theme}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(exp[0]["word"], "dinner");
    let (s, _) = c.get("/projects/demo/documents/d1/explain/999").await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, ranked) = c.get("/projects/demo/topics/0/documents?n=2").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ranked.as_array().unwrap().len(), 2);
    let (s, v) = c.get("/projects/demo/topics/9/top-words").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "topic_out_of_range");

    let (s, page) = c.get("/projects/demo/documents?topic=0&limit=6").await;
    assert_eq!(s, StatusCode::OK);
    let scores: Vec<f64> = page["items"].as_array().unwrap().iter().map(|h| h["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    let retract = format!("/projects/demo/documents/d1/codes/{dating_code}?start=0&end=6");
    let (s, _) = c.send(Method::DELETE, &retract, None, None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = c.send(Method::DELETE, &retract, None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "not_found");
    let (s, _) = c
        .send(Method::DELETE, &format!("/projects/demo/documents/d1/codes/{dating_code}?start=0"), None, None)
        .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread")]
async fn theme_editing() {
    let c = Client::new(Workbench::in_memory());
    c.setup().await;
    let (_, a) = c
        .post("/projects/demo/documents/d1/codes", json!({"span": {"start": 0, "end": 6}, "label": "Dinner"}))
        .await;
    let (_, b) = c
        .post("/projects/demo/documents/d2/codes", json!({"span": {"start": 8, "end": 12}, "label": "Date"}))
        .await;
    let theme_a = a["theme"]["theme_id"].as_u64().unwrap();
    let code_b = b["code"]["code_id"].as_u64().unwrap();

    let (s, v) = c
        .send(
            Method::PATCH,
            &format!("/projects/demo/themes/{theme_a}"),
            Some(Body::from(json!({"name": "Romance"}).to_string())),
            None,
        )
        .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["name"], "Romance");

    let (s, v) = c.post(&format!("/projects/demo/themes/{theme_a}/merge"), json!({"code_id": code_b})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["codes"].as_array().unwrap().len(), 2);
    let (_, themes) = c.get("/projects/demo/themes").await;
    assert_eq!(themes.as_array().unwrap().len(), 1);

    let (s, v) = c.post(&format!("/projects/demo/themes/{theme_a}/merge"), json!({"code_id": code_b})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "self_merge");

    let (s, v) = c.post(&format!("/projects/demo/themes/{theme_a}/split"), json!({"code_id": code_b})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["remaining"]["codes"].as_array().unwrap().len(), 1);
    assert_eq!(v["new"]["codes"][0]["code_id"], code_b);

    let (s, v) = c.post(&format!("/projects/demo/themes/{theme_a}/split"), json!({"code_id": a["code"]["code_id"]})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "last_code");
}

#[tokio::test(flavor = "multi_thread")]
async fn retried_mutation_is_applied_once() {
    let c = Client::new(Workbench::in_memory());
    c.setup().await;
    let body = || Some(Body::from(json!({"span": {"start": 0, "end": 6}, "label": "Dating"}).to_string()));
    let first = c
        .send(Method::POST, "/projects/demo/documents/d1/codes", body(), Some("req-1"))
        .await;
    let again = c
        .send(Method::POST, "/projects/demo/documents/d1/codes", body(), Some("req-1"))
        .await;
    assert_eq!(first.0, StatusCode::CREATED);
    assert_eq!(first, again);
    let (_, doc) = c.get("/projects/demo/documents/d1").await;
    assert_eq!(doc["annotations"].as_array().unwrap().len(), 1);

    let uri = format!("/projects/demo/documents/d1/codes/{}?start=0&end=6", first.1["code"]["code_id"]);
    let undo = || c.send(Method::DELETE, &uri, None, Some("req-2"));
    let (s, _) = undo().await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = undo().await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = c
        .send(Method::DELETE, &uri, None, Some("req-9"))
        .await;
    assert_eq!(s, StatusCode::NOT_FOUND, "{v}");

    let (s, p) = c
        .send(Method::POST, "/projects", Some(Body::from(json!({"name": "Other"}).to_string())), Some("req-3"))
        .await;
    let (s2, p2) = c
        .send(Method::POST, "/projects", Some(Body::from(json!({"name": "Other"}).to_string())), Some("req-3"))
        .await;
    assert_eq!((s, &p), (s2, &p2));
    assert_eq!(c.wb.project_ids().len(), 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn one_job_at_a_time() {
    let c = Client::new(Workbench::in_memory());
    c.post("/projects", json!({"name": "big"})).await;
    let planted = planted_corpus(&PlantedSpec {
        num_docs: 2000,
        ..PlantedSpec::default()
    });
    let mut jsonl = Vec::new();
    write_jsonl(&planted.documents, &mut jsonl).unwrap();
    let (s, _) = c
        .send(Method::POST, "/projects/big/documents:import", Some(Body::from(jsonl)), None)
        .await;
    assert_eq!(s, StatusCode::OK);

    let endless = json!({"k_free": 4, "max_em_iters": 1_000_000, "conv_tol": 1e-300});
    let (s, job) = c.post("/projects/big/train", endless).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!(job["state"], "queued");
    let id = job["job_id"].as_u64().unwrap();

    let (s, v) = c.post("/projects/big/train", quick()).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["code"], "busy");
    let (s, v) = c
        .send(Method::POST, "/projects/big/documents:import", Some(Body::from("{\"text\":\"more\"}\n")), None)
        .await;
    assert_eq!(s, StatusCode::CONFLICT, "{v}");
    let (_, p) = c.get("/projects/big").await;
    assert_eq!(p["job_status"]["status"], "running");

    // coding stays available during training
    let (s, _) = c
        .post("/projects/big/documents/doc0000/codes", json!({"span": {"start": 0, "end": 4}, "label": "First"}))
        .await;
    assert_eq!(s, StatusCode::CREATED);

    while c.wb.job("big", id).unwrap().iterations < 2 {
        tokio::time::sleep(std::time::Duration::from_millis(5)).await;
    }
    let (_, running) = c.get(&format!("/projects/big/jobs/{id}")).await;
    assert_eq!(running["state"], "running");
    let (s, _) = c.send(Method::DELETE, &format!("/projects/big/jobs/{id}"), None, None).await;
    assert_eq!(s, StatusCode::OK);
    let done = serde_json::to_value(c.wb.wait_for_job("big", id).await.unwrap()).unwrap();
    assert_eq!(done["state"], "cancelled");
    let (s, v) = c.get("/projects/big/topics").await;
    assert_eq!(s, StatusCode::CONFLICT, "{v}");
    let (s, _) = c.get("/projects/big/jobs/999").await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (_, p) = c.get("/projects/big").await;
    assert_eq!(p["job_status"]["status"], "idle");
}

#[tokio::test(flavor = "multi_thread")]
async fn failed_job_keeps_the_published_snapshot() {
    let c = Client::new(Workbench::in_memory());
    c.setup().await;
    let ok = c.train(quick()).await;
    assert_eq!(ok["state"], "done");
    let (_, before) = c.get("/projects/demo/topics").await;

    let failed = c.train(json!({"k_free": 0})).await;
    assert_eq!(failed["state"], "failed", "{failed}");
    assert!(failed["message"].as_str().unwrap().contains("topic"));
    let (_, after) = c.get("/projects/demo/topics").await;
    assert_eq!(before, after);
    let (_, p) = c.get("/projects/demo").await;
    assert_eq!(p["job_status"]["status"], "failed");
    assert_eq!(p["snapshot_version"], 1);

    let (s, v) = c.post("/projects/demo/train", json!({"no_such_option": 1})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "validation");

    let again = c.train(quick()).await;
    assert_eq!(again["version"], 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn training_needs_documents() {
    let c = Client::new(Workbench::in_memory());
    c.post("/projects", json!({"name": "empty"})).await;
    let (s, v) = c.post("/projects/empty/train", Value::Null).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
}

#[tokio::test(flavor = "multi_thread")]
async fn state_survives_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let before = {
        let c = Client::new(Workbench::open(Storage::new(dir.path()).unwrap()).unwrap());
        c.setup().await;
        c.post("/projects/demo/documents/d1/codes", json!({"span": {"start": 0, "end": 6}, "label": "Dating"}))
            .await;
        assert_eq!(c.train(quick()).await["state"], "done");
        let (_, topics) = c.get("/projects/demo/topics").await;
        let (_, doc) = c.get("/projects/demo/documents/d2").await;
        (topics, doc)
    };
    let c = Client::new(Workbench::open(Storage::new(dir.path()).unwrap()).unwrap());
    let (_, topics) = c.get("/projects/demo/topics").await;
    let (_, doc) = c.get("/projects/demo/documents/d2").await;
    assert_eq!((topics, doc), before);
}
