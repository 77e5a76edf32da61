use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use deid_core::annotation::{iaa_report, write_corpus, AnnotationStore};
use deid_core::ensemble::single_model_ensemble;
use deid_core::taggers::TaggerModel;
use deid_core::text::{PiiCategory, PiiSpan, RawDocument};
use deid_service::{iaa_for, load_ensembles, router, AppState, SCHEMA_VERSION};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

const NOTE: &str = "Patient: John Smith MRN: 1234567\nPh: 9123 4567 after hours";

fn fixture() -> (TempDir, Arc<AppState>) {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    let docs = vec![
        RawDocument { doc_id: "d1".into(), text: NOTE.into() },
        RawDocument { doc_id: "d2".into(), text: "Seen by Dr Lee today.".into() },
    ];
    std::fs::write(&corpus, write_corpus(&docs)).unwrap();

    let models = dir.path().join("models");
    std::fs::create_dir(&models).unwrap();
    let bank = vec![TaggerModel::pattern()];
    bank[0].save(&models.join("pattern.model.json")).unwrap();
    single_model_ensemble(&bank, "pattern").save(&models.join("best.ensemble.json")).unwrap();

    let mut state = AppState::new(AnnotationStore::open(&corpus, dir.path().join("ann.jsonl")).unwrap());
    state.ensembles = load_ensembles(&models).unwrap();
    state.sets.insert("test".into(), vec!["d1".into()]);
    (dir, Arc::new(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value, String) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    (status, serde_json::from_str(&text).unwrap_or(Value::Null), text)
}

fn spans_json(spans: &[PiiSpan]) -> Value {
    serde_json::to_value(spans).unwrap()
}

#[tokio::test]
async fn list_and_fetch() {
    let (_d, st) = fixture();
    let app = router(st, None);
    let (s, v, _) = call(&app, "GET", "/api/docs", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["schema_version"], SCHEMA_VERSION);
    assert_eq!(v["docs"].as_array().unwrap().len(), 2);
    assert_eq!(v["docs"][0]["revision"], 0);

    let (s, v, _) = call(&app, "GET", "/api/docs/d1", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["text"], NOTE);
    assert_eq!(v["tokens"][0][2]["surface"], "John");

    let (s, v, _) = call(&app, "GET", "/api/docs/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], "unknown_document");
    assert_eq!(v["schema_version"], SCHEMA_VERSION);
}

#[tokio::test]
async fn upload_then_duplicate() {
    let (_d, st) = fixture();
    let app = router(st, None);
    let body = json!({"doc_id": "d3", "text": "new note"});
    assert_eq!(call(&app, "POST", "/api/docs", Some(body.clone())).await.0, StatusCode::CREATED);
    assert_eq!(call(&app, "POST", "/api/docs", Some(body)).await.0, StatusCode::CONFLICT);
    let (_, v, _) = call(&app, "GET", "/api/docs", None).await;
    assert_eq!(v["docs"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn save_conflict_and_validation() {
    let (_d, st) = fixture();
    let app = router(st, None);
    let person = PiiSpan::new(9, 19, PiiCategory::Person);
    let body = json!({"revision": 0, "spans": spans_json(&[person])});
    let (s, v, _) = call(&app, "PUT", "/api/docs/d1/spans", Some(body.clone())).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["revision"], 1);

    // stale revision
    let (s, v, _) = call(&app, "PUT", "/api/docs/d1/spans", Some(body)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"]["code"], "revision_conflict");
    assert_eq!(v["error"]["current_revision"], 1);

    // span crossing a line break
    let bad = json!({"revision": 1, "spans": spans_json(&[PiiSpan::new(28, 40, PiiCategory::Idn)])});
    assert_eq!(call(&app, "PUT", "/api/docs/d1/spans", Some(bad)).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let confirm = json!({"revision": 1, "spans": spans_json(&[person]), "confirm": true});
    let (s, v, _) = call(&app, "PUT", "/api/docs/d1/spans", Some(confirm)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["revision"], 2);
    let (_, v, _) = call(&app, "GET", "/api/docs/d1", None).await;
    assert_eq!(v["status"], "confirmed");
}

#[tokio::test]
async fn pretag_proposes_machine_spans() {
    let (_d, st) = fixture();
    let app = router(st.clone(), None);
    let (s, v, _) = call(&app, "POST", "/api/docs/d1/pretag", Some(json!({"ensemble_id": "best"}))).await;
    assert_eq!(s, StatusCode::OK);
    let spans: Vec<PiiSpan> = serde_json::from_value(v["spans"].clone()).unwrap();
    assert!(spans.iter().any(|s| s.category == PiiCategory::Idn && NOTE.chars().skip(s.start).take(s.len()).collect::<String>() == "1234567"));
    assert!(spans.iter().all(|s| s.source == deid_core::text::SpanSource::Machine));

    let (_, v, _) = call(&app, "GET", "/api/docs?annotator=annotator1", None).await;
    assert_eq!(v["docs"][0]["pretag_available"], true);

    assert_eq!(call(&app, "POST", "/api/docs/d1/pretag", Some(json!({"ensemble_id": "nope"}))).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "POST", "/api/docs/zz/pretag", Some(json!({"ensemble_id": "best"}))).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn export_and_iaa_match_library() {
    let (_d, st) = fixture();
    let app = router(st.clone(), None);
    let a = [PiiSpan::new(9, 19, PiiCategory::Person), PiiSpan::new(25, 32, PiiCategory::Idn)];
    let b = [PiiSpan::new(9, 19, PiiCategory::Person)];
    for (who, spans) in [("a1", &a[..]), ("a2", &b[..])] {
        let body = json!({"revision": 0, "spans": spans_json(spans), "confirm": true});
        let (s, _, _) = call(&app, "PUT", &format!("/api/docs/d1/spans?annotator={who}"), Some(body)).await;
        assert_eq!(s, StatusCode::OK);
    }

    let (s, v, _) = call(&app, "GET", "/api/iaa?a1=a1&a2=a2&set=test", None).await;
    assert_eq!(s, StatusCode::OK);
    let doc = st.store.document("d1").unwrap();
    let (ra, rb) = (st.store.record("d1", "a1").unwrap(), st.store.record("d1", "a2").unwrap());
    let direct = iaa_report(&[(doc.as_ref(), &ra, &rb)]).unwrap();
    assert_eq!(v["kappa_all_tokens"].as_f64().unwrap(), direct.kappa_all_tokens);
    assert_eq!(v["f1_strict"].as_f64().unwrap(), direct.f1_strict);
    assert_eq!(iaa_for(&st, "a1", "a2", Some("test")).unwrap(), direct);

    assert_eq!(call(&app, "GET", "/api/iaa?a1=a1&a2=ghost", None).await.0, StatusCode::NOT_FOUND);
    // d2 has no paired annotations
    let (s, v, _) = call(&app, "GET", "/api/iaa?a1=a1&a2=a2&set=all", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["documents"], 1);

    let (s, _, text) = call(&app, "GET", "/api/export/bio?set=test&annotator=a1", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(text, st.store.export_bio(&["d1".to_string()], "a1", false).unwrap());
    assert!(text.contains("John\tB-PERSON"));
    assert_eq!(call(&app, "GET", "/api/export/bio?set=missing", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_saves_accept_one_writer_per_revision() {
    let (_d, st) = fixture();
    let app = router(st.clone(), None);
    let mut handles = Vec::new();
    for i in 0..16 {
        let app = app.clone();
        handles.push(tokio::spawn(async move {
            let spans = if i % 2 == 0 { vec![PiiSpan::new(9, 13, PiiCategory::Person)] } else { vec![] };
            call(&app, "PUT", "/api/docs/d2/spans", Some(json!({"revision": 0, "spans": spans_json(&spans)}))).await.0
        }));
    }
    let mut ok = 0;
    for h in handles {
        match h.await.unwrap() {
            StatusCode::OK => ok += 1,
            StatusCode::CONFLICT => {}
            other => panic!("unexpected status {other}"),
        }
    }
    assert_eq!(ok, 1);
    assert_eq!(st.store.record("d2", "annotator1").unwrap().revision, 1);
}
