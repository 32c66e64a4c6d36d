use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use qboost_core::pcm::{pcm_from_acr, AcrRatingTable};
use qboost_core::quadrature::gauss_hermite_rule;
use qboost_core::sampler::select_batch;
use qboost_core::scale::{fit, FitOptions, ModelKind};
use qboost_service::store::{snapshot_name, EVENTS_FILE};
use qboost_service::{router, AppState, BatchView, EstimateView, HistoryView, StudyStatus};
use serde_json::{json, Value};
use tower::ServiceExt;

const FIXTURE: &str = "observer_id,stimulus_id,rating\nobs1,a,5\nobs1,b,3\nobs1,c,3\nobs2,a,4\nobs2,b,4\nobs2,c,2\n";

async fn call(app: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    call_raw(app, method, uri, body.map(|b| b.to_string()), None).await
}

async fn call_raw(
    app: &AppState,
    method: &str,
    uri: &str,
    body: Option<String>,
    bearer: Option<&str>,
) -> (StatusCode, Value) {
    let mut req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json");
    if let Some(t) = bearer {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = req.body(Body::from(body.unwrap_or_default())).unwrap();
    let resp = router(app.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn create(app: &AppState, body: Value) -> StudyStatus {
    let (status, v) = call(app, "POST", "/studies", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    serde_json::from_value(v).unwrap()
}

async fn batch(app: &AppState, id: &str) -> BatchView {
    let (status, v) = call(app, "GET", &format!("/studies/{id}/batch"), None).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    serde_json::from_value(v).unwrap()
}

async fn status(app: &AppState, id: &str) -> StudyStatus {
    let (s, v) = call(app, "GET", &format!("/studies/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    serde_json::from_value(v).unwrap()
}

async fn respond(app: &AppState, id: &str, first: &str, second: &str, choice: &str, annotator: &str) -> (StatusCode, Value) {
    let body = json!({"pair": {"first": first, "second": second}, "choice": choice, "annotator": annotator});
    call(app, "POST", &format!("/studies/{id}/responses"), Some(body)).await
}

/// Deterministic scripted judgments: the lexicographically smaller id wins
/// for even annotators, the other one for odd annotators every third pair.
async fn answer_batch(app: &AppState, id: &str, annotators: usize) {
    let b = batch(app, id).await;
    for (k, p) in b.pairs.iter().enumerate() {
        for a in 0..annotators {
            let first_wins = (p.first < p.second) ^ (a % 2 == 1 && k % 3 == 0);
            let choice = if first_wins { "first" } else { "second" };
            let (s, v) = respond(app, id, &p.first, &p.second, choice, &format!("ann{a}")).await;
            assert_eq!(s, StatusCode::CREATED, "{v}");
        }
    }
}

fn study_body() -> Value {
    json!({"id": "demo", "stimulus_ids": ["a", "b", "c", "d", "e"], "acr_csv":
        "observer_id,stimulus_id,rating\no1,a,5\no1,b,4\no1,c,2\no1,d,3\no1,e,1\no2,a,4\no2,b,4\no2,c,3\no2,d,2\no2,e,2\n",
        "n_itr": 3, "seed": 11})
}

#[tokio::test]
async fn fixture_batch_matches_sampler() {
    let dir = tempfile::tempdir().unwrap();
    let app = AppState::open(dir.path()).unwrap();
    let st = create(&app, json!({"acr_csv": FIXTURE, "n_itr": 2})).await;
    assert_eq!(st.id, "study-0001");
    assert_eq!((st.iteration, st.n_pc, st.pcm_mass), (0, 2, 6.0));

    let table = AcrRatingTable::read_csv(FIXTURE.as_bytes()).unwrap();
    let pcm = pcm_from_acr(&table).unwrap();
    let est = fit(ModelKind::Case3, &pcm, &FitOptions::default(), None).unwrap();
    let want = select_batch(&est, 2, &gauss_hermite_rule(21).unwrap()).unwrap();

    let b = batch(&app, &st.id).await;
    assert_eq!(b.iteration, 1);
    assert_eq!(b.pairs.len(), 2);
    for (got, want) in b.pairs.iter().zip(&want.pairs) {
        assert_eq!((got.i, got.j, got.eig), (want.i, want.j, want.eig));
        let mut shown = [got.first.clone(), got.second.clone()];
        shown.sort();
        let ids = pcm.ids();
        let mut expect = [ids[want.i].clone(), ids[want.j].clone()];
        expect.sort();
        assert_eq!(shown, expect);
    }
}

#[tokio::test]
async fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let app = AppState::open(dir.path()).unwrap();
    assert_eq!(call(&app, "GET", "/studies/nope/batch", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "POST", "/studies/nope/advance", None).await.0, StatusCode::NOT_FOUND);
    let (s, _) = call_raw(&app, "POST", "/studies", Some("{not json".into()), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&app, "POST", "/studies", Some(json!({"stimulus_ids": ["a"]}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&app, "POST", "/studies", Some(json!({"stimulus_ids": ["a", "b"], "use_acr_init": true}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&app, "POST", "/studies", Some(json!({"id": "../x", "stimulus_ids": ["a", "b"]}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    create(&app, study_body()).await;
    let (s, _) = call(&app, "POST", "/studies", Some(study_body())).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let b = batch(&app, "demo").await;
    let p = &b.pairs[0];
    let (s, _) = call(&app, "POST", "/studies/demo/responses", Some(json!({"pair": {"first": p.first}}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&app, "POST", "/studies/demo/responses",
        Some(json!({"pair": {"first": p.first, "second": p.second}, "choice": "left", "annotator": "x"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&app, "POST", "/studies/demo/responses",
        Some(json!({"pair": {"first": p.first, "second": p.second}, "choice": "first"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(respond(&app, "demo", &p.first, &p.first, "first", "x").await.0, StatusCode::UNPROCESSABLE_ENTITY);

    // A pair outside the batch, and an unknown stimulus.
    let ids = ["a", "b", "c", "d", "e"];
    let (u, v) = ids
        .iter()
        .flat_map(|u| ids.iter().map(move |v| (*u, *v)))
        .find(|(u, v)| u < v && !b.pairs.iter().any(|p| (p.first == *u && p.second == *v) || (p.first == *v && p.second == *u)))
        .unwrap();
    assert_eq!(respond(&app, "demo", u, v, "first", "x").await.0, StatusCode::CONFLICT);
    assert_eq!(respond(&app, "demo", "a", "zz", "first", "x").await.0, StatusCode::CONFLICT);

    for _ in 0..3 {
        assert_eq!(call(&app, "POST", "/studies/demo/advance", None).await.0, StatusCode::OK);
    }
    assert!(status(&app, "demo").await.complete);
    assert_eq!(call(&app, "GET", "/studies/demo/batch", None).await.0, StatusCode::LOCKED);
    assert_eq!(call(&app, "POST", "/studies/demo/advance", None).await.0, StatusCode::LOCKED);
    assert_eq!(respond(&app, "demo", &p.first, &p.second, "first", "y").await.0, StatusCode::LOCKED);
    let (s, v) = call(&app, "GET", "/studies/demo/estimate", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["estimate"]["s_hat"].is_array());
}

#[tokio::test]
async fn duplicate_responses_conflict_without_changing_state() {
    let dir = tempfile::tempdir().unwrap();
    let app = AppState::open(dir.path()).unwrap();
    create(&app, study_body()).await;
    let p = batch(&app, "demo").await.pairs[0].clone();
    assert_eq!(respond(&app, "demo", &p.first, &p.second, "first", "ann").await.0, StatusCode::CREATED);
    let before = status(&app, "demo").await;
    // Same annotator and pair, either orientation or choice.
    assert_eq!(respond(&app, "demo", &p.first, &p.second, "first", "ann").await.0, StatusCode::CONFLICT);
    assert_eq!(respond(&app, "demo", &p.second, &p.first, "second", "ann").await.0, StatusCode::CONFLICT);
    let after = status(&app, "demo").await;
    assert_eq!(before.digest, after.digest);
    assert_eq!(after.pending_responses, 1);
    let log = std::fs::read_to_string(dir.path().join("demo").join(EVENTS_FILE)).unwrap();
    assert_eq!(log.lines().count(), 2);
    // Another annotator may answer the same pair; the next iteration reopens it.
    assert_eq!(respond(&app, "demo", &p.first, &p.second, "second", "other").await.0, StatusCode::CREATED);
    let (_, v) = call(&app, "GET", "/studies/demo/batch?annotator=ann", None).await;
    let view: BatchView = serde_json::from_value(v).unwrap();
    assert_eq!(view.pairs.iter().filter(|q| q.answered == Some(true)).count(), 1);
}

#[tokio::test]
async fn bearer_token_identifies_the_annotator() {
    let dir = tempfile::tempdir().unwrap();
    let app = AppState::open(dir.path()).unwrap();
    create(&app, study_body()).await;
    let p = batch(&app, "demo").await.pairs[0].clone();
    let body = json!({"pair": {"first": p.first, "second": p.second}, "choice": "second"}).to_string();
    let (s, _) = call_raw(&app, "POST", "/studies/demo/responses", Some(body.clone()), Some("tok")).await;
    assert_eq!(s, StatusCode::CREATED);
    let (s, _) = call_raw(&app, "POST", "/studies/demo/responses", Some(body), Some("tok")).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn zero_response_advance_keeps_the_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let app = AppState::open(dir.path()).unwrap();
    create(&app, study_body()).await;
    let (_, before) = call(&app, "GET", "/studies/demo/estimate", None).await;
    let (s, v) = call(&app, "POST", "/studies/demo/advance", None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let (_, after) = call(&app, "GET", "/studies/demo/estimate", None).await;
    assert_eq!(before["estimate"]["s_hat"], after["estimate"]["s_hat"]);
    assert_eq!(after["iteration"], 1);
}

#[tokio::test]
async fn presentation_order_is_seeded() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = AppState::open(d1.path()).unwrap();
    let b = AppState::open(d2.path()).unwrap();
    let ids: Vec<String> = (0..12).map(|k| format!("s{k:02}")).collect();
    let body = json!({"id": "p", "stimulus_ids": ids, "n_itr": 2, "seed": 3});
    create(&a, body.clone()).await;
    create(&b, body).await;
    let (ba, bb) = (batch(&a, "p").await, batch(&b, "p").await);
    assert_eq!(ba, bb);
    let flipped = ba.pairs.iter().filter(|p| p.first > p.second).count();
    assert!(flipped > 0 && flipped < ba.pairs.len(), "{flipped} of {}", ba.pairs.len());
    assert!(ba.pairs.windows(2).all(|w| w[0].eig >= w[1].eig));
}

/// Runs the scripted 3-iteration study, optionally reopening the store
/// from disk before every request; returns the final status and history.
async fn scripted(root: &Path, restart: bool) -> (StudyStatus, HistoryView) {
    let mut app = AppState::open(root).unwrap();
    let reopen = |app: &mut AppState| {
        if restart {
            *app = AppState::open(root).unwrap();
        }
    };
    create(&app, study_body()).await;
    for _ in 0..3 {
        reopen(&mut app);
        let b = batch(&app, "demo").await;
        for (k, p) in b.pairs.iter().enumerate() {
            for a in 0..2 {
                reopen(&mut app);
                let choice = if (p.first < p.second) ^ (a == 1 && k == 0) { "first" } else { "second" };
                let (s, v) = respond(&app, "demo", &p.first, &p.second, choice, &format!("ann{a}")).await;
                assert_eq!(s, StatusCode::CREATED, "{v}");
            }
        }
        reopen(&mut app);
        let (s, v) = call(&app, "POST", "/studies/demo/advance", None).await;
        assert_eq!(s, StatusCode::OK, "{v}");
    }
    reopen(&mut app);
    let (_, h) = call(&app, "GET", "/studies/demo/history", None).await;
    (status(&app, "demo").await, serde_json::from_value(h).unwrap())
}

#[tokio::test]
async fn crash_restart_replay_matches_uninterrupted_run() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let (plain, h1) = scripted(d1.path(), false).await;
    let (restarted, h2) = scripted(d2.path(), true).await;
    assert!(plain.complete);
    assert_eq!(plain.digest, restarted.digest);
    assert_eq!(h1, h2);
    assert_eq!(h1.history.len(), 4);
    // Every iteration has a snapshot.
    for itr in 0..=3 {
        assert!(d2.path().join("demo").join(snapshot_name(itr)).is_file());
    }
}

#[tokio::test]
async fn replay_without_snapshots_and_with_torn_tail() {
    let dir = tempfile::tempdir().unwrap();
    let app = AppState::open(dir.path()).unwrap();
    create(&app, study_body()).await;
    answer_batch(&app, "demo", 2).await;
    call(&app, "POST", "/studies/demo/advance", None).await;
    answer_batch(&app, "demo", 1).await;
    let want = status(&app, "demo").await.digest;
    drop(app);

    let study_dir = dir.path().join("demo");
    // Losing every snapshot forces a full replay.
    for itr in 0..=1 {
        std::fs::remove_file(study_dir.join(snapshot_name(itr))).unwrap();
    }
    let app = AppState::open(dir.path()).unwrap();
    assert_eq!(status(&app, "demo").await.digest, want);
    drop(app);

    // A corrupt snapshot is skipped, and a half-written record is dropped.
    std::fs::write(study_dir.join(snapshot_name(1)), b"{garbage").unwrap();
    let log_path = study_dir.join(EVENTS_FILE);
    let mut log = std::fs::read(&log_path).unwrap();
    let good_len = log.len();
    log.extend_from_slice(br#"{"seq":99,"type":"resp"#);
    std::fs::write(&log_path, &log).unwrap();
    let app = AppState::open(dir.path()).unwrap();
    assert_eq!(status(&app, "demo").await.digest, want);
    assert_eq!(std::fs::metadata(&log_path).unwrap().len() as usize, good_len);
    // The store keeps working after recovery.
    call(&app, "POST", "/studies/demo/advance", None).await;
    drop(app);
    let app = AppState::open(dir.path()).unwrap();
    assert_eq!(status(&app, "demo").await.iteration, 2);

    // A damaged complete line is an error, not silently skipped.
    let mut log = std::fs::read_to_string(&log_path).unwrap();
    log = log.replacen("\"type\":\"response\"", "\"type\":\"bogus\"", 1);
    std::fs::write(&log_path, log).unwrap();
    for itr in 0..=2 {
        let _ = std::fs::remove_file(study_dir.join(snapshot_name(itr)));
    }
    assert!(AppState::open(dir.path()).is_err());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_annotators_all_land() {
    let dir = tempfile::tempdir().unwrap();
    let app = AppState::open(dir.path()).unwrap();
    let ids: Vec<String> = (0..8).map(|k| format!("s{k}")).collect();
    create(&app, json!({"id": "c", "stimulus_ids": ids, "n_itr": 2})).await;
    let b = batch(&app, "c").await;
    let mut tasks = Vec::new();
    for a in 0..6 {
        for p in b.pairs.clone() {
            let app = app.clone();
            tasks.push(tokio::spawn(async move {
                respond(&app, "c", &p.first, &p.second, "first", &format!("a{a}")).await.0
            }));
        }
    }
    // Racing duplicates: exactly one of each pair lands.
    let dup = b.pairs[0].clone();
    let mut dups = Vec::new();
    for _ in 0..8 {
        let app = app.clone();
        let p = dup.clone();
        dups.push(tokio::spawn(async move { respond(&app, "c", &p.first, &p.second, "first", "racer").await.0 }));
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::CREATED);
    }
    let mut created = 0;
    for t in dups {
        match t.await.unwrap() {
            StatusCode::CREATED => created += 1,
            s => assert_eq!(s, StatusCode::CONFLICT),
        }
    }
    assert_eq!(created, 1);
    let st = status(&app, "c").await;
    assert_eq!(st.pending_responses, 6 * b.pairs.len() + 1);
    drop(app);
    let app = AppState::open(dir.path()).unwrap();
    assert_eq!(status(&app, "c").await.digest, st.digest);
}

#[tokio::test]
async fn estimate_exposes_score_variances() {
    let dir = tempfile::tempdir().unwrap();
    let app = AppState::open(dir.path()).unwrap();
    create(&app, study_body()).await;
    let (_, v) = call(&app, "GET", "/studies/demo/estimate", None).await;
    let view: EstimateView = serde_json::from_value(v).unwrap();
    assert_eq!(view.score_variance.len(), 5);
    for (k, var) in view.score_variance.iter().enumerate() {
        assert_eq!(*var, view.estimate.cov(k, k));
        assert!(*var > 0.0);
    }
}

#[tokio::test]
async fn serves_over_tcp() {
    use std::io::{Read, Write};
    let dir = tempfile::tempdir().unwrap();
    let app = AppState::open(dir.path()).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let server = tokio::spawn(qboost_service::serve(listener, app));
    let body = json!({"id": "t", "stimulus_ids": ["x", "y", "z"]}).to_string();
    let out = tokio::task::spawn_blocking(move || {
        let mut stream = std::net::TcpStream::connect(addr).unwrap();
        let req = format!(
            "POST /studies HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        stream.write_all(req.as_bytes()).unwrap();
        let mut out = String::new();
        stream.read_to_string(&mut out).unwrap();
        out
    })
    .await
    .unwrap();
    assert!(out.starts_with("HTTP/1.1 201"), "{out}");
    assert!(out.contains("\"id\":\"t\""));
    server.abort();
}
