use std::time::Duration;

use rxunify::extraction::{
    extract_remote, BackendConfig, FailureKind, RemoteExtractor, IMPORTANT_NOTES, UNREACHABLE,
};
use rxunify::schema::{load_format_spec, ClinicId, RawRecord};
use rxunify_stub::{unreachable_url, Reply, StubServer};
use serde_json::json;

fn seaport(n: usize) -> Vec<RawRecord> {
    (0..n)
        .map(|i| {
            RawRecord::new(
                ClinicId::new("seaport").unwrap(),
                vec![
                    ("Record_ID".into(), format!("{}", 300 + i)),
                    ("Prescription_Date".into(), "3/4/2021".into()),
                    ("RX_Name".into(), "Suboxone 8-2 mg film".into()),
                    ("Quantity".into(), "56".into()),
                    ("SIG".into(), "Place 1 film under the tongue twice daily".into()),
                    ("Refills".into(), "1".into()),
                ],
            )
            .unwrap()
        })
        .collect()
}

fn config(url: String) -> BackendConfig {
    BackendConfig {
        endpoint_url: url,
        timeout_secs: 5.0,
        retry_backoff_ms: 1,
        ..Default::default()
    }
}

fn good_doc() -> serde_json::Value {
    json!({
        "patient_id": "300",
        "prescription_date": "2021-03-04",
        "drug_name": "Suboxone film",
        "total_quantity": 56,
        "daily_quantity": 2,
        "refill": 1
    })
}

#[test]
fn valid_output_is_accepted() {
    let stub = StubServer::start();
    stub.set_responder(|_| Reply::document(good_doc()));
    let spec = load_format_spec("seaport").unwrap();
    let rec = &seaport(1)[0];
    let out = extract_remote(rec, spec, &config(stub.url())).unwrap();
    assert!(out.is_well_formed());
    let r = out.record.expect("success");
    assert_eq!(r.total_quantity, Some(56.0));
    assert_eq!(r.daily_quantity, Some(2.0));
    assert!(out.raw_response.is_some());

    let body = &stub.bodies()[0];
    assert_eq!(body["model"], json!("qwen2.5-32b-instruct"));
    assert_eq!(body["temperature"], json!(0.0));
    assert_eq!(body["max_tokens"], json!(4092));
    assert_eq!(body["schema"]["additionalProperties"], json!(false));
    let prompt = body["prompt"].as_str().unwrap();
    assert!(prompt.contains(IMPORTANT_NOTES));
    assert!(prompt.contains("Place 1 film under the tongue twice daily"));
}

#[test]
fn schema_violation_is_data_not_abort() {
    let stub = StubServer::start();
    stub.set_responder(|_| Reply::document(good_doc()));
    stub.script([
        Reply::document(json!({"total_quantity": -3})),
        Reply::document(json!({"dose": 1})),
        Reply::Output(json!("not json at all")),
        Reply::Output(json!("")),
    ]);
    let mut cfg = config(stub.url());
    cfg.max_concurrent_requests = 1;
    let spec = load_format_spec("seaport").unwrap();
    let recs = seaport(6);
    let outcomes = RemoteExtractor::new(cfg)
        .unwrap()
        .extract_batch(recs.iter().enumerate().map(|(i, r)| (r, spec, i)))
        .unwrap();
    assert_eq!(outcomes.len(), 6);
    assert!(outcomes.iter().all(|o| o.is_well_formed()));
    let count = |k: Option<FailureKind>| outcomes.iter().filter(|o| o.failure == k).count();
    assert_eq!(count(Some(FailureKind::SchemaInvalid)), 3);
    assert_eq!(count(Some(FailureKind::EmptyOutput)), 1);
    assert_eq!(count(None), 2);
    assert_eq!(outcomes.iter().map(|o| o.row).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 5]);
    assert!(outcomes
        .iter()
        .any(|o| o.error.as_deref().is_some_and(|e| e.contains("/total_quantity"))));
}

#[test]
fn limiter_caps_requests_in_flight() {
    let stub = StubServer::start();
    stub.set_responder(|_| Reply::document(good_doc()));
    stub.set_delay(Duration::from_millis(40));
    let mut cfg = config(stub.url());
    cfg.max_concurrent_requests = 3;
    let spec = load_format_spec("seaport").unwrap();
    let recs = seaport(24);
    let outcomes = RemoteExtractor::new(cfg)
        .unwrap()
        .extract_batch(recs.iter().enumerate().map(|(i, r)| (r, spec, i)))
        .unwrap();
    assert!(outcomes.iter().all(|o| o.is_success()));
    assert_eq!(stub.request_count(), 24);
    assert!(stub.max_in_flight() <= 3, "peak {}", stub.max_in_flight());
    assert!(stub.max_in_flight() >= 2, "limiter serialized everything");
}

#[test]
fn two_failures_then_success() {
    let stub = StubServer::start();
    stub.script([Reply::status(500), Reply::status(503), Reply::document(good_doc())]);
    let spec = load_format_spec("seaport").unwrap();
    let out = extract_remote(&seaport(1)[0], spec, &config(stub.url())).unwrap();
    assert!(out.is_success(), "{:?}", out.error);
    assert_eq!(stub.request_count(), 3);
}

#[test]
fn retries_are_bounded() {
    let stub = StubServer::start();
    stub.script([Reply::status(500), Reply::status(429), Reply::status(502), Reply::document(good_doc())]);
    let spec = load_format_spec("seaport").unwrap();
    let out = extract_remote(&seaport(1)[0], spec, &config(stub.url())).unwrap();
    assert_eq!(out.failure, Some(FailureKind::Transport));
    assert_eq!(stub.request_count(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let stub = StubServer::start();
    stub.script([Reply::status(400)]);
    let spec = load_format_spec("seaport").unwrap();
    let out = extract_remote(&seaport(1)[0], spec, &config(stub.url())).unwrap();
    assert_eq!(out.failure, Some(FailureKind::Transport));
    assert_eq!(stub.request_count(), 1);
}

#[test]
fn unreachable_endpoint_is_transport_failure() {
    let spec = load_format_spec("seaport").unwrap();
    let out = extract_remote(&seaport(1)[0], spec, &config(unreachable_url())).unwrap();
    assert_eq!(out.failure, Some(FailureKind::Transport));
    assert!(out.error.unwrap().starts_with(UNREACHABLE));
}
