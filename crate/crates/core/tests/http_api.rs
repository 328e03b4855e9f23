//! The control API over real HTTP.

use std::time::Duration;

use pf_core::config::EngineConfig;
use pf_testkit::serve_engine;
use reqwest::header::{CONTENT_TYPE, LOCATION};
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};

async fn setup() -> (String, Client) {
    let engine = serve_engine(EngineConfig::default()).await;
    (engine.config().base_url.clone(), Client::new())
}

async fn create(http: &Client, base: &str) -> (u64, String) {
    let resp = http.post(base).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::CREATED);
    let location = resp.headers()[LOCATION].to_str().unwrap().to_string();
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["url"], location);
    (body["id"].as_u64().unwrap(), location)
}

fn is_problem(resp: &reqwest::Response) -> bool {
    resp.headers()
        .get(CONTENT_TYPE)
        .is_some_and(|v| v.to_str().unwrap().starts_with("application/problem+json"))
}

#[tokio::test]
async fn create_read_and_reject() {
    let (base, http) = setup().await;
    let (id, url) = create(&http, &base).await;
    assert!(url.ends_with(&format!("/{id}")));

    let state: Value = http
        .get(format!("{url}/state"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(state, json!({"state": "ready"}));

    let resp = http
        .put(format!("{url}/state"))
        .body("stopped")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::CONFLICT);
    assert!(is_problem(&resp));
    let problem: Value = resp.json().await.unwrap();
    assert!(problem["title"].as_str().is_some());

    let resp = http.get(format!("{base}/4711")).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
    assert!(is_problem(&resp));

    let resp = http
        .put(format!("{url}/callbacks/nonsense"))
        .json(&json!({}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);

    let resp = http
        .put(format!("{url}/model"))
        .json(&json!({"root": {"kind": "teleport"}}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    assert!(is_problem(&resp));
}

#[tokio::test]
async fn patch_context_and_purge() {
    let (base, http) = setup().await;
    let (id, url) = create(&http, &base).await;
    let resp = http
        .patch(format!("{url}/dataelements"))
        .json(&json!({"a": 1, "b": "x"}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let resp = http
        .patch(format!("{url}/dataelements"))
        .json(&json!({"delete": ["b"]}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let data: Value = http
        .get(format!("{url}/dataelements"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(data, json!({"a": 1}));

    let listed: Value = http.get(&base).send().await.unwrap().json().await.unwrap();
    assert!(listed.as_array().unwrap().iter().any(|i| i["id"] == id));

    // The same instance under the short alias.
    let origin = reqwest::Url::parse(&base).unwrap();
    let alias = format!(
        "{}://{}/instances/{id}/state",
        origin.scheme(),
        origin.authority()
    );
    assert_eq!(
        http.get(alias).send().await.unwrap().status(),
        StatusCode::OK
    );

    assert_eq!(
        http.put(format!("{url}/state"))
            .body("abandoned")
            .send()
            .await
            .unwrap()
            .status(),
        StatusCode::OK
    );
    assert_eq!(
        http.delete(&url).send().await.unwrap().status(),
        StatusCode::NO_CONTENT
    );
    assert_eq!(
        http.get(&url).send().await.unwrap().status(),
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn event_stream_names_events() {
    let (base, http) = setup().await;
    let (id, url) = create(&http, &base).await;
    let resp = http
        .post(format!("{base}/subscriptions"))
        .json(&json!({"selections": [{"topic": "weather"}]}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);

    let sub: Value = http
        .post(format!("{base}/subscriptions"))
        .json(&json!({"instance": id, "selections": [{"topic": "state", "event": "*"}]}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let mut stream = http
        .get(sub["stream"].as_str().unwrap())
        .send()
        .await
        .unwrap();
    assert!(stream.headers()[CONTENT_TYPE]
        .to_str()
        .unwrap()
        .starts_with("text/event-stream"));
    http.put(format!("{url}/state"))
        .body("abandoned")
        .send()
        .await
        .unwrap();

    let mut text = String::new();
    let read = async {
        while !text.contains("\n\n") {
            let chunk = stream.chunk().await.unwrap().expect("stream ended");
            text.push_str(std::str::from_utf8(&chunk).unwrap());
        }
    };
    tokio::time::timeout(Duration::from_secs(5), read)
        .await
        .expect("no event");
    assert!(text.contains("event: state/change"), "{text}");
    let data = text.lines().find_map(|l| l.strip_prefix("data: ")).unwrap();
    let env: Value = serde_json::from_str(data).unwrap();
    assert_eq!(env["content"]["state"], "abandoned");
    assert_eq!(env["instance"], id);

    let sid = sub["id"].as_str().unwrap();
    assert_eq!(
        http.delete(format!("{base}/subscriptions/{sid}"))
            .send()
            .await
            .unwrap()
            .status(),
        StatusCode::NO_CONTENT
    );
    assert_eq!(
        http.delete(format!("{base}/subscriptions/{sid}"))
            .send()
            .await
            .unwrap()
            .status(),
        StatusCode::NOT_FOUND
    );
}
