use std::sync::Arc;

use image::{ImageFormat, RgbImage};
use spillkit_core::classes::{ClassId, OIL_SPILL};
use spillkit_core::config::VlmConfig;
use spillkit_core::detector::{DetectError, DetectRequest, Detector};
use spillkit_core::geometry::{BBox, GroundTruth};
use spillkit_core::vlm::{read_replay_log, IclExample, IclSupportSet, ImageInput, ParseStatus};
use spillkit_services::stubs::{StubReply, VlmStub};
use spillkit_services::vlm_client::VlmClient;

fn png(w: u32, h: u32) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    RgbImage::new(w, h).write_to(&mut buf, ImageFormat::Png).unwrap();
    buf.into_inner()
}

fn request(image_id: u64) -> DetectRequest {
    DetectRequest {
        image_id,
        width: 800,
        height: 600,
        class_id: OIL_SPILL,
        class_name: "oil spill".into(),
        image: Some(ImageInput::Bytes(png(8, 6))),
    }
}

fn config(endpoint: String) -> VlmConfig {
    VlmConfig {
        endpoint,
        api_key_env: "SPILLKIT_TEST_UNSET_KEY".into(),
        request_timeout_ms: 5_000,
        ..Default::default()
    }
}

#[tokio::test]
async fn fixed_reply_is_parsed() {
    let stub = VlmStub::fixed(r#"[{"category_id": 3, "bbox": [256, 411, 142, 95], "score": 0.97}]"#)
        .await
        .unwrap();
    let client = VlmClient::from_config(&config(stub.endpoint())).unwrap();
    let out = client.detect(&request(134)).await.unwrap();
    assert_eq!(out.status, ParseStatus::Clean);
    assert_eq!(out.detections.len(), 1);
    let d = &out.detections[0];
    assert_eq!(d.bbox.to_xywh(), [256.0, 411.0, 142.0, 95.0]);
    assert_eq!(d.score, 0.97);
    assert_eq!(d.class_id, ClassId(3));
}

#[tokio::test]
async fn request_carries_decoding_parameters() {
    let stub = VlmStub::fixed("[]").await.unwrap();
    let client = VlmClient::from_config(&config(stub.endpoint())).unwrap();
    client.detect(&request(1)).await.unwrap();
    let body = stub.requests.lock().unwrap()[0].clone();
    assert_eq!(body["temperature"], 0.1);
    assert_eq!(body["top_p"], 0.001);
    assert_eq!(body["repetition_penalty"], 1.2);
    assert_eq!(body["model"], "qwen2.5-vl-7b-instruct");
    let msgs = body["messages"].as_array().unwrap();
    assert_eq!(msgs.len(), 2);
    assert_eq!(msgs[0]["role"], "system");
    let url = msgs[1]["content"][0]["image_url"]["url"].as_str().unwrap();
    assert!(url.starts_with("data:image/png;base64,"));
    assert!(msgs[1]["content"][1]["text"].as_str().unwrap().contains("oil spill"));
}

#[tokio::test]
async fn nothing_found_sentinel_is_empty() {
    let stub = VlmStub::fixed("No anomalies detected.").await.unwrap();
    let client = VlmClient::from_config(&config(stub.endpoint())).unwrap();
    let out = client.detect(&request(1)).await.unwrap();
    assert_eq!(out.status, ParseStatus::Empty);
    assert!(out.detections.is_empty());
}

#[tokio::test]
async fn unreachable_endpoint_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let client = VlmClient::from_config(&config(format!("http://{addr}/v1/chat/completions"))).unwrap();
    assert!(matches!(client.detect(&request(1)).await, Err(DetectError::Transport(_))));
}

#[tokio::test]
async fn overflow_is_reported_distinctly() {
    let stub = VlmStub::start(Arc::new(|_| {
        StubReply::error(400, r#"{"error":{"code":"context_length_exceeded","message":"too long"}}"#)
    }))
    .await
    .unwrap();
    let client = VlmClient::from_config(&config(stub.endpoint())).unwrap();
    assert!(matches!(client.detect(&request(1)).await, Err(DetectError::ContextOverflow(_))));

    let local = VlmClient::from_config(&VlmConfig {
        max_request_bytes: Some(100),
        ..config(stub.endpoint())
    })
    .unwrap();
    let before = stub.requests.lock().unwrap().len();
    assert!(matches!(local.detect(&request(1)).await, Err(DetectError::ContextOverflow(_))));
    assert_eq!(stub.requests.lock().unwrap().len(), before);
}

#[tokio::test]
async fn server_errors_are_transport_and_client_errors_backend() {
    let stub = VlmStub::start(Arc::new(|_| StubReply::error(503, "busy"))).await.unwrap();
    let client = VlmClient::from_config(&config(stub.endpoint())).unwrap();
    assert!(matches!(client.detect(&request(1)).await, Err(DetectError::Transport(_))));
    let stub = VlmStub::start(Arc::new(|_| StubReply::error(401, "no key"))).await.unwrap();
    let client = VlmClient::from_config(&config(stub.endpoint())).unwrap();
    assert!(matches!(client.detect(&request(1)).await, Err(DetectError::Backend(_))));
}

fn support(k: usize) -> IclSupportSet {
    IclSupportSet {
        examples: (0..k as u64)
            .map(|i| IclExample {
                image_id: 1000 + i,
                image: ImageInput::Bytes(png(4, 4)),
                ground_truths: vec![GroundTruth::new(BBox::from_xywh(10.0, 10.0, 20.0, 20.0).unwrap(), OIL_SPILL)],
            })
            .collect(),
    }
}

#[tokio::test]
async fn support_set_conditions_every_request() {
    let stub = VlmStub::fixed("[]").await.unwrap();
    let client = VlmClient::from_config(&config(stub.endpoint()))
        .unwrap()
        .with_support(support(5))
        .unwrap();
    client.detect(&request(1)).await.unwrap();
    let body = stub.requests.lock().unwrap()[0].clone();
    let msgs = body["messages"].as_array().unwrap();
    assert_eq!(msgs.len(), 12);
    assert_eq!(msgs[2]["role"], "assistant");
    assert!(VlmClient::from_config(&config(stub.endpoint())).unwrap().with_support(support(4)).is_err());
}

#[tokio::test]
async fn replay_log_records_calls_without_image_payloads() {
    let stub = VlmStub::fixed(r#"[{"bbox": [10, 10, 50, 50], "score": 0.8}]"#).await.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("replay.jsonl");
    let client = VlmClient::from_config(&VlmConfig {
        replay_log: Some(log.clone()),
        ..config(stub.endpoint())
    })
    .unwrap();
    client.detect(&request(4)).await.unwrap();
    let replay = read_replay_log(&log).unwrap();
    let e = replay.get(4, OIL_SPILL).unwrap();
    assert!(e.response_text.as_deref().unwrap().contains("0.8"));
    let req = e.request.as_ref().unwrap().to_string();
    assert!(req.contains("sha256:"));
    assert!(!req.contains("base64,"));
}
