use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use spillkit_core::eval::EvalReport;
use spillkit_core::fixtures::seven_of_ten;
use spillkit_core::lora::{read_store, write_store, TensorStore};
use spillkit_services::monitor::MonitorStats;
use spillkit_services::stubs::{DiffusionStub, DiffusionStubConfig, VlmStub};

fn spillkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spillkit"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

async fn spillkit_async(args: Vec<String>) -> Output {
    tokio::task::spawn_blocking(move || {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        spillkit(&refs)
    })
    .await
    .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn write_fixture(dir: &Path) -> (String, String) {
    let (ds, log) = seven_of_ten();
    let coco = dir.join("gt.json");
    let replay = dir.join("replay.jsonl");
    std::fs::write(&coco, serde_json::to_vec(&ds).unwrap()).unwrap();
    std::fs::write(&replay, log.to_jsonl()).unwrap();
    (s(&coco), s(&replay))
}

#[test]
fn evaluate_replay_fixture_prints_seventy_percent() {
    let dir = tempfile::tempdir().unwrap();
    let (coco, replay) = write_fixture(dir.path());
    let o = spillkit(&["evaluate", "--coco", &coco, "--replay", &replay, "--tau", "0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).lines().next().unwrap().ends_with("0.70"), "{}", stdout(&o));
}

#[test]
fn json_report_parses_back_to_the_saved_report() {
    let dir = tempfile::tempdir().unwrap();
    let (coco, replay) = write_fixture(dir.path());
    let saved = s(&dir.path().join("report.json"));
    let o = spillkit(&["--json", "evaluate", "--coco", &coco, "--replay", &replay, "--report-out", &saved]);
    assert!(o.status.success());
    let printed: EvalReport = serde_json::from_str(stdout(&o).trim()).unwrap();
    let on_disk: EvalReport = serde_json::from_slice(&std::fs::read(&saved).unwrap()).unwrap();
    assert_eq!(printed, on_disk);
    assert_eq!(printed.hit_rate, 0.7);
    assert_eq!(serde_json::to_value(&printed).unwrap(), serde_json::from_str::<Value>(stdout(&o).trim()).unwrap());

    let o = spillkit(&["render-report", &saved, "--format", "markdown"]);
    assert!(stdout(&o).contains("| Zero-Shot | 0.70 |"), "{}", stdout(&o));
    let o = spillkit(&["--json", "sweep", "--coco", &coco, "--replay", &replay, "--thresholds", "0.3,0.5,0.9"]);
    let curve: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(curve["hit_rates"], json!([1.0, 0.7, 0.7]));
}

#[test]
fn band_violation_exits_three_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"generation": {"lora_strength": 0.9}}"#).unwrap();
    let o = spillkit(&["--config", &s(&cfg), "generate-scenes", "--style-ref", "ref.png"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("generation.lora_strength"));

    let o = spillkit(&["--json", "--config", &s(&cfg), "generate-scenes", "--style-ref", "ref.png"]);
    assert_eq!(o.status.code(), Some(3));
    let err: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(err["error"]["field"], "generation.lora_strength");
    assert_eq!(err["error"]["exit_code"], 3);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(spillkit(&["evaluate", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(spillkit(&["frobnicate"]).status.code(), Some(2));
    let o = spillkit(&["merge-lora", "--base", "a", "--adapter", "b", "--variant", "X", "--out", "c"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn merge_with_zero_adapter_keeps_the_payload() {
    let dir = tempfile::tempdir().unwrap();
    let base = TensorStore::from_tensors(
        vec![
            ("model.layers.0.q.weight".into(), vec![2, 3], vec![0.1, -0.2, 0.3, 1e-38, -0.0, 7.5]),
            ("visual.patch.weight".into(), vec![3], vec![1.0, 2.0, 3.0]),
        ],
        None,
    )
    .unwrap();
    let adapter = TensorStore::from_tensors(
        vec![
            ("model.layers.0.q.lora_A.weight".into(), vec![2, 3], vec![0.0; 6]),
            ("model.layers.0.q.lora_B.weight".into(), vec![2, 2], vec![0.0; 4]),
        ],
        None,
    )
    .unwrap();
    let (bp, ap, op) = (dir.path().join("base.st"), dir.path().join("ad.st"), dir.path().join("out.st"));
    std::fs::write(&bp, write_store(&base)).unwrap();
    std::fs::write(&ap, write_store(&adapter)).unwrap();
    let o = spillkit(&["--json", "merge-lora", "--base", &s(&bp), "--adapter", &s(&ap), "--variant", "L", "--out", &s(&op)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["merged"], json!(["model.layers.0.q.weight"]));
    let merged = std::fs::read(&op).unwrap();
    assert_eq!(merged, std::fs::read(&bp).unwrap());
    let back = read_store(&merged).unwrap();
    assert_eq!(back.raw_bytes("visual.patch.weight").unwrap(), base.raw_bytes("visual.patch.weight").unwrap());
}

#[test]
fn convert_and_split_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (coco, _) = write_fixture(dir.path());
    let labels = dir.path().join("labels");
    let o = spillkit(&["--json", "convert", "--coco", &coco, "--out", &s(&labels)]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(labels.join("frame_001.txt")).unwrap();
    assert_eq!(text, "0 0.1875 0.26666666666666666 0.125 0.13333333333333333\n");

    let manifest = dir.path().join("splits.json");
    let o = spillkit(&["--json", "split", "--coco", &coco, "--count", "eval=6", "--count", "icl_pool=4", "--seed", "9", "--out", &s(&manifest)]);
    assert!(o.status.success());
    let printed: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(printed["splits"]["eval"].as_array().unwrap().len(), 6);
    assert_eq!(printed, serde_json::from_slice::<Value>(&std::fs::read(&manifest).unwrap()).unwrap());
    let o = spillkit(&["split", "--coco", &coco, "--count", "eval=11"]);
    assert_eq!(o.status.code(), Some(1));
}

#[tokio::test(flavor = "multi_thread")]
async fn generate_mask_inpaint_and_monitor_against_stubs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let stub = DiffusionStub::start(DiffusionStubConfig::default()).await.unwrap();
    let vlm = VlmStub::fixed(r#"[{"category_id": 1, "bbox": [10, 12, 20, 16], "score": 0.97}]"#).await.unwrap();
    let cfg = root.join("cfg.json");
    let cfg_body = json!({
        "generation": { "width": 64, "height": 48 },
        "diffusion": { "endpoint": stub.url(), "retry": { "backoff_base_ms": 5 } },
        "vlm": { "endpoint": vlm.endpoint(), "api_key_env": "SPILLKIT_CLI_TEST_UNSET" },
        "monitor": {
            "query_classes": [1],
            "sinks": [{ "type": "log", "path": s(&root.join("alerts.jsonl")) }],
            "detection_log": s(&root.join("detections.jsonl")),
            "dead_letter": s(&root.join("dead.jsonl"))
        }
    });
    std::fs::write(&cfg, cfg_body.to_string()).unwrap();
    let cfg = s(&cfg);
    let scenes = root.join("scenes");
    let args = |v: &[&str]| v.iter().map(|a| a.to_string()).collect::<Vec<_>>();

    let o = spillkit_async(args(&["--json", "--config", &cfg, "generate-scenes", "--style-ref", "ref.png", "--count", "3", "--seed", "40", "--out", &s(&scenes)])).await;
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let batch: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(batch["done"], 3);
    let first = batch["records"][0]["artifact_path"].as_str().unwrap().to_string();

    let coco = root.join("boxes.json");
    let name = Path::new(&first).file_name().unwrap().to_string_lossy().into_owned();
    let ds = json!({
        "images": [{ "id": 1, "file_name": name, "width": 64, "height": 48 }],
        "annotations": [{ "id": 7, "image_id": 1, "category_id": 1, "bbox": [10, 12, 20, 16] }],
        "categories": [{ "id": 1, "name": "oil-spill" }]
    });
    std::fs::write(&coco, ds.to_string()).unwrap();
    let masks = root.join("masks");
    let o = spillkit_async(args(&["--json", "--config", &cfg, "make-masks", "--coco", &s(&coco), "--out", &s(&masks)])).await;
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stem = Path::new(&name).file_stem().unwrap().to_string_lossy().into_owned();
    assert!(masks.join(format!("{stem}_7.png")).is_file());

    let scene_dir = Path::new(&first).parent().unwrap().to_path_buf();
    let painted = root.join("painted");
    let o = spillkit_async(args(&[
        "--json", "--config", &cfg, "inpaint", "--coco", &s(&coco), "--scene-dir", &s(&scene_dir), "--mask-dir", &s(&masks), "--out", &s(&painted),
    ]))
    .await;
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let batch: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(batch["done"], 1);
    assert_eq!(batch["records"][0]["kind"], "inpaint");

    let frames = root.join("frames");
    std::fs::create_dir_all(&frames).unwrap();
    for (i, entry) in std::fs::read_dir(&scene_dir).unwrap().flatten().filter(|e| e.path().extension().is_some_and(|x| x == "png")).enumerate() {
        std::fs::copy(entry.path(), frames.join(format!("f{i}.png"))).unwrap();
    }
    let o = spillkit_async(args(&["--json", "--config", &cfg, "monitor-serve", "--once", "--watch", &format!("cam-1={}", s(&frames))])).await;
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stats: MonitorStats = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!((stats.frames, stats.failed_frames, stats.alerts, stats.deliveries), (3, 0, 3, 3));
    assert_eq!(std::fs::read_to_string(root.join("alerts.jsonl")).unwrap().lines().count(), 3);
}
