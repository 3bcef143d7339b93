use std::io::Read;
use std::path::{Path, PathBuf};

use checkmask::selection_log::encode_line;
use maskctl_core::diverse_mbest::{write_candidate_set, CandidateSet};
use maskctl_core::tensor_store::write_rgb_image;
use maskctl_core::{LabelMask, RgbImage};
use serde_json::{json, Value};

const IDS: [&str; 3] = ["cat_01", "dog_02", "cow_03"];
const M: usize = 5;

fn write_data_dir(root: &Path) {
    let mut entries = Vec::new();
    for (k, id) in IDS.iter().enumerate() {
        let img = RgbImage::uniform(6, 4, [10 * k as u8, 100, 200]);
        write_rgb_image(root.join(format!("{id}.png")), &img).unwrap();
        let candidates = (0..M)
            .map(|m| LabelMask::new(6, 4, (0..24).map(|i| ((i + m + k) % 3 == 0) as u8).collect()).unwrap())
            .collect();
        let set = CandidateSet {
            image_id: id.to_string(),
            lambda: 0.5,
            candidates,
            energies: (0..M).map(|m| 10.0 + m as f64).collect(),
        };
        write_candidate_set(&root.join("candidates").join(id), &set).unwrap();
        entries.push(json!({ "image_id": id, "image_path": format!("{id}.png"), "tags": [0, 8] }));
    }
    std::fs::write(root.join("manifest.json"), json!({ "entries": entries }).to_string()).unwrap();
}

struct Server {
    base: String,
    client: reqwest::Client,
    handle: tokio::task::JoinHandle<()>,
}

async fn start(root: &Path, log: Option<&Path>) -> Server {
    let state = checkmask::open_state(root, log).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = tokio::spawn(async move {
        axum::serve(listener, checkmask::router(state)).await.unwrap();
    });
    Server {
        base: format!("http://{addr}"),
        client: reqwest::Client::new(),
        handle,
    }
}

impl Server {
    async fn get(&self, path: &str) -> reqwest::Response {
        self.client.get(format!("{}{path}", self.base)).send().await.unwrap()
    }

    async fn json(&self, path: &str) -> Value {
        let r = self.get(path).await;
        assert_eq!(r.status(), 200, "{path}");
        r.json().await.unwrap()
    }

    async fn select_raw(&self, id: &str, body: String) -> reqwest::Response {
        self.client
            .post(format!("{}/api/images/{id}/selection", self.base))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .await
            .unwrap()
    }

    async fn select(&self, id: &str, index: i64, who: &str, elapsed: u64) -> reqwest::Response {
        let body = json!({ "candidate_index": index, "annotator_id": who, "elapsed_ms": elapsed });
        self.select_raw(id, body.to_string()).await
    }

    async fn pending(&self, who: &str) -> Vec<String> {
        let v = self.json(&format!("/api/queue?annotator={who}")).await;
        serde_json::from_value(v["pending"].clone()).unwrap()
    }

    async fn export(&self) -> Vec<(PathBuf, Vec<u8>, u64)> {
        let r = self.get("/api/export").await;
        assert_eq!(r.status(), 200);
        assert_eq!(r.headers()["content-type"], "application/x-tar");
        let bytes = r.bytes().await.unwrap();
        let mut archive = tar::Archive::new(bytes.as_ref());
        archive
            .entries()
            .unwrap()
            .map(|e| {
                let mut e = e.unwrap();
                let path = e.path().unwrap().into_owned();
                let mtime = e.header().mtime().unwrap();
                let mut data = Vec::new();
                e.read_to_end(&mut data).unwrap();
                (path, data, mtime)
            })
            .collect()
    }
}

fn file_of<'a>(files: &'a [(PathBuf, Vec<u8>, u64)], name: &str) -> Option<&'a Vec<u8>> {
    files.iter().find(|(p, _, _)| p == Path::new(name)).map(|(_, b, _)| b)
}

#[tokio::test]
async fn queue_lists_everything_then_shrinks_in_order() {
    let dir = tempfile::tempdir().unwrap();
    write_data_dir(dir.path());
    let s = start(dir.path(), None).await;
    assert_eq!(s.pending("ann").await, IDS);
    assert_eq!(s.select("dog_02", 1, "ann", 2100).await.status(), 200);
    assert_eq!(s.pending("ann").await, ["cat_01", "cow_03"]);
    assert_eq!(s.pending("other").await, IDS);
    let q = s.json("/api/queue?annotator=ann").await;
    assert_eq!(q["done"], json!(["dog_02"]));
    for id in ["cat_01", "cow_03"] {
        s.select(id, 0, "ann", 1000).await;
    }
    assert!(s.pending("ann").await.is_empty());
    assert_eq!(s.get("/api/queue").await.status(), 400);
    s.handle.abort();
}

#[tokio::test]
async fn candidates_are_served_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    write_data_dir(dir.path());
    let s = start(dir.path(), None).await;
    let info = s.json("/api/images/cow_03").await;
    let urls = info["candidates"].as_array().unwrap();
    assert_eq!(urls.len(), M);
    assert_eq!(info["meta"]["energies"].as_array().unwrap().len(), M);
    for (m, url) in urls.iter().enumerate() {
        assert_eq!(url.as_str().unwrap(), format!("/files/candidates/cow_03/{m}"));
        let r = s.get(url.as_str().unwrap()).await;
        assert_eq!(r.headers()["content-type"], "image/png");
        let disk = std::fs::read(dir.path().join(format!("candidates/cow_03/candidate_{m}.png"))).unwrap();
        assert_eq!(r.bytes().await.unwrap().as_ref(), disk.as_slice());
    }
    let img = s.get(info["image_url"].as_str().unwrap()).await.bytes().await.unwrap();
    assert_eq!(img.as_ref(), std::fs::read(dir.path().join("cow_03.png")).unwrap().as_slice());
    assert_eq!(s.get("/api/images/yak_99").await.status(), 404);
    assert_eq!(s.get("/files/candidates/cow_03/5").await.status(), 400);
    s.handle.abort();
}

#[tokio::test]
async fn bad_selections_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_data_dir(dir.path());
    let s = start(dir.path(), None).await;
    assert_eq!(s.select("yak_99", 0, "ann", 10).await.status(), 404);
    assert_eq!(s.select("cat_01", M as i64, "ann", 10).await.status(), 400);
    assert_eq!(s.select("cat_01", -2, "ann", 10).await.status(), 400);
    assert_eq!(s.select("cat_01", 0, "", 10).await.status(), 400);
    for body in [
        "not json",
        "[]",
        r#"{"candidate_index": 0, "annotator_id": "a"}"#,
        r#"{"candidate_index": "0", "annotator_id": "a", "elapsed_ms": 1}"#,
        r#"{"candidate_index": 0, "annotator_id": "a", "elapsed_ms": -5}"#,
        r#"{"candidate_index": 0, "annotator_id": "a", "elapsed_ms": 1, "extra": true}"#,
    ] {
        assert_eq!(s.select_raw("cat_01", body.into()).await.status(), 400, "{body}");
    }
    assert_eq!(s.pending("ann").await, IDS);

    let ack: Value = s.select("cat_01", -1, "ann", 900).await.json().await.unwrap();
    assert_eq!(ack["candidate_index"], -1);
    assert_eq!(ack["image_id"], "cat_01");
    assert!(ack["timestamp"].as_str().unwrap().ends_with('Z'));
    s.handle.abort();
}

#[tokio::test]
async fn export_follows_latest_selection_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write_data_dir(dir.path());
    let s = start(dir.path(), None).await;

    let empty = s.export().await;
    let stats: Value = serde_json::from_slice(file_of(&empty, "stats.json").unwrap()).unwrap();
    assert_eq!(stats["count"], 0);

    s.select("cat_01", 2, "ann", 2000).await;
    s.select("dog_02", 4, "ann", 3000).await;
    s.select("cow_03", -1, "ann", 500).await;
    s.select("cat_01", 3, "ann", 3000).await;
    s.select("dog_02", 0, "bob", 2000).await;

    let files = s.export().await;
    assert!(files.iter().all(|(_, _, mtime)| *mtime == 0));
    let disk = |id: &str, m: usize| std::fs::read(dir.path().join(format!("candidates/{id}/candidate_{m}.png"))).unwrap();
    assert_eq!(file_of(&files, "cat_01/mask.png").unwrap(), &disk("cat_01", 3));
    assert_eq!(file_of(&files, "dog_02/mask.png").unwrap(), &disk("dog_02", 0));
    assert!(file_of(&files, "cow_03/mask.png").is_none());
    let stats: Value = serde_json::from_slice(file_of(&files, "stats.json").unwrap()).unwrap();
    assert_eq!(stats["count"], 2);
    assert_eq!(stats["none_acceptable"], 1);
    assert_eq!(stats["mean_elapsed_ms"], 2500.0);
    assert_eq!(stats["median_elapsed_ms"], 2500.0);
    let manifest: Value = serde_json::from_slice(file_of(&files, "manifest.json").unwrap()).unwrap();
    assert_eq!(manifest["entries"][0]["mask_path"], "cat_01/mask.png");

    let again = s.export().await;
    assert_eq!(files, again);
    s.handle.abort();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_submissions_all_land_in_the_log() {
    let dir = tempfile::tempdir().unwrap();
    write_data_dir(dir.path());
    let log = dir.path().join("sel.log");
    let s = std::sync::Arc::new(start(dir.path(), Some(&log)).await);
    let mut tasks = Vec::new();
    for a in 0..8 {
        for (k, id) in IDS.iter().enumerate() {
            let s = s.clone();
            tasks.push(tokio::spawn(async move {
                s.select(id, ((a + k) % M) as i64, &format!("ann{a}"), 100 * a as u64).await.status()
            }));
        }
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), 200);
    }
    let text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(text.lines().count(), 8 * IDS.len());
    for a in 0..8 {
        assert!(s.pending(&format!("ann{a}")).await.is_empty());
    }
    s.handle.abort();
}

#[tokio::test]
async fn restart_replays_log_and_drops_torn_tail() {
    let dir = tempfile::tempdir().unwrap();
    write_data_dir(dir.path());
    let log = dir.path().join("sel.log");
    let s = start(dir.path(), Some(&log)).await;
    s.select("cat_01", 1, "ann", 1500).await;
    s.handle.abort();

    let rec = checkmask::SelectionRecord {
        image_id: "dog_02".into(),
        candidate_index: 2,
        annotator_id: "ann".into(),
        elapsed_ms: 10,
        timestamp: chrono::DateTime::from_timestamp(0, 0).unwrap(),
    };
    let line = encode_line(&rec);
    let mut f = std::fs::OpenOptions::new().append(true).open(&log).unwrap();
    std::io::Write::write_all(&mut f, &line.as_bytes()[..line.len() - 5]).unwrap();
    drop(f);

    let s = start(dir.path(), Some(&log)).await;
    assert_eq!(s.pending("ann").await, ["dog_02", "cow_03"]);
    s.select("cow_03", 0, "ann", 10).await;
    s.handle.abort();
    let s = start(dir.path(), Some(&log)).await;
    assert_eq!(s.pending("ann").await, ["dog_02"]);
    s.handle.abort();
}

#[tokio::test]
async fn export_command_matches_http_export() {
    let dir = tempfile::tempdir().unwrap();
    write_data_dir(dir.path());
    let s = start(dir.path(), None).await;
    s.select("dog_02", 3, "ann", 2200).await;
    let http = s.export().await;
    s.handle.abort();

    let out = dir.path().join("export");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_checkmask"))
        .args(["export", "--data-dir", dir.path().to_str().unwrap(), "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    for (rel, bytes, _) in &http {
        assert_eq!(&std::fs::read(out.join(rel)).unwrap(), bytes, "{}", rel.display());
    }
    let m = maskctl_core::manifest::DatasetManifest::load(out.join("manifest.json")).unwrap();
    assert_eq!(m.entries.len(), 1);
    assert_eq!(m.entries[0].mask_path.as_deref(), Some(out.join("dog_02/mask.png").as_path()));
}
