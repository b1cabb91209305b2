use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use crossalign::service::{RunningServer, Service};
use serde_json::{json, Value};

struct Harness {
    _dir: tempfile::TempDir,
    server: RunningServer,
    agent: ureq::Agent,
}

impl Harness {
    fn start() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let static_dir = dir.path().join("static");
        std::fs::create_dir_all(&static_dir).unwrap();
        std::fs::write(static_dir.join("cat.jpg"), b"not really a jpeg").unwrap();
        let service = Service::open(&dir.path().join("data")).unwrap();
        let server = RunningServer::spawn(SocketAddr::from(([127, 0, 0, 1], 0)), Arc::new(RwLock::new(service)), static_dir).unwrap();
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().new_agent();
        Self { _dir: dir, server, agent }
    }

    fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.server.addr())
    }

    fn get(&self, path: &str) -> (u16, String) {
        let mut r = self.agent.get(&self.url(path)).call().unwrap();
        (r.status().as_u16(), r.body_mut().read_to_string().unwrap())
    }

    fn post(&self, path: &str, body: &str) -> (u16, String) {
        let mut r = self.agent.post(&self.url(path)).content_type("application/json").send(body).unwrap();
        (r.status().as_u16(), r.body_mut().read_to_string().unwrap())
    }
}

fn image_rows() -> String {
    [("vanilla", "v"), ("ours", "o")]
        .iter()
        .map(|(system, p)| format!("{{\"task_id\":\"{p}1\",\"prompt\":\"a tea ceremony\",\"image_ref\":\"{p}1.png\",\"system_tag\":\"{system}\"}}\n"))
        .collect()
}

fn scores(values: [i64; 6]) -> Value {
    let names = ["presence", "localization", "appropriateness", "aesthetics", "consistency", "cohesion"];
    names.iter().zip(values).map(|(n, v)| (n.to_string(), json!(v))).collect::<serde_json::Map<_, _>>().into()
}

#[test]
fn validation_and_status_codes() {
    let h = Harness::start();
    assert_eq!(h.post("/tasks?rubric=image", &image_rows()).0, 200);
    assert_eq!(h.post("/tasks?rubric=video", "").0, 400);
    assert_eq!(h.post("/tasks?rubric=image", "{\"prompt\":\"p\",\"image_ref\":\"x\"}").0, 400);
    assert_eq!(h.get("/tasks/next?annotator=&rubric=image").0, 400);
    assert_eq!(h.get("/tasks/next?annotator=a&rubric=video").0, 400);

    let ok = json!({ "task_id": "v1", "annotator_id": "a", "scores": scores([3, 3, 2, 2, 1, 2]) });
    let (status, body) = h.post("/judgments", &ok.to_string());
    assert_eq!(status, 200, "{body}");
    assert_eq!(h.post("/judgments", &ok.to_string()).0, 409);

    let six = json!({ "task_id": "o1", "annotator_id": "a", "scores": scores([3, 3, 6, 2, 1, 2]) });
    assert_eq!(h.post("/judgments", &six.to_string()).0, 400);
    let mut five = scores([3, 3, 2, 2, 1, 2]);
    five.as_object_mut().unwrap().remove("cohesion");
    assert_eq!(h.post("/judgments", &json!({ "task_id": "o1", "annotator_id": "a", "scores": five }).to_string()).0, 400);
    let wrong_rubric = json!({ "task_id": "o1", "annotator_id": "a", "rubric": "caption", "scores": scores([1; 6]) });
    assert_eq!(h.post("/judgments", &wrong_rubric.to_string()).0, 400);
    assert_eq!(h.post("/judgments", "{not json").0, 400);
    assert_eq!(h.post("/judgments", &json!({ "task_id": "zz", "annotator_id": "a", "scores": scores([1; 6]) }).to_string()).0, 400);

    let (status, next) = h.get("/tasks/next?annotator=a&rubric=image");
    assert_eq!(status, 200);
    assert_eq!(serde_json::from_str::<Value>(&next).unwrap()["task_id"], "o1");
    assert_eq!(h.post("/judgments", &json!({ "task_id": "o1", "annotator_id": "a", "scores": scores([5; 6]) }).to_string()).0, 200);
    assert_eq!(h.get("/tasks/next?annotator=a&rubric=image").0, 204);
    assert_eq!(h.get("/tasks/next?annotator=b&rubric=caption").0, 204);
}

#[test]
fn export_progress_rubric_and_static() {
    let h = Harness::start();
    h.post("/tasks?rubric=image", &image_rows());
    for (task, who) in [("v1", "a"), ("o1", "a"), ("v1", "b")] {
        assert_eq!(h.post("/judgments", &json!({ "task_id": task, "annotator_id": who, "scores": scores([4; 6]) }).to_string()).0, 200);
    }
    let (status, export) = h.get("/export?rubric=image");
    assert_eq!(status, 200);
    let rows: Vec<Value> = export.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 18);
    assert_eq!(rows[0]["criterion"], "presence");
    assert_eq!(rows[0]["system_tag"], "vanilla");
    let ts: Vec<u64> = rows.iter().map(|r| r["ts"].as_u64().unwrap()).collect();
    assert!(ts.windows(2).all(|w| w[0] <= w[1]));
    let (_, later) = h.get(&format!("/export?rubric=image&since={}", ts[17]));
    assert_eq!(later.lines().count(), 6);
    assert_eq!(h.get("/export?rubric=caption").1, "");
    assert_eq!(h.get("/export").0, 400);

    let progress: Value = serde_json::from_str(&h.get("/progress").1).unwrap();
    assert_eq!(progress["rubrics"]["image"]["judgments"], 3);
    assert_eq!(progress["annotators"]["a"], 2);

    let rubric: Value = serde_json::from_str(&h.get("/rubric/caption").1).unwrap();
    let criteria = rubric["criteria"].as_array().unwrap();
    assert_eq!(criteria.len(), 6);
    assert_eq!(criteria[0]["id"], "adequacy");
    assert_eq!(criteria[0]["anchors"].as_object().unwrap().len(), 5);
    assert_eq!(h.get("/rubric/other").0, 400);

    assert_eq!(h.get("/static/cat.jpg"), (200, "not really a jpeg".to_string()));
    assert_eq!(h.get("/static/../data/judgments.jsonl").0, 404);
}

#[test]
fn state_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let agent = ureq::Agent::config_builder().http_status_as_error(false).build().new_agent();
    for round in 0..2 {
        let service = Service::open(&data).unwrap();
        let server = RunningServer::spawn(SocketAddr::from(([127, 0, 0, 1], 0)), Arc::new(RwLock::new(service)), dir.path().into()).unwrap();
        let base = format!("http://{}", server.addr());
        if round == 0 {
            agent.post(&format!("{base}/tasks?rubric=image")).send(image_rows()).unwrap();
            let j = json!({ "task_id": "v1", "annotator_id": "a", "scores": scores([2; 6]) });
            assert_eq!(agent.post(&format!("{base}/judgments")).send(j.to_string()).unwrap().status(), 200);
        } else {
            let mut r = agent.get(&format!("{base}/tasks/next?annotator=a&rubric=image")).call().unwrap();
            let task: Value = serde_json::from_str(&r.body_mut().read_to_string().unwrap()).unwrap();
            assert_eq!(task["task_id"], "o1");
            let dup = json!({ "task_id": "v1", "annotator_id": "a", "scores": scores([2; 6]) });
            assert_eq!(agent.post(&format!("{base}/judgments")).send(dup.to_string()).unwrap().status(), 409);
        }
        server.shutdown().unwrap();
    }
}
