//! Detector and captioner clients.
//!
//! Two implementations back both traits: [`MockClient`] replays recordings
//! from a directory and is what every test uses; [`HttpClient`] speaks a
//! small JSON-over-HTTP protocol and is only used when an endpoint is
//! configured.
//!
//! Mock directory layout, per image `source_id`:
//!
//! - `<source_id>.detections.json`: `[{"box": [x0, y0, x1, y1], "confidence": c}, ...]`
//! - `<source_id>.captions.json`: `{"global": "...", "regions": ["...", ...]}`,
//!   where `regions[i]` is the caption for detection `i`.
//!
//! HTTP protocol: `POST <endpoint>/detect` with body
//! `{"source_id", "width", "height", "path"}` answers `{"boxes": [...]}` in
//! the detection record shape above; `POST <endpoint>/caption` with the same
//! fields plus `"index"` and `"box"` (both `null` for the global caption)
//! answers `{"caption": "..."}`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BoundingBox, RegionAnnotation};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("no recording for {key} in {dir}")]
    NoRecording { key: String, dir: PathBuf },
    #[error("malformed response from {origin}: {message}")]
    Malformed { origin: String, message: String },
    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
}

/// Opaque handle to an input image. Only dimensions and identity are used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImageRef {
    pub source_id: String,
    pub width: u32,
    pub height: u32,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CaptionTarget {
    Global,
    Region { index: usize, bbox: BoundingBox },
}

pub trait DetectorClient: Send + Sync {
    /// Raw candidate boxes, unfiltered, in the order the detector produced them.
    fn detect(&self, image: &ImageRef) -> Result<Vec<BoundingBox>, ClientError>;
}

pub trait CaptionerClient: Send + Sync {
    fn caption(&self, image: &ImageRef, target: CaptionTarget) -> Result<String, ClientError>;
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    confidence: f64,
}

impl DetectionRecord {
    fn into_box(self, origin: &str, idx: usize) -> Result<BoundingBox, ClientError> {
        let [x0, y0, x1, y1] = self.bbox;
        let b = BoundingBox { x0, y0, x1, y1, confidence: self.confidence };
        b.validate(&format!("boxes[{idx}]")).map_err(|e| ClientError::Malformed {
            origin: origin.to_owned(),
            message: e.to_string(),
        })?;
        Ok(b)
    }
}

#[derive(Deserialize)]
struct CaptionRecording {
    global: Option<String>,
    #[serde(default)]
    regions: Vec<String>,
}

/// File-backed replay of detector and captioner outputs.
#[derive(Debug, Clone)]
pub struct MockClient {
    dir: PathBuf,
}

impl MockClient {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn read(&self, file: &str) -> Result<(String, String), ClientError> {
        let path = self.dir.join(file);
        match fs::read_to_string(&path) {
            Ok(text) => Ok((text, path.display().to_string())),
            Err(_) => Err(ClientError::NoRecording { key: file.to_owned(), dir: self.dir.clone() }),
        }
    }
}

impl DetectorClient for MockClient {
    fn detect(&self, image: &ImageRef) -> Result<Vec<BoundingBox>, ClientError> {
        let (text, origin) = self.read(&format!("{}.detections.json", image.source_id))?;
        let records: Vec<DetectionRecord> = serde_json::from_str(&text)
            .map_err(|e| ClientError::Malformed { origin: origin.clone(), message: e.to_string() })?;
        records.into_iter().enumerate().map(|(i, r)| r.into_box(&origin, i)).collect()
    }
}

impl CaptionerClient for MockClient {
    fn caption(&self, image: &ImageRef, target: CaptionTarget) -> Result<String, ClientError> {
        let file = format!("{}.captions.json", image.source_id);
        let (text, origin) = self.read(&file)?;
        let rec: CaptionRecording = serde_json::from_str(&text)
            .map_err(|e| ClientError::Malformed { origin, message: e.to_string() })?;
        let no_recording = |key: String| ClientError::NoRecording { key, dir: self.dir.clone() };
        let caption = match target {
            CaptionTarget::Global => rec
                .global
                .ok_or_else(|| no_recording(format!("({}, global)", image.source_id)))?,
            CaptionTarget::Region { index, .. } => rec
                .regions
                .get(index)
                .cloned()
                .ok_or_else(|| no_recording(format!("({}, {index})", image.source_id)))?,
        };
        if caption.is_empty() {
            log::warn!("empty caption for {} {:?}", image.source_id, target);
        }
        Ok(caption)
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub endpoint: String,
    pub timeout: Duration,
    /// Name of the environment variable holding a bearer token, if any.
    pub bearer_token_env: Option<String>,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self { endpoint: endpoint.into(), timeout: Duration::from_secs(30), bearer_token_env: None }
    }
}

/// Generic JSON-over-HTTP detector/captioner.
pub struct HttpClient {
    cfg: HttpConfig,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    source_id: &'a str,
    width: u32,
    height: u32,
    path: Option<&'a Path>,
    #[serde(skip_serializing_if = "Option::is_none")]
    index: Option<Option<usize>>,
    #[serde(rename = "box", skip_serializing_if = "Option::is_none")]
    bbox: Option<Option<[f64; 4]>>,
}

#[derive(Deserialize)]
struct DetectResponse {
    boxes: Vec<DetectionRecord>,
}

#[derive(Deserialize)]
struct CaptionResponse {
    caption: Option<String>,
}

impl HttpClient {
    pub fn new(cfg: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Self { cfg, agent }
    }

    fn url(&self, route: &str) -> String {
        format!("{}/{route}", self.cfg.endpoint.trim_end_matches('/'))
    }

    fn post<T: for<'de> Deserialize<'de>>(&self, route: &str, body: &HttpRequest<'_>) -> Result<T, ClientError> {
        let url = self.url(route);
        let mut req = self.agent.post(&url);
        if let Some(var) = &self.cfg.bearer_token_env {
            if let Ok(token) = std::env::var(var) {
                req = req.header("Authorization", &format!("Bearer {token}"));
            }
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| ClientError::Transport { endpoint: url.clone(), message: e.to_string() })?;
        resp.body_mut()
            .read_json::<T>()
            .map_err(|e| ClientError::Malformed { origin: url, message: e.to_string() })
    }

    fn request<'a>(image: &'a ImageRef) -> HttpRequest<'a> {
        HttpRequest {
            source_id: &image.source_id,
            width: image.width,
            height: image.height,
            path: image.path.as_deref(),
            index: None,
            bbox: None,
        }
    }
}

impl DetectorClient for HttpClient {
    fn detect(&self, image: &ImageRef) -> Result<Vec<BoundingBox>, ClientError> {
        let resp: DetectResponse = self.post("detect", &Self::request(image))?;
        let origin = self.url("detect");
        resp.boxes.into_iter().enumerate().map(|(i, r)| r.into_box(&origin, i)).collect()
    }
}

impl CaptionerClient for HttpClient {
    fn caption(&self, image: &ImageRef, target: CaptionTarget) -> Result<String, ClientError> {
        let mut body = Self::request(image);
        match target {
            CaptionTarget::Global => {
                body.index = Some(None);
                body.bbox = Some(None);
            }
            CaptionTarget::Region { index, bbox } => {
                body.index = Some(Some(index));
                body.bbox = Some(Some(bbox.coords()));
            }
        }
        let resp: CaptionResponse = self.post("caption", &body)?;
        let caption = resp.caption.unwrap_or_default();
        if caption.is_empty() {
            log::warn!("empty caption from {} for {:?}", self.cfg.endpoint, target);
        }
        Ok(caption)
    }
}

/// How many text tokens a regional caption occupies in the joint sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenPolicy {
    /// Every caption occupies exactly this many tokens.
    Fixed(usize),
    /// One token per whitespace-separated word, clamped to `1..=max`.
    Words { max: usize },
}

impl TokenPolicy {
    pub fn tokens_for(&self, caption: &str) -> usize {
        match *self {
            TokenPolicy::Fixed(n) => n.max(1),
            TokenPolicy::Words { max } => caption.split_whitespace().count().clamp(1, max.max(1)),
        }
    }
}

/// Run the detector, then caption every candidate box, producing raw
/// (unfiltered) region candidates plus the global caption.
pub fn annotate(
    image: &ImageRef,
    detector: &dyn DetectorClient,
    captioner: &dyn CaptionerClient,
    policy: TokenPolicy,
) -> Result<(String, Vec<RegionAnnotation>), ClientError> {
    let boxes = detector.detect(image)?;
    let global = captioner.caption(image, CaptionTarget::Global)?;
    let mut regions = Vec::with_capacity(boxes.len());
    for (index, bbox) in boxes.into_iter().enumerate() {
        let caption = captioner.caption(image, CaptionTarget::Region { index, bbox })?;
        let token_count = policy.tokens_for(&caption);
        regions.push(RegionAnnotation { bbox, caption, token_count });
    }
    Ok((global, regions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read;
    use std::net::TcpListener;

    fn image(id: &str) -> ImageRef {
        ImageRef { source_id: id.into(), width: 32, height: 32, path: None }
    }

    fn mock_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let boxes: Vec<String> = (0..7)
            .map(|i| {
                let c = 0.3 + 0.1 * i as f64;
                format!(r#"{{"box": [0.1, 0.1, 0.{}, 0.9], "confidence": {c}}}"#, i + 2)
            })
            .collect();
        fs::write(dir.path().join("img7.detections.json"), format!("[{}]", boxes.join(","))).unwrap();
        fs::write(
            dir.path().join("img7.captions.json"),
            r#"{"global": "a busy harbour", "regions": ["a gull", "a boat with red sails", ""]}"#,
        )
        .unwrap();
        dir
    }

    #[test]
    fn mock_replays_boxes_in_order() {
        let dir = mock_dir();
        let m = MockClient::new(dir.path());
        let boxes = m.detect(&image("img7")).unwrap();
        assert_eq!(boxes.len(), 7);
        for (i, b) in boxes.iter().enumerate() {
            assert_eq!(b.confidence, 0.3 + 0.1 * i as f64);
            assert_eq!(b.x1, format!("0.{}", i + 2).parse::<f64>().unwrap());
        }
        assert_eq!(boxes, m.detect(&image("img7")).unwrap());
    }

    #[test]
    fn mock_missing_recording() {
        let dir = mock_dir();
        let m = MockClient::new(dir.path());
        let err = m.detect(&image("absent")).unwrap_err();
        assert!(matches!(err, ClientError::NoRecording { .. }));
        assert!(err.to_string().contains("no recording"));
    }

    #[test]
    fn mock_captions() {
        let dir = mock_dir();
        let m = MockClient::new(dir.path());
        let img = image("img7");
        assert_eq!(m.caption(&img, CaptionTarget::Global).unwrap(), "a busy harbour");
        let bbox = BoundingBox::zero();
        assert_eq!(m.caption(&img, CaptionTarget::Region { index: 1, bbox }).unwrap(), "a boat with red sails");
        assert_eq!(m.caption(&img, CaptionTarget::Region { index: 2, bbox }).unwrap(), "");
        let err = m.caption(&img, CaptionTarget::Region { index: 9, bbox }).unwrap_err();
        assert!(matches!(err, ClientError::NoRecording { .. }), "{err}");
    }

    #[test]
    fn mock_malformed() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("bad.detections.json"), r#"[{"box": [0.5, 0, 0.1, 1], "confidence": 0.5}]"#)
            .unwrap();
        let err = MockClient::new(dir.path()).detect(&image("bad")).unwrap_err();
        assert!(matches!(err, ClientError::Malformed { .. }), "{err}");
    }

    #[test]
    fn annotate_uses_policy() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("a.detections.json"),
            r#"[{"box": [0, 0, 0.5, 0.5], "confidence": 0.9}, {"box": [0.5, 0.5, 1, 1], "confidence": 0.7}]"#,
        )
        .unwrap();
        fs::write(dir.path().join("a.captions.json"), r#"{"global": "g", "regions": ["one two three", "x"]}"#)
            .unwrap();
        let m = MockClient::new(dir.path());
        let (global, regions) = annotate(&image("a"), &m, &m, TokenPolicy::Words { max: 2 }).unwrap();
        assert_eq!(global, "g");
        assert_eq!(regions.iter().map(|r| r.token_count).collect::<Vec<_>>(), [2, 1]);
        let (_, regions) = annotate(&image("a"), &m, &m, TokenPolicy::Fixed(4)).unwrap();
        assert!(regions.iter().all(|r| r.token_count == 4));
    }

    #[test]
    fn http_timeout_names_endpoint() {
        // Accepts the connection but never answers.
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            if let Ok((mut s, _)) = listener.accept() {
                let mut buf = [0u8; 1024];
                let _ = s.read(&mut buf);
                std::thread::sleep(Duration::from_millis(1500));
            }
        });
        let endpoint = format!("http://{addr}");
        let client = HttpClient::new(HttpConfig {
            endpoint: endpoint.clone(),
            timeout: Duration::from_millis(300),
            bearer_token_env: None,
        });
        let err = client.detect(&image("x")).unwrap_err();
        match &err {
            ClientError::Transport { endpoint: e, .. } => assert!(e.starts_with(&endpoint)),
            other => panic!("expected transport error, got {other}"),
        }
        handle.join().unwrap();
    }

    #[test]
    fn http_round_trip() {
        use std::io::Write;
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let mut buf = vec![0u8; 4096];
            let n = s.read(&mut buf).unwrap();
            let req = String::from_utf8_lossy(&buf[..n]).to_string();
            let body = r#"{"boxes": [{"box": [0.1, 0.2, 0.3, 0.4], "confidence": 0.55}]}"#;
            write!(
                s,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            )
            .unwrap();
            req
        });
        std::env::set_var("REGATTN_TEST_TOKEN", "s3cret");
        let client = HttpClient::new(HttpConfig {
            endpoint: format!("http://{addr}/"),
            timeout: Duration::from_secs(5),
            bearer_token_env: Some("REGATTN_TEST_TOKEN".into()),
        });
        let boxes = client.detect(&image("x")).unwrap();
        assert_eq!(boxes, vec![BoundingBox { x0: 0.1, y0: 0.2, x1: 0.3, y1: 0.4, confidence: 0.55 }]);
        let req = handle.join().unwrap();
        assert!(req.starts_with("POST /detect"), "{req}");
        assert!(req.to_ascii_lowercase().contains("authorization: bearer s3cret"), "{req}");
    }
}
