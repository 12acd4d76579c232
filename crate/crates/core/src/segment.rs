//! Box prompt to mask: a deterministic rectangle segmenter and an HTTP client
//! for an external promptable-segmentation service.

use std::io::Read;
use std::thread;
use std::time::{Duration, Instant};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clamp_to_frame, BBox};
use crate::io::{rle_decode, MaskRaster, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRequest {
    pub video_id: String,
    pub frame_index: u32,
    pub frame_size: (u32, u32),
    pub prompt_box: BBox,
}

impl SegmentRequest {
    /// Opaque id used to pair responses with requests.
    pub fn request_id(&self) -> String {
        format!("{}/{}", self.video_id, self.frame_index)
    }
}

/// Pixels whose centers fall inside the box (half-open on the far edges),
/// after clipping the box to the frame. A box that clips away entirely gives
/// an empty mask.
pub fn rasterize_box(b: &BBox, width: u32, height: u32) -> MaskRaster {
    let mut mask = MaskRaster::zeros(width, height);
    let clipped = match clamp_to_frame(b, width as f64, height as f64) {
        Ok(c) => c,
        Err(_) => return mask,
    };
    let (x1, y1, x2, y2) = clipped.corners();
    // first/last pixel index whose center c = i + 0.5 satisfies lo <= c < hi
    let span = |lo: f64, hi: f64, n: u32| {
        let first = (lo - 0.5).ceil().max(0.0) as u32;
        let last = ((hi - 0.5).ceil() as i64 - 1).min(n as i64 - 1);
        (first, last)
    };
    let (xa, xb) = span(x1, x2, width);
    let (ya, yb) = span(y1, y2, height);
    if xb < xa as i64 || yb < ya as i64 {
        return mask;
    }
    for y in ya..=yb as u32 {
        for x in xa..=xb as u32 {
            mask.set(x, y, true);
        }
    }
    mask
}

/// Rectangle segmenter standing in for a promptable foundation model.
pub fn mock_segment(req: &SegmentRequest) -> MaskRaster {
    let (w, h) = req.frame_size;
    if clamp_to_frame(&req.prompt_box, w as f64, h as f64).is_err() {
        warn!(
            "{}: prompt box {:?} lies outside the {w}x{h} frame, empty mask",
            req.request_id(),
            req.prompt_box.to_array()
        );
    }
    rasterize_box(&req.prompt_box, w, h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout: Duration,
    pub retries: u32,
    /// First backoff delay; doubled after every failed attempt.
    pub backoff: Duration,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(30),
            retries: 3,
            backoff: Duration::from_millis(200),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireRequest {
    pub schema: u32,
    pub request_id: String,
    pub video: String,
    pub frame: u32,
    pub width: u32,
    pub height: u32,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub image: String,
}

/// Service response; mirrors the mask record with an added request id.
#[derive(Debug, Serialize, Deserialize)]
pub struct WireResponse {
    pub schema: u32,
    #[serde(default)]
    pub request_id: Option<String>,
    pub video: String,
    pub frame: u32,
    pub width: u32,
    pub height: u32,
    pub rle: Vec<u64>,
}

impl WireRequest {
    pub fn from_request(req: &SegmentRequest) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            request_id: req.request_id(),
            video: req.video_id.clone(),
            frame: req.frame_index,
            width: req.frame_size.0,
            height: req.frame_size.1,
            bbox: req.prompt_box.to_array(),
            image: format!("{}/{:05}", req.video_id, req.frame_index),
        }
    }
}

fn decode_response(req: &SegmentRequest, body: &str) -> Result<MaskRaster> {
    let resp: WireResponse =
        serde_json::from_str(body).map_err(|e| Error::Protocol(format!("bad response body: {e}")))?;
    if resp.schema != SCHEMA_VERSION {
        return Err(Error::Protocol(format!("unsupported schema {}", resp.schema)));
    }
    if let Some(id) = &resp.request_id {
        if *id != req.request_id() {
            return Err(Error::Protocol(format!(
                "response for {id} received for request {}",
                req.request_id()
            )));
        }
    }
    if (resp.width, resp.height) != req.frame_size {
        return Err(Error::Protocol(format!(
            "mask is {}x{}, frame is {}x{}",
            resp.width, resp.height, req.frame_size.0, req.frame_size.1
        )));
    }
    rle_decode(&resp.rle, resp.width, resp.height).map_err(|e| Error::Protocol(e.to_string()))
}

/// HTTP client for `POST {endpoint}/segment`.
#[derive(Debug, Clone)]
pub struct RemoteSegmenter {
    config: RemoteConfig,
}

impl RemoteSegmenter {
    pub fn new(config: RemoteConfig) -> Self {
        Self { config }
    }

    fn url(&self) -> String {
        format!("{}/segment", self.config.endpoint.trim_end_matches('/'))
    }

    fn attempt(&self, body: &str, timeout: Duration, req: &SegmentRequest) -> Result<MaskRaster> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let result = agent
            .post(&self.url())
            .header("content-type", "application/json")
            .send(body);
        let mut resp = match result {
            Ok(r) => r,
            Err(ureq::Error::Timeout(t)) => {
                return Err(Error::Timeout {
                    attempts: 1,
                    message: t.to_string(),
                })
            }
            Err(e) => return Err(Error::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        let mut text = String::new();
        let read = resp
            .body_mut()
            .as_reader()
            .read_to_string(&mut text);
        if let Err(e) = read {
            return Err(if e.kind() == std::io::ErrorKind::TimedOut {
                Error::Timeout {
                    attempts: 1,
                    message: e.to_string(),
                }
            } else {
                Error::Transport(e.to_string())
            });
        }
        if !(200..300).contains(&status) {
            return Err(Error::Service { status, body: text });
        }
        decode_response(req, &text)
    }

    /// One request with bounded retries. Total wall time never exceeds
    /// `(retries + 1) * timeout`: backoff sleeps come out of the same budget.
    pub fn segment(&self, req: &SegmentRequest) -> Result<MaskRaster> {
        let body = serde_json::to_string(&WireRequest::from_request(req))
            .map_err(|e| Error::Protocol(e.to_string()))?;
        let budget = self.config.timeout * (self.config.retries + 1);
        let start = Instant::now();
        let mut backoff = self.config.backoff;
        let mut attempts = 0usize;
        loop {
            let remaining = budget.saturating_sub(start.elapsed());
            if remaining.is_zero() {
                return Err(Error::Timeout {
                    attempts,
                    message: format!("budget of {budget:?} exhausted"),
                });
            }
            attempts += 1;
            let err = match self.attempt(&body, self.config.timeout.min(remaining), req) {
                Ok(mask) => return Ok(mask),
                Err(e) => e,
            };
            let err = match err {
                Error::Timeout { message, .. } => Error::Timeout { attempts, message },
                other => other,
            };
            if !err.is_retryable() || attempts > self.config.retries as usize {
                return Err(err);
            }
            warn!("{}: attempt {attempts} failed ({err}), retrying", req.request_id());
            let remaining = budget.saturating_sub(start.elapsed());
            thread::sleep(backoff.min(remaining));
            backoff *= 2;
        }
    }

    /// Issue requests with at most `max_in_flight` outstanding at a time.
    /// Results are returned in request order.
    pub fn segment_batch(&self, reqs: &[SegmentRequest], max_in_flight: usize) -> Vec<Result<MaskRaster>> {
        let max_in_flight = max_in_flight.max(1);
        let mut out = Vec::with_capacity(reqs.len());
        for chunk in reqs.chunks(max_in_flight) {
            let results: Vec<Result<MaskRaster>> = thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|r| s.spawn(move || self.segment(r))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::Transport("worker panicked".into()))))
                    .collect()
            });
            out.extend(results);
        }
        out
    }
}

pub fn remote_segment(config: &RemoteConfig, req: &SegmentRequest) -> Result<MaskRaster> {
    RemoteSegmenter::new(config.clone()).segment(req)
}
