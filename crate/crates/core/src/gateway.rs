//! Clients for the two external services an evaluation talks to: the
//! user-hosted policy server and the classifier services.
//!
//! Wire contract (all bodies UTF-8 JSON):
//!
//! ```text
//! POST /act       {"image": <base64 PNG 256x256>, "instruction": str, "proprio": [7]?}
//!              -> {"actions": [[7 floats], ...]}
//! POST /classify  {"image": <base64 PNG>, "prompt": str} -> {"answer": str}
//! GET  /health    -> 200
//! ```

use std::io::Cursor;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{Action, Verdict};

pub const IMAGE_SIDE: u32 = 256;
pub const ACTION_DIM: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyEndpoint {
    pub base_url: String,
    pub request_timeout_ms: u64,
    pub max_retries: u32,
}

impl PolicyEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            request_timeout_ms: 10_000,
            max_retries: 2,
        }
    }

    pub fn with_timeout_ms(mut self, ms: u64) -> Self {
        self.request_timeout_ms = ms;
        self
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.max_retries = retries;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.request_timeout_ms == 0 {
            return Err(GatewayError::InvalidRequest("request_timeout_ms must be positive".into()));
        }
        if !self.base_url.starts_with("http://") && !self.base_url.starts_with("https://") {
            return Err(GatewayError::InvalidRequest(format!("not an http(s) URL: {}", self.base_url)));
        }
        Ok(())
    }

    fn url(&self, route: &str) -> String {
        format!("{}{}", self.base_url, route)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationPayload {
    /// Base64-encoded PNG, exactly 256x256 RGB.
    pub image: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proprio: Option<Action>,
}

impl ObservationPayload {
    pub fn from_raster(raster: &RgbImage, instruction: &str, proprio: Option<Action>) -> Result<Self, GatewayError> {
        Ok(Self {
            image: encode_png_base64(raster)?,
            instruction: instruction.to_owned(),
            proprio,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub image: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierVerdict {
    pub label: Verdict,
    pub raw_text: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("no answer after {attempts} attempt(s): {last}")]
    Timeout { attempts: u32, last: String },
    #[error("server answered HTTP {0}")]
    Status(u16),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("action {index} has {len} components, expected 7")]
    DimensionError { index: usize, len: usize },
    #[error("answer {0:?} is not in the answer table")]
    UnparseableAnswer(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Parse and validate an `/act` response body.
///
/// Type errors (non-numeric, non-finite, missing or empty `actions`) are
/// [`GatewayError::MalformedResponse`]; well-typed actions of the wrong
/// length are [`GatewayError::DimensionError`].
pub fn parse_action_response(body: &[u8]) -> Result<ActionChunk, GatewayError> {
    let malformed = |msg: &str| GatewayError::MalformedResponse(msg.to_owned());
    let value: Value = serde_json::from_slice(body).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
    let actions = value
        .get("actions")
        .ok_or_else(|| malformed("missing `actions`"))?
        .as_array()
        .ok_or_else(|| malformed("`actions` is not an array"))?;
    if actions.is_empty() {
        return Err(malformed("`actions` is empty"));
    }
    let mut parsed = Vec::with_capacity(actions.len());
    for (index, action) in actions.iter().enumerate() {
        let components = action
            .as_array()
            .ok_or_else(|| GatewayError::MalformedResponse(format!("action {index} is not an array")))?;
        let mut values = Vec::with_capacity(components.len());
        for c in components {
            let v = c
                .as_f64()
                .ok_or_else(|| GatewayError::MalformedResponse(format!("action {index} has a non-numeric component")))?;
            if !v.is_finite() {
                return Err(GatewayError::MalformedResponse(format!("action {index} is not finite")));
            }
            values.push(v);
        }
        let action: Action = values
            .as_slice()
            .try_into()
            .map_err(|_| GatewayError::DimensionError { index, len: values.len() })?;
        parsed.push(action);
    }
    Ok(ActionChunk { actions: parsed })
}

/// Case-insensitive exact match of the trimmed answer against `table`.
pub fn parse_classifier_answer(raw: &str, table: &[(String, Verdict)]) -> Result<ClassifierVerdict, GatewayError> {
    let key = raw.trim().to_lowercase();
    table
        .iter()
        .find(|(answer, _)| *answer == key)
        .map(|(_, label)| ClassifierVerdict { label: *label, raw_text: raw.to_owned() })
        .ok_or_else(|| GatewayError::UnparseableAnswer(raw.to_owned()))
}

pub fn encode_png(raster: &RgbImage) -> Result<Vec<u8>, GatewayError> {
    use image::codecs::png::{CompressionType, FilterType, PngEncoder};
    use image::ImageEncoder;

    let mut out = Vec::new();
    PngEncoder::new_with_quality(&mut out, CompressionType::Default, FilterType::Adaptive)
        .write_image(raster.as_raw(), raster.width(), raster.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| GatewayError::InvalidRequest(format!("png encode: {e}")))?;
    Ok(out)
}

pub fn encode_png_base64(raster: &RgbImage) -> Result<String, GatewayError> {
    if raster.dimensions() != (IMAGE_SIDE, IMAGE_SIDE) {
        return Err(GatewayError::InvalidRequest(format!(
            "image must be {IMAGE_SIDE}x{IMAGE_SIDE}, got {:?}",
            raster.dimensions()
        )));
    }
    Ok(BASE64.encode(encode_png(raster)?))
}

/// Decode a base64 PNG and check it is 256x256 RGB.
pub fn decode_png_base64(encoded: &str) -> Result<RgbImage, GatewayError> {
    let bytes = BASE64
        .decode(encoded.as_bytes())
        .map_err(|e| GatewayError::InvalidRequest(format!("base64: {e}")))?;
    let decoded = image::ImageReader::with_format(Cursor::new(bytes), image::ImageFormat::Png)
        .decode()
        .map_err(|e| GatewayError::InvalidRequest(format!("png: {e}")))?;
    if decoded.color() != image::ColorType::Rgb8 {
        return Err(GatewayError::InvalidRequest(format!("expected RGB8 image, got {:?}", decoded.color())));
    }
    let rgb = decoded.into_rgb8();
    if rgb.dimensions() != (IMAGE_SIDE, IMAGE_SIDE) {
        return Err(GatewayError::InvalidRequest(format!(
            "image must be {IMAGE_SIDE}x{IMAGE_SIDE}, got {:?}",
            rgb.dimensions()
        )));
    }
    Ok(rgb)
}

/// Stateless HTTP client; safe to share across cells.
#[derive(Debug, Clone, Default)]
pub struct GatewayClient {
    http: reqwest::Client,
}

enum Attempt {
    Retry(String),
    Fatal(GatewayError),
}

impl GatewayClient {
    pub fn new() -> Self {
        Self { http: reqwest::Client::new() }
    }

    async fn post_with_retries<T: Serialize>(
        &self,
        endpoint: &PolicyEndpoint,
        route: &str,
        body: &T,
    ) -> Result<(Vec<u8>, f64), GatewayError> {
        endpoint.validate()?;
        let timeout = Duration::from_millis(endpoint.request_timeout_ms);
        let attempts = endpoint.max_retries + 1;
        let mut last = String::new();
        for _ in 0..attempts {
            let started = Instant::now();
            let outcome = match self.http.post(endpoint.url(route)).timeout(timeout).json(body).send().await {
                Err(e) => Attempt::Retry(e.to_string()),
                Ok(resp) if resp.status().is_server_error() => Attempt::Retry(format!("HTTP {}", resp.status())),
                Ok(resp) if !resp.status().is_success() => Attempt::Fatal(GatewayError::Status(resp.status().as_u16())),
                Ok(resp) => match resp.bytes().await {
                    Ok(bytes) => return Ok((bytes.to_vec(), started.elapsed().as_secs_f64() * 1e3)),
                    Err(e) => Attempt::Retry(e.to_string()),
                },
            };
            match outcome {
                Attempt::Retry(msg) => last = msg,
                Attempt::Fatal(err) => return Err(err),
            }
        }
        Err(GatewayError::Timeout { attempts, last })
    }

    /// Ask the policy server for the next chunk of actions. Returns the
    /// chunk with the round-trip latency of the successful attempt in ms.
    pub async fn query_policy(
        &self,
        endpoint: &PolicyEndpoint,
        obs: &ObservationPayload,
    ) -> Result<(ActionChunk, f64), GatewayError> {
        let (body, latency_ms) = self.post_with_retries(endpoint, "/act", obs).await?;
        Ok((parse_action_response(&body)?, latency_ms))
    }

    pub async fn query_classifier(
        &self,
        endpoint: &PolicyEndpoint,
        image: &str,
        prompt: &str,
        table: &[(String, Verdict)],
    ) -> Result<ClassifierVerdict, GatewayError> {
        if prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("prompt must not be empty".into()));
        }
        let request = ClassifyRequest { image: image.to_owned(), prompt: prompt.to_owned() };
        let (body, _) = self.post_with_retries(endpoint, "/classify", &request).await?;
        let response: ClassifyResponse =
            serde_json::from_slice(&body).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        parse_classifier_answer(&response.answer, table)
    }

    /// True iff `GET /health` answers 2xx within the endpoint timeout.
    pub async fn health_check(&self, endpoint: &PolicyEndpoint) -> bool {
        if endpoint.validate().is_err() {
            return false;
        }
        self.http
            .get(endpoint.url("/health"))
            .timeout(Duration::from_millis(endpoint.request_timeout_ms))
            .send()
            .await
            .map(|r| r.status().is_success())
            .unwrap_or(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> Vec<(String, Verdict)> {
        vec![
            ("yes".into(), Verdict::Success),
            ("no".into(), Verdict::Failure),
            ("invalid".into(), Verdict::Invalid),
        ]
    }

    #[test]
    fn parses_a_chunk_of_four() {
        let body = br#"{"actions": [[0,0,0,0,0,0,1],[0.01,0,0,0,0,0,1],[0,0.02,0,0,0,0,0],[0,0,-0.01,0.1,0,0,0]]}"#;
        let chunk = parse_action_response(body).unwrap();
        assert_eq!(chunk.actions.len(), 4);
        assert!(chunk.actions.iter().all(|a| a.len() == 7));
    }

    #[test]
    fn six_component_action_is_a_dimension_error() {
        let body = br#"{"actions": [[0,0,0,0,0,0]]}"#;
        assert_eq!(
            parse_action_response(body),
            Err(GatewayError::DimensionError { index: 0, len: 6 })
        );
    }

    #[test]
    fn empty_and_non_numeric_are_malformed() {
        for body in [&b""[..], br#"{"actions": []}"#, br#"{"actions": [["a",0,0,0,0,0,0]]}"#, b"[]"] {
            assert!(matches!(parse_action_response(body), Err(GatewayError::MalformedResponse(_))));
        }
    }

    #[test]
    fn answers_parse_case_insensitively_after_trim() {
        assert_eq!(parse_classifier_answer("  Yes\n", &table()).unwrap().label, Verdict::Success);
        assert_eq!(parse_classifier_answer("INVALID", &table()).unwrap().label, Verdict::Invalid);
        assert_eq!(
            parse_classifier_answer("maybe", &table()),
            Err(GatewayError::UnparseableAnswer("maybe".into()))
        );
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let mut img = RgbImage::new(IMAGE_SIDE, IMAGE_SIDE);
        for (i, p) in img.pixels_mut().enumerate() {
            *p = image::Rgb([(i % 251) as u8, (i % 13) as u8, (i % 7) as u8]);
        }
        let encoded = encode_png_base64(&img).unwrap();
        assert_eq!(decode_png_base64(&encoded).unwrap(), img);
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let img = RgbImage::new(128, 256);
        assert!(encode_png_base64(&img).is_err());
        let encoded = BASE64.encode(encode_png(&img).unwrap());
        assert!(decode_png_base64(&encoded).is_err());
    }

    #[test]
    fn endpoint_validation() {
        assert!(PolicyEndpoint::new("http://127.0.0.1:9").validate().is_ok());
        assert!(PolicyEndpoint::new("127.0.0.1:9").validate().is_err());
        assert!(PolicyEndpoint::new("http://x").with_timeout_ms(0).validate().is_err());
    }
}
