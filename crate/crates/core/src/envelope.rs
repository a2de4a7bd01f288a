//! Wire formats exchanged between world clients, the gateway and handlers.
//!
//! A script's `callExternal`-style payload travels inside a [`TriggerEnvelope`]
//! (six camelCase fields). Handlers answer with a [`HandlerResponse`], which is
//! always rendered as `{"response": "<string>"}` on success or as
//! `{"error": {"code", "message", "requestId"}}` on failure.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// The JSON document POSTed by a world client to the gateway.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TriggerEnvelope {
    pub request: String,
    pub request_id: String,
    pub world_id: String,
    pub item_id: String,
    pub user_id: String,
    pub timestamp_ms: u64,
}

impl TriggerEnvelope {
    /// Envelope with the given payload and fresh metadata.
    pub fn new(request: impl Into<String>) -> Self {
        Self {
            request: request.into(),
            request_id: next_request_id(),
            world_id: String::new(),
            item_id: String::new(),
            user_id: String::new(),
            timestamp_ms: 0,
        }
    }
}

static REQUEST_SEQ: AtomicU64 = AtomicU64::new(0);

/// Process-unique request id for envelopes that arrive without one.
pub fn next_request_id() -> String {
    let n = REQUEST_SEQ.fetch_add(1, Ordering::Relaxed);
    format!("gw-{}-{n}", std::process::id())
}

/// Machine-readable failure class carried in every error body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorCode {
    MalformedEnvelope,
    MalformedPayload,
    UnknownFunction,
    NotFound,
    DeviceFault,
    Internal,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::MalformedEnvelope => "MalformedEnvelope",
            ErrorCode::MalformedPayload => "MalformedPayload",
            ErrorCode::UnknownFunction => "UnknownFunction",
            ErrorCode::NotFound => "NotFound",
            ErrorCode::DeviceFault => "DeviceFault",
            ErrorCode::Internal => "Internal",
        }
    }

    pub fn status(self) -> ResponseStatus {
        match self {
            ErrorCode::MalformedEnvelope
            | ErrorCode::MalformedPayload
            | ErrorCode::UnknownFunction => ResponseStatus::BadRequest,
            ErrorCode::NotFound => ResponseStatus::NotFound,
            ErrorCode::DeviceFault | ErrorCode::Internal => ResponseStatus::HandlerError,
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[error("{code}: {message}")]
#[serde(rename_all = "camelCase")]
pub struct GatewayError {
    pub code: ErrorCode,
    pub message: String,
    pub request_id: String,
}

impl GatewayError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            request_id: String::new(),
        }
    }

    pub fn malformed_envelope(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::MalformedEnvelope, message)
    }

    pub fn malformed_payload(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::MalformedPayload, message)
    }

    pub fn unknown_function(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::UnknownFunction, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::NotFound, message)
    }

    pub fn device_fault(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::DeviceFault, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Internal, message)
    }

    pub fn with_request_id(mut self, request_id: impl Into<String>) -> Self {
        self.request_id = request_id.into();
        self
    }

    /// `{"error": {"code": ..., "message": ..., "requestId": ...}}`
    pub fn to_json(&self) -> Value {
        serde_json::json!({ "error": self })
    }
}

/// HTTP-level outcome class. Exactly four statuses ever leave the gateway.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResponseStatus {
    Ok,
    HandlerError,
    BadRequest,
    NotFound,
}

impl ResponseStatus {
    pub fn http_code(self) -> u16 {
        match self {
            ResponseStatus::Ok => 200,
            ResponseStatus::BadRequest => 400,
            ResponseStatus::NotFound => 404,
            ResponseStatus::HandlerError => 500,
        }
    }
}

/// What a handler produced: a plain string or a JSON value.
#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Text(String),
    Json(Value),
}

impl Body {
    /// JSON values are rendered to their canonical (key-sorted, compact) text.
    pub fn into_text(self) -> String {
        match self {
            Body::Text(s) => s,
            Body::Json(v) => canonical_json(&v),
        }
    }
}

impl From<String> for Body {
    fn from(s: String) -> Self {
        Body::Text(s)
    }
}

impl From<&str> for Body {
    fn from(s: &str) -> Self {
        Body::Text(s.to_owned())
    }
}

impl From<Value> for Body {
    fn from(v: Value) -> Self {
        Body::Json(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HandlerResponse {
    Ok(Body),
    Error(GatewayError),
}

impl HandlerResponse {
    pub fn ok(body: impl Into<Body>) -> Self {
        HandlerResponse::Ok(body.into())
    }

    /// A failure raised inside handler code.
    pub fn handler_error(message: impl Into<String>) -> Self {
        HandlerResponse::Error(GatewayError::internal(message))
    }

    pub fn status(&self) -> ResponseStatus {
        match self {
            HandlerResponse::Ok(_) => ResponseStatus::Ok,
            HandlerResponse::Error(e) => e.code.status(),
        }
    }
}

impl From<GatewayError> for HandlerResponse {
    fn from(e: GatewayError) -> Self {
        HandlerResponse::Error(e)
    }
}

impl From<String> for HandlerResponse {
    fn from(s: String) -> Self {
        HandlerResponse::Ok(Body::Text(s))
    }
}

impl From<&str> for HandlerResponse {
    fn from(s: &str) -> Self {
        HandlerResponse::Ok(Body::Text(s.to_owned()))
    }
}

impl From<Value> for HandlerResponse {
    fn from(v: Value) -> Self {
        HandlerResponse::Ok(Body::Json(v))
    }
}

impl From<Body> for HandlerResponse {
    fn from(b: Body) -> Self {
        HandlerResponse::Ok(b)
    }
}

impl<T, E> From<Result<T, E>> for HandlerResponse
where
    T: Into<Body>,
    E: Into<GatewayError>,
{
    fn from(r: Result<T, E>) -> Self {
        match r {
            Ok(b) => HandlerResponse::Ok(b.into()),
            Err(e) => HandlerResponse::Error(e.into()),
        }
    }
}

/// Compact JSON with object keys in sorted order.
///
/// Relies on `serde_json::Map` being a `BTreeMap` (no `preserve_order`).
pub fn canonical_json(v: &Value) -> String {
    v.to_string()
}

/// Canonical text of any serializable value.
pub fn canonical_json_of<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(value) => canonical_json(&value),
        Err(e) => format!("\"<unserializable: {e}>\""),
    }
}

pub fn encode_envelope(env: &TriggerEnvelope) -> Vec<u8> {
    // Struct field order fixes the key order on the wire.
    serde_json::to_vec(env).expect("envelope fields are always serializable")
}

pub fn decode_envelope(raw: &[u8]) -> Result<TriggerEnvelope, GatewayError> {
    let value: Value = serde_json::from_slice(raw)
        .map_err(|e| GatewayError::malformed_envelope(format!("body is not JSON: {e}")))?;
    let Value::Object(obj) = value else {
        return Err(GatewayError::malformed_envelope("body is not a JSON object"));
    };

    let request_id = optional_str(&obj, "requestId")?.filter(|s| !s.is_empty());
    let request_id_for_errors = request_id.clone().unwrap_or_default();
    let err_ctx = |e: GatewayError| e.with_request_id(request_id_for_errors.clone());

    let request = match obj.get("request") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => {
            return Err(err_ctx(GatewayError::malformed_envelope(
                "field `request` must be a string",
            )))
        }
        None => {
            return Err(err_ctx(GatewayError::malformed_envelope(
                "missing field `request`",
            )))
        }
    };

    let timestamp_ms = match obj.get("timestampMs") {
        None | Some(Value::Null) => 0,
        Some(v) => v.as_u64().ok_or_else(|| {
            err_ctx(GatewayError::malformed_envelope(
                "field `timestampMs` must be a non-negative integer",
            ))
        })?,
    };

    Ok(TriggerEnvelope {
        request,
        request_id: request_id.unwrap_or_else(next_request_id),
        world_id: optional_str(&obj, "worldId").map_err(err_ctx)?.unwrap_or_default(),
        item_id: optional_str(&obj, "itemId").map_err(err_ctx)?.unwrap_or_default(),
        user_id: optional_str(&obj, "userId").map_err(err_ctx)?.unwrap_or_default(),
        timestamp_ms,
    })
}

fn optional_str(obj: &Map<String, Value>, key: &str) -> Result<Option<String>, GatewayError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(GatewayError::malformed_envelope(format!(
            "field `{key}` must be a string"
        ))),
    }
}

/// A reflective smart-home call: `function_name(*args, **kwargs)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmartHomeRequest {
    pub function_name: String,
    #[serde(default)]
    pub args: Vec<Value>,
    #[serde(default)]
    pub kwargs: Map<String, Value>,
}

impl SmartHomeRequest {
    pub fn new(function_name: impl Into<String>) -> Self {
        Self {
            function_name: function_name.into(),
            args: Vec::new(),
            kwargs: Map::new(),
        }
    }

    pub fn arg(mut self, v: impl Into<Value>) -> Self {
        self.args.push(v.into());
        self
    }

    pub fn kwarg(mut self, key: impl Into<String>, v: impl Into<Value>) -> Self {
        self.kwargs.insert(key.into(), v.into());
        self
    }

    pub fn to_json_string(&self) -> String {
        canonical_json_of(self)
    }
}

pub fn parse_smarthome_request(payload: &str) -> Result<SmartHomeRequest, GatewayError> {
    let req: SmartHomeRequest = serde_json::from_str(payload)
        .map_err(|e| GatewayError::malformed_payload(format!("invalid smart-home request: {e}")))?;
    if req.function_name.is_empty() {
        return Err(GatewayError::malformed_payload("`function_name` is empty"));
    }
    Ok(req)
}

/// Maps a handler response onto `(http status, body bytes)`.
pub fn serialize_response(resp: &HandlerResponse) -> (u16, Vec<u8>) {
    let status = resp.status().http_code();
    let body = match resp {
        HandlerResponse::Ok(body) => {
            serde_json::json!({ "response": body.clone().into_text() })
        }
        HandlerResponse::Error(e) => e.to_json(),
    };
    (status, body.to_string().into_bytes())
}

/// The `response` string (success) or error message carried in a response body.
pub fn response_text(body: &[u8]) -> Result<String, String> {
    let v: Value = serde_json::from_slice(body).map_err(|e| format!("unparseable response: {e}"))?;
    if let Some(Value::String(s)) = v.get("response") {
        return Ok(s.clone());
    }
    match v.pointer("/error/message") {
        Some(Value::String(m)) => Err(m.clone()),
        _ => Err(format!("unexpected response shape: {v}")),
    }
}
