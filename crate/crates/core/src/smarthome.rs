//! Smart-home cloud emulation and the reflective command bridge.
//!
//! The mock cloud speaks a SwitchBot-v1.1-like REST dialect:
//!
//! | method | path                           | body                       |
//! |--------|--------------------------------|----------------------------|
//! | GET    | `/v1.1/devices`                | `{"deviceList": [...]}`    |
//! | POST   | `/v1.1/devices/{id}/commands`  | post-command [`DeviceStatus`] |
//! | GET    | `/v1.1/devices/{id}/status`    | [`DeviceStatus`]           |
//!
//! Every response is wrapped as `{"statusCode", "message", "body"}` and every
//! request must carry `Authorization: <token>`.
//!
//! [`dispatch`] maps a [`SmartHomeRequest`] onto [`SmartHomeClient`] methods
//! through a fixed allow-list; nothing outside [`ALLOWED_FUNCTIONS`] is
//! reachable from a payload.

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::envelope::{parse_smarthome_request, GatewayError, HandlerResponse, SmartHomeRequest};
use crate::server::{self, BackgroundServer};

pub const API_PREFIX: &str = "/v1.1";
pub const DEFAULT_TOKEN: &str = "mock-token";

const STATUS_SUCCESS: u16 = 100;
const STATUS_DEVICE_NOT_FOUND: u16 = 152;
const STATUS_UNSUPPORTED: u16 = 160;
const STATUS_BAD_REQUEST: u16 = 190;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeviceType {
    Hub,
    Bulb,
    Plug,
    Bot,
    LedStrip,
    Meter,
    MotionSensor,
    Camera,
    Humidifier,
    Circulator,
    RemoteButton,
}

impl DeviceType {
    pub const ALL: [DeviceType; 11] = [
        DeviceType::Hub,
        DeviceType::Bulb,
        DeviceType::Plug,
        DeviceType::Bot,
        DeviceType::LedStrip,
        DeviceType::Meter,
        DeviceType::MotionSensor,
        DeviceType::Camera,
        DeviceType::Humidifier,
        DeviceType::Circulator,
        DeviceType::RemoteButton,
    ];

    fn has_power(self) -> bool {
        matches!(
            self,
            DeviceType::Bulb
                | DeviceType::Plug
                | DeviceType::Bot
                | DeviceType::Circulator
                | DeviceType::Humidifier
        )
    }

    pub fn default_state(self) -> DeviceStateRecord {
        match self {
            DeviceType::Bulb => DeviceStateRecord::Bulb {
                power: Power::Off,
                brightness: 100,
            },
            DeviceType::Plug | DeviceType::Bot | DeviceType::Circulator | DeviceType::Humidifier => {
                DeviceStateRecord::Switch { power: Power::Off }
            }
            DeviceType::Meter => DeviceStateRecord::Meter {
                temperature: 25.0,
                humidity: 50.0,
                co2: 800,
            },
            _ => DeviceStateRecord::Presence { online: true },
        }
    }

    fn accepts(self, state: &DeviceStateRecord) -> bool {
        matches!(
            (self, state),
            (DeviceType::Bulb, DeviceStateRecord::Bulb { .. })
                | (DeviceType::Meter, DeviceStateRecord::Meter { .. })
                | (
                    DeviceType::Plug
                        | DeviceType::Bot
                        | DeviceType::Circulator
                        | DeviceType::Humidifier,
                    DeviceStateRecord::Switch { .. }
                )
                | (
                    DeviceType::Hub
                        | DeviceType::LedStrip
                        | DeviceType::MotionSensor
                        | DeviceType::Camera
                        | DeviceType::RemoteButton,
                    DeviceStateRecord::Presence { .. }
                )
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Power {
    On,
    Off,
}

/// Type-specific device state. Variants are distinguished by their fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeviceStateRecord {
    Bulb { power: Power, brightness: u8 },
    Switch { power: Power },
    Meter { temperature: f64, humidity: f64, co2: u32 },
    Presence { online: bool },
}

impl DeviceStateRecord {
    pub fn power(&self) -> Option<Power> {
        match self {
            DeviceStateRecord::Bulb { power, .. } | DeviceStateRecord::Switch { power } => Some(*power),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SmartHomeDevice {
    pub device_id: String,
    pub device_type: DeviceType,
    pub name: String,
    pub state: DeviceStateRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeviceStatus {
    pub device_id: String,
    pub device_type: DeviceType,
    #[serde(flatten)]
    pub state: DeviceStateRecord,
}

impl From<&SmartHomeDevice> for DeviceStatus {
    fn from(d: &SmartHomeDevice) -> Self {
        Self {
            device_id: d.device_id.clone(),
            device_type: d.device_type,
            state: d.state.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CommandRequest {
    pub command: String,
    #[serde(default = "default_parameter")]
    pub parameter: Value,
    #[serde(default = "default_command_type")]
    pub command_type: String,
}

fn default_parameter() -> Value {
    Value::String("default".into())
}

fn default_command_type() -> String {
    "command".into()
}

impl CommandRequest {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            parameter: default_parameter(),
            command_type: default_command_type(),
        }
    }

    pub fn with_parameter(mut self, parameter: impl Into<Value>) -> Self {
        self.parameter = parameter.into();
        self
    }

    pub fn turn_on() -> Self {
        Self::new("turnOn")
    }

    pub fn turn_off() -> Self {
        Self::new("turnOff")
    }

    pub fn press() -> Self {
        Self::new("press")
    }

    pub fn set_brightness(level: i64) -> Self {
        Self::new("setBrightness").with_parameter(level)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CommandError {
    #[error("command `{command}` is not supported by {device_type:?}")]
    Unsupported { command: String, device_type: DeviceType },
    #[error("invalid parameter for `{command}`: {reason}")]
    InvalidParameter { command: String, reason: String },
}

/// The device-type transition table.
///
/// | command         | applies to                              | effect                      |
/// |-----------------|-----------------------------------------|-----------------------------|
/// | `turnOn`        | bulb, plug, bot, circulator, humidifier | power on                    |
/// | `turnOff`       | same                                    | power off                   |
/// | `setBrightness` | bulb, parameter 1..=100                 | brightness = p, power on    |
/// | `press`         | bot                                     | toggles power               |
pub fn apply_command(device: &mut SmartHomeDevice, cmd: &CommandRequest) -> Result<(), CommandError> {
    let unsupported = || CommandError::Unsupported {
        command: cmd.command.clone(),
        device_type: device.device_type,
    };
    if cmd.command.is_empty() || cmd.command_type != "command" {
        return Err(unsupported());
    }
    let device_type = device.device_type;
    match (cmd.command.as_str(), &mut device.state) {
        ("turnOn" | "turnOff", DeviceStateRecord::Bulb { power, .. } | DeviceStateRecord::Switch { power })
            if device_type.has_power() =>
        {
            *power = if cmd.command == "turnOn" { Power::On } else { Power::Off };
            Ok(())
        }
        ("setBrightness", DeviceStateRecord::Bulb { power, brightness }) => {
            let level = brightness_parameter(&cmd.parameter).ok_or_else(|| CommandError::InvalidParameter {
                command: cmd.command.clone(),
                reason: format!("expected an integer in 1..=100, got {}", cmd.parameter),
            })?;
            *brightness = level;
            *power = Power::On;
            Ok(())
        }
        ("press", DeviceStateRecord::Switch { power }) if device_type == DeviceType::Bot => {
            *power = match power {
                Power::On => Power::Off,
                Power::Off => Power::On,
            };
            Ok(())
        }
        _ => Err(unsupported()),
    }
}

fn brightness_parameter(v: &Value) -> Option<u8> {
    let n = match v {
        Value::Number(n) => n.as_i64()?,
        Value::String(s) => s.trim().parse::<i64>().ok()?,
        _ => return None,
    };
    (1..=100).contains(&n).then_some(n as u8)
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("cannot read fixture {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid fixture: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid fixture: {0}")]
    Invalid(String),
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct RawFixtureDevice {
    device_id: String,
    device_type: DeviceType,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    state: Option<DeviceStateRecord>,
}

#[derive(Debug, Deserialize)]
struct RawFixture {
    token: String,
    #[serde(default)]
    devices: Vec<RawFixtureDevice>,
}

/// Mock cloud contents: the accepted token and the device roster.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fixture {
    pub token: String,
    pub devices: Vec<SmartHomeDevice>,
}

impl Fixture {
    pub fn empty(token: impl Into<String>) -> Self {
        Self {
            token: token.into(),
            devices: Vec::new(),
        }
    }

    /// The 27-device workshop roster: 2 hubs, 2 cameras, 4 motion sensors,
    /// 1 CO2/temperature/humidity meter, 1 LED strip, 4 bulbs, 4 plugs,
    /// 4 bots, 1 humidifier, 2 remote buttons and 2 circulators.
    pub fn workshop() -> Self {
        const ROSTER: [(DeviceType, &str, &str, usize); 11] = [
            (DeviceType::Hub, "hub", "Hub", 2),
            (DeviceType::Camera, "camera", "Camera", 2),
            (DeviceType::MotionSensor, "motion", "Motion Sensor", 4),
            (DeviceType::Meter, "meter", "CO2 Meter", 1),
            (DeviceType::LedStrip, "ledstrip", "LED Strip", 1),
            (DeviceType::Bulb, "bulb", "Bulb", 4),
            (DeviceType::Plug, "plug", "Plug", 4),
            (DeviceType::Bot, "bot", "Bot", 4),
            (DeviceType::Humidifier, "humidifier", "Humidifier", 1),
            (DeviceType::RemoteButton, "button", "Remote Button", 2),
            (DeviceType::Circulator, "circulator", "Circulator", 2),
        ];
        let devices = ROSTER
            .iter()
            .flat_map(|&(device_type, id, name, count)| {
                (1..=count).map(move |i| SmartHomeDevice {
                    device_id: format!("{id}-{i}"),
                    device_type,
                    name: format!("{name} {i}"),
                    state: device_type.default_state(),
                })
            })
            .collect();
        Self {
            token: DEFAULT_TOKEN.into(),
            devices,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, FixtureError> {
        let raw: RawFixture = serde_json::from_str(text)?;
        let mut devices: Vec<SmartHomeDevice> = Vec::with_capacity(raw.devices.len());
        for d in raw.devices {
            if d.device_id.is_empty() {
                return Err(FixtureError::Invalid("empty deviceId".into()));
            }
            if devices.iter().any(|e| e.device_id == d.device_id) {
                return Err(FixtureError::Invalid(format!("duplicate deviceId `{}`", d.device_id)));
            }
            let state = d.state.unwrap_or_else(|| d.device_type.default_state());
            if !d.device_type.accepts(&state) {
                return Err(FixtureError::Invalid(format!(
                    "state of `{}` does not fit a {:?}",
                    d.device_id, d.device_type
                )));
            }
            if let DeviceStateRecord::Bulb { brightness, .. } = state {
                if !(1..=100).contains(&brightness) {
                    return Err(FixtureError::Invalid(format!(
                        "brightness of `{}` must be in 1..=100",
                        d.device_id
                    )));
                }
            }
            devices.push(SmartHomeDevice {
                name: d.name.unwrap_or_else(|| d.device_id.clone()),
                device_id: d.device_id,
                device_type: d.device_type,
                state,
            });
        }
        Ok(Self {
            token: raw.token,
            devices,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FixtureError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| FixtureError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Serializes in the same shape [`Fixture::from_json`] reads.
    pub fn to_json(&self) -> Value {
        json!({ "token": self.token, "devices": self.devices })
    }
}

struct MockState {
    token: String,
    devices: Mutex<Vec<SmartHomeDevice>>,
}

fn api_reply(http: StatusCode, status_code: u16, message: &str, body: Value) -> Response {
    (
        http,
        Json(json!({ "statusCode": status_code, "message": message, "body": body })),
    )
        .into_response()
}

/// The 401 reply when the token is missing or wrong.
fn rejection(state: &MockState, headers: &HeaderMap) -> Option<Response> {
    match headers.get("authorization").and_then(|v| v.to_str().ok()) {
        Some(v) if v == state.token => None,
        _ => Some((StatusCode::UNAUTHORIZED, Json(json!({ "message": "Unauthorized" }))).into_response()),
    }
}

fn not_found(id: &str) -> Response {
    api_reply(
        StatusCode::NOT_FOUND,
        STATUS_DEVICE_NOT_FOUND,
        &format!("device not found: {id}"),
        json!({}),
    )
}

async fn list_devices_route(State(state): State<Arc<MockState>>, headers: HeaderMap) -> Response {
    if let Some(r) = rejection(&state, &headers) {
        return r;
    }
    let devices = state.devices.lock().unwrap().clone();
    api_reply(StatusCode::OK, STATUS_SUCCESS, "success", json!({ "deviceList": devices }))
}

async fn status_route(
    State(state): State<Arc<MockState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
) -> Response {
    if let Some(r) = rejection(&state, &headers) {
        return r;
    }
    let devices = state.devices.lock().unwrap();
    match devices.iter().find(|d| d.device_id == id) {
        Some(d) => api_reply(StatusCode::OK, STATUS_SUCCESS, "success", json!(DeviceStatus::from(d))),
        None => not_found(&id),
    }
}

async fn command_route(
    State(state): State<Arc<MockState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: axum::body::Bytes,
) -> Response {
    if let Some(r) = rejection(&state, &headers) {
        return r;
    }
    let cmd: CommandRequest = match serde_json::from_slice(&body) {
        Ok(c) => c,
        Err(e) => {
            return api_reply(
                StatusCode::BAD_REQUEST,
                STATUS_BAD_REQUEST,
                &format!("invalid command body: {e}"),
                json!({}),
            )
        }
    };
    let mut devices = state.devices.lock().unwrap();
    let Some(device) = devices.iter_mut().find(|d| d.device_id == id) else {
        return not_found(&id);
    };
    match apply_command(device, &cmd) {
        Ok(()) => api_reply(StatusCode::OK, STATUS_SUCCESS, "success", json!(DeviceStatus::from(&*device))),
        Err(e) => api_reply(StatusCode::BAD_REQUEST, STATUS_UNSUPPORTED, &e.to_string(), json!({})),
    }
}

/// A running mock cloud. Dropping it stops the server.
pub struct MockServerHandle {
    state: Arc<MockState>,
    server: BackgroundServer,
}

impl MockServerHandle {
    pub fn port(&self) -> u16 {
        self.server.addr.port()
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.server.addr)
    }

    pub fn token(&self) -> &str {
        &self.state.token
    }

    /// Client configured for this server.
    pub fn client(&self) -> SmartHomeClient {
        SmartHomeClient::new(self.base_url(), self.token())
    }

    /// In-memory state, bypassing HTTP.
    pub fn devices(&self) -> Vec<SmartHomeDevice> {
        self.state.devices.lock().unwrap().clone()
    }

    pub fn shutdown(&self) {
        self.server.shutdown();
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MockStartError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
}

pub fn start_mock(fixture: Fixture, port: u16) -> Result<MockServerHandle, MockStartError> {
    let addr = SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), port);
    let bind_err = |source| MockStartError::Bind { addr, source };
    let listener = server::bind(addr).map_err(bind_err)?;
    let rt = server::build_runtime("mock-cloud").map_err(bind_err)?;
    let state = Arc::new(MockState {
        token: fixture.token,
        devices: Mutex::new(fixture.devices),
    });
    let app = Router::new()
        .route(&format!("{API_PREFIX}/devices"), get(list_devices_route))
        .route(&format!("{API_PREFIX}/devices/{{id}}/status"), get(status_route))
        .route(&format!("{API_PREFIX}/devices/{{id}}/commands"), post(command_route))
        .with_state(state.clone());
    let server =
        BackgroundServer::start("mock-cloud", rt, listener, app, Duration::from_secs(1)).map_err(bind_err)?;
    tracing::info!(addr = %server.addr, "mock smart-home cloud listening");
    Ok(MockServerHandle { state, server })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("unauthorized")]
    Unauthorized,
    #[error("device not found: {0}")]
    NotFound(String),
    #[error("invalid command: {0}")]
    InvalidCommand(String),
    #[error("unexpected response: {0}")]
    Protocol(String),
}

impl From<ClientError> for GatewayError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::NotFound(_) => GatewayError::not_found(e.to_string()),
            ClientError::InvalidCommand(_) => GatewayError::malformed_payload(e.to_string()),
            ClientError::Transport(_) | ClientError::Unauthorized | ClientError::Protocol(_) => {
                GatewayError::device_fault(e.to_string())
            }
        }
    }
}

/// Blocking client for the smart-home web API. Cheap to clone.
#[derive(Clone)]
pub struct SmartHomeClient {
    base_url: String,
    token: String,
    agent: ureq::Agent,
}

impl std::fmt::Debug for SmartHomeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SmartHomeClient")
            .field("base_url", &self.base_url)
            .finish_non_exhaustive()
    }
}

impl SmartHomeClient {
    pub fn new(base_url: impl Into<String>, token: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(10)))
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            token: token.into(),
            agent,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn call(&self, method: &str, path: &str, body: Option<&CommandRequest>) -> Result<Value, ClientError> {
        let url = format!("{}{API_PREFIX}{path}", self.base_url);
        let result = match body {
            None => self
                .agent
                .get(&url)
                .header("Authorization", &self.token)
                .call(),
            Some(cmd) => self
                .agent
                .post(&url)
                .header("Authorization", &self.token)
                .header("Content-Type", "application/json")
                .send(serde_json::to_vec(cmd).expect("command serializes")),
        };
        let mut resp = result.map_err(|e| ClientError::Transport(format!("{method} {url}: {e}")))?;
        let http = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        if http == 401 {
            return Err(ClientError::Unauthorized);
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| ClientError::Protocol(format!("{e}: {text}")))?;
        let message = v.get("message").and_then(Value::as_str).unwrap_or("").to_owned();
        match v.get("statusCode").and_then(Value::as_u64) {
            Some(code) if code == u64::from(STATUS_SUCCESS) => Ok(v.get("body").cloned().unwrap_or(Value::Null)),
            Some(code) if code == u64::from(STATUS_DEVICE_NOT_FOUND) => Err(ClientError::NotFound(message)),
            Some(code) if code == u64::from(STATUS_UNSUPPORTED) || code == u64::from(STATUS_BAD_REQUEST) => {
                Err(ClientError::InvalidCommand(message))
            }
            _ => Err(ClientError::Protocol(format!("HTTP {http}: {text}"))),
        }
    }

    fn decode<T: serde::de::DeserializeOwned>(v: Value) -> Result<T, ClientError> {
        serde_json::from_value(v).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    pub fn list_devices(&self) -> Result<Vec<SmartHomeDevice>, ClientError> {
        let body = self.call("GET", "/devices", None)?;
        let list = body
            .get("deviceList")
            .cloned()
            .ok_or_else(|| ClientError::Protocol("missing deviceList".into()))?;
        Self::decode(list)
    }

    pub fn get_status(&self, device_id: &str) -> Result<DeviceStatus, ClientError> {
        Self::decode(self.call("GET", &format!("/devices/{device_id}/status"), None)?)
    }

    pub fn send_command(&self, device_id: &str, cmd: &CommandRequest) -> Result<DeviceStatus, ClientError> {
        Self::decode(self.call("POST", &format!("/devices/{device_id}/commands"), Some(cmd))?)
    }

    pub fn turn_on(&self, device_id: &str) -> Result<DeviceStatus, ClientError> {
        self.send_command(device_id, &CommandRequest::turn_on())
    }

    pub fn turn_off(&self, device_id: &str) -> Result<DeviceStatus, ClientError> {
        self.send_command(device_id, &CommandRequest::turn_off())
    }

    pub fn set_brightness(&self, device_id: &str, level: i64) -> Result<DeviceStatus, ClientError> {
        self.send_command(device_id, &CommandRequest::set_brightness(level))
    }

    pub fn press(&self, device_id: &str) -> Result<DeviceStatus, ClientError> {
        self.send_command(device_id, &CommandRequest::press())
    }
}

pub const ALLOWED_FUNCTIONS: [&str; 6] = [
    "list_devices",
    "turn_on",
    "turn_off",
    "set_brightness",
    "press",
    "get_status",
];

/// Positional-or-keyword argument binding, Python style.
struct Bound<'a> {
    function: &'a str,
    values: Vec<&'a Value>,
}

fn bind_args<'a>(req: &'a SmartHomeRequest, params: &[&str]) -> Result<Bound<'a>, GatewayError> {
    let function = req.function_name.as_str();
    if req.args.len() > params.len() {
        return Err(GatewayError::malformed_payload(format!(
            "{function}() takes {} positional arguments but {} were given",
            params.len(),
            req.args.len()
        )));
    }
    if let Some(extra) = req.kwargs.keys().find(|k| !params.contains(&k.as_str())) {
        return Err(GatewayError::malformed_payload(format!(
            "{function}() got an unexpected keyword argument `{extra}`"
        )));
    }
    let mut values = Vec::with_capacity(params.len());
    for (i, name) in params.iter().enumerate() {
        let value = match (req.args.get(i), req.kwargs.get(*name)) {
            (Some(_), Some(_)) => {
                return Err(GatewayError::malformed_payload(format!(
                    "{function}() got multiple values for argument `{name}`"
                )))
            }
            (Some(v), None) | (None, Some(v)) => v,
            (None, None) => {
                return Err(GatewayError::malformed_payload(format!(
                    "{function}() missing required argument `{name}`"
                )))
            }
        };
        values.push(value);
    }
    Ok(Bound { function, values })
}

impl<'a> Bound<'a> {
    fn str_at(&self, i: usize) -> Result<&'a str, GatewayError> {
        self.values[i].as_str().ok_or_else(|| {
            GatewayError::malformed_payload(format!("{}(): argument {i} must be a string", self.function))
        })
    }

    fn int_at(&self, i: usize) -> Result<i64, GatewayError> {
        self.values[i].as_i64().ok_or_else(|| {
            GatewayError::malformed_payload(format!("{}(): argument {i} must be an integer", self.function))
        })
    }
}

fn to_json<T: Serialize>(r: Result<T, ClientError>) -> Result<Value, GatewayError> {
    let v = r.map_err(GatewayError::from)?;
    serde_json::to_value(v).map_err(|e| GatewayError::internal(e.to_string()))
}

/// Resolves `req.function_name` through the allow-list and invokes it.
pub fn dispatch(req: &SmartHomeRequest, client: &SmartHomeClient) -> HandlerResponse {
    let result = match req.function_name.as_str() {
        "list_devices" => bind_args(req, &[]).and_then(|_| to_json(client.list_devices())),
        "get_status" => bind_args(req, &["device_id"]).and_then(|b| to_json(client.get_status(b.str_at(0)?))),
        "turn_on" => bind_args(req, &["device_id"]).and_then(|b| to_json(client.turn_on(b.str_at(0)?))),
        "turn_off" => bind_args(req, &["device_id"]).and_then(|b| to_json(client.turn_off(b.str_at(0)?))),
        "press" => bind_args(req, &["device_id"]).and_then(|b| to_json(client.press(b.str_at(0)?))),
        "set_brightness" => bind_args(req, &["device_id", "level"])
            .and_then(|b| to_json(client.set_brightness(b.str_at(0)?, b.int_at(1)?))),
        other => Err(GatewayError::unknown_function(format!(
            "`{}` is not an allowed smart-home function",
            other.chars().take(64).collect::<String>()
        ))),
    };
    result.into()
}

/// Gateway handler: parses the payload as a [`SmartHomeRequest`] and
/// dispatches it.
pub fn handler(client: SmartHomeClient) -> impl Fn(&str) -> HandlerResponse + Send + Sync + 'static {
    move |payload: &str| match parse_smarthome_request(payload) {
        Ok(req) => dispatch(&req, &client),
        Err(e) => HandlerResponse::Error(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn device(device_type: DeviceType) -> SmartHomeDevice {
        SmartHomeDevice {
            device_id: "d".into(),
            device_type,
            name: "d".into(),
            state: device_type.default_state(),
        }
    }

    #[test]
    fn workshop_roster_counts() {
        let f = Fixture::workshop();
        assert_eq!(f.devices.len(), 27);
        let count = |t| f.devices.iter().filter(|d| d.device_type == t).count();
        assert_eq!(count(DeviceType::Hub), 2);
        assert_eq!(count(DeviceType::Camera), 2);
        assert_eq!(count(DeviceType::MotionSensor), 4);
        assert_eq!(count(DeviceType::Meter), 1);
        assert_eq!(count(DeviceType::LedStrip), 1);
        assert_eq!(count(DeviceType::Bulb), 4);
        assert_eq!(count(DeviceType::Plug), 4);
        assert_eq!(count(DeviceType::Bot), 4);
        assert_eq!(count(DeviceType::Humidifier), 1);
        assert_eq!(count(DeviceType::RemoteButton), 2);
        assert_eq!(count(DeviceType::Circulator), 2);
    }

    #[test]
    fn fixture_json_round_trip() {
        let f = Fixture::workshop();
        let back = Fixture::from_json(&f.to_json().to_string()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn fixture_validation() {
        assert!(Fixture::from_json(r#"{"token":"t","devices":[{"deviceId":"a","deviceType":"Bulb","state":{"power":"on"}}]}"#).is_err());
        assert!(Fixture::from_json(r#"{"token":"t","devices":[{"deviceId":"a","deviceType":"Bulb","state":{"power":"on","brightness":0}}]}"#).is_err());
        assert!(Fixture::from_json(r#"{"token":"t","devices":[{"deviceId":"a","deviceType":"Plug"},{"deviceId":"a","deviceType":"Plug"}]}"#).is_err());
        let f = Fixture::from_json(r#"{"token":"t","devices":[{"deviceId":"m","deviceType":"Meter"}]}"#).unwrap();
        assert_eq!(f.devices[0].name, "m");
        assert_eq!(f.devices[0].state, DeviceType::Meter.default_state());
    }

    #[test]
    fn transition_table() {
        let mut plug = device(DeviceType::Plug);
        apply_command(&mut plug, &CommandRequest::turn_on()).unwrap();
        assert_eq!(plug.state.power(), Some(Power::On));
        apply_command(&mut plug, &CommandRequest::turn_off()).unwrap();
        assert_eq!(plug.state.power(), Some(Power::Off));
        assert!(apply_command(&mut plug, &CommandRequest::press()).is_err());

        let mut bulb = device(DeviceType::Bulb);
        apply_command(&mut bulb, &CommandRequest::set_brightness(50)).unwrap();
        assert_eq!(bulb.state, DeviceStateRecord::Bulb { power: Power::On, brightness: 50 });
        for bad in [json!(0), json!(101), json!("x"), json!(null)] {
            let cmd = CommandRequest::new("setBrightness").with_parameter(bad);
            assert!(matches!(apply_command(&mut bulb, &cmd), Err(CommandError::InvalidParameter { .. })));
        }
        apply_command(&mut bulb, &CommandRequest::new("setBrightness").with_parameter("75")).unwrap();

        let mut bot = device(DeviceType::Bot);
        apply_command(&mut bot, &CommandRequest::press()).unwrap();
        assert_eq!(bot.state.power(), Some(Power::On));
        apply_command(&mut bot, &CommandRequest::press()).unwrap();
        assert_eq!(bot.state.power(), Some(Power::Off));

        let mut meter = device(DeviceType::Meter);
        for cmd in ["press", "turnOn", "turnOff", "setBrightness", "", "reboot"] {
            assert!(apply_command(&mut meter, &CommandRequest::new(cmd)).is_err(), "{cmd}");
        }
        let mut hub = device(DeviceType::Hub);
        assert!(apply_command(&mut hub, &CommandRequest::turn_on()).is_err());
    }

    #[test]
    fn status_flattens_state() {
        let s = DeviceStatus::from(&device(DeviceType::Meter));
        assert_eq!(
            serde_json::to_value(&s).unwrap(),
            json!({"deviceId":"d","deviceType":"Meter","temperature":25.0,"humidity":50.0,"co2":800})
        );
        let back: DeviceStatus = serde_json::from_value(serde_json::to_value(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn unknown_functions_never_touch_the_network() {
        let client = SmartHomeClient::new("http://127.0.0.1:9", "t");
        for name in ["shutdown_os", "__init__", "send_command", "LIST_DEVICES", "turn_on "] {
            match dispatch(&SmartHomeRequest::new(name), &client) {
                HandlerResponse::Error(e) => assert_eq!(e.code, crate::envelope::ErrorCode::UnknownFunction),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn argument_binding_errors() {
        let client = SmartHomeClient::new("http://127.0.0.1:9", "t");
        let bad = [
            SmartHomeRequest::new("turn_on"),
            SmartHomeRequest::new("turn_on").arg(5),
            SmartHomeRequest::new("turn_on").arg("a").arg("b"),
            SmartHomeRequest::new("turn_on").arg("a").kwarg("device_id", "a"),
            SmartHomeRequest::new("turn_on").kwarg("colour", "red"),
            SmartHomeRequest::new("set_brightness").arg("bulb-1"),
            SmartHomeRequest::new("set_brightness").arg("bulb-1").kwarg("level", "high"),
            SmartHomeRequest::new("list_devices").arg("x"),
        ];
        for req in bad {
            match dispatch(&req, &client) {
                HandlerResponse::Error(e) => {
                    assert_eq!(e.code, crate::envelope::ErrorCode::MalformedPayload, "{req:?}")
                }
                other => panic!("{other:?}"),
            }
        }
        // Well-formed call, unreachable cloud.
        match dispatch(&SmartHomeRequest::new("turn_on").arg("bulb-1"), &client) {
            HandlerResponse::Error(e) => assert_eq!(e.code, crate::envelope::ErrorCode::DeviceFault),
            other => panic!("{other:?}"),
        }
    }
}
