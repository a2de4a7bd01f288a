//! Deterministic stand-in for a multi-user virtual world.
//!
//! A [`World`] holds users, scripted items and a per-user [`RateLimiter`].
//! Items fire when a user clicks them ([`ItemKind::Clickable`]), walks onto
//! them ([`ItemKind::FloorRegion`]), or when anyone joins or leaves
//! ([`ItemKind::Presence`]). A firing script may return a payload string,
//! which is sent with [`World::call_external`]: the payload is wrapped in a
//! [`TriggerEnvelope`] stamped with the *triggering* user's id and POSTed to
//! the item's target URL. Responses are queued and handed back to the script
//! after the triggering event has finished.
//!
//! Scenarios run on a virtual clock, and request ids come from a seeded
//! generator, so a scenario file fully determines the resulting
//! [`WorldReport`].

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envelope::{encode_envelope, response_text, TriggerEnvelope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Action {
    Join,
    Leave,
    Click,
    EnterRegion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioEvent {
    pub t_ms: u64,
    pub action: Action,
    pub user_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ItemKind {
    Clickable,
    FloorRegion,
    /// Fires on every join and leave with the connected-user count.
    Presence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScriptSpec {
    /// Appended to the gateway URL, e.g. `/trigger/fan`.
    pub target_route: String,
    /// Placeholders: `{userId}`, `{itemId}`, `{worldId}`, `{userCount}`, `{tMs}`.
    #[serde(default)]
    pub payload_template: String,
    /// If set, successive firings take these templates in turn (a toggle
    /// switch is `["on", "off"]`). Overrides `payloadTemplate`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub payload_cycle: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ItemSpec {
    pub item_id: String,
    pub kind: ItemKind,
    pub script: ScriptSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct UserSpec {
    pub user_id: String,
    #[serde(default)]
    pub is_owner: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RateLimit {
    pub max_calls: u32,
    pub window_ms: u64,
}

impl Default for RateLimit {
    fn default() -> Self {
        Self {
            max_calls: 5,
            window_ms: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_world_id")]
    pub world_id: String,
    #[serde(default)]
    pub rate_limit: RateLimit,
    #[serde(default)]
    pub users: Vec<UserSpec>,
    #[serde(default)]
    pub items: Vec<ItemSpec>,
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
}

fn default_world_id() -> String {
    "world".into()
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
}

impl ScenarioError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ScenarioError::Io { .. } => None,
            ScenarioError::Parse { line, .. } | ScenarioError::Invalid { line, .. } => Some(*line),
        }
    }
}

/// 1-based line of the `n`-th (0-based) occurrence of `needle`.
fn line_of_nth(text: &str, needle: &str, n: usize) -> usize {
    text.match_indices(needle)
        .nth(n)
        .map(|(pos, _)| text[..pos].matches('\n').count() + 1)
        .unwrap_or(1)
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        scenario.validate(text)?;
        Ok(scenario)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    fn validate(&self, text: &str) -> Result<(), ScenarioError> {
        let event_line = |i: usize| line_of_nth(text, "\"tMs\"", i);
        if self.rate_limit.max_calls == 0 || self.rate_limit.window_ms == 0 {
            return Err(ScenarioError::Invalid {
                line: line_of_nth(text, "\"rateLimit\"", 0),
                message: "rateLimit.maxCalls and rateLimit.windowMs must be positive".into(),
            });
        }
        let mut seen_users = std::collections::HashSet::new();
        for (i, u) in self.users.iter().enumerate() {
            if u.user_id.is_empty() || !seen_users.insert(u.user_id.as_str()) {
                return Err(ScenarioError::Invalid {
                    line: line_of_nth(text, "\"userId\"", i),
                    message: format!("user id `{}` is empty or duplicated", u.user_id),
                });
            }
        }
        let mut seen_items = std::collections::HashSet::new();
        for (i, item) in self.items.iter().enumerate() {
            if item.item_id.is_empty() || !seen_items.insert(item.item_id.as_str()) {
                return Err(ScenarioError::Invalid {
                    line: line_of_nth(text, "\"itemId\"", i),
                    message: format!("item id `{}` is empty or duplicated", item.item_id),
                });
            }
        }
        let mut last = 0;
        for (i, ev) in self.events.iter().enumerate() {
            if ev.t_ms < last {
                return Err(ScenarioError::Invalid {
                    line: event_line(i),
                    message: format!("event {i} at tMs {} precedes the previous event at tMs {last}", ev.t_ms),
                });
            }
            last = ev.t_ms;
            if !seen_users.contains(ev.user_id.as_str()) {
                return Err(ScenarioError::Invalid {
                    line: event_line(i),
                    message: format!("event {i} refers to undeclared user `{}`", ev.user_id),
                });
            }
            if matches!(ev.action, Action::Click | Action::EnterRegion) && ev.item_id.is_none() {
                return Err(ScenarioError::Invalid {
                    line: event_line(i),
                    message: format!("event {i} ({:?}) needs an itemId", ev.action),
                });
            }
        }
        Ok(())
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    Scenario::load(path)
}

/// Sliding-window limiter: at most `max_calls` forwarded calls per user in
/// any half-open window `(t - window_ms, t]`.
#[derive(Debug, Clone)]
pub struct RateLimiter {
    limit: RateLimit,
    recent: HashMap<String, VecDeque<u64>>,
    dropped: u64,
}

impl RateLimiter {
    pub fn new(limit: RateLimit) -> Self {
        Self {
            limit,
            recent: HashMap::new(),
            dropped: 0,
        }
    }

    pub fn limit(&self) -> RateLimit {
        self.limit
    }

    /// Records and admits the call, or counts it as dropped.
    pub fn admit(&mut self, user_id: &str, t_ms: u64) -> bool {
        let window = self.recent.entry(user_id.to_owned()).or_default();
        while window.front().is_some_and(|&t| t + self.limit.window_ms <= t_ms) {
            window.pop_front();
        }
        if window.len() < self.limit.max_calls as usize {
            window.push_back(t_ms);
            true
        } else {
            self.dropped += 1;
            false
        }
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

/// What a script sees when it fires.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptEvent {
    pub action: Action,
    pub user_id: String,
    pub item_id: String,
    pub world_id: String,
    pub t_ms: u64,
    pub user_count: usize,
}

/// Behaviour attached to an item. Runs in the triggering client's context.
pub trait ScriptBehavior {
    /// Payload to send, if any.
    fn on_event(&mut self, event: &ScriptEvent) -> Option<String>;

    /// `Ok` carries the response string, `Err` the error message.
    fn on_response(&mut self, _response: &Result<String, String>) {}
}

/// Fills a payload template and remembers every response it was handed.
#[derive(Debug, Clone, Default)]
pub struct TemplateScript {
    templates: Vec<String>,
    fired: usize,
    pub responses: Vec<Result<String, String>>,
}

impl TemplateScript {
    pub fn new(template: impl Into<String>) -> Self {
        Self::cycle(vec![template.into()])
    }

    /// Uses `templates[0]`, `templates[1]`, ... on successive firings, wrapping around.
    pub fn cycle(templates: Vec<String>) -> Self {
        assert!(!templates.is_empty(), "a template script needs at least one template");
        Self {
            templates,
            fired: 0,
            responses: Vec::new(),
        }
    }

    fn from_spec(spec: &ScriptSpec) -> Self {
        if spec.payload_cycle.is_empty() {
            Self::new(spec.payload_template.clone())
        } else {
            Self::cycle(spec.payload_cycle.clone())
        }
    }

    /// Renders the template for the next firing without consuming it.
    pub fn render(&self, ev: &ScriptEvent) -> String {
        self.templates[self.fired % self.templates.len()]
            .replace("{userId}", &ev.user_id)
            .replace("{itemId}", &ev.item_id)
            .replace("{worldId}", &ev.world_id)
            .replace("{userCount}", &ev.user_count.to_string())
            .replace("{tMs}", &ev.t_ms.to_string())
    }
}

impl ScriptBehavior for TemplateScript {
    fn on_event(&mut self, event: &ScriptEvent) -> Option<String> {
        let payload = self.render(event);
        self.fired += 1;
        Some(payload)
    }

    fn on_response(&mut self, response: &Result<String, String>) {
        self.responses.push(response.clone());
    }
}

pub struct AttachedScript {
    pub target_route: String,
    pub behavior: Box<dyn ScriptBehavior>,
}

impl AttachedScript {
    pub fn new(target_route: impl Into<String>, behavior: impl ScriptBehavior + 'static) -> Self {
        Self {
            target_route: target_route.into(),
            behavior: Box::new(behavior),
        }
    }

    pub fn template(target_route: impl Into<String>, template: impl Into<String>) -> Self {
        Self::new(target_route, TemplateScript::new(template))
    }
}

pub struct WorldItem {
    pub item_id: String,
    pub kind: ItemKind,
    pub script: AttachedScript,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SimulatedUser {
    pub user_id: String,
    pub connected: bool,
    pub is_owner: bool,
}

/// How the world reaches the gateway.
pub trait Transport {
    /// `Ok((status, body))` when an HTTP response arrived, `Err(reason)` otherwise.
    fn post(&self, url: &str, body: &[u8]) -> Result<(u16, Vec<u8>), String>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(15))
    }
}

impl Transport for HttpTransport {
    fn post(&self, url: &str, body: &[u8]) -> Result<(u16, Vec<u8>), String> {
        let mut resp = self
            .agent
            .post(url)
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| format!("gateway unreachable: {e}"))?;
        let status = resp.status().as_u16();
        let bytes = resp
            .body_mut()
            .read_to_vec()
            .map_err(|e| format!("response read failed: {e}"))?;
        Ok((status, bytes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClockMode {
    Virtual,
    /// Sleeps between events; `speed` > 1 runs faster than real time.
    RealTime { speed: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WorldError {
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("item `{item_id}` is {kind:?} and cannot be used by {action:?}")]
    KindMismatch {
        item_id: String,
        kind: ItemKind,
        action: Action,
    },
    #[error("duplicate item `{0}`")]
    DuplicateItem(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase", tag = "kind")]
pub enum CallOutcome {
    /// Over the user's rate limit; never sent.
    Dropped,
    /// Sent, but no HTTP response arrived.
    Failed { reason: String },
    /// An HTTP response arrived (any status).
    Delivered {
        status: u16,
        #[serde(skip_serializing_if = "Option::is_none")]
        response: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CallRecord {
    pub t_ms: u64,
    pub user_id: String,
    pub item_id: String,
    /// Empty for dropped calls.
    pub request_id: String,
    pub payload: String,
    pub outcome: CallOutcome,
}

impl CallRecord {
    pub fn forwarded(&self) -> bool {
        !matches!(self.outcome, CallOutcome::Dropped)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ItemResponse {
    pub t_ms: u64,
    pub user_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct WorldReport {
    pub world_id: String,
    pub seed: u64,
    pub events_processed: usize,
    pub forwarded_calls: u64,
    pub dropped_calls: u64,
    pub failed_calls: u64,
    /// Delivered calls whose status was not 200.
    pub error_responses: u64,
    /// Events ignored because the user was not (or already) connected.
    pub skipped_events: u64,
    pub connected_users: usize,
    pub calls: Vec<CallRecord>,
    pub responses_by_item: BTreeMap<String, Vec<ItemResponse>>,
    pub errors: Vec<String>,
}

impl WorldReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One JSON object per call record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for call in &self.calls {
            out.push_str(&serde_json::to_string(call).expect("call serializes"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "summary": {
                "worldId": self.world_id,
                "seed": self.seed,
                "eventsProcessed": self.events_processed,
                "forwardedCalls": self.forwarded_calls,
                "droppedCalls": self.dropped_calls,
                "failedCalls": self.failed_calls,
                "errorResponses": self.error_responses,
                "skippedEvents": self.skipped_events,
                "connectedUsers": self.connected_users,
                "errors": self.errors,
            }
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }

    /// First line is a `key=value` summary, then one line per call and error.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "world={} seed={} events={} forwarded={} dropped={} failed={} errorResponses={} skipped={} connected={}\n",
            self.world_id,
            self.seed,
            self.events_processed,
            self.forwarded_calls,
            self.dropped_calls,
            self.failed_calls,
            self.error_responses,
            self.skipped_events,
            self.connected_users,
        );
        for c in &self.calls {
            let outcome = match &c.outcome {
                CallOutcome::Dropped => "dropped (rate limit)".to_owned(),
                CallOutcome::Failed { reason } => format!("failed: {reason}"),
                CallOutcome::Delivered { status, response: Some(r), .. } => format!("{status} {r}"),
                CallOutcome::Delivered { status, error, .. } => {
                    format!("{status} error: {}", error.as_deref().unwrap_or(""))
                }
            };
            out.push_str(&format!(
                "  t={}ms {} -> {} {:?}: {outcome}\n",
                c.t_ms, c.user_id, c.item_id, c.payload
            ));
        }
        for e in &self.errors {
            out.push_str(&format!("  error: {e}\n"));
        }
        out
    }

    /// Replays the forwarded-call timeline and checks every user stays within
    /// `limit` in every sliding window.
    pub fn rate_limit_sound(&self, limit: RateLimit) -> bool {
        let mut by_user: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
        for c in self.calls.iter().filter(|c| c.forwarded()) {
            by_user.entry(&c.user_id).or_default().push(c.t_ms);
        }
        by_user.values().all(|times| {
            times.iter().all(|&end| {
                let start = end.saturating_sub(limit.window_ms - 1);
                let in_window = times.iter().filter(|&&t| t >= start && t <= end).count();
                in_window <= limit.max_calls as usize
            })
        })
    }

    pub fn delivered_responses(&self, item_id: &str) -> Vec<String> {
        self.responses_by_item
            .get(item_id)
            .map(|v| v.iter().filter_map(|r| r.response.clone()).collect())
            .unwrap_or_default()
    }
}

struct PendingResponse {
    item_id: String,
    response: Result<String, String>,
}

pub struct World {
    world_id: String,
    gateway_url: String,
    users: BTreeMap<String, SimulatedUser>,
    items: BTreeMap<String, WorldItem>,
    limiter: RateLimiter,
    rng: ChaCha8Rng,
    clock_ms: u64,
    clock_mode: ClockMode,
    transport: Box<dyn Transport>,
    pending: VecDeque<PendingResponse>,
    report: WorldReport,
    request_seq: u64,
}

impl fmt::Debug for World {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("World")
            .field("world_id", &self.world_id)
            .field("gateway_url", &self.gateway_url)
            .field("users", &self.users)
            .field("items", &self.items.keys().collect::<Vec<_>>())
            .field("clock_ms", &self.clock_ms)
            .finish_non_exhaustive()
    }
}

impl World {
    pub fn new(world_id: impl Into<String>, seed: u64, limit: RateLimit, gateway_url: impl Into<String>) -> Self {
        let world_id = world_id.into();
        Self {
            report: WorldReport {
                world_id: world_id.clone(),
                seed,
                events_processed: 0,
                forwarded_calls: 0,
                dropped_calls: 0,
                failed_calls: 0,
                error_responses: 0,
                skipped_events: 0,
                connected_users: 0,
                calls: Vec::new(),
                responses_by_item: BTreeMap::new(),
                errors: Vec::new(),
            },
            world_id,
            gateway_url: gateway_url.into().trim_end_matches('/').to_owned(),
            users: BTreeMap::new(),
            items: BTreeMap::new(),
            limiter: RateLimiter::new(limit),
            rng: ChaCha8Rng::seed_from_u64(seed),
            clock_ms: 0,
            clock_mode: ClockMode::Virtual,
            transport: Box::new(HttpTransport::default()),
            pending: VecDeque::new(),
            request_seq: 0,
        }
    }

    /// Users and template-scripted items from a scenario; events are not run.
    pub fn from_scenario(scenario: &Scenario, gateway_url: impl Into<String>) -> Self {
        let mut world = Self::new(scenario.world_id.clone(), scenario.seed, scenario.rate_limit, gateway_url);
        for u in &scenario.users {
            world.add_user(&u.user_id, u.is_owner);
        }
        for item in &scenario.items {
            let script = AttachedScript::new(&item.script.target_route, TemplateScript::from_spec(&item.script));
            // Scenario validation already rejected duplicates.
            let _ = world.add_item(&item.item_id, item.kind, script);
        }
        world
    }

    pub fn with_transport(mut self, transport: impl Transport + 'static) -> Self {
        self.transport = Box::new(transport);
        self
    }

    pub fn with_clock(mut self, mode: ClockMode) -> Self {
        self.clock_mode = mode;
        self
    }

    pub fn add_user(&mut self, user_id: &str, is_owner: bool) {
        self.users.insert(
            user_id.to_owned(),
            SimulatedUser {
                user_id: user_id.to_owned(),
                connected: false,
                is_owner,
            },
        );
    }

    pub fn add_item(&mut self, item_id: &str, kind: ItemKind, script: AttachedScript) -> Result<(), WorldError> {
        if self.items.contains_key(item_id) {
            return Err(WorldError::DuplicateItem(item_id.to_owned()));
        }
        self.items.insert(
            item_id.to_owned(),
            WorldItem {
                item_id: item_id.to_owned(),
                kind,
                script,
            },
        );
        Ok(())
    }

    pub fn user(&self, user_id: &str) -> Option<&SimulatedUser> {
        self.users.get(user_id)
    }

    pub fn connected_count(&self) -> usize {
        self.users.values().filter(|u| u.connected).count()
    }

    pub fn now_ms(&self) -> u64 {
        self.clock_ms
    }

    pub fn report(&self) -> &WorldReport {
        &self.report
    }

    /// Moves the virtual clock forward (never backwards).
    pub fn advance_to(&mut self, t_ms: u64) {
        if t_ms <= self.clock_ms {
            return;
        }
        if let ClockMode::RealTime { speed } = self.clock_mode {
            let wait = (t_ms - self.clock_ms) as f64 / speed.max(1e-6);
            std::thread::sleep(Duration::from_micros((wait * 1000.0) as u64));
        }
        self.clock_ms = t_ms;
    }

    fn next_request_id(&mut self) -> String {
        let n = self.request_seq;
        self.request_seq += 1;
        let salt: u32 = self.rng.random();
        format!("{}-{n:05}-{salt:08x}", self.world_id)
    }

    fn is_connected(&self, user_id: &str) -> Result<bool, WorldError> {
        self.users
            .get(user_id)
            .map(|u| u.connected)
            .ok_or_else(|| WorldError::UnknownUser(user_id.to_owned()))
    }

    pub fn join(&mut self, user_id: &str) -> Result<(), WorldError> {
        if self.is_connected(user_id)? {
            self.report.skipped_events += 1;
            return Ok(());
        }
        self.users.get_mut(user_id).expect("checked").connected = true;
        self.fire_presence(Action::Join, user_id);
        self.deliver_responses();
        Ok(())
    }

    pub fn leave(&mut self, user_id: &str) -> Result<(), WorldError> {
        if !self.is_connected(user_id)? {
            self.report.skipped_events += 1;
            return Ok(());
        }
        // The leaving client still runs presence scripts, reporting the
        // count without itself.
        self.fire_presence(Action::Leave, user_id);
        self.users.get_mut(user_id).expect("checked").connected = false;
        self.deliver_responses();
        Ok(())
    }

    pub fn interact(&mut self, user_id: &str, item_id: &str) -> Result<(), WorldError> {
        self.trigger_item(Action::Click, ItemKind::Clickable, user_id, item_id)
    }

    pub fn enter_region(&mut self, user_id: &str, item_id: &str) -> Result<(), WorldError> {
        self.trigger_item(Action::EnterRegion, ItemKind::FloorRegion, user_id, item_id)
    }

    fn trigger_item(&mut self, action: Action, expected: ItemKind, user_id: &str, item_id: &str) -> Result<(), WorldError> {
        let connected = self.is_connected(user_id)?;
        let kind = self
            .items
            .get(item_id)
            .map(|i| i.kind)
            .ok_or_else(|| WorldError::UnknownItem(item_id.to_owned()))?;
        if kind != expected {
            return Err(WorldError::KindMismatch {
                item_id: item_id.to_owned(),
                kind,
                action,
            });
        }
        if !connected {
            self.report.skipped_events += 1;
            return Ok(());
        }
        let count = self.connected_count();
        self.fire_item(item_id, action, user_id, count);
        self.deliver_responses();
        Ok(())
    }

    fn fire_presence(&mut self, action: Action, user_id: &str) {
        let count = match action {
            Action::Leave => self.connected_count() - 1,
            _ => self.connected_count(),
        };
        let ids: Vec<String> = self
            .items
            .values()
            .filter(|i| i.kind == ItemKind::Presence)
            .map(|i| i.item_id.clone())
            .collect();
        for id in ids {
            self.fire_item(&id, action, user_id, count);
        }
    }

    fn fire_item(&mut self, item_id: &str, action: Action, user_id: &str, user_count: usize) {
        let event = ScriptEvent {
            action,
            user_id: user_id.to_owned(),
            item_id: item_id.to_owned(),
            world_id: self.world_id.clone(),
            t_ms: self.clock_ms,
            user_count,
        };
        let item = self.items.get_mut(item_id).expect("caller checked the item");
        if let Some(payload) = item.script.behavior.on_event(&event) {
            self.call_external(user_id, item_id, payload);
        }
    }

    /// Sends `payload` from `user_id`'s client on behalf of `item_id`.
    ///
    /// Fire-and-forget: calls from disconnected users are ignored, calls over
    /// the rate limit are dropped, and transport failures are only recorded.
    pub fn call_external(&mut self, user_id: &str, item_id: &str, payload: String) {
        if !self.users.get(user_id).is_some_and(|u| u.connected) {
            self.report.skipped_events += 1;
            return;
        }
        let Some(target_route) = self.items.get(item_id).map(|i| i.script.target_route.clone()) else {
            self.report.errors.push(format!("call_external from unknown item `{item_id}`"));
            return;
        };
        let t_ms = self.clock_ms;
        if !self.limiter.admit(user_id, t_ms) {
            self.report.dropped_calls += 1;
            self.report.calls.push(CallRecord {
                t_ms,
                user_id: user_id.to_owned(),
                item_id: item_id.to_owned(),
                request_id: String::new(),
                payload,
                outcome: CallOutcome::Dropped,
            });
            return;
        }

        let envelope = TriggerEnvelope {
            request: payload.clone(),
            request_id: self.next_request_id(),
            world_id: self.world_id.clone(),
            item_id: item_id.to_owned(),
            user_id: user_id.to_owned(),
            timestamp_ms: t_ms,
        };
        let url = format!("{}{}", self.gateway_url, target_route);
        self.report.forwarded_calls += 1;

        let (outcome, response) = match self.transport.post(&url, &encode_envelope(&envelope)) {
            Ok((status, body)) => {
                let response = response_text(&body);
                if status != 200 {
                    self.report.error_responses += 1;
                }
                let (ok, err) = match &response {
                    Ok(s) => (Some(s.clone()), None),
                    Err(m) => (None, Some(m.clone())),
                };
                (CallOutcome::Delivered { status, response: ok, error: err }, response)
            }
            Err(reason) => {
                self.report.failed_calls += 1;
                (CallOutcome::Failed { reason: reason.clone() }, Err(reason))
            }
        };
        self.report.calls.push(CallRecord {
            t_ms,
            user_id: user_id.to_owned(),
            item_id: item_id.to_owned(),
            request_id: envelope.request_id,
            payload,
            outcome,
        });
        self.report
            .responses_by_item
            .entry(item_id.to_owned())
            .or_default()
            .push(ItemResponse {
                t_ms,
                user_id: user_id.to_owned(),
                response: response.as_ref().ok().cloned(),
                error: response.as_ref().err().cloned(),
            });
        self.pending.push_back(PendingResponse {
            item_id: item_id.to_owned(),
            response,
        });
    }

    fn deliver_responses(&mut self) {
        while let Some(p) = self.pending.pop_front() {
            if let Some(item) = self.items.get_mut(&p.item_id) {
                item.script.behavior.on_response(&p.response);
            }
        }
    }

    /// Applies one scenario event at its timestamp. Errors are recorded in the
    /// report and also returned.
    pub fn step(&mut self, ev: &ScenarioEvent) -> Result<(), WorldError> {
        self.advance_to(ev.t_ms);
        let item = ev.item_id.as_deref().unwrap_or("");
        let result = match ev.action {
            Action::Join => self.join(&ev.user_id),
            Action::Leave => self.leave(&ev.user_id),
            Action::Click => self.interact(&ev.user_id, item),
            Action::EnterRegion => self.enter_region(&ev.user_id, item),
        };
        self.report.events_processed += 1;
        if let Err(e) = &result {
            self.report.errors.push(format!("t={}ms: {e}", ev.t_ms));
        }
        result
    }

    /// Runs all events in order and returns the finished report.
    pub fn run(mut self, events: &[ScenarioEvent]) -> WorldReport {
        for ev in events {
            let _ = self.step(ev);
        }
        self.finish()
    }

    pub fn finish(mut self) -> WorldReport {
        self.deliver_responses();
        self.report.connected_users = self.connected_count();
        self.report
    }
}

/// Builds a world from `scenario`, points it at `gateway_url` and runs every
/// event on the virtual clock.
pub fn run_scenario(scenario: &Scenario, gateway_url: &str) -> WorldReport {
    World::from_scenario(scenario, gateway_url).run(&scenario.events)
}
