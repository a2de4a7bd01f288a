//! HTTP server and request lifecycle.
//!
//! The gateway accepts `POST <route_prefix>` (default handler) and
//! `POST <route_prefix>/<name>` (named routes), decodes the body as a
//! [`TriggerEnvelope`], runs the handler and answers with the serialized
//! [`HandlerResponse`]. Every request gets a gap-free arrival number in the
//! [`RequestLog`].
//!
//! Handlers that share a serialization key run one at a time, in arrival
//! order, on a per-key worker with a bounded queue. Distinct keys run
//! concurrently. By default the key is the route name (`""` for the default
//! route).
//!
//! When a loopback tunnel is open, the same routes are also served under
//! `/<run_token>`; the token is checked against the shared [`TokenTable`].

use std::collections::{BTreeMap, HashMap};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Body as HttpBody;
use axum::extract::State;
use axum::http::{header, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use serde::Serialize;
use tokio::sync::{mpsc, oneshot};

use crate::envelope::{
    decode_envelope, serialize_response, GatewayError, HandlerResponse, TriggerEnvelope,
};
use crate::server::{self, BackgroundServer};
use crate::tunnel::{TokenTable, Tunnel, TunnelEndpoint, TunnelError, TunnelMode};

const MAX_BODY_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewayConfig {
    /// 0 picks an ephemeral port.
    pub bind_port: u16,
    pub bind_addr: IpAddr,
    pub route_prefix: String,
    pub per_device_queue_depth: usize,
    pub handler_timeout_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            bind_port: 0,
            bind_addr: IpAddr::V4(Ipv4Addr::LOCALHOST),
            route_prefix: "/trigger".into(),
            per_device_queue_depth: 128,
            handler_timeout_ms: 10_000,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), StartupError> {
        let p = &self.route_prefix;
        if !p.starts_with('/') || (p.len() > 1 && p.ends_with('/')) {
            return Err(StartupError::InvalidConfig(format!(
                "route prefix `{p}` must start with `/` and not end with one"
            )));
        }
        if p[1..].split('/').any(|seg| !seg.is_empty() && !is_url_safe(seg)) {
            return Err(StartupError::InvalidConfig(format!(
                "route prefix `{p}` contains characters that are not URL-safe"
            )));
        }
        if self.per_device_queue_depth == 0 {
            return Err(StartupError::InvalidConfig(
                "per-device queue depth must be at least 1".into(),
            ));
        }
        if self.handler_timeout_ms == 0 {
            return Err(StartupError::InvalidConfig(
                "handler timeout must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StartupError {
    #[error("invalid gateway configuration: {0}")]
    InvalidConfig(String),
    #[error("no handler registered")]
    NoHandlers,
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot start runtime: {0}")]
    Runtime(#[source] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistrationError {
    #[error("a default handler is already registered")]
    DuplicateDefault,
    #[error("route `{0}` is already registered")]
    DuplicateRoute(String),
    #[error("route name `{0}` is not URL-safe")]
    InvalidRouteName(String),
    #[error("route `{0}` is not registered")]
    UnknownRoute(String),
}

pub type HandlerFn = Arc<dyn Fn(&TriggerEnvelope) -> HandlerResponse + Send + Sync>;
pub type KeyFn = Arc<dyn Fn(&TriggerEnvelope) -> String + Send + Sync>;
pub type FilterFn = Arc<dyn Fn(&TriggerEnvelope) -> Result<(), GatewayError> + Send + Sync>;
pub type LogObserver = Arc<dyn Fn(&RequestLogEntry) + Send + Sync>;

#[derive(Clone)]
struct Route {
    handler: HandlerFn,
    key: Option<KeyFn>,
}

/// The set of handlers a gateway dispatches to.
#[derive(Clone, Default)]
pub struct HandlerRegistration {
    default: Option<Route>,
    named: BTreeMap<String, Route>,
    filter: Option<FilterFn>,
    observer: Option<LogObserver>,
}

impl HandlerRegistration {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers the default handler, called with the envelope's `request`
    /// string.
    pub fn receive<F, R>(self, handler: F) -> Result<Self, RegistrationError>
    where
        F: Fn(&str) -> R + Send + Sync + 'static,
        R: Into<HandlerResponse>,
    {
        self.receive_envelope(move |env: &TriggerEnvelope| handler(&env.request))
    }

    /// Like [`receive`](Self::receive) but the handler sees the whole envelope.
    pub fn receive_envelope<F, R>(mut self, handler: F) -> Result<Self, RegistrationError>
    where
        F: Fn(&TriggerEnvelope) -> R + Send + Sync + 'static,
        R: Into<HandlerResponse>,
    {
        if self.default.is_some() {
            return Err(RegistrationError::DuplicateDefault);
        }
        self.default = Some(Route {
            handler: Arc::new(move |env: &TriggerEnvelope| handler(env).into()),
            key: None,
        });
        Ok(self)
    }

    pub fn route<F, R>(self, name: &str, handler: F) -> Result<Self, RegistrationError>
    where
        F: Fn(&str) -> R + Send + Sync + 'static,
        R: Into<HandlerResponse>,
    {
        self.route_envelope(name, move |env: &TriggerEnvelope| handler(&env.request))
    }

    pub fn route_envelope<F, R>(mut self, name: &str, handler: F) -> Result<Self, RegistrationError>
    where
        F: Fn(&TriggerEnvelope) -> R + Send + Sync + 'static,
        R: Into<HandlerResponse>,
    {
        if !is_url_safe(name) {
            return Err(RegistrationError::InvalidRouteName(name.into()));
        }
        if self.named.contains_key(name) {
            return Err(RegistrationError::DuplicateRoute(name.into()));
        }
        self.named.insert(
            name.to_owned(),
            Route {
                handler: Arc::new(move |env: &TriggerEnvelope| handler(env).into()),
                key: None,
            },
        );
        Ok(self)
    }

    /// Overrides the serialization key of a route (`""` = default route).
    pub fn keyed_by<F>(mut self, route: &str, key: F) -> Result<Self, RegistrationError>
    where
        F: Fn(&TriggerEnvelope) -> String + Send + Sync + 'static,
    {
        let slot = if route.is_empty() {
            self.default.as_mut()
        } else {
            self.named.get_mut(route)
        };
        let slot = slot.ok_or_else(|| RegistrationError::UnknownRoute(route.into()))?;
        slot.key = Some(Arc::new(key));
        Ok(self)
    }

    /// Hook that runs before dispatch; an `Err` is returned to the caller
    /// instead of invoking the handler.
    pub fn pre_dispatch<F>(mut self, filter: F) -> Self
    where
        F: Fn(&TriggerEnvelope) -> Result<(), GatewayError> + Send + Sync + 'static,
    {
        self.filter = Some(Arc::new(filter));
        self
    }

    /// Called once per completed request, after its log entry is written.
    pub fn on_logged<F>(mut self, observer: F) -> Self
    where
        F: Fn(&RequestLogEntry) + Send + Sync + 'static,
    {
        self.observer = Some(Arc::new(observer));
        self
    }

    pub fn has_default(&self) -> bool {
        self.default.is_some()
    }

    pub fn route_names(&self) -> impl Iterator<Item = &str> {
        self.named.keys().map(String::as_str)
    }

    fn is_empty(&self) -> bool {
        self.default.is_none() && self.named.is_empty()
    }
}

/// Free-function form of [`HandlerRegistration::receive`].
pub fn register_handler<F, R>(
    reg: HandlerRegistration,
    handler: F,
) -> Result<HandlerRegistration, RegistrationError>
where
    F: Fn(&str) -> R + Send + Sync + 'static,
    R: Into<HandlerResponse>,
{
    reg.receive(handler)
}

fn is_url_safe(s: &str) -> bool {
    !s.is_empty()
        && s
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~'))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RequestLogEntry {
    pub request_id: String,
    pub arrival_order: u64,
    /// `""` for the default route, the route name otherwise; the raw path
    /// for requests that matched no route.
    pub route: String,
    /// `None` when the request never reached a handler.
    pub envelope: Option<TriggerEnvelope>,
    pub response_status: u16,
    pub latency_ms: u64,
}

impl RequestLogEntry {
    pub fn dispatched(&self) -> bool {
        self.envelope.is_some()
    }
}

#[derive(Default)]
struct LogSlots {
    slots: Vec<Option<RequestLogEntry>>,
    completed: usize,
}

/// Append-only record of every request the gateway answered.
#[derive(Clone, Default)]
pub struct RequestLog {
    inner: Arc<Mutex<LogSlots>>,
    observer: Option<LogObserver>,
}

impl RequestLog {
    /// Number of requests that have completed a response.
    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().completed
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Requests that were assigned an arrival number but are still running.
    pub fn in_flight(&self) -> usize {
        let inner = self.inner.lock().unwrap();
        inner.slots.len() - inner.completed
    }

    /// Completed entries in arrival order.
    pub fn entries(&self) -> Vec<RequestLogEntry> {
        self.inner
            .lock()
            .unwrap()
            .slots
            .iter()
            .flatten()
            .cloned()
            .collect()
    }

    pub fn dispatched(&self) -> Vec<RequestLogEntry> {
        self.entries().into_iter().filter(|e| e.dispatched()).collect()
    }

    /// Assigns the next arrival number and runs `f` while holding the log
    /// lock, so whatever `f` enqueues is ordered exactly like the numbers.
    fn reserve_with<T>(&self, f: impl FnOnce(u64) -> T) -> T {
        let mut inner = self.inner.lock().unwrap();
        let order = inner.slots.len() as u64;
        inner.slots.push(None);
        f(order)
    }

    fn complete(&self, entry: RequestLogEntry) {
        {
            let mut inner = self.inner.lock().unwrap();
            let slot = &mut inner.slots[entry.arrival_order as usize];
            debug_assert!(slot.is_none());
            *slot = Some(entry.clone());
            inner.completed += 1;
        }
        if let Some(observer) = &self.observer {
            observer(&entry);
        }
    }
}

struct Job {
    order: u64,
    route_name: String,
    envelope: TriggerEnvelope,
    handler: HandlerFn,
    arrived: Instant,
    reply: oneshot::Sender<(u16, Vec<u8>)>,
}

struct Core {
    reg: HandlerRegistration,
    prefix: String,
    queue_depth: usize,
    handler_timeout: Duration,
    log: RequestLog,
    tokens: TokenTable,
    queues: Mutex<HashMap<String, mpsc::Sender<Job>>>,
}

enum Resolved<'a> {
    Route(&'a str, &'a Route),
    Health,
    Miss,
}

impl Core {
    fn resolve<'a>(&'a self, method: &Method, path: &'a str) -> Resolved<'a> {
        let first_segment = path.strip_prefix('/').map(|p| p.split('/').next().unwrap_or(""));
        let (tokened, rest) = match first_segment {
            Some(first) if !first.is_empty() && self.tokens.is_active(first) => {
                (true, &path[1 + first.len()..])
            }
            _ => (false, path),
        };

        if *method == Method::GET {
            return if tokened && (rest.is_empty() || rest == "/") {
                Resolved::Health
            } else {
                Resolved::Miss
            };
        }
        if *method != Method::POST {
            return Resolved::Miss;
        }

        let prefix = self.prefix.as_str();
        let (default_path, sub) = if prefix == "/" {
            (rest == "/" || (tokened && rest.is_empty()), rest.strip_prefix('/'))
        } else {
            (
                rest == prefix || rest.strip_suffix('/') == Some(prefix),
                rest.strip_prefix(prefix).and_then(|s| s.strip_prefix('/')),
            )
        };
        if default_path {
            return match &self.reg.default {
                Some(route) => Resolved::Route("", route),
                None => Resolved::Miss,
            };
        }
        match sub {
            Some(name) if !name.is_empty() && !name.contains('/') => match self.reg.named.get_key_value(name) {
                Some((k, route)) => Resolved::Route(k.as_str(), route),
                None => Resolved::Miss,
            },
            _ => Resolved::Miss,
        }
    }

    fn finish_now(
        &self,
        order: u64,
        route: String,
        envelope: Option<TriggerEnvelope>,
        err: GatewayError,
        arrived: Instant,
    ) -> (u16, Vec<u8>) {
        let request_id = err.request_id.clone();
        let (status, body) = serialize_response(&HandlerResponse::Error(err));
        self.log.complete(RequestLogEntry {
            request_id,
            arrival_order: order,
            route,
            envelope,
            response_status: status,
            latency_ms: arrived.elapsed().as_millis() as u64,
        });
        (status, body)
    }

    async fn handle(self: &Arc<Self>, method: Method, path: &str, raw: &[u8]) -> (u16, Vec<u8>) {
        let arrived = Instant::now();
        let route = match self.resolve(&method, path) {
            Resolved::Health => {
                return (200, br#"{"status":"ok"}"#.to_vec());
            }
            Resolved::Miss => {
                let order = self.log.reserve_with(|o| o);
                let err = GatewayError::not_found(format!("no route for {method} {path}"));
                return self.finish_now(order, path.to_owned(), None, err, arrived);
            }
            Resolved::Route(name, route) => (name.to_owned(), route.clone()),
        };
        let (route_name, route) = route;

        let envelope = match decode_envelope(raw) {
            Ok(env) => env,
            Err(err) => {
                let order = self.log.reserve_with(|o| o);
                return self.finish_now(order, route_name, None, err, arrived);
            }
        };

        if let Some(filter) = &self.reg.filter {
            if let Err(err) = filter(&envelope) {
                let order = self.log.reserve_with(|o| o);
                let err = err.with_request_id(envelope.request_id.clone());
                return self.finish_now(order, route_name, None, err, arrived);
            }
        }

        let key = match &route.key {
            Some(f) => f(&envelope),
            None => route_name.clone(),
        };

        let (reply_tx, reply_rx) = oneshot::channel();
        let rejected = self.log.reserve_with(|order| {
            let sender = self.sender_for(&key);
            let job = Job {
                order,
                route_name: route_name.clone(),
                envelope,
                handler: route.handler.clone(),
                arrived,
                reply: reply_tx,
            };
            match sender.try_send(job) {
                Ok(()) => None,
                Err(mpsc::error::TrySendError::Full(job)) => Some((job, true)),
                Err(mpsc::error::TrySendError::Closed(job)) => Some((job, false)),
            }
        });
        if let Some((job, full)) = rejected {
            let err = if full {
                GatewayError::device_fault(format!("queue for device key `{key}` is full"))
            } else {
                GatewayError::internal("device worker is gone")
            };
            let err = err.with_request_id(job.envelope.request_id.clone());
            return self.finish_now(job.order, job.route_name, Some(job.envelope), err, arrived);
        }

        reply_rx
            .await
            .unwrap_or_else(|_| serialize_response(&HandlerResponse::handler_error("request aborted")))
    }

    fn sender_for(self: &Arc<Self>, key: &str) -> mpsc::Sender<Job> {
        let mut queues = self.queues.lock().unwrap();
        if let Some(tx) = queues.get(key) {
            return tx.clone();
        }
        let (tx, rx) = mpsc::channel(self.queue_depth);
        queues.insert(key.to_owned(), tx.clone());
        tokio::spawn(Arc::clone(self).device_worker(rx));
        tx
    }

    async fn device_worker(self: Arc<Self>, mut rx: mpsc::Receiver<Job>) {
        while let Some(job) = rx.recv().await {
            let handler = job.handler.clone();
            let env = job.envelope.clone();
            let mut task = tokio::task::spawn_blocking(move || handler(&env));

            let (resp, timed_out) = match tokio::time::timeout(self.handler_timeout, &mut task).await {
                Ok(Ok(resp)) => (resp, false),
                Ok(Err(join)) => (HandlerResponse::handler_error(panic_message(join)), false),
                Err(_) => (
                    HandlerResponse::handler_error(format!(
                        "handler timed out after {} ms",
                        self.handler_timeout.as_millis()
                    )),
                    true,
                ),
            };
            let resp = match resp {
                HandlerResponse::Error(e) if e.request_id.is_empty() => {
                    HandlerResponse::Error(e.with_request_id(job.envelope.request_id.clone()))
                }
                other => other,
            };
            let (status, body) = serialize_response(&resp);
            self.log.complete(RequestLogEntry {
                request_id: job.envelope.request_id.clone(),
                arrival_order: job.order,
                route: job.route_name,
                envelope: Some(job.envelope),
                response_status: status,
                latency_ms: job.arrived.elapsed().as_millis() as u64,
            });
            let _ = job.reply.send((status, body));

            // Keep the key exclusive until the late handler really returns.
            if timed_out {
                let _ = task.await;
            }
        }
    }
}

fn panic_message(join: tokio::task::JoinError) -> String {
    if !join.is_panic() {
        return "handler was cancelled".into();
    }
    let payload = join.into_panic();
    if let Some(s) = payload.downcast_ref::<&str>() {
        format!("handler panicked: {s}")
    } else if let Some(s) = payload.downcast_ref::<String>() {
        format!("handler panicked: {s}")
    } else {
        "handler panicked".into()
    }
}

async fn serve_any(State(core): State<Arc<Core>>, method: Method, uri: Uri, body: HttpBody) -> Response {
    let (status, bytes) = match axum::body::to_bytes(body, MAX_BODY_BYTES).await {
        Ok(raw) => {
            // Run detached so a client hang-up cannot leave a hole in the log.
            let path = uri.path().to_owned();
            let core = core.clone();
            match tokio::spawn(async move { core.handle(method, &path, &raw).await }).await {
                Ok(r) => r,
                Err(_) => serialize_response(&HandlerResponse::handler_error("request task failed")),
            }
        }
        Err(e) => {
            let order = core.log.reserve_with(|o| o);
            core.finish_now(
                order,
                uri.path().to_owned(),
                None,
                GatewayError::malformed_envelope(format!("cannot read body: {e}")),
                Instant::now(),
            )
        }
    };
    (
        StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
        [(header::CONTENT_TYPE, "application/json")],
        bytes,
    )
        .into_response()
}

/// A running gateway. Dropping the handle shuts the server down.
pub struct ServerHandle {
    core: Arc<Core>,
    server: BackgroundServer,
}

impl ServerHandle {
    pub fn port(&self) -> u16 {
        self.server.addr.port()
    }

    /// `http://<addr>:<port>`, without a token.
    pub fn local_url(&self) -> String {
        format!("http://{}", self.server.addr)
    }

    /// URL of the default route on the bare listener.
    pub fn trigger_url(&self) -> String {
        format!("{}{}", self.local_url(), self.route_prefix())
    }

    pub fn route_prefix(&self) -> &str {
        if self.core.prefix == "/" {
            ""
        } else {
            &self.core.prefix
        }
    }

    pub fn log(&self) -> &RequestLog {
        &self.core.log
    }

    pub fn tokens(&self) -> &TokenTable {
        &self.core.tokens
    }

    /// A tunnel whose endpoints route to this server.
    pub fn tunnel(&self) -> Tunnel {
        Tunnel::new(self.core.tokens.clone())
    }

    pub fn tunnel_seeded(&self, seed: u64) -> Tunnel {
        Tunnel::seeded(self.core.tokens.clone(), seed)
    }

    /// Convenience: opens a loopback endpoint for this server.
    pub fn open_loopback(&self) -> Result<TunnelEndpoint, TunnelError> {
        self.tunnel().open(TunnelMode::Loopback, self.port())
    }

    /// In-process entry point with the same semantics as an HTTP POST to
    /// `path`. Must not be called from inside an async runtime.
    pub fn handle_request(&self, raw_body: &[u8], path: &str) -> (u16, Vec<u8>) {
        let core = self.core.clone();
        let path = path.to_owned();
        let raw = raw_body.to_vec();
        self.server.rt.block_on(async move {
            tokio::spawn(async move { core.handle(Method::POST, &path, &raw).await })
                .await
                .unwrap_or_else(|_| serialize_response(&HandlerResponse::handler_error("request task failed")))
        })
    }

    pub fn is_running(&self) -> bool {
        self.server.is_running()
    }

    /// Stops accepting connections and waits (at most the handler timeout)
    /// for in-flight requests. Idempotent.
    pub fn shutdown(&self) {
        self.server.shutdown();
    }
}

/// Binds the listener and starts serving on a background runtime. Returns
/// once the socket is accepting connections.
pub fn run(config: GatewayConfig, reg: HandlerRegistration) -> Result<ServerHandle, StartupError> {
    config.validate()?;
    if reg.is_empty() {
        return Err(StartupError::NoHandlers);
    }

    let addr = SocketAddr::new(config.bind_addr, config.bind_port);
    let listener = server::bind(addr).map_err(|source| StartupError::Bind { addr, source })?;
    let rt = server::build_runtime("gateway").map_err(StartupError::Runtime)?;

    let handler_timeout = Duration::from_millis(config.handler_timeout_ms);
    let log = RequestLog {
        inner: Arc::default(),
        observer: reg.observer.clone(),
    };
    let core = Arc::new(Core {
        reg,
        prefix: config.route_prefix.clone(),
        queue_depth: config.per_device_queue_depth,
        handler_timeout,
        log,
        tokens: TokenTable::new(),
        queues: Mutex::default(),
    });

    let app = Router::new().fallback(serve_any).with_state(core.clone());
    let grace = handler_timeout + Duration::from_millis(250);
    let server = BackgroundServer::start("gateway", rt, listener, app, grace)
        .map_err(|source| StartupError::Bind { addr, source })?;
    tracing::info!(addr = %server.addr, "gateway listening");
    Ok(ServerHandle { core, server })
}
