//! Public-URL exposure for a running gateway.
//!
//! Only the loopback implementation ships: it mints a random run token and
//! publishes `http://127.0.0.1:<port>/<token>`. The gateway consults the shared
//! [`TokenTable`] on every request, so closing an endpoint immediately turns
//! its URL into a 404. Third-party tunnels plug in through [`ExternalAdapter`].

use std::collections::HashSet;
use std::fmt;
use std::sync::{Arc, Mutex, RwLock};

use rand::distr::{Alphanumeric, SampleString};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const RUN_TOKEN_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TunnelMode {
    Loopback,
    External,
}

impl std::str::FromStr for TunnelMode {
    type Err = TunnelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "loopback" => Ok(TunnelMode::Loopback),
            "external" => Ok(TunnelMode::External),
            other => Err(TunnelError::Config(format!("unknown tunnel mode `{other}`"))),
        }
    }
}

impl fmt::Display for TunnelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TunnelMode::Loopback => "loopback",
            TunnelMode::External => "external",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TunnelEndpoint {
    pub public_url: String,
    pub mode: TunnelMode,
    pub run_token: String,
}

#[derive(Debug, thiserror::Error)]
pub enum TunnelError {
    #[error("tunnel configuration error: {0}")]
    Config(String),
    #[error("external tunnel adapter failed: {0}")]
    Adapter(String),
}

/// Hook for a real tunneling provider.
pub trait ExternalAdapter: Send + Sync {
    /// Expose `local_port` and return the provider's public base URL.
    fn start(&self, local_port: u16) -> Result<String, TunnelError>;
    fn stop(&self);
}

/// Adapter for a tunnel that is already running outside this process,
/// e.g. a provider CLI started by hand and pointed at the gateway port.
#[derive(Debug, Clone)]
pub struct FixedUrlAdapter {
    base_url: String,
}

impl FixedUrlAdapter {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
        }
    }
}

impl ExternalAdapter for FixedUrlAdapter {
    fn start(&self, _local_port: u16) -> Result<String, TunnelError> {
        let ok = self.base_url.starts_with("http://") || self.base_url.starts_with("https://");
        if !ok {
            return Err(TunnelError::Config(format!(
                "public base URL `{}` is not http(s)",
                self.base_url
            )));
        }
        Ok(self.base_url.clone())
    }

    fn stop(&self) {}
}

#[derive(Debug, Default)]
struct Tokens {
    active: HashSet<String>,
    issued: HashSet<String>,
}

/// Run tokens currently routed to the gateway. Cheap to clone.
#[derive(Debug, Clone, Default)]
pub struct TokenTable {
    inner: Arc<RwLock<Tokens>>,
}

impl TokenTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_active(&self, token: &str) -> bool {
        self.inner.read().unwrap().active.contains(token)
    }

    pub fn active_count(&self) -> usize {
        self.inner.read().unwrap().active.len()
    }

    /// Registers `token` if it was never issued before.
    fn activate_fresh(&self, token: &str) -> bool {
        let mut t = self.inner.write().unwrap();
        if !t.issued.insert(token.to_owned()) {
            return false;
        }
        t.active.insert(token.to_owned());
        true
    }

    fn deactivate(&self, token: &str) -> bool {
        self.inner.write().unwrap().active.remove(token)
    }
}

pub struct Tunnel {
    tokens: TokenTable,
    rng: Mutex<ChaCha20Rng>,
    adapter: Option<Arc<dyn ExternalAdapter>>,
}

impl Tunnel {
    /// Tokens drawn from OS entropy.
    pub fn new(tokens: TokenTable) -> Self {
        Self::with_rng(tokens, ChaCha20Rng::from_os_rng())
    }

    /// Reproducible token sequence.
    pub fn seeded(tokens: TokenTable, seed: u64) -> Self {
        Self::with_rng(tokens, ChaCha20Rng::seed_from_u64(seed))
    }

    fn with_rng(tokens: TokenTable, rng: ChaCha20Rng) -> Self {
        Self {
            tokens,
            rng: Mutex::new(rng),
            adapter: None,
        }
    }

    pub fn with_adapter(mut self, adapter: Arc<dyn ExternalAdapter>) -> Self {
        self.adapter = Some(adapter);
        self
    }

    pub fn tokens(&self) -> &TokenTable {
        &self.tokens
    }

    pub fn open(&self, mode: TunnelMode, local_port: u16) -> Result<TunnelEndpoint, TunnelError> {
        let base = match mode {
            TunnelMode::Loopback => format!("http://127.0.0.1:{local_port}"),
            TunnelMode::External => {
                let adapter = self.adapter.as_ref().ok_or_else(|| {
                    TunnelError::Config("external tunnel mode requires an adapter".into())
                })?;
                adapter.start(local_port)?.trim_end_matches('/').to_owned()
            }
        };
        let run_token = self.mint_token();
        Ok(TunnelEndpoint {
            public_url: format!("{base}/{run_token}"),
            mode,
            run_token,
        })
    }

    /// Idempotent.
    pub fn close(&self, ep: &TunnelEndpoint) {
        if self.tokens.deactivate(&ep.run_token) && ep.mode == TunnelMode::External {
            if let Some(adapter) = &self.adapter {
                adapter.stop();
            }
        }
    }

    fn mint_token(&self) -> String {
        let mut rng = self.rng.lock().unwrap();
        loop {
            let token = Alphanumeric.sample_string(&mut *rng, RUN_TOKEN_LEN);
            if self.tokens.activate_fresh(&token) {
                return token;
            }
        }
    }
}
