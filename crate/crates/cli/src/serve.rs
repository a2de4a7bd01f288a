use std::sync::Arc;

use trigger_gateway::devices::DeviceRegistry;
use trigger_gateway::gateway::{run, GatewayConfig, HandlerRegistration, RequestLogEntry, StartupError};
use trigger_gateway::smarthome::{self, start_mock, Fixture, SmartHomeClient};
use trigger_gateway::tunnel::FixedUrlAdapter;

use crate::{emit, Failure, LogFormat, MockArgs, ServeArgs, SmartHomeArgs};

/// Blocks until SIGINT (or SIGTERM on unix).
fn wait_for_interrupt() -> Result<(), Failure> {
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Config(format!("cannot start signal runtime: {e}")))?;
    rt.block_on(async {
        #[cfg(unix)]
        {
            use tokio::signal::unix::{signal, SignalKind};
            let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler");
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = term.recv() => {}
            }
        }
        #[cfg(not(unix))]
        let _ = tokio::signal::ctrl_c().await;
    });
    Ok(())
}

fn log_line(format: LogFormat) -> impl Fn(&RequestLogEntry) + Send + Sync + 'static {
    move |entry| match format {
        LogFormat::Jsonl => emit(&serde_json::to_string(entry).expect("log entry serializes")),
        LogFormat::Text => tracing::info!(
            "#{} {} route={:?} user={} status={} {}ms",
            entry.arrival_order,
            entry.request_id,
            entry.route,
            entry.envelope.as_ref().map_or("-", |e| e.user_id.as_str()),
            entry.response_status,
            entry.latency_ms,
        ),
    }
}

pub fn smarthome_client(args: &SmartHomeArgs) -> Option<SmartHomeClient> {
    args.smarthome_base_url
        .as_ref()
        .map(|url| SmartHomeClient::new(url.trim_end_matches('/'), &args.smarthome_token))
}

pub fn startup_failure(e: StartupError) -> Failure {
    Failure::Config(e.to_string())
}

pub fn serve(args: ServeArgs, format: LogFormat) -> Result<(), Failure> {
    let devices = match &args.devices {
        Some(path) => DeviceRegistry::load(path).map_err(|e| Failure::Config(e.to_string()))?,
        None => DeviceRegistry::demo(),
    };
    let mut reg = HandlerRegistration::new()
        .receive(|request: &str| request.to_owned())
        .map_err(|e| Failure::Config(e.to_string()))?;
    reg = devices.install(reg).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(client) = smarthome_client(&args.smarthome) {
        reg = reg
            .route("smarthome", smarthome::handler(client))
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    reg = reg.on_logged(log_line(format));

    let config = GatewayConfig {
        bind_port: args.port,
        route_prefix: args.route_prefix.clone(),
        ..GatewayConfig::default()
    };
    let server = run(config, reg).map_err(startup_failure)?;
    let mut tunnel = match args.seed {
        Some(seed) => server.tunnel_seeded(seed),
        None => server.tunnel(),
    };
    if let Some(base) = &args.public_base_url {
        tunnel = tunnel.with_adapter(Arc::new(FixedUrlAdapter::new(base.clone())));
    }
    let endpoint = tunnel
        .open(args.tunnel_mode, server.port())
        .map_err(|e| Failure::Config(e.to_string()))?;

    emit(&endpoint.public_url);
    tracing::info!(
        "gateway listening on {} (routes under {}, tunnel {})",
        server.local_url(),
        server.route_prefix(),
        args.tunnel_mode
    );
    tracing::info!("devices: {}", devices.keys().collect::<Vec<_>>().join(", "));

    wait_for_interrupt()?;
    tracing::info!("interrupted, shutting down");
    tunnel.close(&endpoint);
    server.shutdown();
    tracing::info!("{} requests served", server.log().len());
    Ok(())
}

pub fn mock_smarthome(args: MockArgs) -> Result<(), Failure> {
    let fixture = match &args.fixture {
        Some(path) => Fixture::load(path).map_err(|e| Failure::Config(e.to_string()))?,
        None => Fixture::workshop(),
    };
    let count = fixture.devices.len();
    let mock = start_mock(fixture, args.port).map_err(|e| Failure::Config(e.to_string()))?;
    emit(&mock.base_url());
    tracing::info!("mock smart-home cloud with {count} devices, token {:?}", mock.token());
    wait_for_interrupt()?;
    mock.shutdown();
    Ok(())
}
