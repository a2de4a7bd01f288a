//! Runs an axum router on a private runtime thread so callers stay synchronous.

use std::net::{SocketAddr, TcpListener as StdTcpListener};
use std::sync::Mutex;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::Router;
use tokio::sync::watch;

pub(crate) struct BackgroundServer {
    pub addr: SocketAddr,
    pub rt: tokio::runtime::Handle,
    stop: watch::Sender<bool>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

/// Binds `addr` synchronously so a busy port fails here, not later.
pub(crate) fn bind(addr: SocketAddr) -> std::io::Result<StdTcpListener> {
    let listener = StdTcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    Ok(listener)
}

pub(crate) fn build_runtime(name: &str) -> std::io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .thread_name(name)
        .enable_all()
        .build()
}

impl BackgroundServer {
    /// `make_router` runs inside the runtime context, so it may spawn tasks.
    /// After a stop request, connections get `grace` to drain.
    pub fn start(
        name: &str,
        rt: tokio::runtime::Runtime,
        listener: StdTcpListener,
        router: Router,
        grace: Duration,
    ) -> std::io::Result<Self> {
        let addr = listener.local_addr()?;
        let listener = {
            let _guard = rt.enter();
            tokio::net::TcpListener::from_std(listener)?
        };
        let (stop, stop_rx) = watch::channel(false);
        let handle = rt.handle().clone();
        let thread = std::thread::Builder::new()
            .name(format!("{name}-{}", addr.port()))
            .spawn(move || {
                rt.block_on(async move {
                    let mut graceful_rx = stop_rx.clone();
                    let server = axum::serve(listener, router).with_graceful_shutdown(async move {
                        let _ = graceful_rx.wait_for(|s| *s).await;
                    });
                    let mut deadline_rx = stop_rx;
                    let deadline = async move {
                        let _ = deadline_rx.wait_for(|s| *s).await;
                        tokio::time::sleep(grace).await;
                    };
                    tokio::select! {
                        res = server => {
                            if let Err(e) = res {
                                tracing::error!("server stopped: {e}");
                            }
                        }
                        _ = deadline => tracing::warn!("shutdown grace period elapsed"),
                    }
                });
                rt.shutdown_timeout(Duration::from_millis(100));
            })?;
        Ok(Self {
            addr,
            rt: handle,
            stop,
            thread: Mutex::new(Some(thread)),
        })
    }

    pub fn is_running(&self) -> bool {
        self.thread.lock().unwrap().is_some()
    }

    pub fn shutdown(&self) {
        let Some(thread) = self.thread.lock().unwrap().take() else {
            return;
        };
        let _ = self.stop.send(true);
        let _ = thread.join();
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}
