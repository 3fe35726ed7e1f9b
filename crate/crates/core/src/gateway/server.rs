use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use super::{Gateway, GatewayConfig, GatewayError, MockHandle, RouteRequest};
use crate::estimator::FailureEstimator;

impl GatewayError {
    pub fn status(&self) -> StatusCode {
        match self {
            GatewayError::BadRequest(_) => StatusCode::BAD_REQUEST,
            GatewayError::AllBackendsFailed(_) | GatewayError::OracleUnavailable(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::Config(_) => "config",
            GatewayError::Estimator(_) => "estimator",
            GatewayError::BadRequest(_) => "bad_request",
            GatewayError::AllBackendsFailed(_) => "all_backends_failed",
            GatewayError::OracleUnavailable(_) => "oracle_unavailable",
            GatewayError::Internal(_) => "internal",
            GatewayError::Io(_) => "io",
        }
    }
}

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code(), "message": self.to_string()}});
        (self.status(), Json(body)).into_response()
    }
}

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route("/v1/route", post(route))
        .route("/v1/health", get(health))
        .route("/v1/stats", get(stats))
        .with_state(gateway)
}

// Raw bytes so malformed bodies get the structured 400 rather than axum's
// plain-text rejection.
async fn route(State(gw): State<Arc<Gateway>>, body: Bytes) -> Response {
    let req: RouteRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return GatewayError::BadRequest(e.to_string()).into_response(),
    };
    match gw.handle(req).await {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn health(State(gw): State<Arc<Gateway>>) -> Response {
    Json(gw.health()).into_response()
}

async fn stats(State(gw): State<Arc<Gateway>>) -> Response {
    match gw.summary() {
        Some(s) => Json(s).into_response(),
        None => Json(json!({"n_queries": 0})).into_response(),
    }
}

/// A gateway listening in the background.
pub struct RunningGateway {
    pub addr: SocketAddr,
    pub gateway: Arc<Gateway>,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<Result<(), GatewayError>>,
    mocks: Vec<MockHandle>,
}

impl RunningGateway {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// In-process mocks started for `mock` backends, in configuration order.
    pub fn mocks(&self) -> &[MockHandle] {
        &self.mocks
    }

    /// Stops accepting connections, drains in-flight requests and flushes
    /// the ledger.
    pub async fn shutdown(mut self) -> Result<(), GatewayError> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let result = (&mut self.task)
            .await
            .map_err(|e| GatewayError::Internal(e.to_string()))?;
        self.mocks.clear();
        result
    }
}

/// Loads the estimator named in the config and starts serving.
pub async fn start(config: GatewayConfig) -> Result<RunningGateway, GatewayError> {
    config.validate()?;
    let estimator = FailureEstimator::load(&config.estimator_path)?;
    start_with_estimator(config, estimator).await
}

pub async fn start_with_estimator(
    mut config: GatewayConfig,
    estimator: FailureEstimator,
) -> Result<RunningGateway, GatewayError> {
    let mut mocks = Vec::new();
    for b in &mut config.backends {
        if let Some(script) = &b.mock {
            let handle = MockHandle::spawn(script.clone()).await?;
            b.endpoint = handle.url();
            mocks.push(handle);
        }
    }
    let gateway = Arc::new(Gateway::new(&config, estimator)?);
    let listener = tokio::net::TcpListener::bind(&config.listen).await?;
    let addr = listener.local_addr()?;
    let app = router(gateway.clone());
    let (tx, rx) = oneshot::channel::<()>();
    let gw = gateway.clone();
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await?;
        gw.flush_ledger()
    });
    Ok(RunningGateway {
        addr,
        gateway,
        shutdown: Some(tx),
        task,
        mocks,
    })
}

/// Serves until Ctrl-C or SIGTERM, then shuts down gracefully.
pub async fn serve(config: GatewayConfig) -> Result<(), GatewayError> {
    let running = start(config).await?;
    eprintln!(
        "listening on {} (estimator {})",
        running.url(),
        running.gateway.estimator_id()
    );
    shutdown_signal().await;
    running.shutdown().await
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
