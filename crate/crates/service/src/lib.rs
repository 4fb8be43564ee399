//! Network front end for teleoperation sessions.
//!
//! Three transports share one session implementation:
//! newline-delimited JSON over TCP (and stdio), a WebSocket channel for
//! browsers, and a small HTTP API for health, batch mapping and replay.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufRead, AsyncBufReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::TcpListener;

use teleop_core::hand_model::HandModel;
use teleop_core::session::{
    replay_eval, MappingKind, ReplayReport, Session, SessionResources, StreamMessage,
    TrajectoryPoint,
};
use teleop_core::subspace::TeleopMapping;

pub use teleop_core::session::SessionConfig;

/// Reads messages line by line and writes every reply as one line, in order.
/// Returns the number of lines read once the reader hits end of input.
pub async fn handle_stream<R, W>(
    reader: R,
    mut writer: W,
    res: Arc<SessionResources>,
) -> std::io::Result<u64>
where
    R: AsyncBufRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let mut session = Session::new(res);
    let mut lines = reader.lines();
    let mut count = 0;
    while let Some(line) = lines.next_line().await? {
        if line.trim().is_empty() {
            continue;
        }
        count += 1;
        let mut out = String::new();
        for reply in session.handle_line(&line) {
            out.push_str(&reply_line(&reply));
            out.push('\n');
        }
        writer.write_all(out.as_bytes()).await?;
        writer.flush().await?;
    }
    Ok(count)
}

fn reply_line(msg: &StreamMessage) -> String {
    msg.to_line().unwrap_or_else(|e| {
        StreamMessage::error(msg.t, format!("could not encode reply: {e}"))
            .to_line()
            .unwrap_or_default()
    })
}

/// Accepts TCP connections forever, one session per connection.
pub async fn serve_tcp(listener: TcpListener, res: Arc<SessionResources>) -> std::io::Result<()> {
    loop {
        let (socket, peer) = listener.accept().await?;
        let res = res.clone();
        tokio::spawn(async move {
            tracing::info!(%peer, "stream connection opened");
            let (read, write) = socket.into_split();
            match handle_stream(tokio::io::BufReader::new(read), write, res).await {
                Ok(n) => tracing::info!(%peer, lines = n, "stream connection closed"),
                Err(e) => tracing::warn!(%peer, error = %e, "stream connection failed"),
            }
        });
    }
}

/// Runs a session over stdin/stdout until stdin closes.
pub async fn serve_stdio(res: Arc<SessionResources>) -> std::io::Result<u64> {
    let stdin = tokio::io::BufReader::new(tokio::io::stdin());
    handle_stream(stdin, tokio::io::stdout(), res).await
}

#[derive(Clone)]
struct AppState {
    res: Arc<SessionResources>,
}

/// HTTP and WebSocket routes:
///
/// - `GET /v1/health`
/// - `GET /v1/session`: dofs, mapping kinds and hand models of the session
/// - `POST /v1/map`: maps poses with mappings given inline
/// - `POST /v1/replay-eval`: runs a trajectory through a fresh session
/// - `GET /v1/stream`: WebSocket carrying the line protocol
pub fn router(res: Arc<SessionResources>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/session", get(session_info))
        .route("/v1/map", post(map_poses))
        .route("/v1/replay-eval", post(replay))
        .route("/v1/stream", get(stream))
        .with_state(AppState { res })
}

/// Serves the HTTP routes on `listener` until the process stops.
pub async fn serve_http(listener: TcpListener, res: Arc<SessionResources>) -> std::io::Result<()> {
    axum::serve(listener, router(res)).await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionInfo {
    pub mapping_kind: MappingKind,
    pub supported: Vec<MappingKind>,
    pub clamp: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master_dof: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slave_dof: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master_model: Option<HandModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slave_model: Option<HandModel>,
}

impl SessionInfo {
    pub fn of(res: &SessionResources) -> Self {
        Self {
            mapping_kind: res.initial_kind,
            supported: [
                MappingKind::Subspace,
                MappingKind::Joint,
                MappingKind::Fingertip,
            ]
            .into_iter()
            .filter(|k| res.supports(*k))
            .collect(),
            clamp: res.clamp,
            master_dof: res.master_dof(),
            slave_dof: res.slave_dof(),
            master_model: res.master_model.clone(),
            slave_model: res.slave_model.clone(),
        }
    }
}

async fn session_info(State(state): State<AppState>) -> Json<SessionInfo> {
    Json(SessionInfo::of(&state.res))
}

/// Body of `POST /v1/map`. Mappings and the optional slave model are the
/// same documents as their files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapRequest {
    pub master: serde_json::Value,
    pub slave: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slave_model: Option<serde_json::Value>,
    pub poses: Vec<TrajectoryPoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapResponse {
    pub replies: Vec<StreamMessage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
}

fn bad_request(msg: impl Into<String>) -> Response {
    (
        StatusCode::BAD_REQUEST,
        Json(ApiError { error: msg.into() }),
    )
        .into_response()
}

/// Builds subspace-only resources from inline documents.
pub fn map_resources(req: &MapRequest) -> teleop_core::Result<SessionResources> {
    let master = TeleopMapping::from_json_str(&req.master.to_string())?;
    let slave = TeleopMapping::from_json_str(&req.slave.to_string())?;
    let model = match &req.slave_model {
        Some(v) => Some(HandModel::from_json_str(&v.to_string())?),
        None => None,
    };
    SessionResources::subspace(master, slave, model)
}

async fn map_poses(Json(req): Json<MapRequest>) -> Response {
    let res = match map_resources(&req) {
        Ok(r) => Arc::new(r),
        Err(e) => return bad_request(e.to_string()),
    };
    let mut session = Session::new(res);
    let replies = req
        .poses
        .iter()
        .flat_map(|p| session.handle(&StreamMessage::master_pose(p.t, p.q.clone())))
        .collect();
    Json(MapResponse { replies }).into_response()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayRequest {
    pub trajectory: Vec<TrajectoryPoint>,
}

async fn replay(State(state): State<AppState>, Json(req): Json<ReplayRequest>) -> Response {
    let res = state.res.clone();
    let out = tokio::task::spawn_blocking(move || replay_eval(&req.trajectory, res)).await;
    match out {
        Ok(Ok((report, _))) => Json::<ReplayReport>(report).into_response(),
        Ok(Err(e)) => bad_request(e.to_string()),
        Err(e) => (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(ApiError {
                error: e.to_string(),
            }),
        )
            .into_response(),
    }
}

async fn stream(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| websocket_session(socket, state.res))
}

/// Each text frame may hold one or more lines; replies go back as one frame
/// per reply.
async fn websocket_session(mut socket: WebSocket, res: Arc<SessionResources>) {
    let mut session = Session::new(res);
    tracing::info!("websocket session opened");
    while let Some(frame) = socket.recv().await {
        let text = match frame {
            Ok(Message::Text(t)) => t.to_string(),
            Ok(Message::Binary(b)) => String::from_utf8_lossy(&b).into_owned(),
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => continue,
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            for reply in session.handle_line(line) {
                if socket
                    .send(Message::Text(reply_line(&reply).into()))
                    .await
                    .is_err()
                {
                    return;
                }
            }
        }
    }
    tracing::info!("websocket session closed");
}

/// Where to listen. Port 0 picks a free port.
#[derive(Debug, Clone, Default)]
pub struct Endpoints {
    pub http: Option<SocketAddr>,
    pub tcp: Option<SocketAddr>,
}

/// Listeners bound to the requested endpoints.
pub struct Bound {
    pub http: Option<TcpListener>,
    pub tcp: Option<TcpListener>,
}

impl Bound {
    pub async fn bind(endpoints: &Endpoints) -> std::io::Result<Self> {
        let http = match endpoints.http {
            Some(a) => Some(TcpListener::bind(a).await?),
            None => None,
        };
        let tcp = match endpoints.tcp {
            Some(a) => Some(TcpListener::bind(a).await?),
            None => None,
        };
        Ok(Self { http, tcp })
    }

    pub fn http_addr(&self) -> Option<SocketAddr> {
        self.http.as_ref().and_then(|l| l.local_addr().ok())
    }

    pub fn tcp_addr(&self) -> Option<SocketAddr> {
        self.tcp.as_ref().and_then(|l| l.local_addr().ok())
    }

    /// Serves every bound listener; returns when one of them fails.
    pub async fn run(self, res: Arc<SessionResources>) -> std::io::Result<()> {
        let mut tasks = tokio::task::JoinSet::new();
        if let Some(l) = self.http {
            tasks.spawn(serve_http(l, res.clone()));
        }
        if let Some(l) = self.tcp {
            tasks.spawn(serve_tcp(l, res.clone()));
        }
        match tasks.join_next().await {
            Some(Ok(r)) => r,
            Some(Err(e)) => Err(std::io::Error::other(e)),
            None => Ok(()),
        }
    }
}
