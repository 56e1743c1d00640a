//! WebSocket front end for [`hydroarm::service`]. Each connection owns one
//! session and its own control loop; the only shared state is the listing
//! shown by `GET /sessions`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use hydroarm::experiments::StartPreset;
use hydroarm::hydraulic_plant::CONTROL_DT;
use hydroarm::jacobian_ctrl::JacCtrlConfig;
use hydroarm::machine_model::MachineParams;
use hydroarm::ppo::PolicyArtifact;
use hydroarm::service::{ControllerMode, ServerMessage, Session, SessionConfig, SessionInfo};
use serde::Deserialize;
use tokio::net::TcpListener;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub params: Arc<MachineParams>,
    pub policy: Option<Arc<PolicyArtifact>>,
    pub jacobian: JacCtrlConfig,
    /// Simulation speed relative to wall clock; 1.0 is real time (20 Hz).
    pub speedup: f64,
}

impl ServerConfig {
    pub fn new(params: MachineParams) -> Self {
        Self { params: Arc::new(params), policy: None, jacobian: JacCtrlConfig::default(), speedup: 1.0 }
    }

    pub fn tick_period(&self) -> Duration {
        Duration::from_secs_f64(CONTROL_DT / self.speedup.max(1e-3))
    }
}

struct AppState {
    cfg: ServerConfig,
    sessions: Mutex<BTreeMap<u64, SessionInfo>>,
    next_id: AtomicU64,
}

/// Optional query parameters of `/ws`.
#[derive(Debug, Default, Deserialize)]
pub struct OpenParams {
    pub mode: Option<ControllerMode>,
    pub preset: Option<StartPreset>,
}

pub fn router(cfg: ServerConfig) -> Router {
    let state = Arc::new(AppState { cfg, sessions: Mutex::new(BTreeMap::new()), next_id: AtomicU64::new(1) });
    Router::new().route("/health", get(health)).route("/sessions", get(list_sessions)).route("/ws", get(ws_upgrade)).with_state(state)
}

/// Serve until the listener fails.
pub async fn serve(listener: TcpListener, cfg: ServerConfig) -> std::io::Result<()> {
    axum::serve(listener, router(cfg)).await
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<Vec<SessionInfo>> {
    Json(state.sessions.lock().unwrap().values().cloned().collect())
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(state): State<Arc<AppState>>, Query(params): Query<OpenParams>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| run_session(socket, state, params))
}

async fn send(socket: &mut WebSocket, msg: &ServerMessage) -> bool {
    socket.send(Message::Text(msg.to_json().into())).await.is_ok()
}

async fn run_session(mut socket: WebSocket, state: Arc<AppState>, params: OpenParams) {
    let id = state.next_id.fetch_add(1, Ordering::Relaxed);
    let cfg = SessionConfig {
        params: state.cfg.params.clone(),
        preset: params.preset.unwrap_or(StartPreset::MidWorkspace),
        mode: params.mode.unwrap_or(ControllerMode::Jacobian),
        policy: state.cfg.policy.clone(),
        jacobian: state.cfg.jacobian.clone(),
    };
    let mut session = match Session::open(id, cfg) {
        Ok(s) => s,
        Err(e) => {
            send(&mut socket, &ServerMessage::Error { reason: e.to_string() }).await;
            return;
        }
    };
    tracing::info!(id, "session opened");
    state.sessions.lock().unwrap().insert(id, SessionInfo::from(&session));
    let mut ticker = tokio::time::interval(state.cfg.tick_period());
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Text(text))) => {
                    let reply = session.handle_text(&text);
                    if !send(&mut socket, &reply).await {
                        break;
                    }
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
            _ = ticker.tick() => {
                let reply = match session.tick() {
                    Ok(st) => ServerMessage::State(st),
                    Err(e) => ServerMessage::Error { reason: e.to_string() },
                };
                state.sessions.lock().unwrap().insert(id, SessionInfo::from(&session));
                if !send(&mut socket, &reply).await {
                    break;
                }
            }
        }
    }
    state.sessions.lock().unwrap().remove(&id);
    tracing::info!(id, "session closed");
}
