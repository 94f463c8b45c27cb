use std::sync::Arc;

use anyhow::Result;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::Router;

use airway_nav::harness::SessionHub;

pub async fn serve(host: &str, port: u16, max_sessions: usize) -> Result<()> {
    let hub = Arc::new(SessionHub::new(max_sessions));
    let app = Router::new()
        .route("/ws", get(upgrade))
        .route("/session", post(http_message))
        .route("/health", get(|| async { "ok" }))
        .with_state(hub);
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    // Tests and scripts read the bound address from the first stdout line.
    println!("listening on {}", listener.local_addr()?);
    log::info!("protocol version {}", airway_nav::harness::PROTOCOL_VERSION);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn upgrade(ws: WebSocketUpgrade, State(hub): State<Arc<SessionHub>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, hub))
}

async fn connection(mut socket: WebSocket, hub: Arc<SessionHub>) {
    while let Some(Ok(msg)) = socket.recv().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Binary(b) => String::from_utf8_lossy(&b).into_owned(),
            Message::Close(_) => break,
            _ => continue,
        };
        let reply = handle(&hub, text).await;
        if socket.send(Message::Text(reply.into())).await.is_err() {
            break;
        }
    }
}

async fn http_message(State(hub): State<Arc<SessionHub>>, body: String) -> impl IntoResponse {
    (
        [(axum::http::header::CONTENT_TYPE, "application/json")],
        handle(&hub, body).await,
    )
}

async fn handle(hub: &Arc<SessionHub>, text: String) -> String {
    let hub = hub.clone();
    tokio::task::spawn_blocking(move || hub.handle_text(&text))
        .await
        .unwrap_or_else(|e| {
            format!(r#"{{"type":"error","session":null,"message":"handler failed: {e}"}}"#)
        })
}
