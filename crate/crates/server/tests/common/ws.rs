//! Drives a [`Bot`] over a real websocket connection.

use std::net::SocketAddr;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use guesswhich_server::protocol::{ClientEnvelope, ServerEnvelope};
use tokio_tungstenite::tungstenite::Message;

use super::Bot;

/// Play until the bot finishes. After `drop_after` received messages the
/// connection is dropped once and re-established after `pause`.
pub async fn play(addr: SocketAddr, mut bot: Bot, drop_after: Option<usize>, pause: Duration) -> (Bot, u32) {
    let url = format!("ws://{addr}/ws");
    let mut drop_after = drop_after;
    let mut reconnects = 0;
    loop {
        let (mut ws, _) = tokio_tungstenite::connect_async(&url).await.expect("connect");
        let hello = if bot.token.is_some() {
            bot.resync = true;
            bot.resume()
        } else {
            bot.join()
        };
        send(&mut ws, &hello).await;
        let mut received = 0usize;
        let mut dropped = false;
        while let Some(frame) = ws.next().await {
            let Ok(Message::Text(text)) = frame else { continue };
            let env: ServerEnvelope = serde_json::from_str(&text).expect("server sends valid envelopes");
            received += 1;
            for reply in bot.on_message(&env) {
                send(&mut ws, &reply).await;
            }
            if bot.finished() {
                let _ = ws.close(None).await;
                return (bot, reconnects);
            }
            if drop_after.is_some_and(|n| received >= n) {
                drop_after = None;
                dropped = true;
                break;
            }
        }
        drop(ws);
        if !dropped && bot.finished() {
            return (bot, reconnects);
        }
        reconnects += 1;
        tokio::time::sleep(pause).await;
    }
}

async fn send<S>(ws: &mut S, env: &ClientEnvelope)
where
    S: futures::Sink<Message> + Unpin,
    S::Error: std::fmt::Debug,
{
    let text = serde_json::to_string(env).unwrap();
    ws.send(Message::Text(text.into())).await.expect("send");
}
