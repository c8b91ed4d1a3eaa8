//! Session registry and fan-out. Lives on the engine loop, so every frame
//! gets its sequence number in engine order.

use serde_json::json;
use tokio::sync::{mpsc, oneshot};

use mutmod_core::harness::TraceRecord;

use crate::wire::{broadcast_frame, Pattern, WireMessage};

pub const DEFAULT_QUEUE_FRAMES: usize = 1024;

pub type SessionId = u64;

/// The receiving half handed to a connection's writer.
#[derive(Debug)]
pub struct Outbox {
    pub frames: mpsc::Receiver<String>,
    /// Fires with a final error frame when the session is cut off.
    pub kill: oneshot::Receiver<String>,
}

#[derive(Debug)]
struct Session {
    id: SessionId,
    patterns: Vec<Pattern>,
    out_seq: u64,
    last_in_seq: Option<u64>,
    tx: mpsc::Sender<String>,
    kill: Option<oneshot::Sender<String>>,
}

#[derive(Debug)]
pub struct Hub {
    sessions: Vec<Session>,
    next_id: SessionId,
    capacity: usize,
}

impl Hub {
    pub fn new(capacity: usize) -> Self {
        Self {
            sessions: Vec::new(),
            next_id: 1,
            capacity: capacity.max(1),
        }
    }

    pub fn connect(&mut self) -> (SessionId, Outbox) {
        let (tx, frames) = mpsc::channel(self.capacity);
        let (kill_tx, kill) = oneshot::channel();
        let id = self.next_id;
        self.next_id += 1;
        self.sessions.push(Session {
            id,
            patterns: Vec::new(),
            out_seq: 0,
            last_in_seq: None,
            tx,
            kill: Some(kill_tx),
        });
        (id, Outbox { frames, kill })
    }

    pub fn disconnect(&mut self, id: SessionId) {
        self.sessions.retain(|s| s.id != id);
    }

    pub fn is_connected(&self, id: SessionId) -> bool {
        self.sessions.iter().any(|s| s.id == id)
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn subscribe(&mut self, id: SessionId, patterns: Vec<Pattern>) {
        if let Some(s) = self.sessions.iter_mut().find(|s| s.id == id) {
            for p in patterns {
                if !s.patterns.contains(&p) {
                    s.patterns.push(p);
                }
            }
        }
    }

    pub fn patterns(&self, id: SessionId) -> &[Pattern] {
        self.sessions.iter().find(|s| s.id == id).map_or(&[], |s| &s.patterns)
    }

    /// Sessions with at least one pattern, in creation order.
    pub fn subscribers(&self) -> Vec<SessionId> {
        self.sessions
            .iter()
            .filter(|s| !s.patterns.is_empty())
            .map(|s| s.id)
            .collect()
    }

    /// Records a client seq; false if it does not increase.
    pub fn accept_seq(&mut self, id: SessionId, seq: u64) -> bool {
        match self.sessions.iter_mut().find(|s| s.id == id) {
            Some(s) if s.last_in_seq.is_none_or(|last| seq > last) => {
                s.last_in_seq = Some(seq);
                true
            }
            _ => false,
        }
    }

    pub fn send(&mut self, id: SessionId, msg: WireMessage) {
        if let Some(i) = self.sessions.iter().position(|s| s.id == id) {
            self.push(i, msg);
        }
    }

    /// Queues a frame; a full queue or a gone writer ends the session.
    fn push(&mut self, i: usize, mut msg: WireMessage) -> bool {
        let s = &mut self.sessions[i];
        s.out_seq += 1;
        msg.seq = s.out_seq;
        match s.tx.try_send(msg.to_text()) {
            Ok(()) => true,
            Err(mpsc::error::TrySendError::Full(_)) => {
                log::warn!("session {} overflowed its {} frame queue", s.id, self.capacity);
                let mut err = WireMessage::new(
                    "error",
                    json!({"code": "overflow", "message": "overflow", "reply_to": null}),
                );
                err.seq = s.out_seq;
                if let Some(kill) = s.kill.take() {
                    let _ = kill.send(err.to_text());
                }
                self.sessions.remove(i);
                false
            }
            Err(mpsc::error::TrySendError::Closed(_)) => {
                self.sessions.remove(i);
                false
            }
        }
    }

    /// Sends each record's frame to every session whose patterns match, in
    /// session-creation order. Slotless frames go to anyone subscribed.
    pub fn broadcast(&mut self, records: &[TraceRecord]) {
        for r in records {
            let Some((slot, msg)) = broadcast_frame(r) else {
                continue;
            };
            let mut i = 0;
            while i < self.sessions.len() {
                let s = &self.sessions[i];
                let wanted = match slot {
                    Some(slot) => s.patterns.iter().any(|p| p.matches(slot)),
                    None => !s.patterns.is_empty(),
                };
                if !wanted || self.push(i, msg.clone()) {
                    i += 1;
                }
            }
        }
    }
}
