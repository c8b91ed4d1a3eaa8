use std::collections::BTreeMap;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use mutmod_core::harness::fixtures::{self, EXAGGERATE, UNDERSTOOD};
use mutmod_core::harness::{run, HarnessEvent, Scenario, TraceEvent};
use mutmod_core::AutonomyMode;
use mutmod_server::{serve, ServerConfig, ServerHandle};

const WAIT: Duration = Duration::from_secs(5);

struct Client {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
    seq: u64,
    seen: Vec<Value>,
}

impl Client {
    async fn connect(h: &ServerHandle) -> Self {
        let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{}", h.local_addr()))
            .await
            .unwrap();
        Self {
            ws,
            seq: 0,
            seen: Vec::new(),
        }
    }

    async fn raw(&mut self, text: &str) {
        self.ws.send(Message::text(text.to_string())).await.unwrap();
    }

    async fn send(&mut self, kind: &str, body: Value) -> u64 {
        self.seq += 1;
        let frame = json!({"type": kind, "seq": self.seq, "body": body});
        self.raw(&frame.to_string()).await;
        self.seq
    }

    async fn next(&mut self) -> Option<Value> {
        loop {
            match tokio::time::timeout(WAIT, self.ws.next()).await.ok()?? {
                Ok(Message::Text(t)) => {
                    let v: Value = serde_json::from_str(t.as_str()).unwrap();
                    self.seen.push(v.clone());
                    return Some(v);
                }
                Ok(Message::Close(_)) | Err(_) => return None,
                Ok(_) => continue,
            }
        }
    }

    async fn until(&mut self, pred: impl Fn(&Value) -> bool) -> Value {
        loop {
            let v = self.next().await.expect("frame before timeout");
            if pred(&v) {
                return v;
            }
        }
    }

    async fn reply_to(&mut self, seq: u64) -> Value {
        self.until(|v| v["body"]["reply_to"] == seq).await
    }
}

fn is(kind: &'static str) -> impl Fn(&Value) -> bool {
    move |v| v["type"] == kind
}

fn config() -> ServerConfig {
    ServerConfig {
        speed: 100.0,
        autostart: false,
        ..ServerConfig::default()
    }
}

async fn start(s: &Scenario) -> ServerHandle {
    serve(s, 7, config()).await.unwrap()
}

#[tokio::test]
async fn hello_carries_version_and_mode() {
    let h = start(&fixtures::pointing_scenario(AutonomyMode::Wizard)).await;
    let mut c = Client::connect(&h).await;
    let hello = c.next().await.unwrap();
    assert_eq!(hello["type"], "hello");
    assert_eq!(hello["seq"], 1);
    assert_eq!(hello["body"], json!({"version": "1", "mode": "wizard"}));
    h.shutdown().await;
}

#[tokio::test]
async fn idle_clients_leave_the_trace_unchanged() {
    let s = fixtures::pointing_scenario(AutonomyMode::Autonomous);
    let mut h = start(&s).await;
    let mut a = Client::connect(&h).await;
    let mut b = Client::connect(&h).await;
    let mut quiet = Client::connect(&h).await;
    for c in [&mut a, &mut b] {
        let seq = c.send("subscribe", json!({"pattern": "all"})).await;
        assert_eq!(c.reply_to(seq).await["type"], "ack");
        c.until(is("snapshot")).await;
    }
    quiet.until(is("hello")).await;
    h.start().await;
    h.timeline_done().await;

    // both subscribers see the posterior and then the action
    for c in [&mut a, &mut b] {
        let post = c
            .until(|v| v["type"] == "posterior" && v["body"]["slot"] == UNDERSTOOD && v["body"]["t"] == 2000)
            .await;
        assert!((post["body"]["probs"][0].as_f64().unwrap() - 1.0 / 7.0).abs() < 1e-9);
        let act = c.until(is("action_executed")).await;
        assert_eq!(act["body"]["action"]["verb"], EXAGGERATE);
        let seqs: Vec<u64> = c.seen.iter().map(|v| v["seq"].as_u64().unwrap()).collect();
        assert!(seqs.windows(2).all(|w| w[1] == w[0] + 1), "{seqs:?}");
    }
    let trace = h.shutdown().await;
    assert_eq!(trace.digest(), run(&s, 7).unwrap().digest());

    // the unsubscribed client got nothing beyond its hello
    if let Some(v) = quiet.next().await {
        panic!("unexpected frame {v}");
    }
    assert_eq!(quiet.seen.len(), 1);
}

#[tokio::test]
async fn approve_in_mixed_mode_executes() {
    let s = fixtures::pointing_scenario(AutonomyMode::Mixed);
    let h = start(&s).await;
    let mut c = Client::connect(&h).await;
    let seq = c.send("subscribe", json!({"pattern": "all"})).await;
    c.reply_to(seq).await;
    h.start().await;
    let created = c.until(is("proposal_created")).await;
    let id = created["body"]["proposal"]["id"].as_str().unwrap().to_string();
    let seq = c
        .send("resolve_proposal", json!({"id": id, "verdict": "approve"}))
        .await;
    let reply = c.reply_to(seq).await;
    assert_eq!(reply["type"], "ack", "{reply}");
    let act = c.until(is("action_executed")).await;
    assert_eq!(act["body"]["human_reviewed"], true);
    assert!(act["seq"].as_u64() > reply["seq"].as_u64());

    let seq = c.send("resolve_proposal", json!({"id": id, "verdict": "reject"})).await;
    let again = c.reply_to(seq).await;
    assert_eq!(again["type"], "error");
    assert_eq!(again["body"]["code"], "AlreadyResolved");

    let trace = h.shutdown().await;
    assert_eq!(trace.engine_actions(), 0);
    assert!(trace.engine_events().any(|(_, e)| matches!(
        e,
        mutmod_core::EngineEvent::ActionExecuted {
            human_reviewed: true,
            ..
        }
    )));
}

#[tokio::test]
async fn wizard_decide_in_autonomous_mode_is_refused() {
    let h = start(&fixtures::pointing_scenario(AutonomyMode::Autonomous)).await;
    let mut c = Client::connect(&h).await;
    let seq = c.send("wizard_decide", json!({"verb": EXAGGERATE})).await;
    let r = c.reply_to(seq).await;
    assert_eq!(r["type"], "error");
    assert_eq!(r["body"]["code"], "WrongMode");

    let seq = c.send("set_mode", json!({"mode": "wizard"})).await;
    assert_eq!(c.reply_to(seq).await["body"]["mode"], "wizard");
    let seq = c
        .send(
            "wizard_decide",
            json!({"verb": EXAGGERATE, "params": {"amplitude": "high"}}),
        )
        .await;
    assert_eq!(c.reply_to(seq).await["type"], "ack");
    h.shutdown().await;
}

#[tokio::test]
async fn malformed_frames_get_errors_and_the_session_survives() {
    let h = start(&fixtures::pointing_scenario(AutonomyMode::Wizard)).await;
    let mut c = Client::connect(&h).await;
    c.until(is("hello")).await;
    c.raw("{not json").await;
    let e = c.next().await.unwrap();
    assert_eq!(e["type"], "error");
    assert_eq!(e["body"]["code"], "SchemaViolation");
    assert_eq!(e["body"]["reply_to"], Value::Null);
    c.ws.send(Message::binary(vec![1, 2, 3])).await.unwrap();
    assert_eq!(c.next().await.unwrap()["body"]["code"], "SchemaViolation");

    let seq = c.send("dance", json!({})).await;
    assert_eq!(c.reply_to(seq).await["body"]["code"], "UnknownType");
    let seq = c.send("set_mode", json!({"mode": 3})).await;
    assert_eq!(c.reply_to(seq).await["body"]["code"], "SchemaViolation");
    let seq = c.send("ping", json!({})).await;
    assert_eq!(c.reply_to(seq).await["type"], "ack");
    h.shutdown().await;
}

#[tokio::test]
async fn every_command_gets_exactly_one_reply() {
    let h = start(&fixtures::pointing_scenario(AutonomyMode::Mixed)).await;
    let mut c = Client::connect(&h).await;
    let commands = [
        ("ping", json!({})),
        ("subscribe", json!({"patterns": ["[child].*"]})),
        ("set_mode", json!({"mode": "wizard"})),
        ("wizard_decide", json!({"verb": "wave"})),
        ("resolve_proposal", json!({"id": "p9", "verdict": "approve"})),
        ("set_mode", json!({"mode": "autonomous"})),
        ("wizard_decide", json!({"verb": "wave"})),
        ("subscribe", json!({})),
        ("nonsense", json!({})),
        ("ping", json!({})),
    ];
    let mut sent = Vec::new();
    for (kind, body) in commands {
        sent.push(c.send(kind, body).await);
    }
    c.reply_to(*sent.last().unwrap()).await;
    let trace = h.shutdown().await;
    while c.next().await.is_some() {}
    let mut replies: BTreeMap<u64, usize> = BTreeMap::new();
    for v in &c.seen {
        if let Some(r) = v["body"]["reply_to"].as_u64() {
            *replies.entry(r).or_default() += 1;
        }
    }
    assert_eq!(replies.keys().copied().collect::<Vec<_>>(), sent);
    assert!(replies.values().all(|&n| n == 1));
    // mode changes reached the trace as inputs
    let inputs = trace
        .records
        .iter()
        .filter(|r| matches!(r.event, TraceEvent::Harness(HarnessEvent::Input { .. })))
        .count();
    assert_eq!(inputs, 5);
}

#[tokio::test]
async fn pattern_subscription_gets_a_filtered_snapshot() {
    let h = start(&fixtures::pointing_scenario(AutonomyMode::Autonomous)).await;
    let mut c = Client::connect(&h).await;
    let seq = c.send("subscribe", json!({"pattern": "[child].*"})).await;
    assert_eq!(c.reply_to(seq).await["type"], "ack");
    let snap = c.until(is("snapshot")).await;
    let slots: Vec<&str> = snap["body"]["variables"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["slot"].as_str().unwrap())
        .collect();
    assert!(!slots.is_empty());
    assert!(slots.iter().all(|s| s.starts_with("[child].")), "{slots:?}");
    assert_eq!(snap["body"]["mode"], "autonomous");
    h.shutdown().await;
}

#[tokio::test]
async fn operator_sessions_replay_offline() {
    let s = fixtures::pointing_scenario(AutonomyMode::Mixed);
    let mut h = start(&s).await;
    let mut c = Client::connect(&h).await;
    let seq = c.send("subscribe", json!({"pattern": "all"})).await;
    c.reply_to(seq).await;
    h.start().await;
    c.until(is("proposal_created")).await;
    let seq = c.send("wizard_decide", json!({"verb": "nod"})).await;
    c.reply_to(seq).await;
    let seq = c.send("set_mode", json!({"mode": "wizard"})).await;
    c.reply_to(seq).await;
    h.timeline_done().await;
    let live = h.shutdown().await;

    // the recorded inputs are a timeline that reproduces the run
    let mut offline = s.clone();
    offline.timeline = live
        .records
        .iter()
        .filter_map(|r| match &r.event {
            TraceEvent::Harness(HarnessEvent::Input { entry }) => Some(entry.clone()),
            _ => None,
        })
        .collect();
    assert_eq!(offline.timeline.len(), s.timeline.len() + 2);
    assert_eq!(run(&offline, 7).unwrap().digest(), live.digest());
}

#[tokio::test]
async fn bind_failure_is_reported() {
    let s = fixtures::pointing_scenario(AutonomyMode::Wizard);
    let h = start(&s).await;
    let taken = ServerConfig {
        addr: h.local_addr(),
        ..config()
    };
    assert!(matches!(
        serve(&s, 0, taken).await,
        Err(mutmod_server::ServeError::Bind { .. })
    ));
    h.shutdown().await;
}
