//! Service mode on the wall clock. Three message-passing tasks: the broker
//! loop (MQTT listener sessions plus the internal pipeline sessions), the
//! pipeline stage, and the HTTP front (push ingestion, /metrics, /query).

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use iout_core::broker::{
    encode_packet, try_decode, Broker, DecodeError, Message, Packet, QoS, TokenAuth, TopicFilter, TopicPath,
    TransportAction,
};
use iout_core::dataspace::Selector;
use iout_core::identity::{Access, Action, Grant, Principal, Role, SigningKey};
use iout_core::ingestion::push::{IngestError, IngestReceipt};
use iout_core::scenario::ScenarioConfig;
use iout_core::{DataCategory, Millis, Observation, Timestamp};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};

use crate::pipeline::{Pipeline, QueryFailure};

const PIPELINE: &str = "pipeline";
const TRANSFORM: &str = "transform";
pub const SKEW: Millis = Millis(30_000);

pub struct ServeOptions {
    pub config: ScenarioConfig,
    pub key: SigningKey,
    pub journal: Option<PathBuf>,
    pub http: SocketAddr,
    pub mqtt: SocketAddr,
    /// Completeness check interval, seconds.
    pub qc_tick_s: f64,
}

enum BrokerCmd {
    Open { client_id: String, conn: u64, writer: mpsc::UnboundedSender<Vec<u8>> },
    Packet { client_id: String, conn: u64, packet: Packet },
    Closed { client_id: String, conn: u64 },
    Publish { topic: TopicPath, payload: Vec<u8>, qos: QoS },
}

enum PipeCmd {
    Ingest {
        org: String,
        bearer: String,
        body: Vec<u8>,
        reply: oneshot::Sender<Result<IngestReceipt, IngestError>>,
    },
    Delivered(Message),
    Query {
        bearer: String,
        selector: Selector,
        reply: oneshot::Sender<Result<Vec<Observation>, QueryFailure>>,
    },
    Metrics(oneshot::Sender<String>),
    Tick,
}

fn internal(grants: Vec<Grant>) -> Access {
    Access::new(Principal::new("platform", "platform", &[Role::Operator]), grants)
}

pub async fn serve(opts: ServeOptions) -> anyhow::Result<()> {
    let now = Timestamp::now_wall();
    let pipeline = Pipeline::new(&opts.config, opts.key.clone(), SKEW, opts.journal.as_deref(), now)?;
    let mut broker = Broker::new("platform", opts.config.broker).with_token_auth(TokenAuth {
        key: opts.key.clone(),
        skew: SKEW,
    });
    broker.attach(PIPELINE, internal(vec![Grant::topic(Action::Publish, "#")]))?;
    broker.attach(TRANSFORM, internal(vec![Grant::topic(Action::Subscribe, "ingest/#")]))?;
    // QoS 0 on the in-process hop: no handshake to drive, nothing to lose
    broker.subscribe(TRANSFORM, &[(TopicFilter::new("ingest/#")?, QoS::AtMostOnce)])?;

    let mqtt = TcpListener::bind(opts.mqtt).await.with_context(|| format!("binding {}", opts.mqtt))?;
    let http = TcpListener::bind(opts.http).await.with_context(|| format!("binding {}", opts.http))?;
    eprintln!("mqtt listening on {}", mqtt.local_addr()?);
    eprintln!("http listening on {}", http.local_addr()?);

    let (btx, brx) = mpsc::unbounded_channel();
    let (ptx, prx) = mpsc::unbounded_channel();
    tokio::spawn(broker_loop(broker, brx, ptx.clone()));
    tokio::spawn(pipeline_loop(pipeline, prx, btx.clone()));
    tokio::spawn(accept_loop(mqtt, btx));
    let tick = Duration::from_secs_f64(opts.qc_tick_s.max(1.0));
    let tick_tx = ptx.clone();
    tokio::spawn(async move {
        let mut iv = tokio::time::interval(tick);
        iv.tick().await;
        loop {
            iv.tick().await;
            if tick_tx.send(PipeCmd::Tick).is_err() {
                break;
            }
        }
    });

    let app = Router::new()
        .route("/ingest/{org}", post(ingest))
        .route("/metrics", get(metrics))
        .route("/query", get(query))
        .with_state(ptx);
    axum::serve(http, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn broker_loop(
    mut broker: Broker,
    mut rx: mpsc::UnboundedReceiver<BrokerCmd>,
    pipe: mpsc::UnboundedSender<PipeCmd>,
) {
    let mut writers: BTreeMap<String, (u64, mpsc::UnboundedSender<Vec<u8>>)> = BTreeMap::new();
    let mut retransmit = tokio::time::interval(Duration::from_secs(1));
    loop {
        let actions = tokio::select! {
            cmd = rx.recv() => {
                let Some(cmd) = cmd else { break };
                let now = Timestamp::now_wall();
                match cmd {
                    BrokerCmd::Open { client_id, conn, writer } => {
                        if client_id == PIPELINE || client_id == TRANSFORM {
                            continue;
                        }
                        // a reconnect with the same client id takes the session over
                        if writers.insert(client_id.clone(), (conn, writer)).is_some() {
                            broker.detach(&client_id);
                        }
                        Vec::new()
                    }
                    BrokerCmd::Packet { client_id, conn, packet } => {
                        if !writers.get(&client_id).is_some_and(|(c, _)| *c == conn) {
                            continue;
                        }
                        match broker.handle_packet(&client_id, packet, now) {
                            Ok(a) => a,
                            Err(e) => {
                                eprintln!("mqtt: {client_id}: {e}");
                                broker.detach(&client_id);
                                writers.remove(&client_id);
                                Vec::new()
                            }
                        }
                    }
                    BrokerCmd::Closed { client_id, conn } => {
                        if writers.get(&client_id).is_some_and(|(c, _)| *c == conn) {
                            writers.remove(&client_id);
                            broker.detach(&client_id);
                        }
                        Vec::new()
                    }
                    BrokerCmd::Publish { topic, payload, qos } => match broker.publish(PIPELINE, &topic, &payload, qos, now) {
                        Ok(o) => o.actions,
                        Err(e) => {
                            eprintln!("publish {topic}: {e}");
                            Vec::new()
                        }
                    },
                }
            }
            _ = retransmit.tick() => broker.tick(Timestamp::now_wall()),
        };
        for a in actions {
            match a {
                TransportAction::Send { client_id, packet } if client_id == TRANSFORM => {
                    if let Packet::Publish(p) = packet {
                        let _ = pipe.send(PipeCmd::Delivered(Message {
                            topic: p.topic,
                            payload: p.payload,
                            qos: p.qos,
                        }));
                    }
                }
                TransportAction::Send { client_id, packet } => {
                    let Some((_, w)) = writers.get(&client_id) else { continue };
                    match encode_packet(&packet) {
                        Ok(bytes) => {
                            let _ = w.send(bytes);
                        }
                        Err(e) => eprintln!("mqtt: {client_id}: {e}"),
                    }
                }
                TransportAction::Close { client_id, reason } => {
                    // dropping the writer ends the connection task once queued bytes are out
                    writers.remove(&client_id);
                    eprintln!("mqtt: {client_id}: closed ({reason})");
                }
                TransportAction::SessionFailed(f) => {
                    eprintln!("mqtt: {}: session failed on {} (packet {})", f.client_id, f.topic, f.packet_id);
                }
            }
        }
    }
}

async fn pipeline_loop(
    mut p: Pipeline,
    mut rx: mpsc::UnboundedReceiver<PipeCmd>,
    broker: mpsc::UnboundedSender<BrokerCmd>,
) {
    let forward = |out: Vec<crate::pipeline::Outbound>| {
        for o in out {
            let _ = broker.send(BrokerCmd::Publish {
                topic: o.topic,
                payload: o.payload,
                qos: o.qos,
            });
        }
    };
    while let Some(cmd) = rx.recv().await {
        let now = Timestamp::now_wall();
        match cmd {
            PipeCmd::Ingest { org, bearer, body, reply } => {
                let r = p.push(&org, &bearer, &body, now).map(|(receipt, pubs)| {
                    for m in pubs {
                        let _ = broker.send(BrokerCmd::Publish {
                            topic: m.topic,
                            payload: m.payload,
                            qos: m.qos,
                        });
                    }
                    receipt
                });
                let _ = reply.send(r);
            }
            PipeCmd::Delivered(msg) => forward(p.transform(&msg, now)),
            PipeCmd::Query { bearer, selector, reply } => {
                let _ = reply.send(p.query(&bearer, &selector, now));
            }
            PipeCmd::Metrics(reply) => {
                let _ = reply.send(p.metrics(now));
            }
            PipeCmd::Tick => forward(p.tick(now)),
        }
    }
}

async fn accept_loop(listener: TcpListener, broker: mpsc::UnboundedSender<BrokerCmd>) {
    let mut serial = 0u64;
    loop {
        match listener.accept().await {
            Ok((stream, _)) => {
                serial += 1;
                tokio::spawn(connection(stream, serial, broker.clone()));
            }
            Err(e) => eprintln!("mqtt accept: {e}"),
        }
    }
}

/// One MQTT connection. The first packet must be CONNECT. The broker holds
/// the only sender of the outgoing queue, so dropping it closes the link.
async fn connection(stream: TcpStream, conn: u64, broker: mpsc::UnboundedSender<BrokerCmd>) {
    let (mut rd, mut wr) = stream.into_split();
    let (wtx, mut wrx) = mpsc::unbounded_channel::<Vec<u8>>();
    let mut wtx = Some(wtx);
    let mut client_id: Option<String> = None;
    let mut buf: Vec<u8> = Vec::new();
    let mut chunk = [0u8; 4096];
    'conn: loop {
        tokio::select! {
            n = rd.read(&mut chunk) => {
                let n = match n {
                    Ok(0) | Err(_) => break,
                    Ok(n) => n,
                };
                buf.extend_from_slice(&chunk[..n]);
                loop {
                    let (packet, used) = match try_decode(&buf) {
                        Ok(x) => x,
                        Err(DecodeError::Incomplete) => break,
                        Err(_) => break 'conn,
                    };
                    buf.drain(..used);
                    let id = match (&client_id, &packet, wtx.take()) {
                        (Some(id), _, _) => id.clone(),
                        (None, Packet::Connect(c), Some(writer)) => {
                            let id = c.client_id.clone();
                            if broker.send(BrokerCmd::Open { client_id: id.clone(), conn, writer }).is_err() {
                                break 'conn;
                            }
                            client_id = Some(id.clone());
                            id
                        }
                        _ => break 'conn,
                    };
                    if broker.send(BrokerCmd::Packet { client_id: id, conn, packet }).is_err() {
                        break 'conn;
                    }
                }
            }
            out = wrx.recv() => {
                let Some(bytes) = out else { break };
                if wr.write_all(&bytes).await.is_err() {
                    break;
                }
            }
        }
    }
    let _ = wr.shutdown().await;
    if let Some(id) = client_id {
        let _ = broker.send(BrokerCmd::Closed { client_id: id, conn });
    }
}

fn bearer(headers: &HeaderMap, params: &[(String, String)]) -> Option<String> {
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::to_owned)
        .or_else(|| params.iter().find(|(k, _)| k == "token").map(|(_, v)| v.clone()))
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, axum::Json(serde_json::json!({ "error": msg.into() }))).into_response()
}

async fn ingest(
    State(pipe): State<mpsc::UnboundedSender<PipeCmd>>,
    Path(org): Path<String>,
    headers: HeaderMap,
    body: axum::body::Bytes,
) -> Response {
    let Some(bearer) = bearer(&headers, &[]) else {
        return error(StatusCode::UNAUTHORIZED, "missing bearer token");
    };
    let (reply, rx) = oneshot::channel();
    let cmd = PipeCmd::Ingest {
        org,
        bearer,
        body: body.to_vec(),
        reply,
    };
    if pipe.send(cmd).is_err() {
        return error(StatusCode::SERVICE_UNAVAILABLE, "pipeline stopped");
    }
    match rx.await {
        Ok(Ok(receipt)) => axum::Json(receipt).into_response(),
        Ok(Err(IngestError::NotAuthorized(r))) => error(StatusCode::FORBIDDEN, r),
        Ok(Err(e)) => error(StatusCode::BAD_REQUEST, e.to_string()),
        Err(_) => error(StatusCode::SERVICE_UNAVAILABLE, "pipeline stopped"),
    }
}

async fn metrics(State(pipe): State<mpsc::UnboundedSender<PipeCmd>>) -> Response {
    let (reply, rx) = oneshot::channel();
    if pipe.send(PipeCmd::Metrics(reply)).is_err() {
        return error(StatusCode::SERVICE_UNAVAILABLE, "pipeline stopped");
    }
    match rx.await {
        Ok(text) => ([(header::CONTENT_TYPE, "text/plain; version=0.0.4")], text).into_response(),
        Err(_) => error(StatusCode::SERVICE_UNAVAILABLE, "pipeline stopped"),
    }
}

/// Builds a selector from query parameters: `from`, `to` (RFC 3339),
/// `org`, `platform`, `parameter`, repeated `category`, `include_quarantined`.
pub fn selector_from_params(params: &[(String, String)]) -> Result<Selector, String> {
    let mut sel = Selector::all();
    let mut cats = BTreeSet::new();
    for (k, v) in params {
        let time = || Timestamp::parse_rfc3339(v).ok_or_else(|| format!("{k}: not an RFC 3339 time: {v}"));
        match k.as_str() {
            "from" => sel.from = time()?,
            "to" => sel.to = time()?,
            "org" => sel.org_id = Some(v.clone()),
            "platform" => sel.platform_id = Some(v.clone()),
            "parameter" => sel.parameter = Some(v.clone()),
            "category" => {
                cats.insert(parse_category(v)?);
            }
            "include_quarantined" => sel.include_quarantined = matches!(v.as_str(), "" | "1" | "true"),
            "token" => {}
            other => return Err(format!("unknown parameter {other}")),
        }
    }
    if !cats.is_empty() {
        sel.categories = Some(cats);
    }
    Ok(sel)
}

pub fn parse_category(s: &str) -> Result<DataCategory, String> {
    DataCategory::ALL
        .into_iter()
        .find(|c| c.slug() == s)
        .ok_or_else(|| format!("unknown category {s}"))
}

async fn query(
    State(pipe): State<mpsc::UnboundedSender<PipeCmd>>,
    Query(params): Query<Vec<(String, String)>>,
    headers: HeaderMap,
) -> Response {
    let Some(bearer) = bearer(&headers, &params) else {
        return error(StatusCode::UNAUTHORIZED, "missing bearer token");
    };
    let selector = match selector_from_params(&params) {
        Ok(s) => s,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let (reply, rx) = oneshot::channel();
    if pipe.send(PipeCmd::Query { bearer, selector, reply }).is_err() {
        return error(StatusCode::SERVICE_UNAVAILABLE, "pipeline stopped");
    }
    match rx.await {
        Ok(Ok(rows)) => axum::Json(rows).into_response(),
        Ok(Err(QueryFailure::Unauthorized(r))) => error(StatusCode::FORBIDDEN, r),
        Ok(Err(QueryFailure::Invalid(r))) => error(StatusCode::BAD_REQUEST, r),
        Err(_) => error(StatusCode::SERVICE_UNAVAILABLE, "pipeline stopped"),
    }
}
