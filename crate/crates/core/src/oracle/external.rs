//! Line-delimited JSON client for external rollout harnesses.
//!
//! Each rollout is one request line; each reply is one response line
//! carrying the same `request_id`. Replies may arrive in any order. A
//! retried request reuses its payload under a fresh id, so a late answer to
//! an abandoned attempt is dropped.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, OracleError, OracleErrorKind, Result};
use crate::rollout::{DimensionScores, RolloutBackend, RolloutRequest, Speaker};

/// Scores outside this range are rejected as malformed.
pub const SCORE_RANGE: (f64, f64) = (0.0, 10.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transport {
    StdioSubprocess,
    Tcp,
}

fn default_dimensions() -> Vec<String> {
    ["goal", "relationship", "knowledge"].map(String::from).to_vec()
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    2
}

fn default_in_flight() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalOracleConfig {
    pub transport: Transport,
    /// `host:port` for TCP, a whitespace-separated command line for stdio.
    pub endpoint: String,
    #[serde(default = "default_timeout_ms")]
    pub request_timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_dimensions")]
    pub dimensions: Vec<String>,
}

impl ExternalOracleConfig {
    pub fn new(transport: Transport, endpoint: impl Into<String>) -> Self {
        ExternalOracleConfig {
            transport,
            endpoint: endpoint.into(),
            request_timeout_ms: default_timeout_ms(),
            max_retries: default_retries(),
            max_in_flight: default_in_flight(),
            dimensions: default_dimensions(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.request_timeout_ms == 0 {
            return Err(Error::Config("request_timeout_ms must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be positive".into()));
        }
        if self.endpoint.trim().is_empty() {
            return Err(Error::Config("external endpoint is empty".into()));
        }
        if self.dimensions.is_empty() {
            return Err(Error::Config("at least one score dimension is required".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.request_timeout_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTurn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub request_id: u64,
    pub episode_id: String,
    pub coalition_mask: u64,
    pub rollout_index: u32,
    pub rollout_seed: u64,
    pub history: Vec<WireTurn>,
    pub agent_goal: String,
    pub partner_goal: String,
}

impl WireRequest {
    pub fn from_rollout(request_id: u64, r: &RolloutRequest<'_>) -> Self {
        WireRequest {
            request_id,
            episode_id: r.episode_id.to_string(),
            coalition_mask: r.coalition_mask,
            rollout_index: r.rollout_index,
            rollout_seed: r.rollout_seed,
            history: r
                .history
                .iter()
                .map(|t| WireTurn {
                    speaker: t.speaker,
                    text: t.text.clone(),
                })
                .collect(),
            agent_goal: r.agent_goal.to_string(),
            partner_goal: r.partner_goal.to_string(),
        }
    }
}

/// A response line as produced by a harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireResponse {
    Scores {
        request_id: u64,
        dimension_scores: DimensionScores,
    },
    Error {
        request_id: u64,
        error: String,
    },
}

enum Reply {
    Line(Value),
    Malformed(String),
    Disconnected(String),
}

type Pending = Arc<Mutex<HashMap<u64, mpsc::Sender<Reply>>>>;

struct Connection {
    writer: Mutex<Box<dyn Write + Send>>,
    pending: Pending,
    alive: Arc<AtomicBool>,
    child: Option<Mutex<Child>>,
    tcp: Option<TcpStream>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(stream) = &self.tcp {
            let _ = stream.shutdown(Shutdown::Both);
        }
        if let Some(child) = &self.child {
            let mut child = child.lock().unwrap_or_else(|e| e.into_inner());
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn fail_all(pending: &Pending, make: impl Fn() -> Reply) {
    let mut map = pending.lock().unwrap_or_else(|e| e.into_inner());
    for (_, tx) in map.drain() {
        let _ = tx.send(make());
    }
}

fn spawn_reader(reader: Box<dyn Read + Send>, pending: Pending, alive: Arc<AtomicBool>) {
    thread::spawn(move || {
        let mut reader = BufReader::new(reader);
        let mut line = String::new();
        loop {
            line.clear();
            match reader.read_line(&mut line) {
                Ok(0) | Err(_) => break,
                Ok(_) => {}
            }
            if line.trim().is_empty() {
                continue;
            }
            let routed = serde_json::from_str::<Value>(&line)
                .ok()
                .and_then(|v| v.get("request_id").and_then(Value::as_u64).map(|id| (id, v)));
            match routed {
                Some((id, value)) => {
                    let tx = pending.lock().unwrap_or_else(|e| e.into_inner()).remove(&id);
                    // unknown ids belong to abandoned attempts
                    if let Some(tx) = tx {
                        let _ = tx.send(Reply::Line(value));
                    }
                }
                None => {
                    let snippet: String = line.trim().chars().take(120).collect();
                    fail_all(&pending, || Reply::Malformed(format!("unroutable response line: {snippet}")));
                }
            }
        }
        alive.store(false, Ordering::SeqCst);
        fail_all(&pending, || Reply::Disconnected("oracle closed the connection".into()));
    });
}

impl Connection {
    fn open(config: &ExternalOracleConfig) -> std::io::Result<Connection> {
        let pending: Pending = Arc::default();
        let alive = Arc::new(AtomicBool::new(true));
        match config.transport {
            Transport::Tcp => {
                let addr = config
                    .endpoint
                    .to_socket_addrs()?
                    .next()
                    .ok_or_else(|| std::io::Error::other(format!("cannot resolve {}", config.endpoint)))?;
                let stream = TcpStream::connect_timeout(&addr, config.timeout())?;
                stream.set_nodelay(true)?;
                spawn_reader(Box::new(stream.try_clone()?), Arc::clone(&pending), Arc::clone(&alive));
                Ok(Connection {
                    writer: Mutex::new(Box::new(stream.try_clone()?)),
                    pending,
                    alive,
                    child: None,
                    tcp: Some(stream),
                })
            }
            Transport::StdioSubprocess => {
                let mut parts = config.endpoint.split_whitespace();
                let program = parts
                    .next()
                    .ok_or_else(|| std::io::Error::other("empty oracle command"))?;
                let mut child = Command::new(program)
                    .args(parts)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                spawn_reader(Box::new(stdout), Arc::clone(&pending), Arc::clone(&alive));
                Ok(Connection {
                    writer: Mutex::new(Box::new(stdin)),
                    pending,
                    alive,
                    child: Some(Mutex::new(child)),
                    tcp: None,
                })
            }
        }
    }

    fn send(&self, request: &WireRequest) -> std::result::Result<mpsc::Receiver<Reply>, String> {
        let (tx, rx) = mpsc::channel();
        self.pending
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(request.request_id, tx);
        let mut line = serde_json::to_string(request).map_err(|e| e.to_string())?;
        line.push('\n');
        let mut writer = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let written = writer.write_all(line.as_bytes()).and_then(|_| writer.flush());
        if let Err(e) = written {
            self.alive.store(false, Ordering::SeqCst);
            self.forget(request.request_id);
            return Err(e.to_string());
        }
        Ok(rx)
    }

    fn forget(&self, request_id: u64) {
        self.pending
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .remove(&request_id);
    }
}

/// Counting semaphore bounding requests in flight.
struct Permits {
    free: Mutex<usize>,
    freed: Condvar,
}

impl Permits {
    fn acquire(&self, k: usize) {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free < k {
            free = self.freed.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= k;
    }

    fn release(&self, k: usize) {
        *self.free.lock().unwrap_or_else(|e| e.into_inner()) += k;
        self.freed.notify_all();
    }
}

/// Rollout backend that forwards every rollout to an external harness.
pub struct ExternalOracle {
    config: ExternalOracleConfig,
    connection: Mutex<Option<Arc<Connection>>>,
    next_id: AtomicU64,
    permits: Permits,
}

/// Builds the client; the connection is opened lazily and re-opened after
/// a failure.
pub fn external_value_oracle(config: ExternalOracleConfig) -> Result<ExternalOracle> {
    config.validate()?;
    let max = config.max_in_flight;
    Ok(ExternalOracle {
        config,
        connection: Mutex::new(None),
        next_id: AtomicU64::new(1),
        permits: Permits {
            free: Mutex::new(max),
            freed: Condvar::new(),
        },
    })
}

impl ExternalOracle {
    pub fn config(&self) -> &ExternalOracleConfig {
        &self.config
    }

    /// Opens the connection now instead of on first use.
    pub fn connect(&self) -> Result<()> {
        self.connection().map(|_| ()).map_err(|e| {
            Error::Oracle(OracleError::new(0, OracleErrorKind::ConnectionFailure, e))
        })
    }

    fn connection(&self) -> std::result::Result<Arc<Connection>, String> {
        let mut slot = self.connection.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(conn) = slot.as_ref() {
            if conn.alive.load(Ordering::SeqCst) {
                return Ok(Arc::clone(conn));
            }
        }
        let conn = Arc::new(
            Connection::open(&self.config).map_err(|e| format!("connecting to {}: {e}", self.config.endpoint))?,
        );
        *slot = Some(Arc::clone(&conn));
        Ok(conn)
    }

    fn parse_reply(&self, mask: u64, value: Value) -> std::result::Result<DimensionScores, OracleError> {
        let malformed = |msg: String| OracleError::new(mask, OracleErrorKind::MalformedResponse, msg);
        let response: WireResponse =
            serde_json::from_value(value).map_err(|e| malformed(format!("bad response shape: {e}")))?;
        match response {
            WireResponse::Error { error, .. } => Err(OracleError::new(mask, OracleErrorKind::Remote, error)),
            WireResponse::Scores {
                dimension_scores, ..
            } => {
                let mut kept = DimensionScores::default();
                for key in &self.config.dimensions {
                    let v = dimension_scores
                        .0
                        .get(key)
                        .copied()
                        .ok_or_else(|| malformed(format!("missing dimension {key:?}")))?;
                    kept.0.insert(key.clone(), v);
                }
                kept.check_range(SCORE_RANGE.0, SCORE_RANGE.1).map_err(malformed)?;
                Ok(kept)
            }
        }
    }

    /// One attempt at a chunk of requests; returns per-request outcomes.
    fn attempt(&self, chunk: &[&RolloutRequest<'_>]) -> Vec<std::result::Result<DimensionScores, OracleError>> {
        let conn = match self.connection() {
            Ok(c) => c,
            Err(e) => {
                return chunk
                    .iter()
                    .map(|r| Err(OracleError::new(r.coalition_mask, OracleErrorKind::ConnectionFailure, e.clone())))
                    .collect()
            }
        };
        self.permits.acquire(chunk.len());
        let timeout = self.config.timeout();
        let sent: Vec<_> = chunk
            .iter()
            .map(|r| {
                let id = self.next_id.fetch_add(1, Ordering::SeqCst);
                let wire = WireRequest::from_rollout(id, r);
                (id, Instant::now() + timeout, conn.send(&wire))
            })
            .collect();
        let out = chunk
            .iter()
            .zip(sent)
            .map(|(r, (id, deadline, rx))| {
                let mask = r.coalition_mask;
                let rx = rx.map_err(|e| OracleError::new(mask, OracleErrorKind::ConnectionFailure, e))?;
                let wait = deadline.saturating_duration_since(Instant::now());
                match rx.recv_timeout(wait) {
                    Ok(Reply::Line(v)) => self.parse_reply(mask, v),
                    Ok(Reply::Malformed(m)) => Err(OracleError::new(mask, OracleErrorKind::MalformedResponse, m)),
                    Ok(Reply::Disconnected(m)) => Err(OracleError::new(mask, OracleErrorKind::ConnectionFailure, m)),
                    Err(RecvTimeoutError::Timeout) => {
                        conn.forget(id);
                        Err(OracleError::new(
                            mask,
                            OracleErrorKind::Timeout,
                            format!("no response within {} ms", self.config.request_timeout_ms),
                        ))
                    }
                    Err(RecvTimeoutError::Disconnected) => Err(OracleError::new(
                        mask,
                        OracleErrorKind::ConnectionFailure,
                        "reader stopped",
                    )),
                }
            })
            .collect();
        self.permits.release(chunk.len());
        out
    }
}

impl RolloutBackend for ExternalOracle {
    fn rollout(&self, request: &RolloutRequest<'_>) -> std::result::Result<DimensionScores, OracleError> {
        self.rollouts(std::slice::from_ref(request))
            .pop()
            .expect("one result per request")
    }

    fn rollouts(&self, requests: &[RolloutRequest<'_>]) -> Vec<std::result::Result<DimensionScores, OracleError>> {
        let mut results: Vec<Option<std::result::Result<DimensionScores, OracleError>>> =
            vec![None; requests.len()];
        for attempt in 0..=self.config.max_retries {
            let todo: Vec<usize> = (0..requests.len())
                .filter(|&i| match &results[i] {
                    None => true,
                    Some(Err(e)) => attempt > 0 && e.is_retryable(),
                    Some(Ok(_)) => false,
                })
                .collect();
            if todo.is_empty() {
                break;
            }
            for chunk in todo.chunks(self.config.max_in_flight) {
                let batch: Vec<&RolloutRequest<'_>> = chunk.iter().map(|&i| &requests[i]).collect();
                for (&i, outcome) in chunk.iter().zip(self.attempt(&batch)) {
                    results[i] = Some(outcome);
                }
            }
        }
        results.into_iter().map(|r| r.expect("every request attempted")).collect()
    }
}
