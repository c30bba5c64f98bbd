//! Scripted TCP stand-in for an external rollout harness, for testing
//! clients and harness integrations.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use crate::oracle::sim::{sim_wire_scores, SimGameSpec};
use crate::rng;
use crate::rollout::{DimensionScores, UtilityWeights};

/// What the server does with one request.
#[derive(Debug, Clone, PartialEq)]
pub enum MockReply {
    /// Sends this line (a newline is appended).
    Line(String),
    /// Sends this line after a pause, without holding up other replies.
    Delayed(Duration, String),
    /// Never answers.
    Silence,
    /// Closes the connection.
    Close,
}

impl MockReply {
    pub fn scores(request_id: u64, scores: &DimensionScores) -> Self {
        MockReply::Line(json!({"request_id": request_id, "dimension_scores": scores}).to_string())
    }

    pub fn uniform(request_id: u64, value: f64) -> Self {
        MockReply::scores(
            request_id,
            &DimensionScores::new([("goal", value), ("relationship", value), ("knowledge", value)]),
        )
    }

    pub fn error(request_id: u64, message: &str) -> Self {
        MockReply::Line(json!({"request_id": request_id, "error": message}).to_string())
    }
}

type Handler = dyn Fn(&Value, usize) -> MockReply + Send + Sync;

#[derive(Debug, Clone, Copy, Default)]
pub struct MockOptions {
    /// Replies are held until this many requests have arrived on the
    /// connection, then flushed together. 0 or 1 answers immediately.
    pub batch: usize,
    /// Flush held replies in a seeded random order instead of arrival order.
    pub shuffle_seed: Option<u64>,
}

pub struct MockServer {
    addr: SocketAddr,
    seen: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
}

impl MockServer {
    /// Starts listening on an ephemeral local port. `handler` receives each
    /// request and its arrival index across all connections.
    pub fn start(
        options: MockOptions,
        handler: impl Fn(&Value, usize) -> MockReply + Send + Sync + 'static,
    ) -> std::io::Result<MockServer> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let seen = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let handler: Arc<Handler> = Arc::new(handler);
        let (seen2, stop2) = (Arc::clone(&seen), Arc::clone(&stop));
        thread::spawn(move || {
            for stream in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let (handler, seen) = (Arc::clone(&handler), Arc::clone(&seen2));
                thread::spawn(move || serve(stream, options, &*handler, &seen));
            }
        });
        Ok(MockServer { addr, seen, stop })
    }

    /// A server that answers every request with the simulated game's
    /// scores, as a conforming harness replaying that game would.
    pub fn sim_replay(spec: SimGameSpec, weights: UtilityWeights) -> std::io::Result<MockServer> {
        MockServer::start(MockOptions::default(), move |req, _| {
            let id = req["request_id"].as_u64().unwrap_or(0);
            let mask = req["coalition_mask"].as_u64().unwrap_or(0);
            let seed = req["rollout_seed"].as_u64().unwrap_or(0);
            match sim_wire_scores(&spec, &weights, mask, seed) {
                Ok(scores) => MockReply::scores(id, &scores),
                Err(e) => MockReply::error(id, &e.to_string()),
            }
        })
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    /// Requests received so far.
    pub fn requests_seen(&self) -> usize {
        self.seen.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop so it notices the flag
        let _ = TcpStream::connect(self.addr);
    }
}

fn serve(stream: TcpStream, options: MockOptions, handler: &Handler, seen: &AtomicUsize) {
    let _ = stream.set_nodelay(true);
    let Ok(read_half) = stream.try_clone() else { return };
    let mut writer = stream;
    let mut held: Vec<MockReply> = Vec::new();
    let mut shuffler = options.shuffle_seed.map(rng::seeded);
    for line in BufReader::new(read_half).lines() {
        let Ok(line) = line else { return };
        if line.trim().is_empty() {
            continue;
        }
        let index = seen.fetch_add(1, Ordering::SeqCst);
        let request: Value = serde_json::from_str(&line).unwrap_or(Value::Null);
        held.push(handler(&request, index));
        if held.len() < options.batch.max(1) {
            continue;
        }
        if let Some(r) = shuffler.as_mut() {
            rng::shuffle(r, &mut held);
        }
        for reply in held.drain(..) {
            match reply {
                MockReply::Line(text) => {
                    if writeln!(writer, "{text}").and_then(|_| writer.flush()).is_err() {
                        return;
                    }
                }
                MockReply::Delayed(pause, text) => {
                    let Ok(mut w) = writer.try_clone() else { return };
                    thread::spawn(move || {
                        thread::sleep(pause);
                        let _ = writeln!(w, "{text}").and_then(|_| w.flush());
                    });
                }
                MockReply::Silence => {}
                MockReply::Close => {
                    let _ = writer.shutdown(std::net::Shutdown::Both);
                    return;
                }
            }
        }
    }
}
