//! Scriptable stand-in for a schema-constrained generation endpoint.
//!
//! The server answers `POST /v1/generate` with a `{"output": ...}` envelope.
//! Replies are taken from a FIFO script first, then from the responder.
//! It records request bodies and the peak number of requests in flight.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use serde_json::{json, Value};
use tokio::sync::oneshot;

pub const GENERATE_PATH: &str = "/v1/generate";

#[derive(Clone, Debug, PartialEq)]
pub enum Reply {
    /// 200 with `{"output": value}`.
    Output(Value),
    /// Arbitrary status and body.
    Raw { status: u16, body: String },
}

impl Reply {
    /// 200 with the document serialized as the output string.
    pub fn document(doc: Value) -> Reply {
        Reply::Output(Value::String(doc.to_string()))
    }

    pub fn status(status: u16) -> Reply {
        Reply::Raw {
            status,
            body: String::new(),
        }
    }
}

pub type Responder = Arc<dyn Fn(&Value) -> Reply + Send + Sync>;

struct Shared {
    script: Mutex<VecDeque<Reply>>,
    responder: Mutex<Responder>,
    delay: Mutex<Duration>,
    bodies: Mutex<Vec<Value>>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

struct InFlight<'a>(&'a Shared);

impl<'a> InFlight<'a> {
    fn enter(s: &'a Shared) -> Self {
        let now = s.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        s.max_in_flight.fetch_max(now, Ordering::SeqCst);
        InFlight(s)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

async fn generate(State(shared): State<Arc<Shared>>, body: String) -> Response {
    let _guard = InFlight::enter(&shared);
    let parsed: Value = serde_json::from_str(&body).unwrap_or(Value::String(body));
    shared.bodies.lock().unwrap().push(parsed.clone());
    let delay = *shared.delay.lock().unwrap();
    if !delay.is_zero() {
        tokio::time::sleep(delay).await;
    }
    let scripted = shared.script.lock().unwrap().pop_front();
    let reply = match scripted {
        Some(r) => r,
        None => {
            let responder = shared.responder.lock().unwrap().clone();
            responder(&parsed)
        }
    };
    match reply {
        Reply::Output(v) => (StatusCode::OK, json!({ "output": v }).to_string()).into_response(),
        Reply::Raw { status, body } => {
            let code = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            (code, body).into_response()
        }
    }
}

/// A running stub. Dropping it shuts the server down.
pub struct StubServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Starts on an ephemeral local port. Unscripted requests get an empty
    /// JSON document.
    pub fn start() -> StubServer {
        let shared = Arc::new(Shared {
            script: Mutex::new(VecDeque::new()),
            responder: Mutex::new(Arc::new(|_: &Value| Reply::document(json!({})))),
            delay: Mutex::new(Duration::ZERO),
            bodies: Mutex::new(Vec::new()),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        });
        let app = Router::new()
            .route(GENERATE_PATH, post(generate))
            .with_state(shared.clone());
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (shutdown_tx, shutdown_rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(4)
                .enable_all()
                .build()
                .expect("stub runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind stub");
                addr_tx.send(listener.local_addr().expect("local addr")).expect("report addr");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = shutdown_rx.await;
                    })
                    .await
                    .expect("stub server");
            });
        });
        let addr = addr_rx.recv().expect("stub failed to start");
        StubServer {
            addr,
            shared,
            shutdown: Some(shutdown_tx),
            thread: Some(thread),
        }
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}{}", self.addr, GENERATE_PATH)
    }

    /// Queues replies served before the responder is consulted.
    pub fn script(&self, replies: impl IntoIterator<Item = Reply>) {
        self.shared.script.lock().unwrap().extend(replies);
    }

    pub fn set_responder(&self, f: impl Fn(&Value) -> Reply + Send + Sync + 'static) {
        *self.shared.responder.lock().unwrap() = Arc::new(f);
    }

    /// Delay applied to every request before replying.
    pub fn set_delay(&self, delay: Duration) {
        *self.shared.delay.lock().unwrap() = delay;
    }

    pub fn request_count(&self) -> usize {
        self.shared.bodies.lock().unwrap().len()
    }

    pub fn bodies(&self) -> Vec<Value> {
        self.shared.bodies.lock().unwrap().clone()
    }

    pub fn max_in_flight(&self) -> usize {
        self.shared.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

/// URL of a local port with nothing listening on it.
pub fn unreachable_url() -> String {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").expect("bind");
    let addr = listener.local_addr().expect("local addr");
    drop(listener);
    format!("http://{addr}{GENERATE_PATH}")
}
