//! Local stand-in for a generator endpoint, speaking the same wire protocol.

use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::Deserialize;
use tiny_http::{Header, Method, Response, Server};

#[derive(Debug, Clone, PartialEq)]
pub enum StubReply {
    /// `200 {"text": ...}`.
    Text(String),
    /// Arbitrary status and body.
    Raw { status: u16, body: String },
    /// Waits before answering with the text.
    Delayed(Duration, String),
}

#[derive(Deserialize)]
struct Request {
    prompt: String,
}

pub struct StubServer {
    server: Arc<Server>,
    addr: SocketAddr,
    requests: Arc<AtomicUsize>,
    worker: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Serves on `127.0.0.1` at an ephemeral port.
    pub fn start(respond: impl Fn(&str) -> StubReply + Send + 'static) -> io::Result<StubServer> {
        Self::bind("127.0.0.1:0", respond)
    }

    pub fn bind(addr: &str, respond: impl Fn(&str) -> StubReply + Send + 'static) -> io::Result<StubServer> {
        let server = Arc::new(Server::http(addr).map_err(|e| io::Error::other(e.to_string()))?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("stub server is not bound to an IP address"))?;
        let requests = Arc::new(AtomicUsize::new(0));
        let worker = {
            let server = Arc::clone(&server);
            let requests = Arc::clone(&requests);
            thread::spawn(move || {
                for mut request in server.incoming_requests() {
                    requests.fetch_add(1, Ordering::SeqCst);
                    let mut body = String::new();
                    let reply = if *request.method() != Method::Post {
                        StubReply::Raw {
                            status: 405,
                            body: "POST only".into(),
                        }
                    } else if request.as_reader().read_to_string(&mut body).is_err() {
                        StubReply::Raw {
                            status: 400,
                            body: "unreadable body".into(),
                        }
                    } else {
                        match serde_json::from_str::<Request>(&body) {
                            Ok(r) => respond(&r.prompt),
                            Err(e) => StubReply::Raw {
                                status: 400,
                                body: e.to_string(),
                            },
                        }
                    };
                    let (status, body) = match reply {
                        StubReply::Text(t) => (200, serde_json::json!({ "text": t }).to_string()),
                        StubReply::Raw { status, body } => (status, body),
                        StubReply::Delayed(wait, t) => {
                            thread::sleep(wait);
                            (200, serde_json::json!({ "text": t }).to_string())
                        }
                    };
                    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
                    let _ = request.respond(Response::from_string(body).with_status_code(status).with_header(header));
                }
            })
        };
        Ok(StubServer {
            server,
            addr,
            requests,
            worker: Some(worker),
        })
    }

    /// Always answers `text`.
    pub fn fixed(text: impl Into<String>) -> io::Result<StubServer> {
        let text = text.into();
        Self::start(move |_| StubReply::Text(text.clone()))
    }

    /// Answers with the value of the question that appears last in the
    /// prompt, or `fallback` when none does.
    pub fn answers(map: BTreeMap<String, String>, fallback: impl Into<String>) -> io::Result<StubServer> {
        let fallback = fallback.into();
        Self::start(move |prompt| StubReply::Text(lookup_answer(&map, prompt).unwrap_or(&fallback).to_string()))
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}/generate", self.addr)
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Blocks until the server is shut down from elsewhere.
    pub fn join(mut self) {
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

pub fn lookup_answer<'a>(map: &'a BTreeMap<String, String>, prompt: &str) -> Option<&'a str> {
    map.iter()
        .filter_map(|(q, a)| prompt.rfind(q.as_str()).map(|pos| (pos, a)))
        .max_by_key(|(pos, _)| *pos)
        .map(|(_, a)| a.as_str())
}
