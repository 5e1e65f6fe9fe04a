//! Minimal single-threaded HTTP/1.1 server for exercising the remote contracts.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::Value;

pub struct Request {
    pub path: String,
    pub body: Value,
}

type Handler = dyn Fn(&Request) -> (u16, Value) + Send + Sync;

pub struct MockServer {
    addr: SocketAddr,
    hits: Arc<AtomicUsize>,
    log: Arc<Mutex<Vec<Request>>>,
}

impl MockServer {
    pub fn start(handler: impl Fn(&Request) -> (u16, Value) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let log = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let (h, l) = (hits.clone(), log.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let Some(req) = read_request(&mut stream) else { continue };
                let (status, body) = handler(&req);
                l.lock().unwrap().push(req);
                h.fetch_add(1, Ordering::SeqCst);
                let payload = body.to_string();
                let reason = if status == 200 { "OK" } else { "Error" };
                let head = format!(
                    "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    payload.len()
                );
                let _ = stream.write_all(head.as_bytes());
                let _ = stream.write_all(payload.as_bytes());
            }
        });
        MockServer { addr, hits, log }
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn bodies(&self) -> Vec<Value> {
        self.log.lock().unwrap().iter().map(|r| r.body.clone()).collect()
    }

    pub fn paths(&self) -> Vec<String> {
        self.log.lock().unwrap().iter().map(|r| r.path.clone()).collect()
    }
}

fn read_request(stream: &mut std::net::TcpStream) -> Option<Request> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut len = 0;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Request { path, body: serde_json::from_slice(&body).unwrap_or(Value::Null) })
}

/// Deterministic unit-ish vector for `text`, used as a fake embedding.
pub fn fake_vector(text: &str, dim: usize) -> Vec<f64> {
    let mut h: u64 = 1469598103934665603;
    for b in text.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(1099511628211);
    }
    (0..dim).map(|i| (((h >> (i % 48)) & 0xff) as f64 / 255.0) - 0.5 + i as f64 * 1e-3).collect()
}

/// `/embed` handler returning `fake_vector` of width `dim` for every text.
pub fn embed_handler(dim: usize) -> impl Fn(&Request) -> (u16, Value) + Send + Sync + 'static {
    move |req: &Request| {
        let texts = req.body["texts"].as_array().cloned().unwrap_or_default();
        let vectors: Vec<Vec<f64>> = texts.iter().map(|t| fake_vector(t.as_str().unwrap_or(""), dim)).collect();
        (200, serde_json::json!({ "vectors": vectors }))
    }
}
