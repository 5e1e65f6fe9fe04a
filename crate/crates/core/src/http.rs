//! Blocking JSON-over-HTTP client shared by the remote embedder, the remote
//! chat policies and the remote backbone.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{MascError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HttpOptions {
    /// Total attempts per request (at least 1).
    pub attempts: u32,
    pub timeout_secs: f64,
    /// Delay before retry `k` is `backoff_ms * k`.
    pub backoff_ms: u64,
    /// Maximum requests in flight through one client.
    pub max_in_flight: usize,
}

impl Default for HttpOptions {
    fn default() -> Self {
        HttpOptions { attempts: 3, timeout_secs: 30.0, backoff_ms: 200, max_in_flight: 4 }
    }
}

pub struct JsonClient {
    agent: ureq::Agent,
    opts: HttpOptions,
    gate: Semaphore,
}

impl JsonClient {
    pub fn new(opts: HttpOptions) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(opts.timeout_secs.max(0.001))))
            .http_status_as_error(true)
            .build()
            .into();
        let gate = Semaphore::new(opts.max_in_flight.max(1));
        JsonClient { agent, opts, gate }
    }

    pub fn options(&self) -> &HttpOptions {
        &self.opts
    }

    /// POSTs `body` as JSON and decodes the reply. Transport failures, non-2xx
    /// statuses and undecodable bodies are retried up to `attempts` times.
    pub fn post_json<B: Serialize, R: DeserializeOwned>(&self, url: &str, body: &B) -> Result<R> {
        let attempts = self.opts.attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                thread::sleep(Duration::from_millis(self.opts.backoff_ms * u64::from(attempt - 1)));
            }
            let _permit = self.gate.acquire();
            match self.agent.post(url).send_json(body) {
                Ok(mut resp) => match resp.body_mut().read_json::<R>() {
                    Ok(v) => return Ok(v),
                    Err(e) => last = format!("undecodable response from {url}: {e}"),
                },
                Err(e) => last = format!("{url}: {e}"),
            }
            log::debug!("attempt {attempt}/{attempts} failed: {last}");
        }
        Err(MascError::Transport { attempts, message: last })
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore { permits: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|p| p.into_inner());
        while *n == 0 {
            n = self.cv.wait(n).unwrap_or_else(|p| p.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.permits.lock().unwrap_or_else(|p| p.into_inner());
        *n += 1;
        self.0.cv.notify_one();
    }
}

/// Joins an endpoint base URL and a path without doubling slashes.
pub(crate) fn join_url(endpoint: &str, path: &str) -> String {
    format!("{}/{}", endpoint.trim_end_matches('/'), path.trim_start_matches('/'))
}
