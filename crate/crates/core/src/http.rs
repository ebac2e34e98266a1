//! Blocking JSON-over-HTTP client with bounded retries and an in-flight cap,
//! shared by the remote embedder and the remote judge.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            initial_backoff_ms: 500,
            max_backoff_ms: 20_000,
            timeout_secs: 60,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub(crate) struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    cv: Condvar,
}

pub(crate) struct InFlightGuard<'a>(&'a InFlight);

impl InFlight {
    pub(crate) fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().expect("in-flight lock");
        while *active >= self.limit {
            active = self.cv.wait(active).expect("in-flight lock");
        }
        *active += 1;
        InFlightGuard(self)
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().expect("in-flight lock");
        *active -= 1;
        self.0.cv.notify_one();
    }
}

pub(crate) struct JsonClient {
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    retry: RetryPolicy,
    in_flight: InFlight,
}

impl JsonClient {
    pub(crate) fn new(api_key: Option<String>, retry: RetryPolicy, max_in_flight: usize) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(retry.timeout_secs))
            .build()
            .map_err(|e| Error::Http {
                status: None,
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            client,
            api_key,
            retry,
            in_flight: InFlight::new(max_in_flight),
        })
    }

    /// POSTs `body` and returns the parsed JSON response. Retries on
    /// transport errors, 429 and 5xx.
    pub(crate) fn post(&self, url: &str, body: &Value) -> Result<Value> {
        let _guard = self.in_flight.acquire();
        let attempts = self.retry.max_attempts.max(1);
        let mut last_status = None;
        let mut last_message = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.backoff(attempt - 1));
            }
            let mut req = self.client.post(url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let text = resp.text().map_err(|e| Error::MalformedResponse(e.to_string()))?;
                        return serde_json::from_str(&text).map_err(|e| Error::MalformedResponse(e.to_string()));
                    }
                    last_status = Some(status.as_u16());
                    last_message = resp.text().unwrap_or_default();
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    if !retryable {
                        return Err(Error::Http {
                            status: last_status,
                            attempts: attempt + 1,
                            message: last_message,
                        });
                    }
                    log::warn!("{url}: status {status}, attempt {}/{attempts}", attempt + 1);
                }
                Err(e) => {
                    last_status = e.status().map(|s| s.as_u16());
                    last_message = e.to_string();
                    log::warn!("{url}: {e}, attempt {}/{attempts}", attempt + 1);
                }
            }
        }
        Err(Error::Http {
            status: last_status,
            attempts,
            message: last_message,
        })
    }
}

pub(crate) fn read_credential(env_var: &str) -> Result<String> {
    std::env::var(env_var)
        .map_err(|_| Error::InvalidArgument(format!("credential environment variable `{env_var}` is not set")))
}
