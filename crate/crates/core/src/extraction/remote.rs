use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use super::prompt::{build_prompt, PromptBundle};
use super::validate::{validate_against_schema, validate_value};
use super::{Backend, ExtractionOutcome, FailureKind};
use crate::error::{Error, Result};
use crate::schema::{ClinicFormatSpec, ClinicId, RawRecord, UnifiedPrescription};

pub const ENDPOINT_ENV: &str = "RXUNIFY_ENDPOINT";
pub const MODEL_ENV: &str = "RXUNIFY_MODEL";
pub const API_KEY_ENV: &str = "RXUNIFY_API_KEY";

/// Settings for the remote generative backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub timeout_secs: f64,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub max_concurrent_requests: usize,
    pub retry_limit: u32,
    /// Base delay before the first retry; doubled on each further attempt.
    pub retry_backoff_ms: u64,
    #[serde(skip)]
    pub api_key: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint_url: "http://127.0.0.1:8080/v1/generate".into(),
            model_name: "qwen2.5-32b-instruct".into(),
            timeout_secs: 120.0,
            max_new_tokens: 4092,
            temperature: 0.0,
            max_concurrent_requests: 8,
            retry_limit: 2,
            retry_backoff_ms: 250,
            api_key: None,
        }
    }
}

impl BackendConfig {
    /// Applies endpoint, model and API key from the environment.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(v) = std::env::var(ENDPOINT_ENV) {
            self.endpoint_url = v;
        }
        if let Ok(v) = std::env::var(MODEL_ENV) {
            self.model_name = v;
        }
        if let Ok(v) = std::env::var(API_KEY_ENV) {
            self.api_key = Some(v).filter(|k| !k.is_empty());
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.endpoint_url.trim().is_empty() {
            return Err(Error::Config("backend endpoint_url is empty".into()));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(Error::Config("backend timeout_secs must be positive".into()));
        }
        if self.max_concurrent_requests == 0 {
            return Err(Error::Config("backend max_concurrent_requests must be at least 1".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::Config("backend temperature must lie in [0, 2]".into()));
        }
        Ok(())
    }
}

/// Prefix of the error text for failures where no connection was made.
pub const UNREACHABLE: &str = "endpoint unreachable";

/// Client for the remote backend. A shared semaphore bounds the number of
/// requests in flight.
#[derive(Clone)]
pub struct RemoteExtractor {
    config: Arc<BackendConfig>,
    client: reqwest::Client,
    limiter: Arc<Semaphore>,
}

struct Job {
    clinic: ClinicId,
    row: usize,
    bundle: PromptBundle,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(String),
}

impl RemoteExtractor {
    pub fn new(config: BackendConfig) -> Result<Self> {
        config.validate()?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(RemoteExtractor {
            limiter: Arc::new(Semaphore::new(config.max_concurrent_requests)),
            config: Arc::new(config),
            client,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Extracts one record, including retries.
    pub async fn extract(&self, record: &RawRecord, spec: &ClinicFormatSpec, row: usize) -> Result<ExtractionOutcome> {
        let bundle = build_prompt(record, spec)?;
        Ok(self
            .run(Job {
                clinic: record.clinic.clone(),
                row,
                bundle,
            })
            .await)
    }

    /// Extracts a batch on a private runtime. Outcomes keep input order.
    pub fn extract_batch<'a, I>(&self, items: I) -> Result<Vec<ExtractionOutcome>>
    where
        I: IntoIterator<Item = (&'a RawRecord, &'a ClinicFormatSpec, usize)>,
    {
        let jobs = items
            .into_iter()
            .map(|(record, spec, row)| {
                Ok(Job {
                    clinic: record.clinic.clone(),
                    row,
                    bundle: build_prompt(record, spec)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .map_err(|e| Error::Config(format!("cannot start async runtime: {e}")))?;
        Ok(runtime.block_on(async {
            let handles: Vec<_> = jobs
                .into_iter()
                .map(|job| {
                    let this = self.clone();
                    tokio::spawn(async move { this.run(job).await })
                })
                .collect();
            let mut out = Vec::with_capacity(handles.len());
            for h in handles {
                out.push(h.await.expect("extraction task panicked"));
            }
            out
        }))
    }

    async fn run(&self, job: Job) -> ExtractionOutcome {
        let body = json!({
            "model": self.config.model_name,
            "prompt": job.bundle.render(),
            "schema": job.bundle.output_schema,
            "max_tokens": self.config.max_new_tokens,
            "temperature": self.config.temperature,
        })
        .to_string();
        let text = match self.send_with_retry(body).await {
            Ok(t) => t,
            Err(msg) => {
                log::warn!("{} row {}: {msg}", job.clinic, job.row);
                return ExtractionOutcome::failed(job.clinic, job.row, Backend::Remote, FailureKind::Transport, msg);
            }
        };
        let mut outcome = match interpret_response(&text) {
            Ok(record) => ExtractionOutcome::success(job.clinic, job.row, Backend::Remote, record),
            Err((kind, msg)) => ExtractionOutcome::failed(job.clinic, job.row, Backend::Remote, kind, msg),
        };
        outcome.raw_response = Some(text);
        outcome
    }

    async fn send_with_retry(&self, body: String) -> Result<String, String> {
        let mut attempt = 0u32;
        loop {
            let result = {
                let _permit = self.limiter.acquire().await.expect("semaphore is never closed");
                self.send_once(body.clone()).await
            };
            match result {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(msg) => return Err(msg),
                Attempt::Retry(msg) if attempt >= self.config.retry_limit => {
                    return Err(format!("{msg} (after {} attempts)", attempt + 1))
                }
                Attempt::Retry(msg) => {
                    let delay = self.config.retry_backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::debug!("retrying after {delay} ms: {msg}");
                    tokio::time::sleep(Duration::from_millis(delay)).await;
                    attempt += 1;
                }
            }
        }
    }

    async fn send_once(&self, body: String) -> Attempt {
        let mut req = self
            .client
            .post(&self.config.endpoint_url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) if e.is_connect() => return Attempt::Retry(format!("{UNREACHABLE}: {e}")),
            Err(e) if e.is_timeout() => return Attempt::Retry("request timed out".into()),
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status();
        if status.is_success() {
            return match resp.text().await {
                Ok(t) => Attempt::Done(t),
                Err(e) if e.is_timeout() => Attempt::Retry("request timed out".into()),
                Err(e) => Attempt::Retry(format!("reading response body: {e}")),
            };
        }
        if status.is_server_error() || status.as_u16() == 429 {
            Attempt::Retry(format!("HTTP {status}"))
        } else {
            Attempt::Fatal(format!("HTTP {status}"))
        }
    }
}

fn strip_code_fence(s: &str) -> &str {
    let t = s.trim();
    let Some(rest) = t.strip_prefix("```") else { return t };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

/// Interprets a response envelope `{"output": <document or JSON text>}`.
pub(crate) fn interpret_response(body: &str) -> Result<UnifiedPrescription, (FailureKind, String)> {
    let envelope: Value = serde_json::from_str(body)
        .map_err(|e| (FailureKind::SchemaInvalid, format!("response is not JSON: {e}")))?;
    let Some(output) = envelope.as_object().and_then(|o| o.get("output")) else {
        return Err((FailureKind::SchemaInvalid, "response has no `output` member".into()));
    };
    let checked = match output {
        Value::Null => return Err((FailureKind::EmptyOutput, "output is null".into())),
        Value::String(s) if s.trim().is_empty() => {
            return Err((FailureKind::EmptyOutput, "output is empty".into()))
        }
        Value::String(s) => validate_against_schema(strip_code_fence(s)),
        other => validate_value(other),
    };
    checked.map_err(|report| (FailureKind::SchemaInvalid, report.to_string()))
}

/// Blocking single-record call on a private runtime.
pub fn extract_remote(
    record: &RawRecord,
    spec: &ClinicFormatSpec,
    config: &BackendConfig,
) -> Result<ExtractionOutcome> {
    let extractor = RemoteExtractor::new(config.clone())?;
    Ok(extractor
        .extract_batch([(record, spec, 0)])?
        .pop()
        .expect("one outcome per record"))
}
