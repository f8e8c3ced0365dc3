//! Role-play answers from an OpenAI-compatible chat-completion endpoint.
//!
//! Each (user, item) pair is sampled `T` times. Replies are parsed for the
//! first number, clamped to the item scale, and appended to the answer file
//! as soon as a pair completes, so an interrupted run resumes where it left
//! off. Pairs that never yield a parseable reply land in a failure manifest.

use std::collections::{HashSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Mutex};
use std::time::Duration;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::prompt::render_prompt;
use crate::data::{AnswerRecord, Questionnaire, Split, UserRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    /// Full chat-completions URL, e.g. `https://api.openai.com/v1/chat/completions`.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    /// Extra requests after an unparseable reply before the pair is given up.
    pub parse_retries: usize,
    /// Extra attempts after a transport error or rate limit.
    pub transport_retries: usize,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    pub concurrency: usize,
    pub timeout_secs: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-2024-08-06".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            temperature: 0.7,
            max_tokens: Some(8),
            parse_retries: 3,
            transport_retries: 5,
            backoff_base_ms: 500,
            backoff_max_ms: 30_000,
            concurrency: 4,
            timeout_secs: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolePlayRequest {
    pub user_id: String,
    pub item_id: String,
    pub prompt_text: String,
    pub n_samples: usize,
    pub temperature: f64,
    pub scale_min: i32,
    pub scale_max: i32,
}

/// Render one request per (user, item).
///
/// Label conditioning is only allowed for training users; asking for it on
/// any other split is refused.
pub fn build_requests(
    users: &[UserRecord],
    questionnaire: &Questionnaire,
    template: &str,
    include_label: bool,
    n_samples: usize,
    temperature: f64,
    post_budget: usize,
) -> Result<Vec<RolePlayRequest>> {
    if n_samples == 0 {
        return Err(Error::Invalid("need at least one sample per pair".into()));
    }
    if temperature < 0.0 {
        return Err(Error::Invalid("temperature must be non-negative".into()));
    }
    if n_samples > 1 && temperature == 0.0 {
        warn!("temperature 0 with T={n_samples}: samples will likely be identical");
    }
    if include_label {
        if let Some(u) = users.iter().find(|u| u.split != Some(Split::Train)) {
            return Err(Error::Invalid(format!(
                "refusing label-conditioned prompts for user `{}` outside the train split",
                u.user_id
            )));
        }
    }
    let mut out = Vec::with_capacity(users.len() * questionnaire.len());
    for user in users {
        for item in &questionnaire.items {
            out.push(RolePlayRequest {
                user_id: user.user_id.clone(),
                item_id: item.item_id.clone(),
                prompt_text: render_prompt(template, user, item, include_label, post_budget)?,
                n_samples,
                temperature,
                scale_min: item.scale_min,
                scale_max: item.scale_max,
            });
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub enum TransportError {
    RateLimited { retry_after: Option<Duration> },
    Transient(String),
    Fatal(String),
}

/// Something that turns a prompt into a reply.
pub trait ChatBackend: Sync {
    fn complete(&self, prompt: &str, temperature: f64) -> std::result::Result<String, TransportError>;
}

pub struct HttpChatBackend {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    max_tokens: Option<u32>,
}

impl HttpChatBackend {
    pub fn new(cfg: &LlmConfig) -> Result<HttpChatBackend> {
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            warn!("{} is not set; sending requests without an Authorization header", cfg.api_key_env);
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpChatBackend {
            agent,
            endpoint: cfg.endpoint.clone(),
            model: cfg.model.clone(),
            api_key,
            max_tokens: cfg.max_tokens,
        })
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    #[serde(default)]
    content: Option<String>,
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, prompt: &str, temperature: f64) -> std::result::Result<String, TransportError> {
        let body = ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature,
            max_tokens: self.max_tokens,
        };
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 {
            let retry_after = resp
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<f64>().ok())
                .map(Duration::from_secs_f64);
            return Err(TransportError::RateLimited { retry_after });
        }
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        match status {
            200..=299 => {}
            408 | 500..=599 => return Err(TransportError::Transient(format!("HTTP {status}: {text}"))),
            _ => return Err(TransportError::Fatal(format!("HTTP {status}: {text}"))),
        }
        // A body we cannot read as a completion counts as an unparseable reply.
        Ok(serde_json::from_str::<ChatResponse>(&text)
            .ok()
            .and_then(|r| r.choices.into_iter().next())
            .and_then(|c| c.message.content)
            .unwrap_or_default())
    }
}

/// First integer or decimal number in a reply.
pub fn parse_score(reply: &str) -> Option<f64> {
    let bytes = reply.as_bytes();
    let start = bytes.iter().position(|b| b.is_ascii_digit())?;
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end + 1 < bytes.len() && bytes[end] == b'.' && bytes[end + 1].is_ascii_digit() {
        end += 1;
        while end < bytes.len() && bytes[end].is_ascii_digit() {
            end += 1;
        }
    }
    let begin = if start > 0 && bytes[start - 1] == b'-' { start - 1 } else { start };
    reply[begin..end].parse().ok()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub user_id: String,
    pub item_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AskSummary {
    pub completed: usize,
    pub skipped: usize,
    pub failed: usize,
    pub clamped_samples: usize,
    pub parse_retries: usize,
    pub transport_retries: usize,
}

/// Where answers and failures are appended.
#[derive(Clone, Debug)]
pub struct AskOutput {
    pub answers: PathBuf,
    pub failures: PathBuf,
    /// Retry pairs listed in an existing failure manifest instead of skipping them.
    pub retry_failed: bool,
}

enum PairOutcome {
    Done(AnswerRecord, usize, usize, usize),
    Failed(FailureRecord, usize, usize),
}

fn backoff(cfg: &LlmConfig, attempt: u32) -> Duration {
    let ms = cfg.backoff_base_ms.saturating_mul(1u64 << attempt.min(20));
    Duration::from_millis(ms.min(cfg.backoff_max_ms))
}

fn call_with_retries(
    backend: &dyn ChatBackend,
    cfg: &LlmConfig,
    req: &RolePlayRequest,
    retries: &mut usize,
) -> std::result::Result<String, String> {
    let mut attempt = 0u32;
    loop {
        match backend.complete(&req.prompt_text, req.temperature) {
            Ok(reply) => return Ok(reply),
            Err(TransportError::Fatal(msg)) => return Err(msg),
            Err(err) => {
                if attempt as usize >= cfg.transport_retries {
                    return Err(format!("giving up after {} attempts: {err:?}", attempt + 1));
                }
                let wait = match err {
                    TransportError::RateLimited { retry_after: Some(d) } => d,
                    _ => backoff(cfg, attempt),
                };
                warn!("({}, {}): {err:?}; retrying in {wait:?}", req.user_id, req.item_id);
                std::thread::sleep(wait);
                attempt += 1;
                *retries += 1;
            }
        }
    }
}

fn run_pair(backend: &dyn ChatBackend, cfg: &LlmConfig, req: &RolePlayRequest) -> PairOutcome {
    let (lo, hi) = (req.scale_min as f64, req.scale_max as f64);
    let mut samples = Vec::with_capacity(req.n_samples);
    let (mut clamped, mut parse_retries, mut transport_retries) = (0, 0, 0);
    let fail = |reason: String, p, t| {
        PairOutcome::Failed(
            FailureRecord {
                user_id: req.user_id.clone(),
                item_id: req.item_id.clone(),
                reason,
            },
            p,
            t,
        )
    };
    while samples.len() < req.n_samples {
        let mut bad_replies = 0usize;
        let score = loop {
            let reply = match call_with_retries(backend, cfg, req, &mut transport_retries) {
                Ok(r) => r,
                Err(msg) => return fail(format!("transport: {msg}"), parse_retries, transport_retries),
            };
            if let Some(x) = parse_score(&reply) {
                break x;
            }
            bad_replies += 1;
            if bad_replies > cfg.parse_retries {
                return fail(
                    format!("no numeric score after {bad_replies} replies; last: {reply:?}"),
                    parse_retries,
                    transport_retries,
                );
            }
            parse_retries += 1;
        };
        let kept = score.clamp(lo, hi);
        if kept != score {
            warn!("({}, {}): score {score} clamped to {kept}", req.user_id, req.item_id);
            clamped += 1;
        }
        samples.push(kept);
    }
    match AnswerRecord::new(req.user_id.clone(), req.item_id.clone(), samples) {
        Ok(rec) => PairOutcome::Done(rec, clamped, parse_retries, transport_retries),
        Err(e) => fail(e.to_string(), parse_retries, transport_retries),
    }
}

fn read_pairs<T: for<'de> Deserialize<'de>>(path: &Path, key: impl Fn(&T) -> (String, String)) -> Result<Vec<(String, String)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(&line) {
            Ok(row) => out.push(key(&row)),
            // a torn final line from an interrupted write is re-asked
            Err(e) => warn!("{}:{}: ignoring unreadable line ({e})", path.display(), i + 1),
        }
    }
    Ok(out)
}

/// Drop a partial final line left by an interrupted write.
fn repair_tail(path: &Path) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    warn!("{}: discarding {} bytes of a partial final line", path.display(), bytes.len() - keep);
    let file = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
    file.set_len(keep as u64).map_err(|e| Error::io(path, e))
}

fn append_line<T: Serialize>(file: &mut File, path: &Path, row: &T) -> Result<()> {
    let mut line = serde_json::to_string(row)?;
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))
}

/// Ask every request, appending finished pairs to `out.answers` and given-up
/// pairs to `out.failures`. Pairs already present in either file are skipped
/// (failures are retried when `out.retry_failed` is set).
pub fn ask_llm(
    backend: &dyn ChatBackend,
    cfg: &LlmConfig,
    requests: &[RolePlayRequest],
    out: &AskOutput,
) -> Result<AskSummary> {
    #[derive(Deserialize)]
    struct Pair {
        user_id: String,
        item_id: String,
    }
    let key = |p: &Pair| (p.user_id.clone(), p.item_id.clone());
    repair_tail(&out.answers)?;
    repair_tail(&out.failures)?;
    let mut done: HashSet<(String, String)> = read_pairs(&out.answers, key)?.into_iter().collect();
    if out.retry_failed {
        if out.failures.exists() {
            std::fs::remove_file(&out.failures).map_err(|e| Error::io(&out.failures, e))?;
        }
    } else {
        done.extend(read_pairs(&out.failures, key)?);
    }

    let pending: VecDeque<&RolePlayRequest> = requests
        .iter()
        .filter(|r| !done.contains(&(r.user_id.clone(), r.item_id.clone())))
        .collect();
    let mut summary = AskSummary {
        skipped: requests.len() - pending.len(),
        ..Default::default()
    };
    if pending.is_empty() {
        return Ok(summary);
    }
    info!("asking {} pairs ({} already done)", pending.len(), summary.skipped);

    let open = |p: &Path| {
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .map_err(|e| Error::io(p, e))
    };
    let mut answers_file = open(&out.answers)?;
    let mut failures_file = open(&out.failures)?;

    let workers = cfg.concurrency.max(1).min(pending.len());
    let queue = Mutex::new(pending);
    let (tx, rx) = mpsc::channel::<PairOutcome>();
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let queue = &queue;
            scope.spawn(move || loop {
                let next = queue.lock().expect("queue lock").pop_front();
                let Some(req) = next else { break };
                if tx.send(run_pair(backend, cfg, req)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for outcome in rx {
            match outcome {
                PairOutcome::Done(rec, clamped, p, t) => {
                    append_line(&mut answers_file, &out.answers, &rec)?;
                    summary.completed += 1;
                    summary.clamped_samples += clamped;
                    summary.parse_retries += p;
                    summary.transport_retries += t;
                }
                PairOutcome::Failed(f, p, t) => {
                    warn!("({}, {}) failed: {}", f.user_id, f.item_id, f.reason);
                    append_line(&mut failures_file, &out.failures, &f)?;
                    summary.failed += 1;
                    summary.parse_retries += p;
                    summary.transport_retries += t;
                }
            }
        }
        Ok(())
    })?;
    Ok(summary)
}
