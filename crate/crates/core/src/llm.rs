//! Chat-completion access: conversations, backends, transcripts and cost accounting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams { temperature: 0.7, max_tokens: 8192 }
    }
}

/// Why a call was made; drives the cost breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    AnalysisClassify,
    AnalysisAnalytical,
    AnalysisTransform,
    AnalysisSplitting,
    AnalysisStability,
    Genesis,
    JudgeSelect,
    JudgePatch,
    Debug,
    Translate,
    Report,
}

impl Purpose {
    /// Coarse bucket used in cost tables.
    pub fn category(self) -> &'static str {
        match self {
            Purpose::AnalysisClassify
            | Purpose::AnalysisAnalytical
            | Purpose::AnalysisTransform
            | Purpose::AnalysisSplitting
            | Purpose::AnalysisStability => "analysis",
            Purpose::Genesis => "genesis",
            Purpose::JudgeSelect | Purpose::JudgePatch => "judge",
            Purpose::Debug => "debug",
            Purpose::Translate => "translate",
            Purpose::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub model_id: String,
    pub params: GenParams,
    pub messages: Vec<Message>,
}

impl Conversation {
    pub fn new(model_id: impl Into<String>, params: GenParams) -> Self {
        Conversation { model_id: model_id.into(), params, messages: Vec::new() }
    }

    pub fn push(&mut self, role: Role, content: impl Into<String>) {
        self.messages.push(Message { role, content: content.into() });
    }

    pub fn system(mut self, content: impl Into<String>) -> Self {
        self.push(Role::System, content);
        self
    }

    pub fn user(mut self, content: impl Into<String>) -> Self {
        self.push(Role::User, content);
        self
    }

    /// A conversation is sendable when it opens with a system or user message, at most one
    /// system message leads, and it ends on a user turn.
    pub fn validate(&self) -> Result<(), LlmError> {
        let first = self.messages.first().ok_or(LlmError::EmptyConversation)?;
        if first.role == Role::Assistant {
            return Err(LlmError::InvalidConversation("first message is from the assistant".into()));
        }
        if self.messages.iter().skip(1).any(|m| m.role == Role::System) {
            return Err(LlmError::InvalidConversation("system message after the first position".into()));
        }
        for w in self.messages.windows(2) {
            if w[0].role == Role::Assistant && w[1].role == Role::Assistant {
                return Err(LlmError::InvalidConversation("two consecutive assistant turns".into()));
            }
        }
        if self.messages.last().map(|m| m.role) != Some(Role::User) {
            return Err(LlmError::InvalidConversation("last message must be a user turn".into()));
        }
        Ok(())
    }

    pub fn request(&self) -> Request {
        Request {
            model: self.model_id.clone(),
            messages: self.messages.clone(),
            temperature: self.params.temperature,
            max_tokens: self.params.max_tokens,
        }
    }
}

/// Wire body of a chat-completions call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Request {
    /// Hash of model, messages and parameters.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("request serializes"))
    }

    pub fn last_user(&self) -> &str {
        self.messages.iter().rev().find(|m| m.role == Role::User).map_or("", |m| m.content.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub model_id: String,
    pub purpose: Purpose,
}

#[derive(Debug, Error, PartialEq)]
pub enum LlmError {
    #[error("conversation has no messages")]
    EmptyConversation,
    #[error("invalid conversation: {0}")]
    InvalidConversation(String),
    #[error("credential variable {0} is not set")]
    MissingCredential(String),
    #[error("request failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("no recorded response for call {seq} ({purpose:?})")]
    ReplayMiss { seq: u64, purpose: Purpose },
    #[error("call {seq} ({purpose:?}) diverged from the recording: digest {found} != recorded {expected}")]
    DigestMismatch { seq: u64, purpose: Purpose, expected: String, found: String },
    #[error("transcript store: {0}")]
    Store(String),
    #[error("scripted backend: {0}")]
    Script(String),
    #[error("no price for model '{0}'")]
    Unpriced(String),
}

/// Position of a call within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallInfo {
    pub seq: u64,
    pub purpose: Purpose,
}

pub trait Backend: Send {
    fn complete(&mut self, call: CallInfo, request: &Request) -> Result<Completion, LlmError>;
}

/// Backend driven by a closure; used for desk runs and tests.
pub struct ScriptedBackend<F> {
    respond: F,
}

impl<F> ScriptedBackend<F>
where
    F: FnMut(CallInfo, &Request) -> Result<Completion, LlmError> + Send,
{
    pub fn new(respond: F) -> Self {
        ScriptedBackend { respond }
    }
}

impl<F> Backend for ScriptedBackend<F>
where
    F: FnMut(CallInfo, &Request) -> Result<Completion, LlmError> + Send,
{
    fn complete(&mut self, call: CallInfo, request: &Request) -> Result<Completion, LlmError> {
        (self.respond)(call, request)
    }
}

/// Scripted backend answering with a fixed list of texts, in order.
pub fn queued(texts: Vec<String>) -> impl Backend {
    let mut it = texts.into_iter();
    ScriptedBackend::new(move |call: CallInfo, req: &Request| {
        let text = it.next().ok_or_else(|| LlmError::Script(format!("queue exhausted at call {}", call.seq)))?;
        Ok(Completion { usage: simulated_usage(req, &text), text })
    })
}

/// Usage a scripted backend reports: one token per four bytes, rounded up.
pub fn simulated_usage(req: &Request, text: &str) -> Usage {
    let input: usize = req.messages.iter().map(|m| m.content.len()).sum();
    Usage { input_tokens: input.div_ceil(4) as u64, output_tokens: text.len().div_ceil(4) as u64 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    /// Base URL; `/chat/completions` is appended.
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
}

fn default_attempts() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    1000
}
fn default_timeout_s() -> u64 {
    600
}

/// HTTP chat-completions backend.
pub struct LiveBackend {
    cfg: LiveConfig,
    key: String,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

enum Attempt {
    Retry(String),
    Fail(LlmError),
}

impl LiveBackend {
    pub fn from_env(cfg: LiveConfig) -> Result<Self, LlmError> {
        let key = std::env::var(&cfg.api_key_env).map_err(|_| LlmError::MissingCredential(cfg.api_key_env.clone()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(LiveBackend { cfg, key, agent })
    }

    fn attempt(&self, request: &Request) -> Result<Completion, Attempt> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let mut resp = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.key))
            .send_json(request)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| Attempt::Retry(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("status {status}")));
        }
        if status >= 400 {
            return Err(Attempt::Fail(LlmError::Http { status, body }));
        }
        let wire: WireResponse =
            serde_json::from_str(&body).map_err(|e| Attempt::Fail(LlmError::MalformedResponse(e.to_string())))?;
        let text = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Attempt::Fail(LlmError::MalformedResponse("no assistant content".into())))?;
        let usage = wire.usage.ok_or_else(|| Attempt::Fail(LlmError::MalformedResponse("no usage block".into())))?;
        Ok(Completion { text, usage: Usage { input_tokens: usage.prompt_tokens, output_tokens: usage.completion_tokens } })
    }
}

impl Backend for LiveBackend {
    fn complete(&mut self, call: CallInfo, request: &Request) -> Result<Completion, LlmError> {
        let mut last = String::new();
        for attempt in 0..self.cfg.max_attempts {
            if attempt > 0 {
                let base = self.cfg.backoff_ms << (attempt - 1);
                let jitter = rand::rng().random_range(0..=base / 2 + 1);
                std::thread::sleep(Duration::from_millis(base + jitter));
            }
            match self.attempt(request) {
                Ok(c) => return Ok(c),
                Err(Attempt::Fail(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    tracing::warn!(seq = call.seq, attempt, "transient failure: {msg}");
                    last = msg;
                }
            }
        }
        Err(LlmError::Transport { attempts: self.cfg.max_attempts, message: last })
    }
}

/// One persisted call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub purpose: Purpose,
    pub digest: String,
    pub request: Request,
    pub response: String,
    pub usage: Usage,
}

/// Directory of `NNNNN.json` call records.
#[derive(Debug, Clone)]
pub struct TranscriptStore {
    dir: PathBuf,
}

impl TranscriptStore {
    pub fn create(dir: &Path) -> Result<Self, LlmError> {
        std::fs::create_dir_all(dir).map_err(|e| LlmError::Store(format!("{}: {e}", dir.display())))?;
        Ok(TranscriptStore { dir: dir.to_path_buf() })
    }

    pub fn open(dir: &Path) -> Result<Self, LlmError> {
        if !dir.is_dir() {
            return Err(LlmError::Store(format!("{} is not a directory", dir.display())));
        }
        Ok(TranscriptStore { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, seq: u64) -> PathBuf {
        self.dir.join(format!("{seq:05}.json"))
    }

    pub fn write(&self, entry: &TranscriptEntry) -> Result<(), LlmError> {
        let text = serde_json::to_string_pretty(entry).expect("entry serializes");
        std::fs::write(self.path(entry.seq), text + "\n").map_err(|e| LlmError::Store(e.to_string()))
    }

    pub fn read(&self, seq: u64) -> Result<Option<TranscriptEntry>, LlmError> {
        let path = self.path(seq);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| LlmError::Store(e.to_string()))?;
        serde_json::from_str(&text).map(Some).map_err(|e| LlmError::Store(format!("{}: {e}", path.display())))
    }

    /// Every record in sequence order.
    pub fn entries(&self) -> Result<Vec<TranscriptEntry>, LlmError> {
        let mut names: Vec<PathBuf> = std::fs::read_dir(&self.dir)
            .map_err(|e| LlmError::Store(e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        names.sort();
        names
            .iter()
            .map(|p| {
                let text = std::fs::read_to_string(p).map_err(|e| LlmError::Store(e.to_string()))?;
                serde_json::from_str(&text).map_err(|e| LlmError::Store(format!("{}: {e}", p.display())))
            })
            .collect()
    }
}

/// Answers from a recorded store, checking that each request matches its recording.
pub struct ReplayBackend {
    store: TranscriptStore,
}

impl ReplayBackend {
    pub fn new(store: TranscriptStore) -> Self {
        ReplayBackend { store }
    }
}

impl Backend for ReplayBackend {
    fn complete(&mut self, call: CallInfo, request: &Request) -> Result<Completion, LlmError> {
        let entry = self.store.read(call.seq)?.ok_or(LlmError::ReplayMiss { seq: call.seq, purpose: call.purpose })?;
        let found = request.digest();
        if entry.digest != found {
            return Err(LlmError::DigestMismatch { seq: call.seq, purpose: call.purpose, expected: entry.digest, found });
        }
        Ok(Completion { text: entry.response, usage: entry.usage })
    }
}

/// Single entry point for model calls; numbers calls, records them and keeps the usage ledger.
pub struct Gateway {
    backend: Box<dyn Backend>,
    recorder: Option<TranscriptStore>,
    seq: u64,
    ledger: Vec<UsageRecord>,
}

impl Gateway {
    pub fn new(backend: Box<dyn Backend>) -> Self {
        Gateway { backend, recorder: None, seq: 0, ledger: Vec::new() }
    }

    /// Persist every call into `store` as it happens.
    pub fn recording(backend: Box<dyn Backend>, store: TranscriptStore) -> Self {
        Gateway { recorder: Some(store), ..Gateway::new(backend) }
    }

    pub fn replay(store: TranscriptStore) -> Self {
        Gateway::new(Box::new(ReplayBackend::new(store)))
    }

    /// Sequence number the next call will carry.
    pub fn next_seq(&self) -> u64 {
        self.seq
    }

    /// Continue numbering from `seq`, e.g. when resuming a run.
    pub fn resume_at(&mut self, seq: u64) {
        self.seq = seq;
    }

    pub fn ledger(&self) -> &[UsageRecord] {
        &self.ledger
    }

    pub fn complete(&mut self, conversation: &Conversation, purpose: Purpose) -> Result<(Message, UsageRecord), LlmError> {
        conversation.validate()?;
        let request = conversation.request();
        let call = CallInfo { seq: self.seq, purpose };
        let completion = self.backend.complete(call, &request)?;
        if let Some(store) = &self.recorder {
            store.write(&TranscriptEntry {
                seq: call.seq,
                purpose,
                digest: request.digest(),
                request,
                response: completion.text.clone(),
                usage: completion.usage,
            })?;
        }
        self.seq += 1;
        let record = UsageRecord {
            input_tokens: completion.usage.input_tokens,
            output_tokens: completion.usage.output_tokens,
            model_id: conversation.model_id.clone(),
            purpose,
        };
        self.ledger.push(record.clone());
        Ok((Message { role: Role::Assistant, content: completion.text }, record))
    }

    /// Sends the conversation and appends the reply to it.
    pub fn exchange(&mut self, conversation: &mut Conversation, purpose: Purpose) -> Result<String, LlmError> {
        let (reply, _) = self.complete(conversation, purpose)?;
        let text = reply.content.clone();
        conversation.messages.push(reply);
        Ok(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Price {
    /// Currency units per million input tokens.
    pub input: f64,
    pub output: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    pub models: BTreeMap<String, Price>,
}

impl PriceTable {
    pub fn single(model: &str, input: f64, output: f64) -> Self {
        let mut models = BTreeMap::new();
        models.insert(model.to_string(), Price { input, output });
        PriceTable { models }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Cost {
    pub input_cost: f64,
    pub output_cost: f64,
    pub total: f64,
}

/// Token totals are summed per model before pricing.
pub fn cost_total(ledger: &[UsageRecord], prices: &PriceTable) -> Result<Cost, LlmError> {
    let mut per_model: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for r in ledger {
        let slot = per_model.entry(r.model_id.as_str()).or_default();
        slot.0 += r.input_tokens;
        slot.1 += r.output_tokens;
    }
    let mut cost = Cost::default();
    for (model, (input, output)) in per_model {
        let price = prices.models.get(model).ok_or_else(|| LlmError::Unpriced(model.to_string()))?;
        if price.input < 0.0 || price.output < 0.0 {
            return Err(LlmError::Unpriced(model.to_string()));
        }
        cost.input_cost += input as f64 * price.input / 1e6;
        cost.output_cost += output as f64 * price.output / 1e6;
    }
    cost.total = cost.input_cost + cost.output_cost;
    Ok(cost)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(model: &str, i: u64, o: u64) -> UsageRecord {
        UsageRecord { input_tokens: i, output_tokens: o, model_id: model.into(), purpose: Purpose::Genesis }
    }

    #[test]
    fn cost_examples() {
        let prices = PriceTable::single("m", 2.5, 10.0);
        assert_eq!(cost_total(&[record("m", 1_000_000, 1_000_000)], &prices).unwrap().total, 12.5);
        let c = cost_total(&[record("m", 100_000, 50_000)], &prices).unwrap();
        assert_eq!((c.input_cost, c.output_cost, c.total), (0.25, 0.5, 0.75));
        assert_eq!(cost_total(&[], &prices).unwrap().total, 0.0);
        assert_eq!(cost_total(&[record("x", 1, 1)], &prices), Err(LlmError::Unpriced("x".into())));
    }

    #[test]
    fn conversation_validation() {
        let empty = Conversation::new("m", GenParams::default());
        assert_eq!(empty.validate(), Err(LlmError::EmptyConversation));
        let mut c = Conversation::new("m", GenParams::default()).system("s").user("u");
        assert!(c.validate().is_ok());
        c.push(Role::Assistant, "a");
        assert!(c.validate().is_err());
        c.push(Role::User, "again");
        assert!(c.validate().is_ok());
        c.push(Role::System, "late");
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_conversation_never_reaches_backend() {
        let mut gw = Gateway::new(Box::new(queued(vec![])));
        let conv = Conversation::new("m", GenParams::default());
        assert_eq!(gw.complete(&conv, Purpose::Genesis).unwrap_err(), LlmError::EmptyConversation);
        assert_eq!(gw.next_seq(), 0);
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let conv = Conversation::new("m", GenParams::default()).user("hello");
        let mut rec = Gateway::recording(Box::new(queued(vec!["one".into()])), TranscriptStore::create(dir.path()).unwrap());
        let (reply, usage) = rec.complete(&conv, Purpose::Genesis).unwrap();
        assert_eq!(reply.content, "one");

        let mut rep = Gateway::replay(TranscriptStore::open(dir.path()).unwrap());
        let (again, usage2) = rep.complete(&conv, Purpose::Genesis).unwrap();
        assert_eq!(again.content, "one");
        assert_eq!(usage, usage2);
        assert!(matches!(rep.complete(&conv, Purpose::Genesis), Err(LlmError::ReplayMiss { seq: 1, .. })));
    }

    #[test]
    fn replay_detects_drift() {
        let dir = tempfile::tempdir().unwrap();
        let conv = Conversation::new("m", GenParams::default()).user("hello");
        let mut rec = Gateway::recording(Box::new(queued(vec!["one".into()])), TranscriptStore::create(dir.path()).unwrap());
        rec.complete(&conv, Purpose::JudgeSelect).unwrap();
        let edited = Conversation::new("m", GenParams::default()).user("hello!");
        let mut rep = Gateway::replay(TranscriptStore::open(dir.path()).unwrap());
        let err = rep.complete(&edited, Purpose::JudgeSelect).unwrap_err();
        assert!(matches!(err, LlmError::DigestMismatch { seq: 0, purpose: Purpose::JudgeSelect, .. }));
        assert!(err.to_string().contains("call 0"));
    }

    #[test]
    fn digest_covers_params() {
        let a = Conversation::new("m", GenParams { temperature: 0.7, max_tokens: 10 }).user("x").request();
        let b = Conversation::new("m", GenParams { temperature: 0.2, max_tokens: 10 }).user("x").request();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), a.clone().digest());
    }
}
