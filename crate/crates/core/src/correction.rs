//! Anomaly-triggered correction through a dedicated correction agent.
//!
//! A flagged step's output is sent, with the query and the visible history,
//! to a correction policy that answers in a fixed JSON format. The policy is
//! only consulted for flagged steps, and any failure keeps the original
//! output so a broken corrector can never damage a trajectory.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::detector::AnomalyVerdict;
use crate::error::{MascError, Result};
use crate::http::{HttpOptions, JsonClient};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionRequest {
    pub role: String,
    pub query: String,
    /// `(role, output)` pairs for steps before the flagged one.
    pub history: Vec<(String, String)>,
    pub flagged_output: String,
}

impl CorrectionRequest {
    pub fn new(
        role: impl Into<String>,
        query: impl Into<String>,
        history: Vec<(String, String)>,
        flagged_output: impl Into<String>,
    ) -> Self {
        CorrectionRequest { role: role.into(), query: query.into(), history, flagged_output: flagged_output.into() }
    }

    /// The rendered recovery prompt for this request.
    pub fn instruction(&self) -> String {
        build_correction_prompt(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionResult {
    pub correction_needed: bool,
    pub final_response: String,
    pub raw: String,
    /// Set when the reply broke the protocol and the original was kept.
    pub protocol_violation: Option<String>,
}

/// Renders the recovery prompt. History is a role-prefixed transcript, one
/// step per line, or `(none)` when the flagged step is the first.
pub fn build_correction_prompt(req: &CorrectionRequest) -> String {
    let context = if req.history.is_empty() {
        "(none)".to_string()
    } else {
        req.history
            .iter()
            .enumerate()
            .map(|(i, (role, out))| format!("[{}] {role}: {out}", i + 1))
            .collect::<Vec<_>>()
            .join("\n")
    };
    format!(
        "You are acting as the agent with role \"{role}\" in a multi-agent reasoning run.\n\
         An anomaly detector marked the response you produced at this step as possibly wrong.\n\
         Decide whether it really is wrong, given the query and the context below.\n\
         \n\
         Rules:\n\
         1. Check the query and your response against what your role is meant to do.\n\
         2. If the response is correct as written, state that no correction is needed.\n\
         3. If it contains an error or a better answer exists, give the corrected response.\n\
         4. Reply with exactly the JSON object below and no other text.\n\
         \n\
         Output format:\n\
         {{\n  \"correction_needed\": \"Yes\" or \"No\",\n  \"final_response\": \"your original response if No, the corrected response if Yes\"\n}}\n\
         \n\
         Input:\n\
         - Query: {query}\n\
         - Your previous response: {flagged}\n\
         - Context (earlier steps):\n{context}\n",
        role = req.role,
        query = req.query,
        flagged = req.flagged_output,
    )
}

/// First JSON object embedded anywhere in `raw`.
fn first_json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    raw.char_indices().filter(|&(_, c)| c == '{').find_map(|(i, _)| {
        let mut it = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        match it.next() {
            Some(Ok(Value::Object(m))) => Some(m),
            _ => None,
        }
    })
}

fn parse_flag(v: &Value) -> Option<bool> {
    match v {
        Value::String(s) if s.trim().eq_ignore_ascii_case("yes") => Some(true),
        Value::String(s) if s.trim().eq_ignore_ascii_case("no") => Some(false),
        Value::Bool(b) => Some(*b),
        _ => None,
    }
}

/// Decodes a corrector reply. A "No" always yields `original`; anything
/// unreadable falls back to `original` and records the violation.
pub fn parse_correction_response(raw: &str, original: &str) -> CorrectionResult {
    let fallback = |why: String| {
        log::warn!("correction protocol violation: {why}");
        CorrectionResult {
            correction_needed: false,
            final_response: original.to_string(),
            raw: raw.to_string(),
            protocol_violation: Some(why),
        }
    };
    let Some(obj) = first_json_object(raw) else {
        return fallback("no JSON object in reply".into());
    };
    let Some(needed) = obj.get("correction_needed").and_then(parse_flag) else {
        return fallback("missing or invalid \"correction_needed\"".into());
    };
    let response = match obj.get("final_response") {
        Some(Value::String(s)) => s.clone(),
        _ => return fallback("missing or non-string \"final_response\"".into()),
    };
    if !needed {
        return CorrectionResult {
            correction_needed: false,
            final_response: original.to_string(),
            raw: raw.to_string(),
            protocol_violation: None,
        };
    }
    if response.trim().is_empty() {
        return fallback("empty corrected response".into());
    }
    CorrectionResult { correction_needed: true, final_response: response, raw: raw.to_string(), protocol_violation: None }
}

/// A correction agent: maps a request and its rendered prompt to a raw reply.
pub trait CorrectionPolicy: Send + Sync {
    fn respond(&self, req: &CorrectionRequest, prompt: &str) -> Result<String>;
}

impl<F> CorrectionPolicy for F
where
    F: Fn(&CorrectionRequest, &str) -> Result<String> + Send + Sync,
{
    fn respond(&self, req: &CorrectionRequest, prompt: &str) -> Result<String> {
        self(req, prompt)
    }
}

/// Looks the flagged output up in a table; replies "Yes" with the mapped
/// text on a hit and "No" otherwise.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    pub script: BTreeMap<String, String>,
}

impl CorrectionPolicy for ScriptedPolicy {
    fn respond(&self, req: &CorrectionRequest, _prompt: &str) -> Result<String> {
        let reply = match self.script.get(&req.flagged_output) {
            Some(fixed) => serde_json::json!({"correction_needed": "Yes", "final_response": fixed}),
            None => serde_json::json!({"correction_needed": "No", "final_response": req.flagged_output}),
        };
        Ok(reply.to_string())
    }
}

/// Chat-completion corrector speaking `POST {endpoint}/chat`.
pub struct RemoteChatPolicy {
    url: String,
    model: String,
    client: JsonClient,
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
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

impl RemoteChatPolicy {
    pub fn new(endpoint: &str, model: &str, http: HttpOptions) -> Self {
        RemoteChatPolicy {
            url: format!("{}/chat", endpoint.trim_end_matches('/')),
            model: model.to_string(),
            client: JsonClient::new(http),
        }
    }

    /// Sends a single user message and returns the reply text.
    pub fn chat(&self, content: &str) -> Result<String> {
        let body = ChatRequest { model: &self.model, messages: vec![ChatMessage { role: "user", content }] };
        let reply: ChatReply = self.client.post_json(&self.url, &body)?;
        Ok(reply.content)
    }
}

impl CorrectionPolicy for RemoteChatPolicy {
    fn respond(&self, _req: &CorrectionRequest, prompt: &str) -> Result<String> {
        self.chat(prompt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    RemoteChat,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionPolicySpec {
    pub kind: PolicyKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default)]
    pub script: BTreeMap<String, String>,
    #[serde(default)]
    pub http: HttpOptions,
}

impl CorrectionPolicySpec {
    pub fn scripted(script: BTreeMap<String, String>) -> Self {
        CorrectionPolicySpec { kind: PolicyKind::Scripted, endpoint: None, model_name: None, script, http: HttpOptions::default() }
    }

    pub fn remote_chat(endpoint: &str, model: &str) -> Self {
        CorrectionPolicySpec {
            kind: PolicyKind::RemoteChat,
            endpoint: Some(endpoint.to_string()),
            model_name: Some(model.to_string()),
            script: BTreeMap::new(),
            http: HttpOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == PolicyKind::RemoteChat {
            let present = |o: &Option<String>| o.as_deref().is_some_and(|s| !s.is_empty());
            if !present(&self.endpoint) || !present(&self.model_name) {
                return Err(MascError::config("remote_chat corrector needs endpoint and model_name"));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn CorrectionPolicy>> {
        self.validate()?;
        Ok(match self.kind {
            PolicyKind::Scripted => Box::new(ScriptedPolicy { script: self.script.clone() }),
            PolicyKind::RemoteChat => Box::new(RemoteChatPolicy::new(
                self.endpoint.as_deref().unwrap_or_default(),
                self.model_name.as_deref().unwrap_or_default(),
                self.http.clone(),
            )),
        })
    }
}

/// Per-run counters for correction activity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionStats {
    /// Policy invocations; equals the number of flagged steps.
    pub calls: usize,
    /// Replies that asked for a correction and were applied.
    pub interventions: usize,
    /// Policy errors (e.g. transport) where the original was kept.
    pub failures: usize,
    pub protocol_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    /// Output to record in the history in place of the original.
    pub output: String,
    pub result: Option<CorrectionResult>,
    pub failure: Option<String>,
}

/// Passes unflagged outputs through untouched; sends flagged ones to the
/// policy once and returns its decision, failing open on errors.
pub fn apply_correction(
    policy: &dyn CorrectionPolicy,
    verdict: &AnomalyVerdict,
    req: &CorrectionRequest,
    stats: &mut CorrectionStats,
) -> CorrectionOutcome {
    if !verdict.flagged {
        return CorrectionOutcome { output: req.flagged_output.clone(), result: None, failure: None };
    }
    stats.calls += 1;
    match policy.respond(req, &req.instruction()) {
        Err(e) => {
            log::warn!("correction failed at step {}, keeping original: {e}", verdict.t);
            stats.failures += 1;
            CorrectionOutcome { output: req.flagged_output.clone(), result: None, failure: Some(e.to_string()) }
        }
        Ok(raw) => {
            let r = parse_correction_response(&raw, &req.flagged_output);
            if r.protocol_violation.is_some() {
                stats.protocol_violations += 1;
            }
            if r.correction_needed {
                stats.interventions += 1;
            }
            CorrectionOutcome { output: r.final_response.clone(), result: Some(r), failure: None }
        }
    }
}
