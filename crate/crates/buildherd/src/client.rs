//! Blocking client for the server's HTTP API.

use std::time::Duration;

use buildherd_core::model::OutcomeKind;
use buildherd_core::ProjectStatus;
use serde::de::DeserializeOwned;
use ureq::Agent;

use crate::history::HistoryRecord;
use crate::server::Receipt;
use crate::service::{BuildBody, HookAck, HookBody};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("server unreachable: {0}")]
    Unreachable(String),
    #[error("server answered {status}: {message}")]
    Status { status: u16, message: String },
    #[error("unexpected response: {0}")]
    Decode(String),
}

pub struct Client {
    base: String,
    agent: Agent,
}

impl Client {
    /// `server` is `host:port` or a full `http://` URL.
    pub fn new(server: &str) -> Self {
        let base = if server.contains("://") { server.trim_end_matches('/').to_string() } else { format!("http://{server}") };
        let agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        Client { base, agent }
    }

    pub fn health(&self) -> Result<(), ClientError> {
        let response = self.agent.get(format!("{}/health", self.base)).call();
        decode::<serde_json::Value>(response, 200).map(|_| ())
    }

    pub fn build(&self, project: &str, actor: &str) -> Result<Receipt, ClientError> {
        let body = BuildBody { actor: Some(actor.into()) };
        let response = self.agent.post(format!("{}/projects/{project}/build", self.base)).send_json(&body);
        decode(response, 202)
    }

    pub fn hook(&self, body: &HookBody) -> Result<HookAck, ClientError> {
        let response = self.agent.post(format!("{}/hooks/{}", self.base, body.repo)).send_json(body);
        decode(response, 202)
    }

    pub fn status(&self, project: &str) -> Result<ProjectStatus, ClientError> {
        let response = self.agent.get(format!("{}/projects/{project}/status", self.base)).call();
        decode(response, 200)
    }

    pub fn runs(&self, project: &str, outcome: Option<OutcomeKind>) -> Result<Vec<HistoryRecord>, ClientError> {
        let mut request = self.agent.get(format!("{}/projects/{project}/runs", self.base));
        if let Some(outcome) = outcome {
            let value = serde_json::to_value(outcome).map_err(|e| ClientError::Decode(e.to_string()))?;
            request = request.query("outcome", value.as_str().unwrap_or_default());
        }
        decode(request.call(), 200)
    }
}

fn decode<T: DeserializeOwned>(
    response: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    expected: u16,
) -> Result<T, ClientError> {
    let mut response = response.map_err(|e| ClientError::Unreachable(e.to_string()))?;
    let status = response.status().as_u16();
    if status != expected {
        let message = response
            .body_mut()
            .read_json::<serde_json::Value>()
            .ok()
            .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(String::from))
            .unwrap_or_default();
        return Err(ClientError::Status { status, message });
    }
    response.body_mut().read_json().map_err(|e| ClientError::Decode(e.to_string()))
}
