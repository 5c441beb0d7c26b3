//! Thin typed client for the evaluation service.

#![forbid(unsafe_code)]

use std::time::Duration;

use thiserror::Error;

pub mod api;

use api::{
    FilterRequest, FitRecalRequest, HealthResponse, JobState, JobStatus, JobSubmitted,
    ReportRequest, ReportSummary, SweepRequest, SynthCheckResponse, API_BASE,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request to {url} failed: {source}")]
    Transport {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("service answered {status} for {url}: {body}")]
    Service {
        url: String,
        status: u16,
        body: String,
    },
    #[error("could not decode the service response from {url}: {reason}")]
    Decode { url: String, reason: String },
}

pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:7878`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{API_BASE}{path}", self.base)
    }

    async fn get<T: serde::de::DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        let url = self.url(path);
        let response = self
            .http
            .get(&url)
            .send()
            .await
            .map_err(|source| ClientError::Transport {
                url: url.clone(),
                source,
            })?;
        Self::decode(url, response).await
    }

    async fn post<B: serde::Serialize, T: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<T, ClientError> {
        let url = self.url(path);
        let response = self
            .http
            .post(&url)
            .json(body)
            .send()
            .await
            .map_err(|source| ClientError::Transport {
                url: url.clone(),
                source,
            })?;
        Self::decode(url, response).await
    }

    async fn decode<T: serde::de::DeserializeOwned>(
        url: String,
        response: reqwest::Response,
    ) -> Result<T, ClientError> {
        let status = response.status().as_u16();
        let body = response
            .text()
            .await
            .map_err(|source| ClientError::Transport {
                url: url.clone(),
                source,
            })?;
        if !(200..300).contains(&status) {
            return Err(ClientError::Service { url, status, body });
        }
        serde_json::from_str(&body).map_err(|e| ClientError::Decode {
            url,
            reason: e.to_string(),
        })
    }

    pub async fn health(&self) -> Result<HealthResponse, ClientError> {
        self.get("/health").await
    }

    pub async fn synth_check(&self) -> Result<SynthCheckResponse, ClientError> {
        self.post("/synth-check", &serde_json::json!({})).await
    }

    pub async fn submit_filter(&self, request: &FilterRequest) -> Result<JobSubmitted, ClientError> {
        self.post("/filter", request).await
    }

    pub async fn submit_sweep(&self, request: &SweepRequest) -> Result<JobSubmitted, ClientError> {
        self.post("/sweep", request).await
    }

    pub async fn submit_fit_recal(
        &self,
        request: &FitRecalRequest,
    ) -> Result<JobSubmitted, ClientError> {
        self.post("/fit-recal", request).await
    }

    pub async fn report(&self, request: &ReportRequest) -> Result<ReportSummary, ClientError> {
        self.post("/report", request).await
    }

    pub async fn job(&self, id: &str) -> Result<JobStatus, ClientError> {
        self.get(&format!("/jobs/{id}")).await
    }

    /// Poll a job until it settles.
    pub async fn wait(&self, id: &str, poll: Duration) -> Result<JobStatus, ClientError> {
        loop {
            let status = self.job(id).await?;
            match status.state {
                JobState::Done | JobState::Failed => return Ok(status),
                JobState::Queued | JobState::Running => tokio::time::sleep(poll).await,
            }
        }
    }
}
