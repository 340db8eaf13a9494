//! Thin async client for the restoration service.

use cfsnet::eval::SweepReport;
use cfsnet::wire::{
    CoeffsResponse, ErrorBody, ErrorDetail, Health, ModelInfo, RestoreRequest, RestoreResponse, SweepRequest,
};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The service answered with an error body.
    #[error("service returned {status}: {} ({})", .detail.message, .detail.code)]
    Api { status: StatusCode, detail: ErrorDetail },
    /// Non-JSON or unexpected reply.
    #[error("unexpected reply with status {status}: {body}")]
    Unexpected { status: StatusCode, body: String },
    #[error(transparent)]
    Http(#[from] reqwest::Error),
}

impl ClientError {
    /// Machine-readable code of an API error.
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { detail, .. } => Some(&detail.code),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self { base: base.into().trim_end_matches('/').to_string(), http: reqwest::Client::new() }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, ClientError> {
        let status = resp.status();
        let bytes = resp.bytes().await?;
        if status.is_success() {
            return serde_json::from_slice(&bytes)
                .map_err(|_| ClientError::Unexpected { status, body: String::from_utf8_lossy(&bytes).into_owned() });
        }
        match serde_json::from_slice::<ErrorBody>(&bytes) {
            Ok(body) => Err(ClientError::Api { status, detail: body.error }),
            Err(_) => Err(ClientError::Unexpected { status, body: String::from_utf8_lossy(&bytes).into_owned() }),
        }
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        Self::decode(self.http.get(format!("{}{path}", self.base)).send().await?).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        Self::decode(self.http.post(format!("{}{path}", self.base)).json(body).send().await?).await
    }

    pub async fn restore(&self, req: &RestoreRequest) -> Result<RestoreResponse, ClientError> {
        self.post("/restore", req).await
    }

    pub async fn sweep(&self, req: &SweepRequest) -> Result<SweepReport, ClientError> {
        self.post("/sweep", req).await
    }

    pub async fn model(&self) -> Result<ModelInfo, ClientError> {
        self.get("/model").await
    }

    pub async fn coeffs(&self, alpha: f64) -> Result<CoeffsResponse, ClientError> {
        self.get(&format!("/coeffs?alpha={alpha}")).await
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        self.get("/health").await
    }
}
