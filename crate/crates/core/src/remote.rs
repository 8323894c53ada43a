//! HTTP/JSON clients for externally hosted classifier, encoder and generator models.

use std::error::Error as _;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::assembly::{GenerationRequest, GenerationResponse, GeneratorPort};
use crate::encoder::{EncodeRole, Embedding, EncoderPort};
use crate::error::{BackendError, BackendErrorKind};
use crate::extractor::{ClassifierPort, ClassifierVerdict, PersonaLabel};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone)]
struct JsonEndpoint {
    backend: &'static str,
    url: String,
    agent: ureq::Agent,
}

impl JsonEndpoint {
    fn new(backend: &'static str, url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            backend,
            url: url.into(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }

    fn err(&self, kind: BackendErrorKind, message: impl Into<String>) -> BackendError {
        BackendError::new(self.backend, kind, message)
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, body: &Req) -> Result<Resp, BackendError> {
        let response = self.agent.post(&self.url).send_json(body).map_err(|e| match e {
            ureq::Error::Status(code, _) if code >= 500 || code == 429 => {
                self.err(BackendErrorKind::Unavailable, format!("{} returned {code}", self.url))
            }
            ureq::Error::Status(code, _) => {
                self.err(BackendErrorKind::Malformed, format!("{} rejected request with {code}", self.url))
            }
            ureq::Error::Transport(t) => {
                let timed_out = t
                    .source()
                    .and_then(|s| s.downcast_ref::<std::io::Error>())
                    .is_some_and(|io| {
                        matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock)
                    });
                let kind = if timed_out {
                    BackendErrorKind::Timeout
                } else {
                    BackendErrorKind::Unavailable
                };
                self.err(kind, t.to_string())
            }
        })?;
        response
            .into_json()
            .map_err(|e| self.err(BackendErrorKind::Malformed, format!("bad response body: {e}")))
    }
}

#[derive(Serialize)]
struct TextsRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct ClassifyResponse {
    labels: Vec<u8>,
    #[serde(default)]
    confidences: Option<Vec<f64>>,
}

/// `POST {"texts": [..]}` → `{"labels": [0|1], "confidences": [..]}`.
#[derive(Debug, Clone)]
pub struct HttpClassifier {
    endpoint: JsonEndpoint,
}

impl HttpClassifier {
    pub fn new(url: impl Into<String>) -> Self {
        Self::with_timeout(url, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            endpoint: JsonEndpoint::new("classifier", url, timeout),
        }
    }
}

impl ClassifierPort for HttpClassifier {
    fn classify_batch(&self, texts: &[&str]) -> Result<Vec<ClassifierVerdict>, BackendError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let resp: ClassifyResponse = self.endpoint.post(&TextsRequest { texts })?;
        let malformed = |m: String| self.endpoint.err(BackendErrorKind::Malformed, m);
        if resp.labels.len() != texts.len() {
            return Err(malformed(format!("{} labels for {} texts", resp.labels.len(), texts.len())));
        }
        let confidences = match resp.confidences {
            Some(c) if c.len() != texts.len() => {
                return Err(malformed(format!("{} confidences for {} texts", c.len(), texts.len())))
            }
            Some(c) => c,
            None => vec![1.0; texts.len()],
        };
        resp.labels
            .iter()
            .zip(confidences)
            .map(|(&label, conf)| match label {
                0 | 1 if conf.is_finite() => Ok(ClassifierVerdict::new(PersonaLabel::from_bool(label == 1), conf)),
                0 | 1 => Err(malformed(format!("confidence {conf} is not finite"))),
                other => Err(malformed(format!("label {other} is not 0 or 1"))),
            })
            .collect()
    }
}

#[derive(Serialize)]
struct EncodeRequest<'a> {
    role: EncodeRole,
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EncodeResponse {
    vectors: Vec<Vec<f32>>,
}

/// `POST {"role": "context"|"persona", "texts": [..]}` → `{"vectors": [[..]]}`.
#[derive(Debug, Clone)]
pub struct HttpEncoder {
    endpoint: JsonEndpoint,
    dim: usize,
    id: String,
}

impl HttpEncoder {
    pub fn new(url: impl Into<String>, dim: usize) -> Self {
        Self::with_timeout(url, dim, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(url: impl Into<String>, dim: usize, timeout: Duration) -> Self {
        let url = url.into();
        Self {
            id: format!("http:{url}:d{dim}"),
            endpoint: JsonEndpoint::new("encoder", url, timeout),
            dim,
        }
    }

    /// Overrides the identifier recorded in snapshots, e.g. a model version.
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

impl EncoderPort for HttpEncoder {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, role: EncodeRole, texts: &[&str]) -> Result<Vec<Embedding>, BackendError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let resp: EncodeResponse = self.endpoint.post(&EncodeRequest { role, texts })?;
        let malformed = |m: String| self.endpoint.err(BackendErrorKind::Malformed, m);
        if resp.vectors.len() != texts.len() {
            return Err(malformed(format!("{} vectors for {} texts", resp.vectors.len(), texts.len())));
        }
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(malformed(format!("vector of dimension {}, expected {}", v.len(), self.dim)));
                }
                Embedding::new(v).map_err(|e| malformed(e.to_string()))
            })
            .collect()
    }
}

/// Posts the assembled segments and returns the generated text.
#[derive(Debug, Clone)]
pub struct HttpGenerator {
    endpoint: JsonEndpoint,
}

impl HttpGenerator {
    pub fn new(url: impl Into<String>) -> Self {
        Self::with_timeout(url, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            endpoint: JsonEndpoint::new("generator", url, timeout),
        }
    }
}

impl GeneratorPort for HttpGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        self.endpoint.post(request)
    }
}
