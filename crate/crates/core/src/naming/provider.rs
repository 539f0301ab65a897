use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::thread;
use std::time::Duration;

use base64::Engine;
use log::warn;
use serde::{Deserialize, Serialize};

/// A clip handed to a captioner: its id and, when known, its audio file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipRef {
    pub clip_id: String,
    pub audio_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderFailure {
    /// No response could be obtained at all (connection refused, timeouts).
    Unreachable(String),
    /// The provider answered but the request failed.
    Failed(String),
}

impl fmt::Display for ProviderFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Unreachable(m) => write!(f, "unreachable: {m}"),
            Self::Failed(m) => write!(f, "failed: {m}"),
        }
    }
}

/// External captioner and summarizer.
pub trait Provider: Send + Sync {
    /// Identifies the provider in cache keys.
    fn fingerprint(&self) -> String;

    /// Whether responses may be cached. Providers that read local files
    /// should return `false` so edits are picked up.
    fn cacheable(&self) -> bool {
        true
    }

    fn caption(&self, clip: &ClipRef, prompt: &str) -> Result<String, ProviderFailure>;

    /// `feature` is passed for providers that key summaries by feature.
    fn summarize(
        &self,
        feature: Option<usize>,
        captions: &[String],
        prompt: &str,
    ) -> Result<String, ProviderFailure>;
}

/// Pure deterministic provider for tests and dry runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockProvider;

impl Provider for MockProvider {
    fn fingerprint(&self) -> String {
        "mock:v1".into()
    }

    fn caption(&self, clip: &ClipRef, _prompt: &str) -> Result<String, ProviderFailure> {
        Ok(format!("mock-caption({})", clip.clip_id))
    }

    fn summarize(
        &self,
        _feature: Option<usize>,
        captions: &[String],
        _prompt: &str,
    ) -> Result<String, ProviderFailure> {
        Ok(format!("mock-summary({} captions)", captions.len()))
    }
}

/// Reads precomputed responses from a directory:
/// `captions/<clip_id>.caption.txt` and `summaries/<feature>.summary.txt`.
#[derive(Debug, Clone)]
pub struct FileProvider {
    dir: PathBuf,
}

impl FileProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn read(&self, path: &Path) -> Result<String, ProviderFailure> {
        fs::read_to_string(path)
            .map_err(|e| ProviderFailure::Failed(format!("{}: {e}", path.display())))
    }
}

impl Provider for FileProvider {
    fn fingerprint(&self) -> String {
        format!("file:{}", self.dir.display())
    }

    fn cacheable(&self) -> bool {
        false
    }

    fn caption(&self, clip: &ClipRef, _prompt: &str) -> Result<String, ProviderFailure> {
        self.read(
            &self
                .dir
                .join("captions")
                .join(format!("{}.caption.txt", clip.clip_id)),
        )
    }

    fn summarize(
        &self,
        feature: Option<usize>,
        _captions: &[String],
        _prompt: &str,
    ) -> Result<String, ProviderFailure> {
        let feature = feature
            .ok_or_else(|| ProviderFailure::Failed("file provider needs a feature id".into()))?;
        self.read(
            &self
                .dir
                .join("summaries")
                .join(format!("{feature}.summary.txt")),
        )
    }
}

#[derive(Debug, Serialize)]
struct CaptionRequest<'a> {
    audio_base64: String,
    prompt: &'a str,
}

#[derive(Debug, Deserialize)]
struct CaptionResponse {
    caption: String,
}

#[derive(Debug, Serialize)]
struct SummarizeRequest<'a> {
    captions: &'a [String],
    prompt: &'a str,
}

#[derive(Debug, Deserialize)]
struct SummarizeResponse {
    text: String,
}

/// JSON-over-HTTP provider:
///
/// ```text
/// POST <endpoint>/caption   {"audio_base64", "prompt"} -> {"caption"}
/// POST <endpoint>/summarize {"captions", "prompt"}     -> {"text"}
/// ```
///
/// Transport errors, timeouts, 429 and 5xx responses are retried up to
/// `max_retries` times with exponential backoff.
pub struct HttpProvider {
    endpoint: String,
    client: reqwest::blocking::Client,
    max_retries: u32,
    backoff: Duration,
}

impl HttpProvider {
    pub fn new(endpoint: &str, timeout: Duration, max_retries: u32, backoff: Duration) -> Result<Self, ProviderFailure> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderFailure::Failed(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            client,
            max_retries,
            backoff,
        })
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, route: &str, body: &B) -> Result<R, ProviderFailure> {
        let url = format!("{}/{route}", self.endpoint);
        let mut reached = false;
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                thread::sleep(self.backoff * 2u32.saturating_pow(attempt - 1).min(64));
            }
            match self.client.post(&url).json(body).send() {
                Ok(resp) => {
                    reached = true;
                    let status = resp.status();
                    if status.is_success() {
                        return resp
                            .json::<R>()
                            .map_err(|e| ProviderFailure::Failed(format!("{url}: bad response body: {e}")));
                    }
                    last = format!("{url}: HTTP {status}");
                    if !(status.is_server_error() || status.as_u16() == 429) {
                        return Err(ProviderFailure::Failed(last));
                    }
                }
                Err(e) => {
                    last = format!("{url}: {e}");
                }
            }
            warn!("attempt {} of {}: {last}", attempt + 1, self.max_retries + 1);
        }
        Err(if reached {
            ProviderFailure::Failed(last)
        } else {
            ProviderFailure::Unreachable(last)
        })
    }
}

impl Provider for HttpProvider {
    fn fingerprint(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn caption(&self, clip: &ClipRef, prompt: &str) -> Result<String, ProviderFailure> {
        let path = clip.audio_path.as_ref().ok_or_else(|| {
            ProviderFailure::Failed(format!("clip {} has no audio_path", clip.clip_id))
        })?;
        let audio = fs::read(path)
            .map_err(|e| ProviderFailure::Failed(format!("{}: {e}", path.display())))?;
        let body = CaptionRequest {
            audio_base64: base64::engine::general_purpose::STANDARD.encode(audio),
            prompt,
        };
        self.post::<_, CaptionResponse>("caption", &body).map(|r| r.caption)
    }

    fn summarize(
        &self,
        _feature: Option<usize>,
        captions: &[String],
        prompt: &str,
    ) -> Result<String, ProviderFailure> {
        self.post::<_, SummarizeResponse>("summarize", &SummarizeRequest { captions, prompt })
            .map(|r| r.text)
    }
}

/// Provider selection as given on the command line:
/// `http:<url>`, `file:<dir>`, or `mock`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderKind {
    Http(String),
    File(PathBuf),
    Mock,
}

impl FromStr for ProviderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "mock" {
            Ok(Self::Mock)
        } else if let Some(url) = s.strip_prefix("http:") {
            // accept both `http:<url>` and a bare `http://...`
            let url = if url.starts_with("//") { format!("http:{url}") } else { url.to_string() };
            if url.is_empty() {
                return Err("http provider needs a URL".into());
            }
            Ok(Self::Http(url))
        } else if let Some(dir) = s.strip_prefix("file:") {
            if dir.is_empty() {
                return Err("file provider needs a directory".into());
            }
            Ok(Self::File(PathBuf::from(dir)))
        } else {
            Err(format!("unknown provider {s:?}; expected http:<url>, file:<dir> or mock"))
        }
    }
}
