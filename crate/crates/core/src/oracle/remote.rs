//! HTTP client for a model bridge speaking the [`wire`](super::wire) protocol.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::{self, DecodeRequest, DecodeResponse, ForwardRequest, ForwardResponse};
use super::{Oracle, ProbDist, TokenSequence};
use crate::audio::Spectrogram;
use crate::error::{Error, Result};
use crate::masks::TokenMask;

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub timeout: Duration,
    /// Extra attempts after the first one, for transport failures only.
    pub retries: usize,
    pub backoff: Duration,
    pub max_in_flight: usize,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            timeout: Duration::from_secs(60),
            retries: 3,
            backoff: Duration::from_millis(200),
            max_in_flight: 8,
        }
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteOracle {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    slots: Semaphore,
}

impl RemoteOracle {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(cfg.timeout).build();
        let slots = Semaphore::new(cfg.max_in_flight);
        Self { cfg, agent, slots }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn post_once<Req: Serialize, Resp: DeserializeOwned>(&self, url: &str, body: &Req) -> Result<Resp> {
        let _permit = self.slots.acquire();
        match self.agent.post(url).send_json(body) {
            Ok(resp) => resp
                .into_json()
                .map_err(|e| Error::Protocol(format!("unreadable response body: {e}"))),
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                if code >= 500 {
                    Err(Error::Transport(format!("HTTP {code}: {text}")))
                } else {
                    Err(Error::Protocol(format!("HTTP {code}: {text}")))
                }
            }
            Err(e) => Err(Error::Transport(e.to_string())),
        }
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp> {
        let url = format!("{}{path}", self.cfg.base_url);
        let mut attempt = 0;
        loop {
            match self.post_once(&url, body) {
                Err(e) if e.is_retryable() && attempt < self.cfg.retries => {
                    attempt += 1;
                    log::warn!("{url}: {e}; retry {attempt}/{}", self.cfg.retries);
                    thread::sleep(self.cfg.backoff * attempt as u32);
                }
                other => return other,
            }
        }
    }
}

impl Oracle for RemoteOracle {
    fn forward(
        &self,
        x: &Spectrogram,
        y: &TokenSequence,
        tok_mask: Option<&TokenMask>,
    ) -> Result<Vec<ProbDist>> {
        let req = ForwardRequest {
            spectrogram: wire::encode_spectrogram(x),
            tokens: y.ids.clone(),
            token_mask: wire::encode_token_mask(tok_mask, y.len()),
        };
        let resp: ForwardResponse = self.post("/v1/forward", &req)?;
        wire::parse_forward(resp, y.len())
    }

    fn decode(&self, x: &Spectrogram) -> Result<TokenSequence> {
        let req = DecodeRequest {
            spectrogram: wire::encode_spectrogram(x),
        };
        let resp: DecodeResponse = self.post("/v1/decode", &req)?;
        wire::parse_decode(resp)
    }
}
