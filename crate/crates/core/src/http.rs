//! Blocking JSON-over-HTTP helper shared by the remote backends.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct JsonClient {
    agent: ureq::Agent,
}

impl Default for JsonClient {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

impl JsonClient {
    pub fn new(timeout: Duration) -> Self {
        Self {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }

    pub fn post<Req: Serialize, Resp: DeserializeOwned>(&self, url: &str, body: &Req) -> Result<Resp> {
        let transport = |reason: String| Error::Transport {
            endpoint: url.to_string(),
            reason,
        };
        let resp = self
            .agent
            .post(url)
            .send_json(body)
            .map_err(|e| transport(e.to_string()))?;
        resp.into_json::<Resp>().map_err(|e| transport(format!("bad response body: {e}")))
    }
}
