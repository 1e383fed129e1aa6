use std::time::Duration;

use trialwatch_core::error::{Error, Result};
use trialwatch_core::sentinel::alerts::{Alert, AlertSink};

const TIMEOUT: Duration = Duration::from_secs(5);

/// POSTs each alert as JSON. Any transport error or non-2xx status counts as
/// a refusal, so the dispatcher buffers the alert and retries it next tick.
pub struct WebhookSink {
    url: String,
    agent: ureq::Agent,
}

impl WebhookSink {
    pub fn new(url: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(TIMEOUT)).build().into();
        Self { url: url.into(), agent }
    }
}

impl AlertSink for WebhookSink {
    fn deliver(&mut self, alert: &Alert) -> Result<()> {
        self.agent
            .post(&self.url)
            .send_json(alert)
            .map(drop)
            .map_err(|e| Error::ComponentUnavailable(format!("webhook {}: {e}", self.url)))
    }
}
