use std::time::Duration;

/// Engine timings and limits. The defaults are the production values; tests
/// shrink them.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Public base URL, e.g. `http://localhost:8298/flow/engine`.
    pub base_url: String,
    /// Timeout of synchronous service invocations.
    pub call_timeout: Duration,
    /// Upper bound for draining a stopping instance.
    pub drain_timeout: Duration,
    /// How long a vote waits for an immediate answer.
    pub vote_timeout: Duration,
    /// How long a vote answered with `callback` waits for the later answer.
    pub vote_callback_timeout: Duration,
    pub retry_delay: Duration,
    pub max_retries: u32,
    pub sse_heartbeat: Duration,
    pub push_timeout: Duration,
    pub push_retries: u32,
    pub queue_capacity: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            base_url: "http://localhost:8298/flow/engine".to_string(),
            call_timeout: Duration::from_secs(30),
            drain_timeout: Duration::from_secs(60),
            vote_timeout: Duration::from_secs(10),
            vote_callback_timeout: Duration::from_secs(60),
            retry_delay: Duration::from_secs(1),
            max_retries: 5,
            sse_heartbeat: Duration::from_secs(15),
            push_timeout: Duration::from_secs(5),
            push_retries: 3,
            queue_capacity: 10_000,
        }
    }
}

impl EngineConfig {
    pub fn with_base_url(mut self, base_url: impl Into<String>) -> Self {
        self.base_url = base_url.into().trim_end_matches('/').to_string();
        self
    }

    pub fn instance_url(&self, id: u64) -> String {
        format!("{}/{}", self.base_url, id)
    }

    pub fn callback_url(&self, id: u64, callback_id: &str) -> String {
        format!("{}/{}/callbacks/{}", self.base_url, id, callback_id)
    }
}
