use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    dot, GatewayError, GatewayRequest, GatewayResponse, MockGateway, ModelGateway, OpenAiEndpoint,
    RequestKind, Role,
};
use crate::gateway::MockScript;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Scripted offline backend (needs `mock_script`, or runs an empty script).
    Mock,
    /// OpenAI-compatible HTTP endpoint.
    Openai,
    /// Scorer only: cosine of the embedder's vectors for the two texts.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, initial_backoff_ms: 250, max_backoff_ms: 4_000 }
    }
}

impl RetryPolicy {
    /// Delay after failed attempt `attempt` (1-based): doubling from the
    /// initial backoff, capped per step.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << (attempt.saturating_sub(1)).min(20);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }

    /// Upper bound on the sleep a single call can accumulate across retries.
    pub fn max_added_latency(&self) -> Duration {
        (1..self.max_attempts).map(|a| self.backoff(a)).sum()
    }
}

fn default_timeout() -> f64 {
    60.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointBinding {
    pub backend: Backend,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    /// Most images the endpoint accepts per request.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_frames: Option<usize>,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl EndpointBinding {
    pub fn mock() -> Self {
        Self {
            backend: Backend::Mock,
            base_url: None,
            model: None,
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_frames: None,
            retry: RetryPolicy::default(),
        }
    }

    pub fn openai(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            backend: Backend::Openai,
            base_url: Some(base_url.into()),
            model: Some(model.into()),
            ..Self::mock()
        }
    }
}

fn default_in_flight() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<PathBuf>,
    /// Concurrent in-flight requests allowed per role.
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub roles: BTreeMap<Role, EndpointBinding>,
}

impl GatewayConfig {
    /// Every role bound to the mock backend.
    pub fn all_mock(mock_script: Option<PathBuf>) -> Self {
        Self {
            mock_script,
            max_in_flight: default_in_flight(),
            roles: Role::ALL.into_iter().map(|r| (r, EndpointBinding::mock())).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let missing: Vec<&str> = Role::ALL
            .into_iter()
            .filter(|r| !self.roles.contains_key(r))
            .map(Role::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(GatewayError::Config(format!("unbound role(s): {}", missing.join(", "))));
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::Config("max_in_flight must be at least 1".into()));
        }
        for (role, b) in &self.roles {
            if b.backend == Backend::Cosine && *role != Role::Scorer {
                return Err(GatewayError::Config(format!("role {role}: cosine backend is scorer-only")));
            }
            if b.retry.max_attempts == 0 {
                return Err(GatewayError::Config(format!("role {role}: retry.max_attempts must be >= 1")));
            }
            if !(b.timeout_secs > 0.0) {
                return Err(GatewayError::Config(format!("role {role}: timeout_secs must be positive")));
            }
        }
        Ok(())
    }
}

/// Counting semaphore that admits waiters strictly in arrival order.
#[derive(Debug)]
struct FairSemaphore {
    state: Mutex<FairState>,
    cv: Condvar,
    permits: usize,
}

#[derive(Debug, Default)]
struct FairState {
    next_ticket: u64,
    serving: u64,
    in_flight: usize,
}

struct Permit<'a>(&'a FairSemaphore);

impl FairSemaphore {
    fn new(permits: usize) -> Self {
        Self { state: Mutex::new(FairState::default()), cv: Condvar::new(), permits }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        let ticket = st.next_ticket;
        st.next_ticket += 1;
        while !(st.serving == ticket && st.in_flight < self.permits) {
            st = self.cv.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        st.serving += 1;
        st.in_flight += 1;
        self.cv.notify_all();
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.0.state.lock().unwrap_or_else(|e| e.into_inner());
        st.in_flight -= 1;
        self.0.cv.notify_all();
    }
}

enum Route {
    Direct(Arc<dyn ModelGateway>),
    Cosine,
}

struct Lane {
    route: Route,
    limiter: FairSemaphore,
}

/// Dispatches each request to the backend bound to its role. Each role has
/// its own client, retry budget and in-flight limit.
pub struct RoleRouter {
    lanes: BTreeMap<Role, Lane>,
}

impl std::fmt::Debug for RoleRouter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RoleRouter").field("roles", &self.lanes.keys().collect::<Vec<_>>()).finish()
    }
}

impl RoleRouter {
    /// Builds every client up front; configuration problems surface here
    /// rather than on first call. Relative mock paths resolve against `base_dir`.
    pub fn from_config(config: &GatewayConfig, base_dir: &Path) -> Result<Self, GatewayError> {
        config.validate()?;
        let mut mock: Option<Arc<dyn ModelGateway>> = None;
        let mut lanes = BTreeMap::new();
        for (role, binding) in &config.roles {
            let route = match binding.backend {
                Backend::Mock => {
                    let gw = match &mock {
                        Some(gw) => gw.clone(),
                        None => {
                            let script = match &config.mock_script {
                                Some(p) => MockScript::load(&base_dir.join(p))?,
                                None => MockScript::default(),
                            };
                            let gw: Arc<dyn ModelGateway> = Arc::new(MockGateway::new(script));
                            mock = Some(gw.clone());
                            gw
                        }
                    };
                    Route::Direct(gw)
                }
                Backend::Openai => Route::Direct(Arc::new(OpenAiEndpoint::new(*role, binding.clone())?)),
                Backend::Cosine => Route::Cosine,
            };
            lanes.insert(*role, Lane { route, limiter: FairSemaphore::new(config.max_in_flight) });
        }
        Ok(Self { lanes })
    }

    /// Same backend for every role.
    pub fn uniform(gateway: Arc<dyn ModelGateway>, max_in_flight: usize) -> Self {
        let lanes = Role::ALL
            .into_iter()
            .map(|r| {
                (r, Lane { route: Route::Direct(gateway.clone()), limiter: FairSemaphore::new(max_in_flight.max(1)) })
            })
            .collect();
        Self { lanes }
    }

    pub fn with_route(mut self, role: Role, gateway: Arc<dyn ModelGateway>) -> Self {
        let permits = self.lanes.get(&role).map(|l| l.limiter.permits).unwrap_or(8);
        self.lanes.insert(role, Lane { route: Route::Direct(gateway), limiter: FairSemaphore::new(permits) });
        self
    }

    pub fn with_cosine_scorer(mut self) -> Self {
        let permits = self.lanes.get(&Role::Scorer).map(|l| l.limiter.permits).unwrap_or(8);
        self.lanes.insert(Role::Scorer, Lane { route: Route::Cosine, limiter: FairSemaphore::new(permits) });
        self
    }
}

impl ModelGateway for RoleRouter {
    fn call(&self, request: &GatewayRequest) -> Result<GatewayResponse, GatewayError> {
        let lane = self
            .lanes
            .get(&request.role)
            .ok_or_else(|| GatewayError::Config(format!("role {} is not bound", request.role)))?;
        match &lane.route {
            Route::Direct(gw) => {
                let _permit = lane.limiter.acquire();
                gw.call(request)
            }
            Route::Cosine => {
                if request.kind != RequestKind::PairScore {
                    return Err(GatewayError::Config(format!(
                        "cosine scorer cannot serve {} requests",
                        request.kind.as_str()
                    )));
                }
                if request.texts[0] == request.texts[1] {
                    return Ok(GatewayResponse::Score(1.0));
                }
                let v = self.embed_text(Role::Embedder, &request.texts)?;
                Ok(GatewayResponse::Score(dot(&v[0], &v[1]).clamp(-1.0, 1.0)))
            }
        }
    }
}
