use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mock::MockScript;
use super::GatewayError;
use crate::decision::RoutingPolicy;
use crate::domain::TaskKind;
use crate::ledger::{CostModel, REFERENCE_ROUTER_OVERHEAD};

/// Instruction appended to every backend prompt so outputs end with a line
/// the confidence parser understands.
pub const CONFIDENCE_INSTRUCTION: &str = "End with a line \"Confidence: N%\" giving your confidence that the answer is correct.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Layer1,
    Layer2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub model_id: String,
    /// Base URL of an OpenAI-compatible server; `/v1/chat/completions` is
    /// appended unless already present. Ignored when `mock` is set.
    #[serde(default)]
    pub endpoint: String,
    pub tier: Tier,
    /// Seconds.
    pub timeout: f64,
    /// Cost per 1k output tokens.
    pub unit_cost: f64,
    #[serde(default = "default_preamble")]
    pub preamble: String,
    /// Environment variable holding the API key, sent as a bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Serve this backend from an in-process scripted mock.
    #[serde(default)]
    pub mock: Option<MockScript>,
}

pub fn default_preamble() -> String {
    format!("Solve the problem. Put the final answer after \"####\". {CONFIDENCE_INSTRUCTION}")
}

impl BackendConfig {
    pub fn completions_url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub listen: String,
    /// Relative paths resolve against the config file's directory.
    pub estimator_path: PathBuf,
    pub policy: RoutingPolicy,
    pub backends: Vec<BackendConfig>,
    #[serde(default = "default_task_kind")]
    pub default_task_kind: TaskKind,
    #[serde(default)]
    pub count_l1_in_total: bool,
    #[serde(default = "default_overhead")]
    pub router_overhead_latency: f64,
    /// One JSON line per request.
    #[serde(default)]
    pub audit_log: Option<PathBuf>,
    /// Ledger summary and records are written here on shutdown.
    #[serde(default)]
    pub ledger_path: Option<PathBuf>,
}

fn default_task_kind() -> TaskKind {
    TaskKind::Convergent
}

fn default_overhead() -> f64 {
    REFERENCE_ROUTER_OVERHEAD
}

impl GatewayConfig {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(vec![format!("{}: {e}", path.display())]))?;
        let mut config: GatewayConfig =
            serde_json::from_str(&text).map_err(|e| GatewayError::Config(vec![format!("{}: {e}", path.display())]))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [Some(&mut config.estimator_path), config.audit_log.as_mut(), config.ledger_path.as_mut()]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// Collects every problem rather than stopping at the first.
    pub fn validate(&self) -> Result<(), GatewayError> {
        let mut problems = Vec::new();
        if self.listen.parse::<std::net::SocketAddr>().is_err() {
            problems.push(format!("listen address {:?} is not host:port", self.listen));
        }
        if let Err(e) = self.policy.validate() {
            problems.push(format!("policy: {e}"));
        }
        let l1 = self.backends.iter().filter(|b| b.tier == Tier::Layer1).count();
        let l2 = self.backends.iter().filter(|b| b.tier == Tier::Layer2).count();
        if l1 == 0 {
            problems.push("at least one layer1 backend is required".into());
        }
        if l2 != 1 {
            problems.push(format!("exactly one layer2 backend is required, found {l2}"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for b in &self.backends {
            if !seen.insert(&b.model_id) {
                problems.push(format!("duplicate model_id {}", b.model_id));
            }
            if !(b.timeout > 0.0 && b.timeout.is_finite()) {
                problems.push(format!("{}: timeout must be positive", b.model_id));
            }
            if !(b.unit_cost >= 0.0 && b.unit_cost.is_finite()) {
                problems.push(format!("{}: unit_cost must be finite and nonnegative", b.model_id));
            }
            if b.tier == Tier::Layer2 && b.unit_cost <= 0.0 {
                problems.push(format!("{}: layer2 unit_cost must be positive", b.model_id));
            }
            if b.mock.is_none() && url_is_invalid(&b.completions_url()) {
                problems.push(format!("{}: endpoint {:?} is not an http(s) URL", b.model_id, b.endpoint));
            }
            if let Some(var) = &b.api_key_env {
                if std::env::var(var).is_err() {
                    problems.push(format!("{}: environment variable {var} is not set", b.model_id));
                }
            }
        }
        if !(self.router_overhead_latency >= 0.0 && self.router_overhead_latency.is_finite()) {
            problems.push("router_overhead_latency must be finite and nonnegative".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(GatewayError::Config(problems))
        }
    }

    pub fn cost_model(&self) -> CostModel {
        let l1_unit_costs: BTreeMap<String, f64> = self
            .backends
            .iter()
            .filter(|b| b.tier == Tier::Layer1)
            .map(|b| (b.model_id.clone(), b.unit_cost))
            .collect();
        let l2_unit_cost = self
            .backends
            .iter()
            .find(|b| b.tier == Tier::Layer2)
            .map_or(1.0, |b| b.unit_cost);
        CostModel {
            l1_unit_costs,
            l1_default_unit_cost: None,
            l2_unit_cost,
            count_l1_in_total: self.count_l1_in_total,
            router_overhead_latency: self.router_overhead_latency,
            ..CostModel::default()
        }
    }
}

fn url_is_invalid(url: &str) -> bool {
    match reqwest::Url::parse(url) {
        Ok(u) => !matches!(u.scheme(), "http" | "https"),
        Err(_) => true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backend(id: &str, tier: Tier) -> BackendConfig {
        BackendConfig {
            model_id: id.into(),
            endpoint: "http://127.0.0.1:9/".into(),
            tier,
            timeout: 1.0,
            unit_cost: 1.0,
            preamble: default_preamble(),
            api_key_env: None,
            mock: None,
        }
    }

    fn config() -> GatewayConfig {
        GatewayConfig {
            listen: "127.0.0.1:0".into(),
            estimator_path: "est.json".into(),
            policy: RoutingPolicy::default(),
            backends: vec![backend("a", Tier::Layer1), backend("o", Tier::Layer2)],
            default_task_kind: TaskKind::Convergent,
            count_l1_in_total: false,
            router_overhead_latency: 0.82,
            audit_log: None,
            ledger_path: None,
        }
    }

    #[test]
    fn completions_url_forms() {
        let mut b = backend("a", Tier::Layer1);
        assert_eq!(b.completions_url(), "http://127.0.0.1:9/v1/chat/completions");
        b.endpoint = "http://h/v1".into();
        assert_eq!(b.completions_url(), "http://h/v1/chat/completions");
        b.endpoint = "http://h/custom/chat/completions".into();
        assert_eq!(b.completions_url(), "http://h/custom/chat/completions");
    }

    #[test]
    fn preamble_carries_confidence_instruction() {
        assert!(default_preamble().contains("Confidence: N%"));
    }

    #[test]
    fn validation_collects_problems() {
        assert!(config().validate().is_ok());
        let mut c = config();
        c.backends.push(backend("o2", Tier::Layer2));
        c.backends[0].timeout = 0.0;
        c.listen = "nowhere".into();
        let Err(GatewayError::Config(problems)) = c.validate() else {
            panic!("expected config errors");
        };
        assert_eq!(problems.len(), 3, "{problems:?}");
    }

    #[test]
    fn cost_model_from_backends() {
        let cm = config().cost_model();
        assert_eq!(cm.l1_unit_cost("a").unwrap(), 1.0);
        assert_eq!(cm.l2_unit_cost, 1.0);
        assert!(cm.l1_unit_cost("zzz").is_err());
    }
}
