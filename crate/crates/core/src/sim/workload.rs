use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution as _, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypothesis::{SafetyLevel, ToolProfile};
use crate::{Catalog, Ms, Profile};

/// Motif state a session starts from.
pub const START: &str = "start";
/// Motif target that restarts the motif walk from [`START`].
pub const END: &str = "end";

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("workload file: {0}")]
    Toml(toml::de::Error),
    #[error("workload: {0}")]
    Invalid(String),
}

/// Latency, gap and length distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distribution {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
    /// Log-normal parameterized by its median and log-space sigma.
    Lognormal { median: f64, sigma: f64 },
}

impl Distribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Distribution::Constant { value } => value,
            Distribution::Uniform { low, high } => {
                if high > low {
                    rng.random_range(low..high)
                } else {
                    low
                }
            }
            Distribution::Lognormal { median, sigma } => LogNormal::new(median.ln(), sigma)
                .expect("validated parameters")
                .sample(rng),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Distribution::Constant { value } => value,
            Distribution::Uniform { low, high } => (low + high) / 2.0,
            Distribution::Lognormal { median, sigma } => median * (sigma * sigma / 2.0).exp(),
        }
    }

    fn validate(&self, what: &str) -> Result<(), WorkloadError> {
        let ok = match *self {
            Distribution::Constant { value } => value.is_finite() && value >= 0.0,
            Distribution::Uniform { low, high } => low.is_finite() && high.is_finite() && 0.0 <= low && low <= high,
            Distribution::Lognormal { median, sigma } => {
                median.is_finite() && median > 0.0 && sigma.is_finite() && sigma >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(WorkloadError::Invalid(format!("{what}: bad distribution {self:?}")))
        }
    }
}

/// Per-tool properties of the simulated environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolSpec {
    #[serde(default)]
    pub warmup: Ms,
    pub rho: Profile,
    pub safety: SafetyLevel,
    /// Argument template over the previous result, with `{x}` as the hole.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default)]
    pub fail_rate: f64,
}

/// Synthetic agent workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    /// Transition probabilities between tools; [`START`] is the initial
    /// state and [`END`] restarts the walk.
    pub motif_library: BTreeMap<String, BTreeMap<String, f64>>,
    /// Work time per tool, excluding warm-up.
    pub tool_latency: BTreeMap<String, Distribution>,
    pub reasoning_gap: Distribution,
    /// Number of tool calls per session (rounded, at least 1).
    pub session_length: Distribution,
    /// Probability a call's argument is fresh rather than derived from the
    /// previous result.
    pub binding_noise: f64,
    pub seed: u64,
    pub tools: BTreeMap<String, ToolSpec>,
}

impl WorkloadSpec {
    pub fn from_toml(text: &str) -> Result<Self, WorkloadError> {
        let w: WorkloadSpec = toml::from_str(text).map_err(WorkloadError::Toml)?;
        w.validate()?;
        Ok(w)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("workload serializes")
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::Invalid(m));
        if !self.motif_library.contains_key(START) {
            return bad(format!("motif_library needs a `{START}` state"));
        }
        for (from, row) in &self.motif_library {
            if from != START && !self.tools.contains_key(from) {
                return bad(format!("motif_library state `{from}` is not a tool"));
            }
            let total: f64 = row.values().sum();
            if row.is_empty() || (total - 1.0).abs() > 1e-6 || row.values().any(|p| *p < 0.0 || p.is_nan()) {
                return bad(format!("motif_library.{from}: probabilities must be nonnegative and sum to 1"));
            }
            for to in row.keys() {
                if to != END && !self.tools.contains_key(to) {
                    return bad(format!("motif_library.{from}: unknown tool `{to}`"));
                }
            }
        }
        for (name, spec) in &self.tools {
            let Some(d) = self.tool_latency.get(name) else {
                return bad(format!("tool_latency missing `{name}`"));
            };
            d.validate(&format!("tool_latency.{name}"))?;
            if !(spec.warmup >= 0.0 && spec.warmup.is_finite()) {
                return bad(format!("tools.{name}.warmup must be nonnegative"));
            }
            if !(0.0..=1.0).contains(&spec.fail_rate) {
                return bad(format!("tools.{name}.fail_rate must be in [0, 1]"));
            }
        }
        self.reasoning_gap.validate("reasoning_gap")?;
        self.session_length.validate("session_length")?;
        if !(0.0..=1.0).contains(&self.binding_noise) {
            return bad("binding_noise must be in [0, 1]".into());
        }
        Ok(())
    }

    /// Scheduler-side estimates: mean work, warm-up, demand and safety.
    pub fn catalog(&self) -> Catalog {
        let mut c = Catalog::new();
        for (name, spec) in &self.tools {
            c.insert(
                name.clone(),
                ToolProfile {
                    latency_est: self.tool_latency[name].mean(),
                    warmup_est: spec.warmup,
                    rho: spec.rho,
                    safety: spec.safety,
                },
            );
        }
        c
    }
}
