use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypothesis::SafetyLevel;
use crate::resource::Dim;
use crate::scoring::InterferenceConfig;
use crate::{Interference, Profile};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy file: {0}")]
    Toml(toml::de::Error),
    #[error("policy field `{field}`: {message}")]
    Field { field: &'static str, message: String },
}

fn field(field: &'static str, message: impl Into<String>) -> PolicyError {
    PolicyError::Field {
        field,
        message: message.into(),
    }
}

/// Operator-defined speculation policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    #[serde(rename = "beam_K")]
    pub beam_k: usize,
    #[serde(rename = "budget_B")]
    pub budget_b: Profile,
    pub lambda: f64,
    pub mu: f64,
    pub horizon_h: usize,
    pub fanout_limit: usize,
    /// Highest safety level speculation may reach per tool. Tools not listed
    /// are capped at `level1_readonly`.
    #[serde(default)]
    pub max_safety: BTreeMap<String, SafetyLevel>,
    pub preempt_cost_eps: f64,
    pub binding_threshold: f64,
    /// Device totals that authoritative and speculative demand share.
    pub capacity: Profile,
    pub interference: InterferenceConfig,
}

impl Policy {
    pub fn from_toml(text: &str) -> Result<Self, PolicyError> {
        let p: Policy = toml::from_str(text).map_err(PolicyError::Toml)?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("policy serializes")
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.beam_k == 0 {
            return Err(field("beam_K", "must be at least 1"));
        }
        for d in Dim::ALL {
            if self.budget_b.get(d) > self.capacity.get(d) {
                return Err(field(
                    "budget_B",
                    format!("{} exceeds capacity {}", d.name(), self.capacity.get(d)),
                ));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(field("lambda", "must be finite and nonnegative"));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(field("mu", "must be finite and nonnegative"));
        }
        if self.horizon_h == 0 {
            return Err(field("horizon_h", "must be at least 1"));
        }
        if !(self.preempt_cost_eps >= 0.0 && self.preempt_cost_eps.is_finite()) {
            return Err(field("preempt_cost_eps", "must be finite and nonnegative"));
        }
        if !(self.binding_threshold > 0.0 && self.binding_threshold <= 1.0) {
            return Err(field("binding_threshold", "must be in (0, 1]"));
        }
        self.interference
            .to_model::<f64>()
            .map_err(|m| field("interference", m))?;
        Ok(())
    }

    pub fn max_safety_for(&self, tool: &str) -> SafetyLevel {
        self.max_safety
            .get(tool)
            .copied()
            .unwrap_or(SafetyLevel::Level1Readonly)
    }

    /// Whether speculation may run a node of this level for `tool`. A tool
    /// capped at `non_speculative` still allows its preparation node.
    pub fn allows(&self, tool: &str, level: SafetyLevel) -> bool {
        match self.max_safety_for(tool) {
            SafetyLevel::NonSpeculative => level == SafetyLevel::Level0Prep,
            cap => level != SafetyLevel::NonSpeculative && level <= cap,
        }
    }

    pub fn interference_model(&self) -> Interference {
        self.interference
            .to_model()
            .expect("validated at load time")
    }

    pub fn speculation_disabled(&self) -> bool {
        self.budget_b.is_zero()
    }
}
