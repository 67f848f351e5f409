use std::collections::BTreeMap;

use crate::resource::ResourceProfile;
use crate::scalar::Scalar;

use super::SafetyLevel;

/// What the runtime knows about a tool ahead of time.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolProfile<S: Scalar> {
    /// Expected execution time once warm.
    pub latency_est: S,
    /// Expected warm-up time; zero for tools without a preparation step.
    pub warmup_est: S,
    pub rho: ResourceProfile<S>,
    pub safety: SafetyLevel,
}

impl<S: Scalar> ToolProfile<S> {
    /// Cold-start latency: warm-up plus execution.
    pub fn total_latency(&self) -> S {
        self.warmup_est + self.latency_est
    }

    fn unknown() -> Self {
        Self {
            latency_est: S::zero(),
            warmup_est: S::zero(),
            rho: ResourceProfile::zero(),
            safety: SafetyLevel::NonSpeculative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ToolCatalog<S: Scalar> {
    tools: BTreeMap<String, ToolProfile<S>>,
}

impl<S: Scalar> ToolCatalog<S> {
    pub fn new() -> Self {
        Self {
            tools: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, profile: ToolProfile<S>) {
        self.tools.insert(name.into(), profile);
    }

    pub fn with(mut self, name: impl Into<String>, profile: ToolProfile<S>) -> Self {
        self.insert(name, profile);
        self
    }

    /// Unknown tools are treated as non-speculative with no cost estimate.
    pub fn profile(&self, name: &str) -> ToolProfile<S> {
        self.tools.get(name).cloned().unwrap_or_else(ToolProfile::unknown)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ToolProfile<S>)> {
        self.tools.iter()
    }
}
