use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Coarse classification of a tool's return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeClass {
    Success,
    Failure,
    Empty,
}

impl OutcomeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeClass::Success => "success",
            OutcomeClass::Failure => "failure",
            OutcomeClass::Empty => "empty",
        }
    }
}

impl fmt::Display for OutcomeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OutcomeClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "success" => Ok(OutcomeClass::Success),
            "failure" => Ok(OutcomeClass::Failure),
            "empty" => Ok(OutcomeClass::Empty),
            other => Err(format!("unknown outcome class `{other}`")),
        }
    }
}

/// Fingerprint of an argument map: the sorted field names, never the values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct ArgShape(String);

impl ArgShape {
    pub fn of(args: &BTreeMap<String, String>) -> Self {
        // BTreeMap keys are already sorted.
        ArgShape(args.keys().cloned().collect::<Vec<_>>().join("+"))
    }

    pub fn fields(&self) -> impl Iterator<Item = &str> {
        self.0.split('+').filter(|f| !f.is_empty())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Value-independent identity of a tool event: tool name, outcome class, argument shape.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventSignature {
    pub tool: String,
    pub outcome: OutcomeClass,
    pub arg_shape: ArgShape,
}

impl EventSignature {
    pub fn new(tool: impl Into<String>, outcome: OutcomeClass, args: &BTreeMap<String, String>) -> Self {
        Self {
            tool: tool.into(),
            outcome,
            arg_shape: ArgShape::of(args),
        }
    }

    /// Signature with an explicit shape, for callers that only know field names.
    pub fn with_fields<'a>(
        tool: impl Into<String>,
        outcome: OutcomeClass,
        fields: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        let mut names: Vec<&str> = fields.into_iter().collect();
        names.sort_unstable();
        names.dedup();
        Self {
            tool: tool.into(),
            outcome,
            arg_shape: ArgShape(names.join("+")),
        }
    }
}

/// Renders as `tool/outcome/shape`, e.g. `edit/success/path`.
impl fmt::Display for EventSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.tool, self.outcome, self.arg_shape.0)
    }
}

impl FromStr for EventSignature {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.splitn(3, '/');
        let tool = parts.next().filter(|t| !t.is_empty());
        let outcome = parts.next();
        let shape = parts.next();
        match (tool, outcome, shape) {
            (Some(tool), Some(outcome), Some(shape)) => Ok(EventSignature {
                tool: tool.to_string(),
                outcome: outcome.parse()?,
                arg_shape: ArgShape(shape.to_string()),
            }),
            _ => Err(format!("malformed signature `{s}`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn shape_ignores_values() {
        let a = EventSignature::new("grep", OutcomeClass::Success, &args(&[("pattern", "foo"), ("path", "a")]));
        let b = EventSignature::new("grep", OutcomeClass::Success, &args(&[("path", "zzz"), ("pattern", "bar")]));
        assert_eq!(a, b);
        assert_eq!(a.to_string(), "grep/success/path+pattern");
    }

    #[test]
    fn display_round_trips() {
        let s = EventSignature::with_fields("pytest", OutcomeClass::Failure, ["cmd"]);
        assert_eq!(s.to_string().parse::<EventSignature>().unwrap(), s);
        let empty = EventSignature::with_fields("noop", OutcomeClass::Empty, []);
        assert_eq!(empty.to_string().parse::<EventSignature>().unwrap(), empty);
    }
}
