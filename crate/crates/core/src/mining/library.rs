use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{AgentTrace, EventSignature, ToolStep};

use super::binding::infer_bindings_in;
use super::{mine_streams, BindingFn, BindingSource, FieldPath, MiningError, PatternTuple, Transform};

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("pattern file: {0}")]
    Toml(toml::de::Error),
    #[error("pattern file: {0}")]
    Invalid(String),
}

/// Mean reasoning gap (previous tool return to next call), overall and keyed
/// by the signature of the tool that just returned.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapTable {
    pub global_mean: f64,
    #[serde(default)]
    pub after: BTreeMap<String, f64>,
}

impl GapTable {
    pub fn from_corpus(steps: &[Vec<ToolStep>]) -> Self {
        let mut total = (0.0, 0u64);
        let mut by_ctx: BTreeMap<String, (f64, u64)> = BTreeMap::new();
        for trace in steps {
            for pair in trace.windows(2) {
                let gap = pair[1].gap_before;
                total.0 += gap;
                total.1 += 1;
                let e = by_ctx.entry(pair[0].signature.to_string()).or_default();
                e.0 += gap;
                e.1 += 1;
            }
        }
        GapTable {
            global_mean: if total.1 == 0 { 0.0 } else { total.0 / total.1 as f64 },
            after: by_ctx
                .into_iter()
                .map(|(k, (s, n))| (k, s / n as f64))
                .collect(),
        }
    }

    /// Expected reasoning time after `last` returns.
    pub fn gap_after(&self, last: Option<&EventSignature>) -> f64 {
        last.and_then(|s| self.after.get(&s.to_string()))
            .copied()
            .unwrap_or(self.global_mean)
    }
}

/// Mined patterns plus the lookup structures the online side needs.
#[derive(Debug, Clone, Default)]
pub struct PatternLibrary {
    pub max_context_w: usize,
    pub min_support: u64,
    pub binding_threshold: f64,
    pub patterns: Vec<PatternTuple>,
    pub gaps: GapTable,
    index: HashMap<Vec<EventSignature>, Vec<usize>>,
}

impl PartialEq for PatternLibrary {
    fn eq(&self, other: &Self) -> bool {
        self.max_context_w == other.max_context_w
            && self.min_support == other.min_support
            && self.binding_threshold == other.binding_threshold
            && self.patterns == other.patterns
            && self.gaps == other.gaps
    }
}

impl PatternLibrary {
    pub fn new(
        max_context_w: usize,
        min_support: u64,
        binding_threshold: f64,
        patterns: Vec<PatternTuple>,
        gaps: GapTable,
    ) -> Self {
        let mut index: HashMap<Vec<EventSignature>, Vec<usize>> = HashMap::new();
        for (i, p) in patterns.iter().enumerate() {
            index.entry(p.context.clone()).or_default().push(i);
        }
        Self {
            max_context_w,
            min_support,
            binding_threshold,
            patterns,
            gaps,
            index,
        }
    }

    pub fn empty() -> Self {
        Self::new(1, 1, super::DEFAULT_BINDING_THRESHOLD, Vec::new(), GapTable::default())
    }

    /// Mines patterns, infers bindings for each, and collects gap statistics.
    pub fn build(
        corpus: &[AgentTrace],
        min_support: u64,
        max_context_w: usize,
        binding_threshold: f64,
    ) -> Result<Self, MiningError> {
        let mut patterns = super::mine_patterns(corpus, min_support, max_context_w)?;
        let steps: Vec<Vec<ToolStep>> = corpus.iter().map(AgentTrace::steps).collect();
        for p in &mut patterns {
            p.bindings = infer_bindings_in(&steps, p, binding_threshold);
        }
        let gaps = GapTable::from_corpus(&steps);
        Ok(Self::new(max_context_w, min_support, binding_threshold, patterns, gaps))
    }

    /// Builds from raw signature streams (no bindings, no gaps); used by tests.
    pub fn from_streams(streams: &[Vec<EventSignature>], min_support: u64, max_context_w: usize) -> Self {
        let patterns = mine_streams(streams, min_support, max_context_w);
        Self::new(max_context_w, min_support, super::DEFAULT_BINDING_THRESHOLD, patterns, GapTable::default())
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    /// Patterns predicting what follows `window` (oldest first). For each
    /// predicted signature only the pattern with the longest matching context
    /// is kept. Sorted by descending confidence, then predicted signature.
    pub fn successors(&self, window: &[EventSignature]) -> Vec<&PatternTuple> {
        let mut chosen: BTreeMap<&EventSignature, &PatternTuple> = BTreeMap::new();
        let longest = self.max_context_w.min(window.len());
        for w in (1..=longest).rev() {
            let Some(ids) = self.index.get(&window[window.len() - w..]) else {
                continue;
            };
            for &i in ids {
                let p = &self.patterns[i];
                chosen.entry(&p.predicted).or_insert(p);
            }
        }
        let mut out: Vec<&PatternTuple> = chosen.into_values().collect();
        out.sort_by(|a, b| {
            let (an, ad) = a.confidence_ratio();
            let (bn, bd) = b.confidence_ratio();
            // Exact comparison of an/ad against bn/bd.
            ((bn as u128) * (ad as u128))
                .cmp(&((an as u128) * (bd as u128)))
                .then_with(|| a.predicted.cmp(&b.predicted))
        });
        out
    }

    /// Renders the library in its stable text form.
    pub fn to_text(&self) -> String {
        let file = LibraryFile::from(self);
        toml::to_string(&file).expect("pattern library serializes")
    }

    pub fn from_text(text: &str) -> Result<Self, LibraryError> {
        let file: LibraryFile = toml::from_str(text).map_err(LibraryError::Toml)?;
        file.try_into()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LibraryFile {
    max_context_w: usize,
    min_support: u64,
    binding_threshold: f64,
    gaps: GapTable,
    #[serde(default)]
    pattern: Vec<PatternRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatternRecord {
    context: Vec<String>,
    predicted: String,
    support: u64,
    context_support: u64,
    distinct_next: u64,
    /// Informational; recomputed from the counts on load.
    confidence: f64,
    #[serde(default)]
    binding: Vec<BindingRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BindingRecord {
    arg: String,
    position: usize,
    field: String,
    transform: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    template: Option<String>,
}

impl From<&PatternLibrary> for LibraryFile {
    fn from(lib: &PatternLibrary) -> Self {
        LibraryFile {
            max_context_w: lib.max_context_w,
            min_support: lib.min_support,
            binding_threshold: lib.binding_threshold,
            gaps: lib.gaps.clone(),
            pattern: lib
                .patterns
                .iter()
                .map(|p| PatternRecord {
                    context: p.context.iter().map(ToString::to_string).collect(),
                    predicted: p.predicted.to_string(),
                    support: p.support,
                    context_support: p.context_support,
                    distinct_next: p.distinct_next,
                    confidence: p.confidence_p(),
                    binding: p
                        .bindings
                        .iter()
                        .map(|b| BindingRecord {
                            arg: b.arg.clone(),
                            position: b.source.position,
                            field: b.source.field.to_string(),
                            transform: b.transform.name().to_string(),
                            template: match &b.transform {
                                Transform::TemplateSubstitute(t) | Transform::Constant(t) => Some(t.clone()),
                                _ => None,
                            },
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<LibraryFile> for PatternLibrary {
    type Error = LibraryError;

    fn try_from(file: LibraryFile) -> Result<Self, Self::Error> {
        let invalid = LibraryError::Invalid;
        if !(1..=super::MAX_CONTEXT_W).contains(&file.max_context_w) {
            return Err(invalid(format!("max_context_w {} out of range", file.max_context_w)));
        }
        let mut patterns = Vec::with_capacity(file.pattern.len());
        for rec in file.pattern {
            let context = rec
                .context
                .iter()
                .map(|s| s.parse::<EventSignature>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(invalid)?;
            if context.is_empty() || context.len() > file.max_context_w {
                return Err(invalid(format!("context length {} out of range", context.len())));
            }
            let predicted = rec.predicted.parse::<EventSignature>().map_err(invalid)?;
            if rec.support == 0 || rec.support > rec.context_support || rec.distinct_next == 0 {
                return Err(invalid(format!("inconsistent counts for `{}`", rec.predicted)));
            }
            let mut bindings = Vec::with_capacity(rec.binding.len());
            for b in rec.binding {
                if b.position >= context.len() {
                    return Err(invalid(format!("binding position {} outside context", b.position)));
                }
                let transform = match (b.transform.as_str(), b.template) {
                    ("identity", None) => Transform::Identity,
                    ("field_extract", None) => Transform::FieldExtract,
                    ("template_substitute", Some(t)) => Transform::TemplateSubstitute(t),
                    ("constant", Some(t)) => Transform::Constant(t),
                    (other, _) => return Err(invalid(format!("bad transform `{other}`"))),
                };
                bindings.push(BindingFn {
                    arg: b.arg,
                    source: BindingSource {
                        position: b.position,
                        field: b.field.parse::<FieldPath>().map_err(invalid)?,
                    },
                    transform,
                });
            }
            patterns.push(PatternTuple {
                context,
                predicted,
                bindings,
                support: rec.support,
                context_support: rec.context_support,
                distinct_next: rec.distinct_next,
            });
        }
        Ok(PatternLibrary::new(
            file.max_context_w,
            file.min_support,
            file.binding_threshold,
            patterns,
            file.gaps,
        ))
    }
}
