//! Layer-to-rule assignment: selectors, presets, the JSON config file and
//! resolution against a concrete model.

use std::fmt;
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{LrpError, Rule};
use crate::model::{LayerKind, Model};

pub const DEFAULT_EPSILON: f64 = 1e-2;
pub const DEFAULT_ALPHA: f64 = 1.0;

/// How many convolution/pooling layers, counted from the input, get the flat rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlatDepth {
    Layers(usize),
    All,
}

impl fmt::Display for FlatDepth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlatDepth::Layers(n) => write!(f, "{n}"),
            FlatDepth::All => f.write_str("all"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Selector {
    /// Layer indices `first..=last`.
    ByIndexRange(usize, usize),
    ByType(LayerKind),
    /// The first `n` convolution/pooling layers, skipping ReLU and everything else.
    ConvStackPrefix(FlatDepth),
    Default,
}

impl Selector {
    fn matches(&self, index: usize, kind: LayerKind, conv_rank: Option<usize>) -> bool {
        match *self {
            Selector::ByIndexRange(a, b) => (a..=b).contains(&index),
            Selector::ByType(k) => k == kind,
            Selector::ConvStackPrefix(FlatDepth::All) => conv_rank.is_some(),
            Selector::ConvStackPrefix(FlatDepth::Layers(n)) => conv_rank.is_some_and(|r| r < n),
            Selector::Default => true,
        }
    }
}

/// An ordered, first-match-wins list of `(selector, rule)` assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeConfig {
    assignments: Vec<(Selector, Rule)>,
}

impl CompositeConfig {
    /// Validates every rule's parameters and requires a `Default` selector.
    pub fn new(assignments: Vec<(Selector, Rule)>) -> Result<Self, LrpError> {
        for (_, rule) in &assignments {
            rule.validate()?;
        }
        if !assignments.iter().any(|(s, _)| *s == Selector::Default) {
            return Err(LrpError::InvalidConfig(
                "assignment list needs a default selector".into(),
            ));
        }
        Ok(Self { assignments })
    }

    pub fn assignments(&self) -> &[(Selector, Rule)] {
        &self.assignments
    }

    /// Z everywhere.
    pub fn uniform_z() -> Self {
        Self::uniform(Rule::Z).unwrap()
    }

    pub fn uniform(rule: Rule) -> Result<Self, LrpError> {
        Self::new(vec![(Selector::Default, rule)])
    }

    /// ε on dense layers, αβ on the convolutional stack, flat on the first
    /// `flat` conv/pool layers.
    pub fn cmp(alpha: f64, flat: FlatDepth) -> Result<Self, LrpError> {
        Self::cmp_with_epsilon(alpha, DEFAULT_EPSILON, flat)
    }

    pub fn cmp_with_epsilon(alpha: f64, epsilon: f64, flat: FlatDepth) -> Result<Self, LrpError> {
        let mut a = Vec::new();
        if flat != FlatDepth::Layers(0) {
            a.push((Selector::ConvStackPrefix(flat), Rule::Flat));
        }
        a.push((Selector::ByType(LayerKind::Dense), Rule::Epsilon { epsilon }));
        a.push((Selector::Default, Rule::AlphaBeta { alpha }));
        Self::new(a)
    }

    /// Puts `assignment` ahead of every existing one.
    pub fn prepend(mut self, selector: Selector, rule: Rule) -> Result<Self, LrpError> {
        rule.validate()?;
        self.assignments.insert(0, (selector, rule));
        Ok(self)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, LrpError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| LrpError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Parses the composite config JSON document.
    pub fn from_json(text: &str) -> Result<Self, LrpError> {
        let file: ConfigFile =
            serde_json::from_str(text).map_err(|e| LrpError::InvalidConfig(e.to_string()))?;
        file.into_config()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    preset: String,
    #[serde(default)]
    alpha: Option<f64>,
    #[serde(default)]
    epsilon: Option<f64>,
    #[serde(default)]
    flat_n: Option<Value>,
    #[serde(default)]
    zb: Option<ZbBounds>,
    #[serde(default)]
    overrides: Vec<Override>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ZbBounds {
    low: f64,
    high: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Override {
    selector: Value,
    rule: String,
    #[serde(default)]
    params: serde_json::Map<String, Value>,
}

impl ConfigFile {
    fn into_config(self) -> Result<CompositeConfig, LrpError> {
        let alpha = self.alpha.unwrap_or(DEFAULT_ALPHA);
        let epsilon = self.epsilon.unwrap_or(DEFAULT_EPSILON);
        let flat = match &self.flat_n {
            None => FlatDepth::Layers(0),
            Some(Value::String(s)) if s == "all" => FlatDepth::All,
            Some(Value::Number(n)) => FlatDepth::Layers(n.as_u64().ok_or_else(|| {
                LrpError::InvalidConfig(format!("flat_n must be a non-negative integer, got {n}"))
            })? as usize),
            Some(v) => {
                return Err(LrpError::InvalidConfig(format!(
                    "flat_n must be an integer or \"all\", got {v}"
                )))
            }
        };
        let mut assignments = Vec::new();
        for o in &self.overrides {
            assignments.push((parse_selector(&o.selector)?, parse_rule(&o.rule, &o.params)?));
        }
        if let Some(zb) = &self.zb {
            assignments.push((
                Selector::ByIndexRange(0, 0),
                Rule::ZB {
                    low: zb.low,
                    high: zb.high,
                },
            ));
        }
        if flat != FlatDepth::Layers(0) {
            assignments.push((Selector::ConvStackPrefix(flat), Rule::Flat));
        }
        match self.preset.as_str() {
            "z" => assignments.push((Selector::Default, Rule::Z)),
            "epsilon" => assignments.push((Selector::Default, Rule::Epsilon { epsilon })),
            "alphabeta" => assignments.push((Selector::Default, Rule::AlphaBeta { alpha })),
            "cmp" => {
                assignments.push((Selector::ByType(LayerKind::Dense), Rule::Epsilon { epsilon }));
                assignments.push((Selector::Default, Rule::AlphaBeta { alpha }));
            }
            other => {
                return Err(LrpError::InvalidConfig(format!(
                    "unknown preset `{other}` (expected z, epsilon, alphabeta or cmp)"
                )))
            }
        }
        CompositeConfig::new(assignments)
    }
}

fn parse_selector(v: &Value) -> Result<Selector, LrpError> {
    let bad = || LrpError::InvalidConfig(format!("unrecognised selector {v}"));
    if v.as_str() == Some("default") {
        return Ok(Selector::Default);
    }
    let obj = v.as_object().ok_or_else(bad)?;
    if obj.len() != 1 {
        return Err(bad());
    }
    if let Some(t) = obj.get("type") {
        let name = t.as_str().ok_or_else(bad)?;
        return LayerKind::parse(name)
            .map(Selector::ByType)
            .ok_or_else(|| LrpError::InvalidConfig(format!("unknown layer type `{name}` in selector")));
    }
    if let Some(r) = obj.get("range") {
        let pair: [usize; 2] = serde_json::from_value(r.clone()).map_err(|_| bad())?;
        if pair[0] > pair[1] {
            return Err(LrpError::InvalidConfig(format!(
                "selector range {pair:?} is empty"
            )));
        }
        return Ok(Selector::ByIndexRange(pair[0], pair[1]));
    }
    if obj.contains_key("default") {
        return Ok(Selector::Default);
    }
    Err(bad())
}

fn parse_rule(name: &str, params: &serde_json::Map<String, Value>) -> Result<Rule, LrpError> {
    let num = |key: &str, default: Option<f64>| -> Result<f64, LrpError> {
        match params.get(key) {
            Some(v) => v
                .as_f64()
                .ok_or_else(|| LrpError::InvalidConfig(format!("parameter `{key}` must be a number"))),
            None => default.ok_or_else(|| {
                LrpError::InvalidConfig(format!("rule `{name}` needs parameter `{key}`"))
            }),
        }
    };
    let rule = match name {
        "z" => Rule::Z,
        "epsilon" => Rule::Epsilon {
            epsilon: num("epsilon", Some(DEFAULT_EPSILON))?,
        },
        "alphabeta" => Rule::AlphaBeta {
            alpha: num("alpha", Some(DEFAULT_ALPHA))?,
        },
        "flat" => Rule::Flat,
        "zb" => Rule::ZB {
            low: num("low", Some(0.0))?,
            high: num("high", Some(1.0))?,
        },
        "wta" => Rule::WinnerTakeAll,
        "identity" => Rule::Identity,
        other => return Err(LrpError::InvalidConfig(format!("unknown rule `{other}`"))),
    };
    rule.validate()?;
    Ok(rule)
}

/// One effective rule per layer of a specific model.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRules {
    rules: Vec<Rule>,
    model_checksum: u32,
}

impl ResolvedRules {
    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn pairs(&self) -> Vec<(usize, Rule)> {
        self.rules.iter().copied().enumerate().collect()
    }

    /// Canonical text of the resolved assignment for one target class.
    pub fn canonical(&self, class_index: usize) -> String {
        let rules: Vec<String> = self
            .rules
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{i}:{r}"))
            .collect();
        format!(
            "model={:08x};class={class_index};rules=[{}]",
            self.model_checksum,
            rules.join(";")
        )
    }

    /// SHA-256 hex of [`ResolvedRules::canonical`].
    pub fn digest(&self, class_index: usize) -> String {
        hex::encode(Sha256::digest(self.canonical(class_index).as_bytes()))
    }
}

/// Resolves `config` against `model`, first match wins.
///
/// ReLU and flatten always pass relevance through unchanged. Max pooling
/// turns every proportional rule into winner-take-all; average pooling
/// treats winner-take-all as the z-rule.
pub fn resolve_rules(model: &Model, config: &CompositeConfig) -> Result<ResolvedRules, LrpError> {
    let mut conv_rank = 0usize;
    let mut rules = Vec::with_capacity(model.layers().len());
    for (index, layer) in model.layers().iter().enumerate() {
        let kind = layer.kind();
        let rank = kind.is_conv_stack().then(|| {
            conv_rank += 1;
            conv_rank - 1
        });
        if matches!(kind, LayerKind::Relu | LayerKind::Flatten) {
            rules.push(Rule::Identity);
            continue;
        }
        let rule = config
            .assignments
            .iter()
            .find(|(s, _)| s.matches(index, kind, rank))
            .map(|(_, r)| *r)
            .ok_or_else(|| LrpError::InvalidAssignment {
                layer: index,
                reason: "no selector matches".into(),
            })?;
        let invalid = |reason: String| LrpError::InvalidAssignment { layer: index, reason };
        let effective = match (kind, rule) {
            (_, Rule::ZB { .. }) if index != 0 => {
                return Err(invalid("zb is only valid on the first layer".into()))
            }
            (LayerKind::Dense, Rule::Flat) => {
                return Err(invalid("flat cannot decompose a dense layer".into()))
            }
            (LayerKind::Dense | LayerKind::Conv2d, Rule::WinnerTakeAll | Rule::Identity) => {
                return Err(invalid(format!("{rule} cannot decompose a {kind} layer")))
            }
            (LayerKind::Maxpool2d | LayerKind::Avgpool2d, Rule::ZB { .. } | Rule::Identity) => {
                return Err(invalid(format!("{rule} cannot decompose a {kind} layer")))
            }
            (LayerKind::Maxpool2d, Rule::Z | Rule::Epsilon { .. } | Rule::AlphaBeta { .. }) => {
                Rule::WinnerTakeAll
            }
            (LayerKind::Avgpool2d, Rule::WinnerTakeAll) => Rule::Z,
            (_, r) => r,
        };
        rules.push(effective);
    }
    Ok(ResolvedRules {
        rules,
        model_checksum: model.checksum(),
    })
}
