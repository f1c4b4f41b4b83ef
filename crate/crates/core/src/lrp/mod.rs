//! Layer-wise relevance propagation with per-layer rule assignment.
//!
//! [`attribute`] runs one forward pass, seeds the output relevance with the
//! selected logit and walks the layers from output to input, applying the
//! rule that [`resolve_rules`] picked for each one.

mod composite;
mod rules;

use thiserror::Error;

pub use composite::{
    resolve_rules, CompositeConfig, FlatDepth, ResolvedRules, Selector, DEFAULT_ALPHA,
    DEFAULT_EPSILON,
};
pub use rules::{
    decompose, decompose_alphabeta, decompose_epsilon, decompose_flat, decompose_pool,
    decompose_z, decompose_zb, DecompositionContext, Rule,
};

use crate::model::{ForwardTrace, LayerKind, Model, ModelError};
use crate::numerics::{Tensor, TensorError};
use crate::render::Heatmap2D;

#[derive(Debug, Error)]
pub enum LrpError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("alpha must be >= 1, got {0}")]
    InvalidAlpha(f64),
    #[error("rule `{rule}` cannot decompose layer {layer} ({kind})")]
    UnsupportedLayer {
        layer: usize,
        kind: LayerKind,
        rule: &'static str,
    },
    #[error("zb rule applied to layer {0}, but it is only valid on the first layer")]
    NotFirstLayer(usize),
    #[error("bounds violation: {0}")]
    BoundsViolation(String),
    #[error("class index {index} out of range for {len} outputs")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid assignment at layer {layer}: {reason}")]
    InvalidAssignment { layer: usize, reason: String },
    #[error("invalid composite config: {0}")]
    InvalidConfig(String),
    #[error("non-finite relevance after layer {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Input-layer relevance for one target class.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub relevance: Tensor,
    pub class_index: usize,
    pub output_logit: f64,
    pub config_digest: String,
}

/// Full record of one backward pass.
#[derive(Debug, Clone)]
pub struct Explanation {
    pub trace: ForwardTrace,
    /// `relevance[i]` is the relevance at the input of layer `i`; the last
    /// entry is the seeded output relevance.
    pub relevance: Vec<Tensor>,
}

/// Output relevance: the selected logit at `class_index`, zero elsewhere.
pub fn init_output_relevance(trace: &ForwardTrace, class_index: usize) -> Result<Tensor, LrpError> {
    let logits = trace.logits();
    if class_index >= logits.len() {
        return Err(LrpError::IndexOutOfRange {
            index: class_index,
            len: logits.len(),
        });
    }
    let mut r = Tensor::zeros(&[logits.len()]);
    r.data_mut()[class_index] = logits[class_index];
    Ok(r)
}

/// A model paired with its resolved rules, reusable across inputs.
#[derive(Debug, Clone)]
pub struct Analyzer<'m> {
    model: &'m Model,
    rules: ResolvedRules,
}

impl<'m> Analyzer<'m> {
    pub fn new(model: &'m Model, config: &CompositeConfig) -> Result<Self, LrpError> {
        Ok(Self {
            model,
            rules: resolve_rules(model, config)?,
        })
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn rules(&self) -> &ResolvedRules {
        &self.rules
    }

    pub fn explain(&self, input: &Tensor, class_index: usize) -> Result<Explanation, LrpError> {
        let trace = self.model.forward(input)?;
        self.explain_trace(trace, class_index)
    }

    /// Backward pass over an existing trace of this model.
    pub fn explain_trace(&self, trace: ForwardTrace, class_index: usize) -> Result<Explanation, LrpError> {
        let layers = self.model.layers();
        let mut relevance = vec![init_output_relevance(&trace, class_index)?];
        for (i, layer) in layers.iter().enumerate().rev() {
            let ctx = DecompositionContext::new(layer, i, trace.input(i), trace.output(i));
            let lower = decompose(&ctx, relevance.last().unwrap(), self.rules.rules()[i])?;
            if lower.check_finite().is_err() {
                return Err(LrpError::NonFinite(i));
            }
            relevance.push(lower);
        }
        relevance.reverse();
        Ok(Explanation { trace, relevance })
    }

    pub fn attribute(&self, input: &Tensor, class_index: usize) -> Result<AttributionMap, LrpError> {
        let explanation = self.explain(input, class_index)?;
        let output_logit = explanation.trace.logit(class_index)?;
        Ok(AttributionMap {
            relevance: explanation.relevance.into_iter().next().unwrap(),
            class_index,
            output_logit,
            config_digest: self.rules.digest(class_index),
        })
    }
}

/// Forward pass, output seeding and the composite backward pass in one call.
pub fn attribute(
    model: &Model,
    input: &Tensor,
    class_index: usize,
    config: &CompositeConfig,
) -> Result<AttributionMap, LrpError> {
    Analyzer::new(model, config)?.attribute(input, class_index)
}

/// Order of channel pooling and positive-part clamping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum PoolOrder {
    /// Sum channels first; signs may cancel.
    #[default]
    SumThenPositive,
    /// Clamp every channel at zero, then sum.
    PositiveThenSum,
}

/// Sums a `(C, H, W)` relevance map over channels.
pub fn pool_channels(map: &AttributionMap) -> Heatmap2D {
    pool_channels_with(&map.relevance, PoolOrder::SumThenPositive)
}

pub fn pool_channels_with(relevance: &Tensor, order: PoolOrder) -> Heatmap2D {
    let s = relevance.shape();
    assert_eq!(s.len(), 3, "channel pooling needs a (C, H, W) map");
    let (c, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for ch in 0..c {
        for (o, &v) in out.iter_mut().zip(&relevance.data()[ch * plane..(ch + 1) * plane]) {
            *o += match order {
                PoolOrder::SumThenPositive => v,
                PoolOrder::PositiveThenSum => v.max(0.0),
            };
        }
    }
    Heatmap2D::new(h, w, out).expect("pooled map is finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, Padding};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn toy_conv_net() -> Model {
        let conv = |o: usize, i: usize| LayerSpec::Conv2d {
            kernels: Tensor::filled(&[o, i, 2, 2], 0.1),
            bias: Tensor::zeros(&[o]),
            stride: (1, 1),
            padding: Padding::NONE,
        };
        Model::new(
            [1, 6, 6],
            vec![
                conv(2, 1),
                LayerSpec::Relu,
                LayerSpec::MaxPool2d {
                    window: (2, 2),
                    stride: (1, 1),
                },
                conv(2, 2),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    weights: Tensor::filled(&[3, 18], 0.1),
                    bias: Tensor::zeros(&[3]),
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    weights: Tensor::filled(&[2, 3], 0.1),
                    bias: Tensor::zeros(&[2]),
                },
            ],
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    #[test]
    fn output_seeding() {
        let m = Model::new(
            [1, 1, 1],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    weights: Tensor::zeros(&[2, 1]),
                    bias: t(&[2], &[1.5, -0.4]),
                },
            ],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let trace = m.forward(&t(&[1, 1, 1], &[0.0])).unwrap();
        assert_eq!(init_output_relevance(&trace, 0).unwrap().data(), &[1.5, 0.0]);
        assert_eq!(init_output_relevance(&trace, 1).unwrap().data(), &[0.0, -0.4]);
        assert!(matches!(
            init_output_relevance(&trace, 7),
            Err(LrpError::IndexOutOfRange { index: 7, len: 2 })
        ));
    }

    #[test]
    fn cmp_preset_without_flat() {
        let m = toy_conv_net();
        let r = resolve_rules(&m, &CompositeConfig::cmp(1.0, FlatDepth::Layers(0)).unwrap()).unwrap();
        let ab = Rule::AlphaBeta { alpha: 1.0 };
        let eps = Rule::Epsilon { epsilon: 1e-2 };
        use Rule::{Identity as Id, WinnerTakeAll as Wta};
        assert_eq!(r.rules(), &[ab, Id, Wta, ab, Id, Id, eps, Id, eps]);
    }

    #[test]
    fn cmp_preset_with_flat() {
        let m = toy_conv_net();
        let r = resolve_rules(&m, &CompositeConfig::cmp(2.0, FlatDepth::Layers(3)).unwrap()).unwrap();
        let eps = Rule::Epsilon { epsilon: 1e-2 };
        use Rule::{Flat, Identity as Id};
        assert_eq!(r.rules(), &[Flat, Id, Flat, Flat, Id, Id, eps, Id, eps]);
        let r1 = resolve_rules(&m, &CompositeConfig::cmp(2.0, FlatDepth::Layers(1)).unwrap()).unwrap();
        let ab2 = Rule::AlphaBeta { alpha: 2.0 };
        assert_eq!(
            r1.rules(),
            &[Flat, Id, Rule::WinnerTakeAll, ab2, Id, Id, eps, Id, eps]
        );
        let all = resolve_rules(&m, &CompositeConfig::cmp(1.0, FlatDepth::All).unwrap()).unwrap();
        assert_eq!(all.rules(), r.rules());
    }

    #[test]
    fn flat_on_dense_is_rejected() {
        let m = toy_conv_net();
        let cfg = CompositeConfig::uniform_z()
            .prepend(Selector::ByIndexRange(6, 6), Rule::Flat)
            .unwrap();
        assert!(matches!(
            resolve_rules(&m, &cfg),
            Err(LrpError::InvalidAssignment { layer: 6, .. })
        ));
        let cfg = CompositeConfig::uniform(Rule::Flat).unwrap();
        assert!(matches!(
            resolve_rules(&m, &cfg),
            Err(LrpError::InvalidAssignment { layer: 6, .. })
        ));
    }

    #[test]
    fn zb_off_first_layer_is_rejected() {
        let m = toy_conv_net();
        let zb = Rule::ZB { low: 0.0, high: 1.0 };
        let ok = CompositeConfig::uniform_z()
            .prepend(Selector::ByIndexRange(0, 0), zb)
            .unwrap();
        assert_eq!(resolve_rules(&m, &ok).unwrap().rules()[0], zb);
        let bad = CompositeConfig::uniform_z()
            .prepend(Selector::ByType(LayerKind::Conv2d), zb)
            .unwrap();
        assert!(matches!(
            resolve_rules(&m, &bad),
            Err(LrpError::InvalidAssignment { layer: 3, .. })
        ));
    }

    #[test]
    fn config_requires_default() {
        assert!(matches!(
            CompositeConfig::new(vec![(Selector::ByType(LayerKind::Dense), Rule::Z)]),
            Err(LrpError::InvalidConfig(_))
        ));
        assert!(matches!(
            CompositeConfig::new(vec![(Selector::Default, Rule::AlphaBeta { alpha: 0.5 })]),
            Err(LrpError::InvalidAlpha(_))
        ));
    }

    #[test]
    fn config_file_matches_builder() {
        let m = toy_conv_net();
        let from_file = CompositeConfig::from_json(
            r#"{"preset": "cmp", "alpha": 2, "flat_n": 1, "zb": null, "overrides": []}"#,
        )
        .unwrap();
        let built = CompositeConfig::cmp(2.0, FlatDepth::Layers(1)).unwrap();
        assert_eq!(
            resolve_rules(&m, &from_file).unwrap(),
            resolve_rules(&m, &built).unwrap()
        );
        let all = CompositeConfig::from_json(r#"{"preset": "cmp", "flat_n": "all"}"#).unwrap();
        assert_eq!(
            resolve_rules(&m, &all).unwrap().rules()[3],
            Rule::Flat
        );
    }

    #[test]
    fn config_file_overrides_and_zb() {
        let m = toy_conv_net();
        let cfg = CompositeConfig::from_json(
            r#"{
                "preset": "z",
                "zb": {"low": 0, "high": 1},
                "overrides": [
                    {"selector": {"range": [3, 3]}, "rule": "flat"},
                    {"selector": {"type": "dense"}, "rule": "epsilon", "params": {"epsilon": 0.25}}
                ]
            }"#,
        )
        .unwrap();
        let r = resolve_rules(&m, &cfg).unwrap();
        assert_eq!(r.rules()[0], Rule::ZB { low: 0.0, high: 1.0 });
        assert_eq!(r.rules()[2], Rule::WinnerTakeAll);
        assert_eq!(r.rules()[3], Rule::Flat);
        assert_eq!(r.rules()[8], Rule::Epsilon { epsilon: 0.25 });
    }

    #[test]
    fn config_file_errors() {
        for bad in [
            r#"{"preset": "nope"}"#,
            r#"{"preset": "cmp", "alpha": 0.5}"#,
            r#"{"preset": "epsilon", "epsilon": 0}"#,
            r#"{"preset": "z", "flat_n": -1}"#,
            r#"{"preset": "z", "zb": {"low": 1, "high": 0}}"#,
            r#"{"preset": "z", "overrides": [{"selector": {"type": "lstm"}, "rule": "z"}]}"#,
            r#"{"preset": "z", "overrides": [{"selector": {"range": [0, 0]}, "rule": "magic"}]}"#,
            r#"{"preset": "z", "surprise": 1}"#,
        ] {
            assert!(CompositeConfig::from_json(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn digest_tracks_class_and_rules() {
        let m = toy_conv_net();
        let a = resolve_rules(&m, &CompositeConfig::cmp(1.0, FlatDepth::Layers(0)).unwrap()).unwrap();
        let b = resolve_rules(&m, &CompositeConfig::cmp(2.0, FlatDepth::Layers(0)).unwrap()).unwrap();
        assert_eq!(a.digest(0), a.digest(0));
        assert_ne!(a.digest(0), a.digest(1));
        assert_ne!(a.digest(0), b.digest(0));
        assert_eq!(a.digest(0).len(), 64);
    }

    #[test]
    fn zero_input_gives_zero_map() {
        let m = toy_conv_net();
        let x = Tensor::zeros(&[1, 6, 6]);
        for cfg in [
            CompositeConfig::uniform_z(),
            CompositeConfig::cmp(1.0, FlatDepth::Layers(0)).unwrap(),
            CompositeConfig::cmp(2.0, FlatDepth::Layers(1)).unwrap(),
        ] {
            let map = attribute(&m, &x, 0, &cfg).unwrap();
            assert!(map.relevance.data().iter().all(|&v| v == 0.0));
            assert_eq!(map.output_logit, 0.0);
        }
    }

    #[test]
    fn channel_pooling() {
        let map = AttributionMap {
            relevance: t(&[3, 1, 1], &[1.0, 2.0, -0.5]),
            class_index: 0,
            output_logit: 0.0,
            config_digest: String::new(),
        };
        assert_eq!(pool_channels(&map).values().data(), &[2.5]);
        let single = t(&[1, 2, 2], &[1.0, -2.0, 3.0, 0.0]);
        assert_eq!(
            pool_channels_with(&single, PoolOrder::SumThenPositive).values().data(),
            single.data()
        );
        let cancel = t(&[2, 1, 1], &[3.0, -3.0]);
        assert_eq!(pool_channels_with(&cancel, PoolOrder::SumThenPositive).values().data(), &[0.0]);
        assert_eq!(pool_channels_with(&cancel, PoolOrder::PositiveThenSum).values().data(), &[3.0]);
    }
}
