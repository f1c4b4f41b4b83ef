//! Single-layer relevance decompositions.
//!
//! Each function redistributes the relevance `R_j` held by a layer's outputs
//! onto its inputs `i` according to the local contributions `z_ij`. All of
//! them run the layer's own linear kernels over transformed weights, so a
//! dense layer and a strided, padded convolution share the same code path.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::LrpError;
use crate::model::{LayerKind, LayerSpec};
use crate::numerics::{safe_fraction, stabilized_sign, Tensor};
use crate::ops::{self, Linear};

/// A decomposition rule with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum Rule {
    /// Proportional to `z_ij / z_j`.
    Z,
    /// `z_ij / (z_j + ε·sign(z_j))`.
    Epsilon { epsilon: f64 },
    /// Separate positive and negative decompositions, `β = 1 − α`.
    AlphaBeta { alpha: f64 },
    /// Uniform spread over the receptive field.
    Flat,
    /// Bounded-input rule for the first layer.
    #[serde(rename = "zb")]
    ZB { low: f64, high: f64 },
    /// Max pooling: everything to the window maximum.
    #[serde(rename = "wta")]
    WinnerTakeAll,
    /// Pass-through for ReLU and flatten.
    Identity,
}

impl Rule {
    pub fn validate(&self) -> Result<(), LrpError> {
        match *self {
            Rule::Epsilon { epsilon } if !(epsilon > 0.0 && epsilon.is_finite()) => {
                Err(LrpError::NonPositiveEpsilon(epsilon))
            }
            Rule::AlphaBeta { alpha } if !(alpha >= 1.0 && alpha.is_finite()) => {
                Err(LrpError::InvalidAlpha(alpha))
            }
            Rule::ZB { low, high } if !(low < high && low.is_finite() && high.is_finite()) => {
                Err(LrpError::BoundsViolation(format!(
                    "lower bound {low} must be below upper bound {high}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn beta(alpha: f64) -> f64 {
        1.0 - alpha
    }
}

impl fmt::Display for Rule {
    /// Canonical text form; also the input to the configuration digest.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Z => write!(f, "z"),
            Rule::Epsilon { epsilon } => write!(f, "epsilon(epsilon={epsilon:?})"),
            Rule::AlphaBeta { alpha } => write!(f, "alphabeta(alpha={alpha:?})"),
            Rule::Flat => write!(f, "flat"),
            Rule::ZB { low, high } => write!(f, "zb(low={low:?},high={high:?})"),
            Rule::WinnerTakeAll => write!(f, "wta"),
            Rule::Identity => write!(f, "identity"),
        }
    }
}

/// Everything a rule needs to decompose one layer.
#[derive(Debug, Clone, Copy)]
pub struct DecompositionContext<'a> {
    pub layer: &'a LayerSpec,
    pub layer_index: usize,
    /// The layer's input activations `x_i`.
    pub input_activations: &'a Tensor,
    /// The layer's outputs before any following nonlinearity, i.e. `z_j`
    /// including the bias.
    pub output_aggregates: &'a Tensor,
}

impl<'a> DecompositionContext<'a> {
    pub fn new(
        layer: &'a LayerSpec,
        layer_index: usize,
        input_activations: &'a Tensor,
        output_aggregates: &'a Tensor,
    ) -> Self {
        let ctx = Self {
            layer,
            layer_index,
            input_activations,
            output_aggregates,
        };
        #[cfg(debug_assertions)]
        if let Ok(shape) = layer.output_shape(input_activations.shape()) {
            if shape == output_aggregates.shape() {
                let recomputed = layer.apply(input_activations);
                debug_assert!(
                    recomputed
                        .data()
                        .iter()
                        .zip(output_aggregates.data())
                        .all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(1.0)),
                    "output aggregates do not match the layer's forward pass"
                );
            }
        }
        ctx
    }

    fn kind(&self) -> LayerKind {
        self.layer.kind()
    }

    fn check_upper(&self, r_upper: &Tensor) -> Result<(), LrpError> {
        if r_upper.shape() != self.output_aggregates.shape() {
            return Err(LrpError::ShapeMismatch(format!(
                "upper relevance {:?} does not match layer {} output {:?}",
                r_upper.shape(),
                self.layer_index,
                self.output_aggregates.shape()
            )));
        }
        Ok(())
    }

    fn linear(&self, rule: &'static str) -> Result<Linear, LrpError> {
        self.layer
            .linear(self.input_activations.shape())
            .ok_or(LrpError::UnsupportedLayer {
                layer: self.layer_index,
                kind: self.kind(),
                rule,
            })
    }

    fn lower(&self, data: Vec<f64>) -> Tensor {
        Tensor::from_parts(self.input_activations.shape().to_vec(), data)
            .expect("lower relevance has the input shape")
    }
}

/// Basic proportional rule. Zero aggregates pass no relevance.
pub fn decompose_z(ctx: &DecompositionContext, r_upper: &Tensor) -> Result<Tensor, LrpError> {
    ctx.check_upper(r_upper)?;
    let lin = ctx.linear("z")?;
    let s: Vec<f64> = r_upper
        .data()
        .iter()
        .zip(ctx.output_aggregates.data())
        .map(|(&r, &z)| safe_fraction(r, z))
        .collect();
    Ok(scale_by_input(ctx, &lin, &s))
}

pub fn decompose_epsilon(
    ctx: &DecompositionContext,
    r_upper: &Tensor,
    epsilon: f64,
) -> Result<Tensor, LrpError> {
    Rule::Epsilon { epsilon }.validate()?;
    ctx.check_upper(r_upper)?;
    let lin = ctx.linear("epsilon")?;
    let s: Vec<f64> = r_upper
        .data()
        .iter()
        .zip(ctx.output_aggregates.data())
        .map(|(&r, &z)| safe_fraction(r, z + epsilon * stabilized_sign(z)))
        .collect();
    Ok(scale_by_input(ctx, &lin, &s))
}

/// `R_i = x_i · (Wᵀ s)_i`.
fn scale_by_input(ctx: &DecompositionContext, lin: &Linear, s: &[f64]) -> Tensor {
    let weights = ctx.layer.linear_weights().expect("linear layer has weights");
    let c = lin.transpose(s, &weights);
    let x = ctx.input_activations.data();
    ctx.lower(x.iter().zip(&c).map(|(a, b)| a * b).collect())
}

fn split(values: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (
        values.iter().map(|&v| v.max(0.0)).collect(),
        values.iter().map(|&v| v.min(0.0)).collect(),
    )
}

/// Positive and negative aggregates `(z⁺_j, z⁻_j)` of a linear layer, each
/// including the matching part of the bias.
pub(crate) fn split_aggregates(ctx: &DecompositionContext) -> Option<(Vec<f64>, Vec<f64>)> {
    let lin = ctx.layer.linear(ctx.input_activations.shape())?;
    let weights = ctx.layer.linear_weights()?;
    let (w_pos, w_neg) = split(&weights);
    let (x_pos, x_neg) = split(ctx.input_activations.data());
    let (b_pos, b_neg) = match ctx.layer.bias() {
        Some(b) => {
            let (p, n) = split(b.data());
            (Some(p), Some(n))
        }
        None => (None, None),
    };
    // (x·w)⁺ = x⁺w⁺ + x⁻w⁻ and (x·w)⁻ = x⁺w⁻ + x⁻w⁺
    let add = |a: Vec<f64>, b: Vec<f64>| a.into_iter().zip(b).map(|(p, q)| p + q).collect::<Vec<_>>();
    let z_pos = add(
        lin.forward(&x_pos, &w_pos, b_pos.as_deref()),
        lin.forward(&x_neg, &w_neg, None),
    );
    let z_neg = add(
        lin.forward(&x_pos, &w_neg, b_neg.as_deref()),
        lin.forward(&x_neg, &w_pos, None),
    );
    Some((z_pos, z_neg))
}

pub fn decompose_alphabeta(
    ctx: &DecompositionContext,
    r_upper: &Tensor,
    alpha: f64,
) -> Result<Tensor, LrpError> {
    Rule::AlphaBeta { alpha }.validate()?;
    ctx.check_upper(r_upper)?;
    let lin = ctx.linear("alphabeta")?;
    let beta = Rule::beta(alpha);
    let (z_pos, z_neg) = split_aggregates(ctx).expect("linear layer");
    let s_pos: Vec<f64> = r_upper
        .data()
        .iter()
        .zip(&z_pos)
        .map(|(&r, &z)| alpha * safe_fraction(r, z))
        .collect();
    let s_neg: Vec<f64> = r_upper
        .data()
        .iter()
        .zip(&z_neg)
        .map(|(&r, &z)| beta * safe_fraction(r, z))
        .collect();
    let weights = ctx.layer.linear_weights().unwrap();
    let (w_pos, w_neg) = split(&weights);
    let (x_pos, x_neg) = split(ctx.input_activations.data());
    // positive contributions come from x⁺w⁺ and x⁻w⁻, negative ones from
    // x⁺w⁻ and x⁻w⁺
    let pos_via_wpos = lin.transpose(&s_pos, &w_pos);
    let pos_via_wneg = lin.transpose(&s_pos, &w_neg);
    let neg_via_wneg = lin.transpose(&s_neg, &w_neg);
    let neg_via_wpos = lin.transpose(&s_neg, &w_pos);
    let data = (0..x_pos.len())
        .map(|i| {
            x_pos[i] * (pos_via_wpos[i] + neg_via_wneg[i]) + x_neg[i] * (pos_via_wneg[i] + neg_via_wpos[i])
        })
        .collect();
    Ok(ctx.lower(data))
}

/// Uniform spread over each output's receptive field. Padding positions are
/// not inputs and are excluded from the count; an output whose window lies
/// entirely in padding passes no relevance.
pub fn decompose_flat(ctx: &DecompositionContext, r_upper: &Tensor) -> Result<Tensor, LrpError> {
    ctx.check_upper(r_upper)?;
    let shape = ctx.input_activations.shape();
    let unsupported = LrpError::UnsupportedLayer {
        layer: ctx.layer_index,
        kind: ctx.kind(),
        rule: "flat",
    };
    let (lin, ones) = match ctx.layer {
        LayerSpec::Conv2d { kernels, .. } => {
            let lin = ctx.linear("flat")?;
            (lin, vec![1.0; kernels.len()])
        }
        LayerSpec::MaxPool2d { .. } | LayerSpec::AvgPool2d { .. } => {
            let window = ctx.layer.pool_window(shape).ok_or(unsupported)?;
            (
                Linear::Pool {
                    channels: shape[0],
                    window,
                },
                vec![1.0],
            )
        }
        _ => return Err(unsupported),
    };
    let counts = lin.forward(&vec![1.0; lin.input_len()], &ones, None);
    let s: Vec<f64> = r_upper
        .data()
        .iter()
        .zip(&counts)
        .map(|(&r, &n)| safe_fraction(r, n))
        .collect();
    Ok(ctx.lower(lin.transpose(&s, &ones)))
}

/// Bounded-input rule for the first layer with inputs in `[low, high]`:
/// `z_ij = x_i w_ij − low·w⁺_ij − high·w⁻_ij`, bias excluded.
pub fn decompose_zb(
    ctx: &DecompositionContext,
    r_upper: &Tensor,
    low: f64,
    high: f64,
) -> Result<Tensor, LrpError> {
    Rule::ZB { low, high }.validate()?;
    if ctx.layer_index != 0 {
        return Err(LrpError::NotFirstLayer(ctx.layer_index));
    }
    ctx.check_upper(r_upper)?;
    if !matches!(ctx.kind(), LayerKind::Dense | LayerKind::Conv2d) {
        return Err(LrpError::UnsupportedLayer {
            layer: ctx.layer_index,
            kind: ctx.kind(),
            rule: "zb",
        });
    }
    let x = ctx.input_activations.data();
    if let Some(v) = x.iter().find(|&&v| v < low || v > high) {
        return Err(LrpError::BoundsViolation(format!(
            "input value {v} outside [{low}, {high}]"
        )));
    }
    let lin = ctx.linear("zb")?;
    let weights = ctx.layer.linear_weights().unwrap();
    let (w_pos, w_neg) = split(&weights);
    let lows = vec![low; x.len()];
    let highs = vec![high; x.len()];
    let zx = lin.forward(x, &weights, None);
    let zl = lin.forward(&lows, &w_pos, None);
    let zh = lin.forward(&highs, &w_neg, None);
    let s: Vec<f64> = r_upper
        .data()
        .iter()
        .enumerate()
        .map(|(j, &r)| safe_fraction(r, zx[j] - zl[j] - zh[j]))
        .collect();
    let cx = lin.transpose(&s, &weights);
    let cl = lin.transpose(&s, &w_pos);
    let ch = lin.transpose(&s, &w_neg);
    let data = (0..x.len())
        .map(|i| x[i] * cx[i] - low * cl[i] - high * ch[i])
        .collect();
    Ok(ctx.lower(data))
}

/// Pooling layers. Max pooling routes to the forward argmax under any
/// proportional rule (it selects a single input, so those rules coincide);
/// average pooling is linear with weights `1/k` and follows the requested rule.
pub fn decompose_pool(
    ctx: &DecompositionContext,
    r_upper: &Tensor,
    rule: Rule,
) -> Result<Tensor, LrpError> {
    ctx.check_upper(r_upper)?;
    let unsupported = |rule: &'static str| LrpError::UnsupportedLayer {
        layer: ctx.layer_index,
        kind: ctx.kind(),
        rule,
    };
    match (ctx.layer, rule) {
        (LayerSpec::MaxPool2d { .. } | LayerSpec::AvgPool2d { .. }, Rule::Flat) => {
            decompose_flat(ctx, r_upper)
        }
        (
            LayerSpec::MaxPool2d { .. },
            Rule::WinnerTakeAll | Rule::Z | Rule::Epsilon { .. } | Rule::AlphaBeta { .. },
        ) => {
            let shape = ctx.input_activations.shape();
            let window = ctx.layer.pool_window(shape).unwrap();
            let arg = ops::max_pool_argmax(ctx.input_activations.data(), shape[0], window);
            let mut out = vec![0.0; ctx.input_activations.len()];
            for (j, &src) in arg.iter().enumerate() {
                out[src] += r_upper.data()[j];
            }
            Ok(ctx.lower(out))
        }
        (LayerSpec::AvgPool2d { .. }, Rule::Z | Rule::WinnerTakeAll) => decompose_z(ctx, r_upper),
        (LayerSpec::AvgPool2d { .. }, Rule::Epsilon { epsilon }) => {
            decompose_epsilon(ctx, r_upper, epsilon)
        }
        (LayerSpec::AvgPool2d { .. }, Rule::AlphaBeta { alpha }) => {
            decompose_alphabeta(ctx, r_upper, alpha)
        }
        (LayerSpec::MaxPool2d { .. } | LayerSpec::AvgPool2d { .. }, Rule::ZB { .. }) => {
            Err(unsupported("zb"))
        }
        (LayerSpec::MaxPool2d { .. } | LayerSpec::AvgPool2d { .. }, Rule::Identity) => {
            Err(unsupported("identity"))
        }
        _ => Err(unsupported("pool")),
    }
}

/// Applies `rule` to the layer in `ctx`.
pub fn decompose(ctx: &DecompositionContext, r_upper: &Tensor, rule: Rule) -> Result<Tensor, LrpError> {
    match ctx.kind() {
        LayerKind::Relu | LayerKind::Flatten => {
            ctx.check_upper(r_upper)?;
            Ok(ctx.lower(r_upper.data().to_vec()))
        }
        LayerKind::Maxpool2d | LayerKind::Avgpool2d => decompose_pool(ctx, r_upper, rule),
        LayerKind::Dense | LayerKind::Conv2d => match rule {
            Rule::Z => decompose_z(ctx, r_upper),
            Rule::Epsilon { epsilon } => decompose_epsilon(ctx, r_upper, epsilon),
            Rule::AlphaBeta { alpha } => decompose_alphabeta(ctx, r_upper, alpha),
            Rule::Flat => decompose_flat(ctx, r_upper),
            Rule::ZB { low, high } => decompose_zb(ctx, r_upper, low, high),
            Rule::WinnerTakeAll => Err(LrpError::UnsupportedLayer {
                layer: ctx.layer_index,
                kind: ctx.kind(),
                rule: "wta",
            }),
            Rule::Identity => Err(LrpError::UnsupportedLayer {
                layer: ctx.layer_index,
                kind: ctx.kind(),
                rule: "identity",
            }),
        },
    }
}
