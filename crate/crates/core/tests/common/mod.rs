//! Random networks, brute-force oracles and the property checks shared by
//! the integration tests and the acceptance runner.
#![allow(dead_code)]

use lrp_core::lrp::{decompose_flat, Analyzer, CompositeConfig, DecompositionContext, Rule};
use lrp_core::metrics::{baseline_scores, localization_score, AnnotatedImage, BoundingBox};
use lrp_core::model::{LayerSpec, Model, Padding};
use lrp_core::numerics::Tensor;
use lrp_core::render::Heatmap2D;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type CheckResult = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// A random ReLU convnet: one or two convolutions with optional pooling,
/// then one or two dense layers. At most five parametric/pooling layers and
/// at most 2000 parameters.
pub fn random_model(rng: &mut ChaCha8Rng, zero_bias: bool) -> Model {
    loop {
        let c = rng.gen_range(1..=3);
        let (in_h, in_w) = (rng.gen_range(6..=10), rng.gen_range(6..=10));
        let (mut h, mut w, mut channels) = (in_h, in_w, c);
        let mut layers = Vec::new();
        let mut budget = 5;
        let bias = |rng: &mut ChaCha8Rng, n: usize| {
            if zero_bias {
                Tensor::zeros(&[n])
            } else {
                uniform(rng, &[n], 0.2)
            }
        };
        for conv_i in 0..rng.gen_range(1..=2) {
            let k = rng.gen_range(2..=3);
            let pad = rng.gen_range(0..=1);
            let stride = if conv_i == 0 && rng.gen_bool(0.3) { 2 } else { 1 };
            if h + 2 * pad < k || w + 2 * pad < k {
                break;
            }
            let out_c = rng.gen_range(2..=4);
            let scale = (3.0 / (channels * k * k) as f64).sqrt();
            layers.push(LayerSpec::Conv2d {
                kernels: uniform(rng, &[out_c, channels, k, k], scale),
                bias: bias(rng, out_c),
                stride: (stride, stride),
                padding: Padding::uniform(pad),
            });
            layers.push(LayerSpec::Relu);
            budget -= 1;
            h = (h + 2 * pad - k) / stride + 1;
            w = (w + 2 * pad - k) / stride + 1;
            channels = out_c;
            if h >= 2 && w >= 2 && rng.gen_bool(0.5) {
                let ps = rng.gen_range(1..=2);
                layers.push(if rng.gen_bool(0.5) {
                    LayerSpec::MaxPool2d {
                        window: (2, 2),
                        stride: (ps, ps),
                    }
                } else {
                    LayerSpec::AvgPool2d {
                        window: (2, 2),
                        stride: (ps, ps),
                    }
                });
                budget -= 1;
                h = (h - 2) / ps + 1;
                w = (w - 2) / ps + 1;
            }
        }
        layers.push(LayerSpec::Flatten);
        let mut features = channels * h * w;
        if budget >= 2 && rng.gen_bool(0.5) {
            let hidden = rng.gen_range(3..=8);
            layers.push(LayerSpec::Dense {
                weights: uniform(rng, &[hidden, features], (3.0 / features as f64).sqrt()),
                bias: bias(rng, hidden),
            });
            layers.push(LayerSpec::Relu);
            features = hidden;
        }
        layers.push(LayerSpec::Dense {
            weights: uniform(rng, &[3, features], (3.0 / features as f64).sqrt()),
            bias: bias(rng, 3),
        });
        let labels = (0..3).map(|i| format!("c{i}")).collect();
        let m = Model::new([c, in_h, in_w], layers, labels).expect("generator builds valid models");
        if m.parameter_count() <= 2000 {
            return m;
        }
    }
}

/// `n` models from one seed; every check that takes a population sees the same nets.
pub fn population(n: usize, zero_bias: bool, seed: u64) -> Vec<Model> {
    let mut r = rng(seed);
    (0..n).map(|_| random_model(&mut r, zero_bias)).collect()
}

pub fn random_input(rng: &mut ChaCha8Rng, model: &Model) -> Tensor {
    uniform(rng, &model.input_shape(), 1.0)
}

fn pool_geometry(layer: &LayerSpec) -> Option<((usize, usize), (usize, usize))> {
    match layer {
        LayerSpec::MaxPool2d { window, stride } | LayerSpec::AvgPool2d { window, stride } => Some((*window, *stride)),
        _ => None,
    }
}

/// Input indices feeding each output of a conv/pool layer, with the kernel
/// index used (`None` for pooling). Padding positions are omitted.
pub fn receptive_fields(layer: &LayerSpec, input_shape: &[usize]) -> Vec<Vec<(usize, Option<usize>)>> {
    let (c, h, w) = (input_shape[0] as i64, input_shape[1] as i64, input_shape[2] as i64);
    let mut fields = Vec::new();
    match layer {
        LayerSpec::Conv2d {
            kernels,
            stride,
            padding,
            ..
        } => {
            let ks = kernels.shape();
            let (oc, kh, kw) = (ks[0] as i64, ks[2] as i64, ks[3] as i64);
            let oh = (h + (padding.top + padding.bottom) as i64 - kh) / stride.0 as i64 + 1;
            let ow = (w + (padding.left + padding.right) as i64 - kw) / stride.1 as i64 + 1;
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut f = Vec::new();
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy * stride.0 as i64 + ky - padding.top as i64;
                                    let ix = ox * stride.1 as i64 + kx - padding.left as i64;
                                    if iy >= 0 && iy < h && ix >= 0 && ix < w {
                                        let k = ((o * c + ci) * kh + ky) * kw + kx;
                                        f.push((((ci * h + iy) * w + ix) as usize, Some(k as usize)));
                                    }
                                }
                            }
                        }
                        fields.push(f);
                    }
                }
            }
        }
        other => {
            let ((kh, kw), (sh, sw)) = pool_geometry(other).expect("conv or pool layer");
            let (kh, kw, sh, sw) = (kh as i64, kw as i64, sh as i64, sw as i64);
            for ci in 0..c {
                for oy in 0..(h - kh) / sh + 1 {
                    for ox in 0..(w - kw) / sw + 1 {
                        let mut f = Vec::new();
                        for ky in 0..kh {
                            for kx in 0..kw {
                                f.push((((ci * h + oy * sh + ky) * w + ox * sw + kx) as usize, None));
                            }
                        }
                        fields.push(f);
                    }
                }
            }
        }
    }
    fields
}

/// Per-output contributions `z_ij = x_i w_ij` of a linear layer, plus the bias.
pub fn contributions(layer: &LayerSpec, x: &Tensor) -> Vec<(Vec<(usize, f64)>, f64)> {
    match layer {
        LayerSpec::Dense { weights, bias } => {
            let n_in = x.len();
            (0..bias.len())
                .map(|j| {
                    let z = (0..n_in).map(|i| (i, x.data()[i] * weights.data()[j * n_in + i])).collect();
                    (z, bias.data()[j])
                })
                .collect()
        }
        LayerSpec::Conv2d { kernels, bias, .. } => {
            let per_out = receptive_fields(layer, x.shape());
            let plane = per_out.len() / bias.len();
            per_out
                .into_iter()
                .enumerate()
                .map(|(j, f)| {
                    let z = f.into_iter().map(|(i, k)| (i, x.data()[i] * kernels.data()[k.unwrap()])).collect();
                    (z, bias.data()[j / plane])
                })
                .collect()
        }
        LayerSpec::AvgPool2d { window, .. } => {
            let k = (window.0 * window.1) as f64;
            receptive_fields(layer, x.shape())
                .into_iter()
                .map(|f| (f.into_iter().map(|(i, _)| (i, x.data()[i] / k)).collect(), 0.0))
                .collect()
        }
        _ => panic!("not a linear layer"),
    }
}

/// Forward pass written independently of the library kernels.
pub fn oracle_forward(model: &Model, x: &Tensor) -> Vec<Vec<f64>> {
    let mut acts = vec![x.data().to_vec()];
    for (i, layer) in model.layers().iter().enumerate() {
        let shape = model.shape_at(i);
        let input = Tensor::new(shape.to_vec(), acts[i].clone()).unwrap();
        let out = match layer {
            LayerSpec::Relu => input.data().iter().map(|v| v.max(0.0)).collect(),
            LayerSpec::Flatten => input.data().to_vec(),
            LayerSpec::MaxPool2d { .. } => receptive_fields(layer, shape)
                .into_iter()
                .map(|f| f.iter().map(|(i, _)| input.data()[*i]).fold(f64::NEG_INFINITY, f64::max))
                .collect(),
            _ => contributions(layer, &input)
                .into_iter()
                .map(|(z, b)| z.iter().map(|(_, v)| v).sum::<f64>() + b)
                .collect(),
        };
        acts.push(out);
    }
    acts
}

/// ReLU on/off pattern and max-pool winners: the linear region a point lies in.
pub fn activation_region(model: &Model, x: &Tensor) -> Vec<usize> {
    let acts = oracle_forward(model, x);
    let mut region = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        match layer {
            LayerSpec::Relu => region.extend(acts[i].iter().map(|&v| (v > 0.0) as usize)),
            LayerSpec::MaxPool2d { .. } => {
                for f in receptive_fields(layer, model.shape_at(i)) {
                    let best = f
                        .iter()
                        .map(|(i, _)| *i)
                        .max_by(|a, b| acts[i][*a].total_cmp(&acts[i][*b]))
                        .unwrap();
                    region.push(best);
                }
            }
            _ => {}
        }
    }
    region
}

fn argmax_abs(v: &[f64]) -> usize {
    (0..v.len()).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap()
}

fn uniform_rule(rule: Rule) -> CompositeConfig {
    CompositeConfig::uniform(rule).unwrap()
}

/// Uniform z attributions sum to the logit on zero-bias nets, and αβ keeps
/// its per-layer bookkeeping identity.
pub fn check_conservation(models: &[Model], inputs: usize, seed: u64) -> CheckResult {
    let mut r = rng(seed);
    let mut worst_z: f64 = 0.0;
    let mut worst_ab: f64 = 0.0;
    let mut lost_branches = 0usize;
    for (m, model) in models.iter().enumerate() {
        let z = Analyzer::new(model, &uniform_rule(Rule::Z)).unwrap();
        let abs: Vec<(f64, Analyzer)> = [1.0, 2.0]
            .iter()
            .map(|&a| (a, Analyzer::new(model, &uniform_rule(Rule::AlphaBeta { alpha: a })).unwrap()))
            .collect();
        for _ in 0..inputs {
            let x = random_input(&mut r, model);
            let logits = model.forward(&x).unwrap().logits().to_vec();
            let class = argmax_abs(&logits);
            let map = z.attribute(&x, class).unwrap();
            let rel = (map.relevance.sum() - logits[class]).abs() / logits[class].abs().max(1e-12);
            worst_z = worst_z.max(rel);
            if rel > 1e-4 {
                return Err(format!("model {m}: z sum {} vs logit {}", map.relevance.sum(), logits[class]));
            }
            for (alpha, a) in &abs {
                let beta = alpha - 1.0;
                let e = a.explain(&x, class).unwrap();
                for (i, layer) in model.layers().iter().enumerate() {
                    let upper = &e.relevance[i + 1];
                    let lower_sum = e.relevance[i].sum();
                    let expected = match layer {
                        LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } | LayerSpec::AvgPool2d { .. } => {
                            let mut acc = 0.0;
                            for (j, (zs, b)) in contributions(layer, e.trace.input(i)).iter().enumerate() {
                                let xw_pos: f64 = zs.iter().map(|(_, v)| v.max(0.0)).sum();
                                let xw_neg: f64 = zs.iter().map(|(_, v)| v.min(0.0)).sum();
                                let zp = xw_pos + b.max(0.0);
                                let zn = xw_neg + b.min(0.0);
                                let rj = upper.data()[j];
                                if zp != 0.0 {
                                    acc += alpha * rj * xw_pos / zp;
                                } else if rj != 0.0 {
                                    lost_branches += 1;
                                }
                                if zn != 0.0 {
                                    acc -= beta * rj * xw_neg / zn;
                                } else if rj != 0.0 && beta != 0.0 {
                                    lost_branches += 1;
                                }
                            }
                            acc
                        }
                        _ => upper.sum(),
                    };
                    let scale = upper.data().iter().map(|v| v.abs()).sum::<f64>().max(1.0);
                    let err = (lower_sum - expected).abs() / scale;
                    worst_ab = worst_ab.max(err);
                    if err > 1e-10 {
                        return Err(format!(
                            "model {m} layer {i} alpha {alpha}: sum {lower_sum} vs accounted {expected}"
                        ));
                    }
                }
            }
        }
    }
    Ok(format!(
        "{} models x {inputs} inputs, worst z rel err {worst_z:.1e}, worst alpha-beta bookkeeping err {worst_ab:.1e}, {lost_branches} empty branches accounted",
        models.len()
    ))
}

/// Uniform z equals gradient times input, and the analytic gradient matches
/// central differences.
pub fn check_gradient_x_input(models: &[Model], biased: &[Model], inputs: usize, seed: u64) -> CheckResult {
    let mut r = rng(seed);
    let (mut worst_gxi, mut worst_fd): (f64, f64) = (0.0, 0.0);
    let (mut checked, mut skipped) = (0usize, 0usize);
    for (m, (zero_bias_model, biased_model)) in models.iter().zip(biased.iter().cycle()).enumerate() {
        let z = Analyzer::new(zero_bias_model, &uniform_rule(Rule::Z)).unwrap();
        for _ in 0..inputs {
            let x = random_input(&mut r, zero_bias_model);
            let trace = zero_bias_model.forward(&x).unwrap();
            let class = argmax_abs(trace.logits());
            let grad = zero_bias_model.gradient_wrt_input(&trace, class).unwrap();
            let map = z.attribute(&x, class).unwrap();
            for ((g, xi), rv) in grad.data().iter().zip(x.data()).zip(map.relevance.data()) {
                let d = (g * xi - rv).abs();
                worst_gxi = worst_gxi.max(d);
                if d > 1e-5 {
                    return Err(format!("model {m}: R = {rv} but grad*x = {}", g * xi));
                }
            }
            for model in [zero_bias_model, biased_model] {
                let x = random_input(&mut r, model);
                let trace = model.forward(&x).unwrap();
                let grad = model.gradient_wrt_input(&trace, class).unwrap();
                let region = activation_region(model, &x);
                let h = 1e-5;
                for i in 0..x.len() {
                    let mut xp = x.clone();
                    xp.data_mut()[i] += h;
                    let mut xm = x.clone();
                    xm.data_mut()[i] -= h;
                    if activation_region(model, &xp) != region || activation_region(model, &xm) != region {
                        skipped += 1;
                        continue;
                    }
                    let fp = model.forward(&xp).unwrap().logits()[class];
                    let fm = model.forward(&xm).unwrap().logits()[class];
                    let fd = (fp - fm) / (2.0 * h);
                    let g = grad.data()[i];
                    let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-4);
                    worst_fd = worst_fd.max(rel);
                    checked += 1;
                    if rel > 1e-3 {
                        return Err(format!("model {m} input {i}: analytic {g} vs central difference {fd}"));
                    }
                }
            }
        }
    }
    Ok(format!(
        "{} models x {inputs} inputs, worst |R - grad*x| {worst_gxi:.1e}, worst finite-difference rel err {worst_fd:.1e} over {checked} entries ({skipped} straddling a kink skipped)",
        models.len()
    ))
}

/// Every linear-layer output is either exactly zero or larger than 1e-3 in magnitude.
fn well_separated(model: &Model, x: &Tensor) -> bool {
    let trace = model.forward(x).unwrap();
    model.layers().iter().enumerate().all(|(i, l)| {
        !matches!(l, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } | LayerSpec::AvgPool2d { .. })
            || trace.output(i).data().iter().all(|&z| z == 0.0 || z.abs() > 1e-3)
    })
}

/// ε → 0 recovers the z rule.
pub fn check_epsilon_limit(models: &[Model], inputs: usize, seed: u64) -> CheckResult {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut resampled = 0;
    for (m, model) in models.iter().enumerate() {
        let z = Analyzer::new(model, &uniform_rule(Rule::Z)).unwrap();
        let eps = Analyzer::new(model, &uniform_rule(Rule::Epsilon { epsilon: 1e-12 })).unwrap();
        for _ in 0..inputs {
            let x = loop {
                let x = random_input(&mut r, model);
                if well_separated(model, &x) {
                    break x;
                }
                resampled += 1;
            };
            let class = argmax_abs(model.forward(&x).unwrap().logits());
            let a = z.attribute(&x, class).unwrap();
            let b = eps.attribute(&x, class).unwrap();
            for (p, q) in a.relevance.data().iter().zip(b.relevance.data()) {
                worst = worst.max((p - q).abs());
                if (p - q).abs() > 1e-8 {
                    return Err(format!("model {m}: z {p} vs epsilon {q}"));
                }
            }
        }
    }
    Ok(format!(
        "{} models x {inputs} inputs, worst elementwise diff {worst:.1e} ({resampled} inputs resampled)",
        models.len()
    ))
}

/// Flat rule against a receptive-field oracle, including windows that lie
/// partly or entirely in padding.
pub fn check_flat_rule(cases: usize, seed: u64) -> CheckResult {
    let mut r = rng(seed);
    let (mut worst, mut worst_acc): (f64, f64) = (0.0, 0.0);
    let mut dead_windows = 0;
    for case in 0..cases {
        let c = r.gen_range(1..=3);
        let (h, w) = (r.gen_range(2..=7), r.gen_range(2..=7));
        let layer = if case % 4 == 3 {
            let k = r.gen_range(1..=2.min(h).min(w));
            let s = r.gen_range(1..=2);
            LayerSpec::AvgPool2d {
                window: (k, k),
                stride: (s, s),
            }
        } else {
            let k = r.gen_range(1..=3);
            let padding = Padding {
                top: r.gen_range(0..=3),
                bottom: r.gen_range(0..=3),
                left: r.gen_range(0..=3),
                right: r.gen_range(0..=3),
            };
            if h + padding.top + padding.bottom < k || w + padding.left + padding.right < k {
                continue;
            }
            let oc = r.gen_range(1..=3);
            LayerSpec::Conv2d {
                kernels: uniform(&mut r, &[oc, c, k, k], 1.0),
                bias: uniform(&mut r, &[oc], 0.5),
                stride: (r.gen_range(1..=2), r.gen_range(1..=2)),
                padding,
            }
        };
        let x = uniform(&mut r, &[c, h, w], 1.0);
        let out = layer.apply(&x);
        let ctx = DecompositionContext::new(&layer, 0, &x, &out);
        let upper = uniform(&mut r, out.shape(), 2.0);
        let got = decompose_flat(&ctx, &upper).unwrap();
        let mut expect = vec![0.0; x.len()];
        let mut kept = 0.0;
        for (j, f) in receptive_fields(&layer, x.shape()).iter().enumerate() {
            if f.is_empty() {
                dead_windows += 1;
                continue;
            }
            kept += upper.data()[j];
            for (i, _) in f {
                expect[*i] += upper.data()[j] / f.len() as f64;
            }
        }
        for (a, b) in got.data().iter().zip(&expect) {
            worst = worst.max((a - b).abs());
            if (a - b).abs() > 1e-12 {
                return Err(format!("case {case}: flat gave {a}, oracle {b} ({layer:?})"));
            }
        }
        let acc = (got.sum() - kept).abs();
        worst_acc = worst_acc.max(acc);
        if acc > 1e-12 {
            return Err(format!("case {case}: kept {} but accounting says {kept}", got.sum()));
        }
    }
    Ok(format!(
        "{cases} layers, worst elementwise err {worst:.1e}, worst accounting err {worst_acc:.1e}, {dead_windows} all-padding windows"
    ))
}

/// Localization score against a per-pixel oracle, plus the exact baseline.
pub fn check_metric_oracle(instances: usize, seed: u64) -> CheckResult {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut zero_total = 0;
    for n in 0..instances {
        let (h, w) = (r.gen_range(1..=40), r.gen_range(1..=40));
        let mut boxes = Vec::new();
        for k in 0..r.gen_range(1..=5) {
            let label = if k == 0 || r.gen_bool(0.6) { "a" } else { "b" };
            let (x0, y0) = (r.gen_range(0..w), r.gen_range(0..h));
            let (x1, y1) = (r.gen_range(x0 + 1..=w), r.gen_range(y0 + 1..=h));
            boxes.push(BoundingBox::new(label, x0, y0, x1, y1).unwrap());
        }
        let neg_bias = if n % 10 == 0 { -5.0 } else { r.gen_range(-1.0..1.0) };
        let values: Vec<f64> = (0..h * w)
            .map(|_| if r.gen_bool(0.1) { 0.0 } else { r.gen_range(-1.0..1.0) * 3.0 + neg_bias })
            .collect();
        let heat = Heatmap2D::new(h, w, values.clone()).unwrap();
        let got = localization_score(&heat, &boxes, "a", "img").unwrap();

        let (mut r_in, mut r_tot, mut s_in) = (0.0, 0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                let inside = boxes
                    .iter()
                    .any(|b| b.class_label == "a" && b.x_min <= x && x < b.x_max && b.y_min <= y && y < b.y_max);
                let v = values[y * w + x];
                let p = if v > 0.0 { v } else { 0.0 };
                r_tot += p;
                if inside {
                    r_in += p;
                    s_in += 1;
                }
            }
        }
        let (mu, mu_w) = if r_tot > 0.0 {
            (r_in / r_tot, (r_in / r_tot) / (s_in as f64 / (h * w) as f64))
        } else {
            zero_total += 1;
            (0.0, 0.0)
        };
        if got.s_in != s_in || got.s_tot != h * w {
            return Err(format!("instance {n}: areas {}/{} vs {s_in}/{}", got.s_in, got.s_tot, h * w));
        }
        for (a, b, what) in [(got.r_in, r_in, "R_in"), (got.r_tot, r_tot, "R_tot"), (got.mu, mu, "mu"), (got.mu_w, mu_w, "mu_w")] {
            let err = (a - b).abs() / b.abs().max(1.0);
            worst = worst.max(err);
            if err > 1e-12 {
                return Err(format!("instance {n}: {what} {a} vs oracle {b}"));
            }
        }
        let ones = Heatmap2D::new(h, w, vec![1.0; h * w]).unwrap();
        let base = localization_score(&ones, &boxes, "a", "img").unwrap();
        if base.mu_w != 1.0 {
            return Err(format!("instance {n}: uniform map scored mu_w = {}", base.mu_w));
        }
        let annotated = AnnotatedImage {
            image_id: "img".into(),
            height: h,
            width: w,
            boxes,
        };
        if let Some(s) = baseline_scores(&[annotated]).iter().find(|s| s.mu_w != 1.0) {
            return Err(format!("instance {n}: baseline class {} mu_w = {}", s.class_label, s.mu_w));
        }
    }
    Ok(format!(
        "{instances} instances, worst rel err {worst:.1e}, {zero_total} with R_tot = 0, baseline mu_w = 1 exactly"
    ))
}
