//! Raw kernels over flat `(C, H, W)` buffers.
//!
//! Every linear layer (dense, convolution, average pooling) is exposed as a
//! [`Linear`] map with a forward and a transposed application, both taking
//! an explicit weight buffer so that relevance rules can run the same loops
//! over `w⁺`, `w⁻` or all-ones weights.

use crate::model::Padding;

/// Geometry of a 2-D sliding window over a `(C, H, W)` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad: Padding,
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.in_h + self.pad.top + self.pad.bottom - self.k_h) / self.stride_h + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + self.pad.left + self.pad.right - self.k_w) / self.stride_w + 1
    }

    /// Input coordinate for output `(oy, ox)` and kernel offset `(ky, kx)`,
    /// or `None` when it falls on padding.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride_h + ky).checked_sub(self.pad.top)?;
        let x = (ox * self.stride_w + kx).checked_sub(self.pad.left)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }
}

/// A linear map `z = W x + b` in one of the supported layouts.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Linear {
    /// `out × in` row-major matrix.
    Dense { inputs: usize, outputs: usize },
    /// `outC × inC × kH × kW` kernels.
    Conv {
        in_c: usize,
        out_c: usize,
        window: Window,
    },
    /// Channel-wise pooling where every window member carries one shared weight.
    Pool { channels: usize, window: Window },
}

impl Linear {
    pub fn output_len(&self) -> usize {
        match *self {
            Linear::Dense { outputs, .. } => outputs,
            Linear::Conv { out_c, window, .. } => out_c * window.out_h() * window.out_w(),
            Linear::Pool { channels, window } => channels * window.out_h() * window.out_w(),
        }
    }

    pub fn input_len(&self) -> usize {
        match *self {
            Linear::Dense { inputs, .. } => inputs,
            Linear::Conv { in_c, window, .. } => in_c * window.in_h * window.in_w,
            Linear::Pool { channels, window } => channels * window.in_h * window.in_w,
        }
    }

    /// `W x + b`. For `Pool`, `weights` must hold exactly one value.
    pub fn forward(&self, x: &[f64], weights: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_len());
        let mut out = vec![0.0; self.output_len()];
        match *self {
            Linear::Dense { inputs, outputs } => {
                for (j, o) in out.iter_mut().enumerate().take(outputs) {
                    let row = &weights[j * inputs..(j + 1) * inputs];
                    *o = row.iter().zip(x).map(|(w, v)| w * v).sum();
                }
            }
            Linear::Conv { in_c, out_c, window } => {
                let (oh, ow) = (window.out_h(), window.out_w());
                let plane = window.in_h * window.in_w;
                let ksize = window.k_h * window.k_w;
                for o in 0..out_c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for c in 0..in_c {
                                let kbase = (o * in_c + c) * ksize;
                                let xbase = c * plane;
                                for ky in 0..window.k_h {
                                    for kx in 0..window.k_w {
                                        if let Some((y, xx)) = window.source(oy, ox, ky, kx) {
                                            acc += weights[kbase + ky * window.k_w + kx]
                                                * x[xbase + y * window.in_w + xx];
                                        }
                                    }
                                }
                            }
                            out[(o * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
            Linear::Pool { channels, window } => {
                let w = weights[0];
                let (oh, ow) = (window.out_h(), window.out_w());
                let plane = window.in_h * window.in_w;
                for c in 0..channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for ky in 0..window.k_h {
                                for kx in 0..window.k_w {
                                    if let Some((y, xx)) = window.source(oy, ox, ky, kx) {
                                        acc += w * x[c * plane + y * window.in_w + xx];
                                    }
                                }
                            }
                            out[(c * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            self.add_bias(&mut out, b);
        }
        out
    }

    fn add_bias(&self, out: &mut [f64], bias: &[f64]) {
        match *self {
            Linear::Dense { .. } => out.iter_mut().zip(bias).for_each(|(o, b)| *o += b),
            Linear::Conv { out_c, window, .. } => {
                let plane = window.out_h() * window.out_w();
                for o in 0..out_c {
                    out[o * plane..(o + 1) * plane]
                        .iter_mut()
                        .for_each(|v| *v += bias[o]);
                }
            }
            Linear::Pool { .. } => {}
        }
    }

    /// `Wᵀ s`, returned in input layout.
    pub fn transpose(&self, s: &[f64], weights: &[f64]) -> Vec<f64> {
        debug_assert_eq!(s.len(), self.output_len());
        let mut out = vec![0.0; self.input_len()];
        match *self {
            Linear::Dense { inputs, .. } => {
                for (j, &sj) in s.iter().enumerate() {
                    if sj == 0.0 {
                        continue;
                    }
                    let row = &weights[j * inputs..(j + 1) * inputs];
                    out.iter_mut().zip(row).for_each(|(o, w)| *o += w * sj);
                }
            }
            Linear::Conv { in_c, out_c, window } => {
                let (oh, ow) = (window.out_h(), window.out_w());
                let plane = window.in_h * window.in_w;
                let ksize = window.k_h * window.k_w;
                for o in 0..out_c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let sj = s[(o * oh + oy) * ow + ox];
                            if sj == 0.0 {
                                continue;
                            }
                            for c in 0..in_c {
                                let kbase = (o * in_c + c) * ksize;
                                for ky in 0..window.k_h {
                                    for kx in 0..window.k_w {
                                        if let Some((y, xx)) = window.source(oy, ox, ky, kx) {
                                            out[c * plane + y * window.in_w + xx] +=
                                                weights[kbase + ky * window.k_w + kx] * sj;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Linear::Pool { channels, window } => {
                let w = weights[0];
                let (oh, ow) = (window.out_h(), window.out_w());
                let plane = window.in_h * window.in_w;
                for c in 0..channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let sj = s[(c * oh + oy) * ow + ox];
                            if sj == 0.0 {
                                continue;
                            }
                            for ky in 0..window.k_h {
                                for kx in 0..window.k_w {
                                    if let Some((y, xx)) = window.source(oy, ox, ky, kx) {
                                        out[c * plane + y * window.in_w + xx] += w * sj;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Flat input index of the window maximum for every output position of a
/// max-pooling layer. Ties resolve to the lowest flat index.
pub(crate) fn max_pool_argmax(x: &[f64], channels: usize, window: Window) -> Vec<usize> {
    let (oh, ow) = (window.out_h(), window.out_w());
    let plane = window.in_h * window.in_w;
    let mut arg = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<(usize, f64)> = None;
                for ky in 0..window.k_h {
                    for kx in 0..window.k_w {
                        if let Some((y, xx)) = window.source(oy, ox, ky, kx) {
                            let idx = c * plane + y * window.in_w + xx;
                            let v = x[idx];
                            match best {
                                Some((bi, bv)) if v < bv || (v == bv && idx > bi) => {}
                                _ => best = Some((idx, v)),
                            }
                        }
                    }
                }
                arg.push(best.expect("pooling window lies inside the input").0);
            }
        }
    }
    arg
}
