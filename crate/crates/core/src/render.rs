//! Signed heatmaps to red/white/blue RGB images and 8-bit PNG output.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use thiserror::Error;

use crate::numerics::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("i/o failure writing {path}: {reason}")]
    IoFailure { path: String, reason: String },
    #[error("image tensor must be (3, H, W) or (1, H, W), got {0:?}")]
    BadShape(Vec<usize>),
    #[error("montage panels differ in height: {0} vs {1}")]
    HeightMismatch(usize, usize),
}

/// A signed 2-D relevance map `(H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap2D {
    values: Tensor,
}

impl Heatmap2D {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, TensorError> {
        Ok(Self {
            values: Tensor::new(vec![height, width], values)?,
        })
    }

    pub fn from_tensor(values: Tensor) -> Result<Self, TensorError> {
        if values.rank() != 2 {
            return Err(TensorError::Reshape {
                from: values.shape().to_vec(),
                to: vec![0, 0],
            });
        }
        values.check_finite()?;
        Ok(Self { values })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values.data()[y * self.width() + x]
    }
}

/// How the colour scale's saturation point is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub enum Normalization {
    /// Saturate at the largest absolute value.
    #[default]
    MaxAbs,
    /// Saturate at this percentile (0–100) of absolute values; larger
    /// magnitudes clip.
    Percentile(f64),
}

/// Diverging colour map: `+m` red, `0` white, `−m` blue, linear between.
pub fn colorize(heatmap: &Heatmap2D) -> Tensor {
    colorize_with(heatmap, Normalization::MaxAbs)
}

pub fn colorize_with(heatmap: &Heatmap2D, norm: Normalization) -> Tensor {
    let v = heatmap.values.data();
    let m = match norm {
        Normalization::MaxAbs => heatmap.values.max_abs(),
        Normalization::Percentile(p) => {
            let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
            mags.sort_by(f64::total_cmp);
            let rank = ((p.clamp(0.0, 100.0) / 100.0) * (mags.len() - 1) as f64).round() as usize;
            mags[rank]
        }
    };
    let n = v.len();
    let mut out = vec![1.0; 3 * n];
    if m > 0.0 {
        for (i, &x) in v.iter().enumerate() {
            let t = (x / m).clamp(-1.0, 1.0);
            let fade = 1.0 - t.abs();
            let (r, g, b) = if t >= 0.0 { (1.0, fade, fade) } else { (fade, fade, 1.0) };
            out[i] = r;
            out[n + i] = g;
            out[2 * n + i] = b;
        }
    }
    Tensor::from_parts(vec![3, heatmap.height(), heatmap.width()], out).unwrap()
}

/// Places `left` and `right` side by side; single-channel panels are
/// replicated to RGB.
pub fn montage(left: &Tensor, right: &Tensor) -> Result<Tensor, RenderError> {
    let l = to_rgb(left)?;
    let r = to_rgb(right)?;
    let (h, lw, rw) = (l.shape()[1], l.shape()[2], r.shape()[2]);
    if r.shape()[1] != h {
        return Err(RenderError::HeightMismatch(h, r.shape()[1]));
    }
    let w = lw + rw;
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..lw {
                out[(c * h + y) * w + x] = l.at3(c, y, x);
            }
            for x in 0..rw {
                out[(c * h + y) * w + lw + x] = r.at3(c, y, x);
            }
        }
    }
    Ok(Tensor::from_parts(vec![3, h, w], out).unwrap())
}

fn to_rgb(t: &Tensor) -> Result<Tensor, RenderError> {
    match t.shape() {
        [3, _, _] => Ok(t.clone()),
        [1, h, w] => {
            let mut d = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                d.extend_from_slice(t.data());
            }
            Ok(Tensor::from_parts(vec![3, *h, *w], d).unwrap())
        }
        s => Err(RenderError::BadShape(s.to_vec())),
    }
}

/// 8-bit quantisation used by [`write_image`].
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `(3, H, W)` or `(1, H, W)` tensor with values in `[0, 1]` as an
/// 8-bit PNG. Out-of-range values are clamped with a warning.
pub fn write_image(rgb: &Tensor, path: impl AsRef<Path>) -> Result<(), RenderError> {
    let path = path.as_ref();
    let (c, h, w) = match rgb.shape() {
        [c @ (1 | 3), h, w] => (*c, *h, *w),
        s => return Err(RenderError::BadShape(s.to_vec())),
    };
    let clamped = rgb.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    if clamped > 0 {
        log::warn!("{}: clamped {clamped} values outside [0, 1]", path.display());
    }
    let mut bytes = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push(quantize(rgb.at3(ch, y, x)));
            }
        }
    }
    let io = |e: &dyn std::fmt::Display| RenderError::IoFailure {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let file = File::create(path).map_err(|e| io(&e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(if c == 3 {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    });
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| io(&e))?;
    writer.write_image_data(&bytes).map_err(|e| io(&e))?;
    writer.finish().map_err(|e| io(&e))?;
    Ok(())
}
