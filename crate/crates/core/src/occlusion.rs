//! Object versus context occlusion: how much does the class logit drop when
//! the annotated region, or everything except it, is replaced by the mean image?

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::metrics::{bin_bounds, bin_index, union_mask, AnnotatedImage, NUM_BINS};
use crate::model::{Model, ModelError};
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum OcclusionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("empty input")]
    EmptyInput,
    #[error("i/o error on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Replaces pixels where `mask` (row-major `H×W`, shared by all channels) is
/// set with the corresponding `fill` pixels.
pub fn occlude(image: &Tensor, mask: &[bool], fill: &Tensor) -> Result<Tensor, OcclusionError> {
    let s = image.shape();
    if s.len() != 3 || fill.shape() != s || mask.len() != s[1] * s[2] {
        return Err(OcclusionError::DimensionMismatch(format!(
            "image {:?}, fill {:?}, mask of {} pixels",
            s,
            fill.shape(),
            mask.len()
        )));
    }
    let plane = mask.len();
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if mask[i % plane] {
            *v = fill.data()[i];
        }
    }
    Ok(out)
}

/// `f(x_occluded)[class] − f(x)[class]` on the logits.
pub fn delta_f(model: &Model, x: &Tensor, x_occluded: &Tensor, class_index: usize) -> Result<f64, OcclusionError> {
    let before = model.forward(x)?.logit(class_index)?;
    let after = model.forward(x_occluded)?.logit(class_index)?;
    Ok(after - before)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionResult {
    pub image_id: String,
    pub class_label: String,
    pub s_in: usize,
    pub s_tot: usize,
    pub delta_f_object: f64,
    pub delta_f_context: f64,
}

impl OcclusionResult {
    pub fn relative_box_size(&self) -> f64 {
        self.s_in as f64 / self.s_tot as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionBin {
    pub low: f64,
    pub high: f64,
    pub mean_obj: Option<f64>,
    pub std_obj: f64,
    pub mean_ctx: Option<f64>,
    pub std_ctx: f64,
    pub count: usize,
}

/// Runs both occlusions for one image and class, with the class's boxes
/// already in the model's input frame.
pub fn occlusion_pair(
    model: &Model,
    image: &AnnotatedImage,
    pixels: &Tensor,
    class: &str,
    mean_image: &Tensor,
) -> Result<OcclusionResult, OcclusionError> {
    let class_index = model
        .class_index(class)
        .ok_or_else(|| OcclusionError::UnknownClass(class.to_string()))?;
    let (object, s_in) = union_mask(image.width, image.height, &image.boxes, class);
    let context: Vec<bool> = object.iter().map(|m| !m).collect();
    let base = model.forward(pixels)?.logit(class_index)?;
    let logit_with = |mask: &[bool]| -> Result<f64, OcclusionError> {
        if !mask.contains(&true) {
            return Ok(base);
        }
        Ok(model.forward(&occlude(pixels, mask, mean_image)?)?.logit(class_index)?)
    };
    Ok(OcclusionResult {
        image_id: image.image_id.clone(),
        class_label: class.to_string(),
        s_in,
        s_tot: image.width * image.height,
        delta_f_object: logit_with(&object)? - base,
        delta_f_context: logit_with(&context)? - base,
    })
}

/// Object and context occlusion for every (image, class) pair, in input
/// order. Work is spread over the current rayon pool.
pub fn occlusion_experiment(
    model: &Model,
    samples: &[(AnnotatedImage, Tensor)],
    mean_image: &Tensor,
) -> Result<Vec<OcclusionResult>, OcclusionError> {
    let jobs: Vec<(usize, String)> = samples
        .iter()
        .enumerate()
        .flat_map(|(i, (img, _))| img.classes().into_iter().map(move |c| (i, c)))
        .collect();
    jobs.par_iter()
        .map(|(i, class)| {
            let (img, pixels) = &samples[*i];
            occlusion_pair(model, img, pixels, class, mean_image)
        })
        .collect()
}

fn mean_std(values: &[f64]) -> (Option<f64>, f64) {
    if values.is_empty() {
        return (None, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    };
    (Some(mean), std)
}

/// Mean and population standard deviation of both deltas per size bin.
pub fn binned_curves(results: &[OcclusionResult]) -> Vec<OcclusionBin> {
    let mut obj = vec![Vec::new(); NUM_BINS];
    let mut ctx = vec![Vec::new(); NUM_BINS];
    for r in results {
        let b = bin_index(r.s_in, r.s_tot) - 1;
        obj[b].push(r.delta_f_object);
        ctx[b].push(r.delta_f_context);
    }
    (0..NUM_BINS)
        .map(|b| {
            let (low, high) = bin_bounds(b + 1);
            let (mean_obj, std_obj) = mean_std(&obj[b]);
            let (mean_ctx, std_ctx) = mean_std(&ctx[b]);
            OcclusionBin {
                low,
                high,
                mean_obj,
                std_obj,
                mean_ctx,
                std_ctx,
                count: obj[b].len(),
            }
        })
        .collect()
}

fn write(path: &Path, text: &str) -> Result<(), OcclusionError> {
    std::fs::write(path, text).map_err(|e| OcclusionError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn write_results_csv(path: &Path, results: &[OcclusionResult]) -> Result<(), OcclusionError> {
    let mut out = String::from("image_id,class,relative_box_size,delta_f_object,delta_f_context\n");
    for r in results {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.image_id,
            r.class_label,
            r.relative_box_size(),
            r.delta_f_object,
            r.delta_f_context
        )
        .unwrap();
    }
    write(path, &out)
}

pub fn write_bins_csv(path: &Path, bins: &[OcclusionBin]) -> Result<(), OcclusionError> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("bin_low,bin_high,mean_obj,std_obj,mean_ctx,std_ctx,count\n");
    for b in bins {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            b.low,
            b.high,
            opt(b.mean_obj),
            b.std_obj,
            opt(b.mean_ctx),
            b.std_ctx,
            b.count
        )
        .unwrap();
    }
    write(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::BoundingBox;
    use crate::model::LayerSpec;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Single dense layer `f = Σ w_i x_i` over a `(1, 4, 4)` input.
    fn linear(weights: Vec<f64>) -> Model {
        Model::new(
            [1, 4, 4],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    weights: t(&[1, 16], weights),
                    bias: Tensor::zeros(&[1]),
                },
            ],
            vec!["a".into()],
        )
        .unwrap()
    }

    fn square_mask(x0: usize, y0: usize, x1: usize, y1: usize) -> Vec<bool> {
        (0..16).map(|i| (x0..x1).contains(&(i % 4)) && (y0..y1).contains(&(i / 4))).collect()
    }

    #[test]
    fn occlude_examples() {
        let img = Tensor::filled(&[1, 2, 2], 1.0);
        let fill = Tensor::zeros(&[1, 2, 2]);
        let left = occlude(&img, &[true, false, true, false], &fill).unwrap();
        assert_eq!(left.data(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(occlude(&img, &[false; 4], &fill).unwrap(), img);
        assert_eq!(occlude(&img, &[true; 4], &fill).unwrap(), fill);
        assert!(occlude(&img, &[true; 3], &fill).is_err());
        assert!(occlude(&img, &[true; 4], &Tensor::zeros(&[3, 2, 2])).is_err());
    }

    #[test]
    fn delta_f_examples() {
        let m = linear(vec![1.0; 16]);
        let x = Tensor::filled(&[1, 4, 4], 1.0);
        let occ = occlude(&x, &square_mask(0, 0, 2, 2), &Tensor::zeros(&[1, 4, 4])).unwrap();
        assert_eq!(delta_f(&m, &x, &occ, 0).unwrap(), -4.0);
        assert_eq!(delta_f(&m, &x, &x, 0).unwrap(), 0.0);
    }

    #[test]
    fn full_box_has_no_context() {
        let m = linear(vec![0.5; 16]);
        let img = AnnotatedImage {
            image_id: "i".into(),
            height: 4,
            width: 4,
            boxes: vec![BoundingBox::new("a", 0, 0, 4, 4).unwrap()],
        };
        let x = Tensor::filled(&[1, 4, 4], 1.0);
        let r = occlusion_pair(&m, &img, &x, "a", &Tensor::zeros(&[1, 4, 4])).unwrap();
        assert_eq!(r.delta_f_context, 0.0);
        assert_eq!(r.delta_f_object, -8.0);
        assert_eq!(r.relative_box_size(), 1.0);
    }

    #[test]
    fn one_image_fills_one_bin() {
        let m = linear(vec![1.0; 16]);
        let img = AnnotatedImage {
            image_id: "i".into(),
            height: 4,
            width: 4,
            boxes: vec![BoundingBox::new("a", 1, 1, 3, 3).unwrap()],
        };
        let x = Tensor::filled(&[1, 4, 4], 1.0);
        let results = occlusion_experiment(&m, &[(img, x)], &Tensor::zeros(&[1, 4, 4])).unwrap();
        assert_eq!(results.len(), 1);
        assert_eq!((results[0].delta_f_object, results[0].delta_f_context), (-4.0, -12.0));
        let bins = binned_curves(&results);
        assert_eq!(bins.iter().filter(|b| b.count > 0).count(), 1);
        assert_eq!(bins[24].count, 1);
        assert_eq!(bins[24].std_obj, 0.0);
    }

    #[test]
    fn population_std() {
        let r = |id: &str, obj: f64| OcclusionResult {
            image_id: id.into(),
            class_label: "a".into(),
            s_in: 1,
            s_tot: 2,
            delta_f_object: obj,
            delta_f_context: 0.0,
        };
        let bins = binned_curves(&[r("x", 1.0), r("y", 3.0)]);
        assert_eq!(bins[49].mean_obj, Some(2.0));
        assert_eq!(bins[49].std_obj, 1.0);
        assert_eq!(bins[0].mean_obj, None);
    }

    proptest! {
        #[test]
        fn masks_partition_the_image(x0 in 0usize..4, y0 in 0usize..4, w in 1usize..4, h in 1usize..4) {
            let b = BoundingBox::new("a", x0, y0, (x0 + w).min(4), (y0 + h).min(4)).unwrap();
            let (object, _) = union_mask(4, 4, &[b], "a");
            let context: Vec<bool> = object.iter().map(|m| !m).collect();
            prop_assert!(object.iter().zip(&context).all(|(a, b)| a ^ b));
        }

        #[test]
        fn ignored_region_gives_zero_delta(x in prop::collection::vec(0.0f64..1.0, 16),
                                           fill in prop::collection::vec(0.0f64..1.0, 16)) {
            // weights only on the top-left 2×2 block
            let w: Vec<f64> = (0..16).map(|i| if i % 4 < 2 && i / 4 < 2 { 1.5 } else { 0.0 }).collect();
            let m = linear(w);
            let x = t(&[1, 4, 4], x);
            let mask: Vec<bool> = square_mask(0, 0, 2, 2).iter().map(|m| !m).collect();
            let occ = occlude(&x, &mask, &t(&[1, 4, 4], fill)).unwrap();
            prop_assert_eq!(delta_f(&m, &x, &occ, 0).unwrap(), 0.0);
        }
    }
}
