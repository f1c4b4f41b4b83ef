//! Dataset-level pipeline: load and preprocess annotated images into the
//! model frame, then score attributions per (image, class) pair.

use std::collections::BTreeSet;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{preprocess, read_image, DataError, Dataset, ImageSample, PreprocessMode};
use crate::lrp::{pool_channels_with, Analyzer, LrpError, PoolOrder};
use crate::metrics::{localization_score, AnnotatedImage, LocalizationScore, MetricsError};
use crate::model::Model;
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Lrp(#[from] LrpError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("class `{0}` is not one of the model's labels")]
    UnknownClass(String),
}

/// An image resized to the model input with boxes in the same frame.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub annotated: AnnotatedImage,
    pub pixels: Tensor,
}

/// Which preprocessing geometry to use, sized to the model input.
pub fn mode_for(model: &Model, crop: bool) -> PreprocessMode {
    let [_, h, w] = model.input_shape();
    if crop {
        PreprocessMode::crop(h, w)
    } else {
        PreprocessMode::stretch(h, w)
    }
}

/// Grey images are replicated when the model wants three channels.
pub fn match_channels(pixels: Tensor, channels: usize) -> Result<Tensor, DataError> {
    let s = pixels.shape().to_vec();
    if s[0] == channels {
        return Ok(pixels);
    }
    if s[0] == 1 && channels == 3 {
        let mut d = Vec::with_capacity(3 * pixels.len());
        for _ in 0..3 {
            d.extend_from_slice(pixels.data());
        }
        return Ok(Tensor::new(vec![3, s[1], s[2]], d).unwrap());
    }
    Err(DataError::DimensionMismatch(format!(
        "image has {} channels, model expects {channels}",
        s[0]
    )))
}

/// Loads one image of a dataset into the model frame.
pub fn prepare_one(
    model: &Model,
    item: &crate::data::DatasetItem,
    mode: PreprocessMode,
) -> Result<PreparedSample, DataError> {
    let sample = ImageSample::new(item.annotation.image_id.clone(), read_image(&item.image_path)?);
    let (pixels, ann) = preprocess(&sample, &item.annotation, mode)?;
    let pixels = match_channels(pixels, model.input_shape()[0])?;
    let s = pixels.shape();
    Ok(PreparedSample {
        annotated: AnnotatedImage {
            image_id: ann.image_id,
            height: s[1],
            width: s[2],
            boxes: ann.boxes,
        },
        pixels,
    })
}

/// Prepares every dataset item; failures are returned alongside the
/// successes, keyed by image id.
pub fn prepare_dataset(
    model: &Model,
    dataset: &Dataset,
    mode: PreprocessMode,
) -> (Vec<PreparedSample>, Vec<(String, DataError)>) {
    let results: Vec<_> = dataset
        .items
        .par_iter()
        .map(|item| (item.annotation.image_id.clone(), prepare_one(model, item, mode)))
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (id, r) in results {
        match r {
            Ok(s) => ok.push(s),
            Err(e) => failed.push((id, e)),
        }
    }
    (ok, failed)
}

/// Ground-truth `(sample index, class)` pairs, sorted by image id then class.
pub fn work_items(samples: &[PreparedSample]) -> Vec<(usize, String)> {
    let mut items: Vec<(usize, String)> = samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.annotated.classes().into_iter().map(move |c| (i, c)))
        .collect();
    items.sort_by(|a, b| (&samples[a.0].annotated.image_id, &a.1).cmp(&(&samples[b.0].annotated.image_id, &b.1)));
    items
}

/// Attribution heatmap for one class, pooled over channels.
pub fn score_one(
    analyzer: &Analyzer<'_>,
    sample: &PreparedSample,
    class: &str,
    order: PoolOrder,
) -> Result<LocalizationScore, EvalError> {
    let idx = analyzer
        .model()
        .class_index(class)
        .ok_or_else(|| EvalError::UnknownClass(class.to_string()))?;
    let map = analyzer.attribute(&sample.pixels, idx)?;
    let heat = pool_channels_with(&map.relevance, order);
    Ok(localization_score(
        &heat,
        &sample.annotated.boxes,
        class,
        &sample.annotated.image_id,
    )?)
}

pub type ItemFailure = (String, String, EvalError);

/// Scores every ground-truth pair not in `skip`. Results come back in
/// `(image_id, class)` order regardless of scheduling.
pub fn score_dataset(
    analyzer: &Analyzer<'_>,
    samples: &[PreparedSample],
    order: PoolOrder,
    skip: &BTreeSet<(String, String)>,
) -> (Vec<LocalizationScore>, Vec<ItemFailure>) {
    let items: Vec<_> = work_items(samples)
        .into_iter()
        .filter(|(i, c)| !skip.contains(&(samples[*i].annotated.image_id.clone(), c.clone())))
        .collect();
    let results: Vec<_> = items
        .par_iter()
        .map(|(i, class)| (i, class, score_one(analyzer, &samples[*i], class, order)))
        .collect();
    let mut scores = Vec::new();
    let mut failures = Vec::new();
    for (i, class, r) in results {
        match r {
            Ok(s) => scores.push(s),
            Err(e) => failures.push((samples[*i].annotated.image_id.clone(), class.clone(), e)),
        }
    }
    (scores, failures)
}
