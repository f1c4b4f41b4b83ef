//! Deterministic synthetic localization dataset: one textured square-ish
//! object per image on smooth coloured noise.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{boxes_json, resize_bilinear, Annotation, AnnotationFormat, DataError, DatasetManifest};
use crate::metrics::BoundingBox;
use crate::numerics::Tensor;
use crate::render::write_image;

pub const CLASSES: [&str; 4] = ["hstripes", "vstripes", "checker", "diagonal"];
pub const SIZE: usize = 32;
pub const MIN_OBJECT: usize = 8;
pub const MAX_OBJECT: usize = 14;

fn texture(class: usize, x: usize, y: usize, phase: usize) -> bool {
    let (x, y) = (x + phase, y + phase);
    match class {
        0 => (y / 2) % 2 == 0,
        1 => (x / 2) % 2 == 0,
        2 => (x / 2 + y / 2) % 2 == 0,
        _ => ((x + y) / 2) % 2 == 0,
    }
}

fn background(rng: &mut ChaCha8Rng) -> Tensor {
    let coarse = 5;
    let grid: Vec<f64> = (0..3 * coarse * coarse).map(|_| rng.gen_range(0.15..0.85)).collect();
    let mut img = resize_bilinear(&Tensor::new(vec![3, coarse, coarse], grid).unwrap(), SIZE, SIZE);
    for v in img.data_mut() {
        *v = (*v + rng.gen_range(-0.06..0.06)).clamp(0.0, 1.0);
    }
    img
}

fn colour_pair(rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    loop {
        let a: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let b: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let dist: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        if dist > 0.6 {
            return (a, b);
        }
    }
}

fn paint(rng: &mut ChaCha8Rng, img: &mut Tensor, class: usize, x0: usize, y0: usize, w: usize, h: usize) {
    let phase = rng.gen_range(0..4);
    let (fg, bg) = colour_pair(rng);
    let plane = SIZE * SIZE;
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let c = if texture(class, x - x0, y - y0, phase) { fg } else { bg };
            for (ch, v) in c.iter().enumerate() {
                img.data_mut()[ch * plane + y * SIZE + x] = *v;
            }
        }
    }
}

fn finish(index: usize, mut img: Tensor, boxes: Vec<BoundingBox>) -> (Annotation, Tensor) {
    for v in img.data_mut() {
        *v = crate::render::quantize(*v) as f64 / 255.0;
    }
    let annotation = Annotation {
        image_id: format!("{index:05}"),
        filename: None,
        boxes,
    };
    (annotation, img)
}

fn stream(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates image `index` of the stream seeded by `seed`. Pixel values are
/// quantized to 8 bits so a PNG round trip is lossless.
pub fn sample(seed: u64, index: usize) -> (Annotation, Tensor) {
    let mut rng = stream(seed, index);
    let class = rng.gen_range(0..CLASSES.len());
    let mut img = background(&mut rng);
    let w = rng.gen_range(MIN_OBJECT..=MAX_OBJECT);
    let h = rng.gen_range(MIN_OBJECT..=MAX_OBJECT);
    let x0 = rng.gen_range(0..=SIZE - w);
    let y0 = rng.gen_range(0..=SIZE - h);
    paint(&mut rng, &mut img, class, x0, y0, w, h);
    let b = BoundingBox::new(CLASSES[class], x0, y0, x0 + w, y0 + h).unwrap();
    finish(index, img, vec![b])
}

/// Two objects of different classes, side by side in the left and right
/// halves so their boxes never overlap.
pub fn sample_pair(seed: u64, index: usize) -> (Annotation, Tensor) {
    let mut rng = stream(seed, index);
    let first = rng.gen_range(0..CLASSES.len());
    let second = (first + rng.gen_range(1..CLASSES.len())) % CLASSES.len();
    let mut img = background(&mut rng);
    let half = SIZE / 2;
    let mut boxes = Vec::new();
    for (slot, class) in [(0, first), (1, second)] {
        let w = rng.gen_range(MIN_OBJECT..=MAX_OBJECT.min(half));
        let h = rng.gen_range(MIN_OBJECT..=MAX_OBJECT);
        let x0 = slot * half + rng.gen_range(0..=half - w);
        let y0 = rng.gen_range(0..=SIZE - h);
        paint(&mut rng, &mut img, class, x0, y0, w, h);
        boxes.push(BoundingBox::new(CLASSES[class], x0, y0, x0 + w, y0 + h).unwrap());
    }
    finish(index, img, boxes)
}

/// Writes `count` samples as PNGs plus `boxes-json` annotations under `dir`,
/// with a `dataset.json` manifest. Returns the manifest path.
pub fn write_dataset(dir: &Path, seed: u64, count: usize) -> Result<std::path::PathBuf, DataError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    let images = dir.join("images");
    let annotations = dir.join("annotations");
    fs::create_dir_all(&images).map_err(io(&images))?;
    fs::create_dir_all(&annotations).map_err(io(&annotations))?;
    for i in 0..count {
        let (ann, img) = sample(seed, i);
        let png = images.join(format!("{}.png", ann.image_id));
        write_image(&img, &png).map_err(|e| DataError::UnsupportedImage {
            path: png.clone(),
            reason: e.to_string(),
        })?;
        let json = annotations.join(format!("{}.json", ann.image_id));
        fs::write(&json, boxes_json(&ann)).map_err(io(&json))?;
    }
    let manifest = DatasetManifest {
        images_dir: "images".into(),
        annotations_dir: "annotations".into(),
        annotation_format: AnnotationFormat::BoxesJson,
        classes: CLASSES.iter().map(|s| s.to_string()).collect(),
    };
    let path = dir.join("dataset.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).map_err(io(&path))?;
    Ok(path)
}
