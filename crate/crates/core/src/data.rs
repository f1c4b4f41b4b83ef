//! Dataset ingestion: PNG/PPM decoding, annotation parsing, resizing with
//! matching box transforms, and the dataset mean image.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::BoundingBox;
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("degenerate box {0:?} (min >= max)")]
    DegenerateBox([i64; 4]),
    #[error("target {target:?} is larger than image {image:?} and upscaling is disabled")]
    TargetLargerThanImage {
        target: (usize, usize),
        image: (usize, usize),
    },
    #[error("empty input")]
    EmptyInput,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unsupported image {}: {reason}", path.display())]
    UnsupportedImage { path: PathBuf, reason: String },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A decoded image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image_id: String,
    /// `(C, H, W)` with `C` in `{1, 3}`.
    pub pixels: Tensor,
    /// `(H, W)` as decoded.
    pub original_dims: (usize, usize),
}

impl ImageSample {
    pub fn new(image_id: impl Into<String>, pixels: Tensor) -> Self {
        let s = pixels.shape();
        let original_dims = (s[1], s[2]);
        Self {
            image_id: image_id.into(),
            pixels,
            original_dims,
        }
    }

    pub fn load(image_id: impl Into<String>, path: &Path) -> Result<Self, DataError> {
        Ok(Self::new(image_id, read_image(path)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    /// Image file named by the annotation, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filename: Option<String>,
    pub boxes: Vec<BoundingBox>,
}

/// Decodes a PNG or binary PPM (P6) file into `(C, H, W)` values in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor, DataError> {
    let bytes = fs::read(path).map_err(io(path))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(path, &bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(path, &bytes)
    } else {
        Err(DataError::UnsupportedImage {
            path: path.to_path_buf(),
            reason: "not a PNG or P6 PPM file".into(),
        })
    }
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<Tensor, DataError> {
    let unsupported = |reason: String| DataError::UnsupportedImage {
        path: path.to_path_buf(),
        reason,
    };
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| unsupported(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| unsupported(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (stride, channels) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(unsupported(format!("colour type {other:?}"))),
    };
    let mut data = vec![0.0; channels * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = row[x * stride + c] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::from_parts(vec![channels, h, w], data).unwrap())
}

fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<Tensor, DataError> {
    let bad = |reason: &str| DataError::UnsupportedImage {
        path: path.to_path_buf(),
        reason: format!("PPM: {reason}"),
    };
    // header: magic, width, height, maxval separated by whitespace/comments
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("invalid header number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing separator after header"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("invalid dimensions or maxval"));
    }
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let body = &bytes[pos..];
    if body.len() < w * h * 3 * sample_bytes {
        return Err(bad("truncated pixel data"));
    }
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..w * h {
        for c in 0..3 {
            let k = (i * 3 + c) * sample_bytes;
            let v = if sample_bytes == 1 {
                body[k] as usize
            } else {
                (body[k] as usize) << 8 | body[k + 1] as usize
            };
            data[c * h * w + i] = (v.min(maxval)) as f64 / maxval as f64;
        }
    }
    Ok(Tensor::from_parts(vec![3, h, w], data).unwrap())
}

/// Writes an 8-bit binary PPM; single-channel input is replicated.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<(), DataError> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = image.at3(if c == 1 { 0 } else { ch }, y, x);
                out.push(crate::render::quantize(v));
            }
        }
    }
    fs::write(path, out).map_err(io(path))
}

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, name: &str) -> Option<&'a str> {
    node.children()
        .find(|n| n.has_tag_name(name))
        .and_then(|n| n.text())
        .map(str::trim)
}

/// Parses a Pascal VOC annotation document.
///
/// VOC coordinates are 1-based and inclusive; they come out 0-based with an
/// exclusive maximum, so `xmin=1, xmax=10` becomes `x_min=0, x_max=10`.
pub fn parse_voc_annotation(document: &str) -> Result<Annotation, DataError> {
    let doc = roxmltree::Document::parse(document)
        .map_err(|e| DataError::MalformedDocument(e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(DataError::MalformedDocument(format!(
            "root element is <{}>, expected <annotation>",
            root.tag_name().name()
        )));
    }
    let filename = child_text(root, "filename")
        .ok_or_else(|| DataError::MissingField("annotation/filename".into()))?
        .to_string();
    let image_id = Path::new(&filename)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| filename.clone());
    let mut boxes = Vec::new();
    for obj in root.children().filter(|n| n.has_tag_name("object")) {
        let name = child_text(obj, "name").ok_or_else(|| DataError::MissingField("object/name".into()))?;
        let bndbox = obj
            .children()
            .find(|n| n.has_tag_name("bndbox"))
            .ok_or_else(|| DataError::MissingField("object/bndbox".into()))?;
        let coord = |tag: &str| -> Result<i64, DataError> {
            let text = child_text(bndbox, tag)
                .ok_or_else(|| DataError::MissingField(format!("object/bndbox/{tag}")))?;
            text.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(|v| v.round() as i64)
                .ok_or_else(|| DataError::MalformedDocument(format!("{tag} = `{text}` is not a number")))
        };
        let (xmin, ymin, xmax, ymax) = (coord("xmin")?, coord("ymin")?, coord("xmax")?, coord("ymax")?);
        let (x0, y0) = (xmin - 1, ymin - 1);
        if x0 >= xmax || y0 >= ymax || x0 < 0 || y0 < 0 {
            return Err(DataError::DegenerateBox([xmin, ymin, xmax, ymax]));
        }
        boxes.push(BoundingBox {
            class_label: name.to_string(),
            x_min: x0 as usize,
            y_min: y0 as usize,
            x_max: xmax as usize,
            y_max: ymax as usize,
        });
    }
    Ok(Annotation {
        image_id,
        filename: Some(filename),
        boxes,
    })
}

#[derive(Debug, Deserialize)]
struct JsonAnnotation {
    image_id: String,
    boxes: Vec<JsonBox>,
}

#[derive(Debug, Deserialize)]
struct JsonBox {
    label: String,
    x_min: i64,
    y_min: i64,
    x_max: i64,
    y_max: i64,
}

/// Parses a `boxes-json` document: one annotation object or an array of them.
/// Coordinates are already 0-based with exclusive maxima.
pub fn parse_boxes_json(document: &str) -> Result<Vec<Annotation>, DataError> {
    let value: serde_json::Value =
        serde_json::from_str(document).map_err(|e| DataError::MalformedDocument(e.to_string()))?;
    let items: Vec<JsonAnnotation> = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|a| vec![a])
    }
    .map_err(|e| DataError::MalformedDocument(e.to_string()))?;
    items
        .into_iter()
        .map(|a| {
            let boxes = a
                .boxes
                .into_iter()
                .map(|b| {
                    if b.x_min < 0 || b.y_min < 0 || b.x_min >= b.x_max || b.y_min >= b.y_max {
                        return Err(DataError::DegenerateBox([b.x_min, b.y_min, b.x_max, b.y_max]));
                    }
                    Ok(BoundingBox {
                        class_label: b.label,
                        x_min: b.x_min as usize,
                        y_min: b.y_min as usize,
                        x_max: b.x_max as usize,
                        y_max: b.y_max as usize,
                    })
                })
                .collect::<Result<_, _>>()?;
            Ok(Annotation {
                image_id: a.image_id,
                filename: None,
                boxes,
            })
        })
        .collect()
}

/// Serialises one annotation in the `boxes-json` layout.
pub fn boxes_json(annotation: &Annotation) -> String {
    let boxes: Vec<serde_json::Value> = annotation
        .boxes
        .iter()
        .map(|b| {
            serde_json::json!({
                "label": b.class_label,
                "x_min": b.x_min, "y_min": b.y_min, "x_max": b.x_max, "y_max": b.y_max,
            })
        })
        .collect();
    serde_json::to_string(&serde_json::json!({ "image_id": annotation.image_id, "boxes": boxes }))
        .unwrap()
}

/// Resizing geometry applied before the network sees an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreprocessMode {
    /// Scale height and width independently to `(height, width)`.
    StretchResize { height: usize, width: usize },
    /// Scale uniformly until the image covers `(height, width)`, then crop
    /// the overhang symmetrically.
    ShortestSideCenterCrop {
        height: usize,
        width: usize,
        allow_upscale: bool,
    },
}

impl PreprocessMode {
    pub fn stretch(height: usize, width: usize) -> Self {
        Self::StretchResize { height, width }
    }

    pub fn crop(height: usize, width: usize) -> Self {
        Self::ShortestSideCenterCrop {
            height,
            width,
            allow_upscale: true,
        }
    }

    pub fn target(&self) -> (usize, usize) {
        match *self {
            Self::StretchResize { height, width } | Self::ShortestSideCenterCrop { height, width, .. } => {
                (height, width)
            }
        }
    }
}

/// Bilinear resize of a `(C, H, W)` tensor with half-pixel centres and edge clamping.
pub fn resize_bilinear(image: &Tensor, height: usize, width: usize) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (height, width) {
        return image.clone();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(height, h);
    let xs = axis(width, w);
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = lerp(image.at3(ch, y0, x0), image.at3(ch, y0, x1), fx);
                let bottom = lerp(image.at3(ch, y1, x0), image.at3(ch, y1, x1), fx);
                out.push(lerp(top, bottom, fy));
            }
        }
    }
    Tensor::from_parts(vec![c, height, width], out).unwrap()
}

fn crop(image: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Tensor {
    let c = image.shape()[0];
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in 0..height {
            for x in 0..width {
                out.push(image.at3(ch, top + y, left + x));
            }
        }
    }
    Tensor::from_parts(vec![c, height, width], out).unwrap()
}

fn scale_coord(v: usize, factor: f64) -> i64 {
    (v as f64 * factor).round() as i64
}

/// Resizes `sample` per `mode` and moves `annotation`'s boxes with it. Boxes
/// that end up empty are dropped with a warning.
pub fn preprocess(
    sample: &ImageSample,
    annotation: &Annotation,
    mode: PreprocessMode,
) -> Result<(Tensor, Annotation), DataError> {
    let s = sample.pixels.shape();
    let (h, w) = (s[1], s[2]);
    let (th, tw) = mode.target();
    if th == 0 || tw == 0 {
        return Err(DataError::DimensionMismatch("target has a zero extent".into()));
    }
    let (pixels, fy, fx, top, left) = match mode {
        PreprocessMode::StretchResize { .. } => (
            resize_bilinear(&sample.pixels, th, tw),
            th as f64 / h as f64,
            tw as f64 / w as f64,
            0i64,
            0i64,
        ),
        PreprocessMode::ShortestSideCenterCrop { allow_upscale, .. } => {
            if !allow_upscale && (h < th || w < tw) {
                return Err(DataError::TargetLargerThanImage {
                    target: (th, tw),
                    image: (h, w),
                });
            }
            let scale = (th as f64 / h as f64).max(tw as f64 / w as f64);
            let sh = ((h as f64 * scale).round() as usize).max(th);
            let sw = ((w as f64 * scale).round() as usize).max(tw);
            let resized = resize_bilinear(&sample.pixels, sh, sw);
            let (top, left) = ((sh - th) / 2, (sw - tw) / 2);
            (
                crop(&resized, top, left, th, tw),
                sh as f64 / h as f64,
                sw as f64 / w as f64,
                top as i64,
                left as i64,
            )
        }
    };
    let mut boxes = Vec::with_capacity(annotation.boxes.len());
    for b in &annotation.boxes {
        let x0 = (scale_coord(b.x_min, fx) - left).clamp(0, tw as i64);
        let x1 = (scale_coord(b.x_max, fx) - left).clamp(0, tw as i64);
        let y0 = (scale_coord(b.y_min, fy) - top).clamp(0, th as i64);
        let y1 = (scale_coord(b.y_max, fy) - top).clamp(0, th as i64);
        if x0 >= x1 || y0 >= y1 {
            log::warn!(
                "{}: dropping {} box {:?}, empty after preprocessing",
                annotation.image_id,
                b.class_label,
                [b.x_min, b.y_min, b.x_max, b.y_max]
            );
            continue;
        }
        boxes.push(BoundingBox {
            class_label: b.class_label.clone(),
            x_min: x0 as usize,
            y_min: y0 as usize,
            x_max: x1 as usize,
            y_max: y1 as usize,
        });
    }
    Ok((
        pixels,
        Annotation {
            image_id: annotation.image_id.clone(),
            filename: annotation.filename.clone(),
            boxes,
        },
    ))
}

/// Per-pixel, per-channel arithmetic mean of equally shaped images.
pub fn dataset_mean<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor, DataError> {
    let mut iter = images.into_iter();
    let first = iter.next().ok_or(DataError::EmptyInput)?;
    let mut sum = first.data().to_vec();
    let mut n = 1usize;
    for img in iter {
        if img.shape() != first.shape() {
            return Err(DataError::DimensionMismatch(format!(
                "{:?} vs {:?}",
                img.shape(),
                first.shape()
            )));
        }
        sum.iter_mut().zip(img.data()).for_each(|(s, v)| *s += v);
        n += 1;
    }
    sum.iter_mut().for_each(|s| *s /= n as f64);
    Ok(Tensor::from_parts(first.shape().to_vec(), sum).unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnnotationFormat {
    #[serde(rename = "voc-xml")]
    VocXml,
    #[serde(rename = "boxes-json")]
    BoxesJson,
}

/// Dataset manifest. Directories are relative to the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub images_dir: PathBuf,
    pub annotations_dir: PathBuf,
    pub annotation_format: AnnotationFormat,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub annotation: Annotation,
    pub image_path: PathBuf,
}

/// Annotated images of a dataset, sorted by image id.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self, DataError> {
        let manifest_path = manifest_path.as_ref();
        let text = fs::read_to_string(manifest_path).map_err(io(manifest_path))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DataError::MalformedDocument(e.to_string()))?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let images_dir = base.join(&manifest.images_dir);
        let ann_dir = base.join(&manifest.annotations_dir);
        let ext = match manifest.annotation_format {
            AnnotationFormat::VocXml => "xml",
            AnnotationFormat::BoxesJson => "json",
        };
        let mut files: Vec<PathBuf> = fs::read_dir(&ann_dir)
            .map_err(io(&ann_dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == ext))
            .collect();
        files.sort();
        let mut by_id: BTreeMap<String, Annotation> = BTreeMap::new();
        for f in files {
            let doc = fs::read_to_string(&f).map_err(io(&f))?;
            let parsed = match manifest.annotation_format {
                AnnotationFormat::VocXml => vec![parse_voc_annotation(&doc)?],
                AnnotationFormat::BoxesJson => parse_boxes_json(&doc)?,
            };
            for mut a in parsed {
                a.boxes.retain(|b| {
                    let known = manifest.classes.contains(&b.class_label);
                    if !known {
                        log::warn!("{}: ignoring box of unlisted class `{}`", a.image_id, b.class_label);
                    }
                    known
                });
                by_id.insert(a.image_id.clone(), a);
            }
        }
        let mut items = Vec::with_capacity(by_id.len());
        for (id, annotation) in by_id {
            let image_path = match &annotation.filename {
                Some(f) => images_dir.join(f),
                None => ["png", "ppm"]
                    .iter()
                    .map(|e| images_dir.join(format!("{id}.{e}")))
                    .find(|p| p.exists())
                    .unwrap_or_else(|| images_dir.join(format!("{id}.png"))),
            };
            items.push(DatasetItem {
                annotation,
                image_path,
            });
        }
        Ok(Self {
            classes: manifest.classes,
            items,
        })
    }
}
