//! Synthetic shapes detection dataset and its on-disk format.
//!
//! Images are 3×64×64 floats in [0,1]: a noisy dark background with 1–3
//! bright filled shapes (circle / square / triangle), each annotated with its
//! exact bounding box. Generation is a pure function of
//! (n_train, n_test, seed, class list); train and test draw from independent
//! seeded substreams so the test split does not depend on n_train.
//!
//! Disk layout: `images/<id>.f64` — three little-endian u32s (C, H, W)
//! followed by row-major little-endian f64 pixels — plus one
//! `annotations_<split>.json` per split. Round-trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, CornerBox, GroundTruth};
use crate::error::{invalid_arg, Error, Result};
use crate::net::INPUT_SHAPE;
use crate::rng::DetRng;

pub const IMAGE_SHAPE: [usize; 3] = INPUT_SHAPE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

pub const DEFAULT_CLASSES: [ShapeKind; 3] =
    [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

impl ShapeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub image: crate::tensor::Tensor,
    pub truth: GroundTruth,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
    pub split: Split,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        let area_px = (IMAGE_SHAPE[1] * IMAGE_SHAPE[2]) as f64;
        for item in &self.items {
            if !seen.insert(item.id.clone()) {
                return Err(invalid_arg!("duplicate dataset id '{}'", item.id));
            }
            if item.image.shape != IMAGE_SHAPE {
                return Err(invalid_arg!(
                    "image '{}' has shape {:?}, expected {:?}",
                    item.id,
                    item.image.shape,
                    IMAGE_SHAPE
                ));
            }
            for b in &item.truth.boxes {
                if !b.is_valid() || b.xmin < 0.0 || b.ymin < 0.0 || b.xmax > 1.0 || b.ymax > 1.0 {
                    return Err(invalid_arg!("image '{}' has an out-of-range box", item.id));
                }
                if b.area() * area_px < 4.0 {
                    return Err(invalid_arg!(
                        "image '{}' has a box below the 4-pixel minimum area",
                        item.id
                    ));
                }
            }
            for &l in &item.truth.labels {
                if l >= self.class_names.len() {
                    return Err(invalid_arg!("image '{}' has label {l} out of range", item.id));
                }
            }
        }
        Ok(())
    }
}

struct PlacedShape {
    kind: ShapeKind,
    label: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    color: [f64; 3],
}

impl PlacedShape {
    fn bbox(&self) -> CornerBox {
        CornerBox {
            xmin: self.cx - 0.5 * self.w,
            ymin: self.cy - 0.5 * self.h,
            xmax: self.cx + 0.5 * self.w,
            ymax: self.cy + 0.5 * self.h,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Square => dx.abs() <= 0.5 * self.w && dy.abs() <= 0.5 * self.h,
            ShapeKind::Circle => {
                let nx = dx / (0.5 * self.w);
                let ny = dy / (0.5 * self.h);
                nx * nx + ny * ny <= 1.0
            }
            ShapeKind::Triangle => {
                // apex-up: (cx, top), (cx−w/2, bottom), (cx+w/2, bottom)
                let (ax, ay) = (self.cx, self.cy - 0.5 * self.h);
                let (bx, by) = (self.cx - 0.5 * self.w, self.cy + 0.5 * self.h);
                let (cx2, cy2) = (self.cx + 0.5 * self.w, self.cy + 0.5 * self.h);
                let sign = |px: f64, py: f64, qx: f64, qy: f64, rx: f64, ry: f64| {
                    (px - rx) * (qy - ry) - (qx - rx) * (py - ry)
                };
                let d1 = sign(x, y, ax, ay, bx, by);
                let d2 = sign(x, y, bx, by, cx2, cy2);
                let d3 = sign(x, y, cx2, cy2, ax, ay);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }
}

/// Shape side length range, as a fraction of the image (10–24 px at 64×64):
/// sized so the feature-map prior scales cover the objects.
const SHAPE_SIZE: (f64, f64) = (0.16, 0.38);
const MAX_SHAPES: usize = 3;
const BACKGROUND_MAX: f64 = 0.2;
const PLACEMENT_RETRIES: usize = 20;
const MAX_OVERLAP_IOU: f64 = 0.15;

fn generate_image(
    rng: &mut DetRng,
    classes: &[ShapeKind],
    class_counter: &mut usize,
    id: String,
) -> DatasetItem {
    let (c, h, w) = (IMAGE_SHAPE[0], IMAGE_SHAPE[1], IMAGE_SHAPE[2]);
    let mut pixels: Vec<f64> = (0..c * h * w).map(|_| rng.range(0.0, BACKGROUND_MAX)).collect();

    let n_shapes = 1 + rng.below(MAX_SHAPES);
    let mut shapes: Vec<PlacedShape> = Vec::new();
    for _ in 0..n_shapes {
        let label = *class_counter % classes.len();
        let kind = classes[label];
        *class_counter += 1;
        for attempt in 0..PLACEMENT_RETRIES {
            let sw = rng.range(SHAPE_SIZE.0, SHAPE_SIZE.1);
            let sh = match kind {
                ShapeKind::Triangle => (sw * rng.range(0.85, 1.15)).min(SHAPE_SIZE.1),
                _ => sw,
            };
            let cx = rng.range(0.5 * sw + 0.02, 0.98 - 0.5 * sw);
            let cy = rng.range(0.5 * sh + 0.02, 0.98 - 0.5 * sh);
            let color = [rng.range(0.45, 1.0), rng.range(0.45, 1.0), rng.range(0.45, 1.0)];
            let candidate = PlacedShape { kind, label, cx, cy, w: sw, h: sh, color };
            let bbox = candidate.bbox();
            let overlaps = shapes.iter().any(|s| iou(&s.bbox(), &bbox) > MAX_OVERLAP_IOU);
            if !overlaps {
                shapes.push(candidate);
                break;
            }
            let _ = attempt;
        }
    }

    for shape in &shapes {
        let bbox = shape.bbox();
        let px_min = ((bbox.xmin * w as f64).floor().max(0.0)) as usize;
        let px_max = ((bbox.xmax * w as f64).ceil() as usize).min(w);
        let py_min = ((bbox.ymin * h as f64).floor().max(0.0)) as usize;
        let py_max = ((bbox.ymax * h as f64).ceil() as usize).min(h);
        for py in py_min..py_max {
            let y = (py as f64 + 0.5) / h as f64;
            for px in px_min..px_max {
                let x = (px as f64 + 0.5) / w as f64;
                if shape.contains(x, y) {
                    for ch in 0..c {
                        pixels[(ch * h + py) * w + px] = shape.color[ch];
                    }
                }
            }
        }
    }

    let boxes: Vec<CornerBox> = shapes.iter().map(|s| s.bbox()).collect();
    let labels: Vec<usize> = shapes.iter().map(|s| s.label).collect();
    DatasetItem {
        image: crate::tensor::Tensor::new(IMAGE_SHAPE.to_vec(), pixels).expect("image shape"),
        truth: GroundTruth::new(boxes, labels).expect("generated boxes valid"),
        id,
    }
}

/// Deterministic synthetic detection dataset (the PASCAL-VOC stand-in).
pub fn generate_shapes_dataset(
    n_train: usize,
    n_test: usize,
    classes: &[ShapeKind],
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_test == 0 {
        return Err(invalid_arg!("dataset sizes must be >= 1, got {n_train}/{n_test}"));
    }
    if classes.is_empty() {
        return Err(invalid_arg!("need at least one shape class"));
    }
    let class_names: Vec<String> = classes.iter().map(|k| k.name().to_string()).collect();

    let make = |split: Split, count: usize, stream: u64| -> Dataset {
        let mut rng = DetRng::substream(seed, stream);
        let mut class_counter = 0usize;
        let items = (0..count)
            .map(|i| {
                generate_image(
                    &mut rng,
                    classes,
                    &mut class_counter,
                    format!("{}_{i:06}", split.name()),
                )
            })
            .collect();
        Dataset { items, split, class_names: class_names.clone() }
    };
    let train = make(Split::Train, n_train, 1);
    let test = make(Split::Test, n_test, 2);
    train.validate()?;
    test.validate()?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Disk format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    split: Split,
    classes: Vec<String>,
    items: Vec<AnnotationItem>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationItem {
    id: String,
    boxes: Vec<[f64; 4]>,
    labels: Vec<usize>,
}

fn image_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join("images").join(format!("{id}.f64"))
}

fn annotation_path(dir: &Path, split: Split) -> std::path::PathBuf {
    dir.join(format!("annotations_{}.json", split.name()))
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir.join("images"))?;
    for item in &dataset.items {
        let mut buf = Vec::with_capacity(12 + item.image.data.len() * 8);
        for &d in &item.image.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &item.image.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(image_path(dir, &item.id), buf)?;
    }
    let ann = AnnotationFile {
        split: dataset.split,
        classes: dataset.class_names.clone(),
        items: dataset
            .items
            .iter()
            .map(|item| AnnotationItem {
                id: item.id.clone(),
                boxes: item
                    .truth
                    .boxes
                    .iter()
                    .map(|b| [b.xmin, b.ymin, b.xmax, b.ymax])
                    .collect(),
                labels: item.truth.labels.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&ann)
        .map_err(|e| Error::Format(format!("annotation serialization failed: {e}")))?;
    let mut f = fs::File::create(annotation_path(dir, dataset.split))?;
    f.write_all(&json)?;
    Ok(())
}

fn read_image(path: &Path) -> Result<crate::tensor::Tensor> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < 12 {
        return Err(Error::Format(format!("{}: truncated image header", path.display())));
    }
    let dim = |i: usize| u32::from_le_bytes(raw[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let shape = vec![dim(0), dim(1), dim(2)];
    let numel: usize = shape.iter().product();
    if raw.len() != 12 + numel * 8 {
        return Err(Error::Format(format!(
            "{}: expected {} pixel bytes for shape {:?}, found {}",
            path.display(),
            numel * 8,
            shape,
            raw.len() - 12
        )));
    }
    let data: Vec<f64> = raw[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    crate::tensor::Tensor::new(shape, data)
}

pub fn load_dataset(dir: &Path, split: Split) -> Result<Dataset> {
    let ann_path = annotation_path(dir, split);
    let text = fs::read_to_string(&ann_path)?;
    let ann: AnnotationFile = serde_json::from_str(&text).map_err(|e| {
        Error::Format(format!(
            "{}: {} (line {}, column {})",
            ann_path.display(),
            e,
            e.line(),
            e.column()
        ))
    })?;
    if ann.split != split {
        return Err(Error::Format(format!(
            "{}: file is for split '{}', expected '{}'",
            ann_path.display(),
            ann.split.name(),
            split.name()
        )));
    }
    let mut items = Vec::with_capacity(ann.items.len());
    for it in ann.items {
        let path = image_path(dir, &it.id);
        if !path.exists() {
            return Err(Error::Format(format!(
                "annotations reference image '{}' but {} is missing",
                it.id,
                path.display()
            )));
        }
        let image = read_image(&path)?;
        let mut boxes = Vec::with_capacity(it.boxes.len());
        for b in &it.boxes {
            boxes.push(CornerBox::new(b[0], b[1], b[2], b[3]).map_err(|_| {
                Error::Format(format!(
                    "image '{}': box [{}, {}, {}, {}] violates xmin < xmax, ymin < ymax",
                    it.id, b[0], b[1], b[2], b[3]
                ))
            })?);
        }
        let truth = GroundTruth::new(boxes, it.labels)
            .map_err(|e| Error::Format(format!("image '{}': {e}", it.id)))?;
        items.push(DatasetItem { image, truth, id: it.id });
    }
    let dataset = Dataset { items, split, class_names: ann.classes };
    dataset.validate().map_err(|e| Error::Format(format!("{}: {e}", ann_path.display())))?;
    Ok(dataset)
}
