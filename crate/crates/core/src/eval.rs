//! Inference and mAP evaluation.
//!
//! Detection: class scores from a softmax over the logits, boxes decoded
//! against the priors, thresholded, then per-class NMS. AP per class uses
//! the all-points interpolated precision/recall curve with greedy TP
//! assignment by descending score and one TP per ground-truth box; mAP
//! averages over the classes present in the test set.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{decode_box, iou, nms, CornerBox, Detection};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{invalid_arg, Result};
use crate::pipeline::Detector;
use crate::tensor::softmax_last_axis;

/// Run one image through the detector: decode, threshold, suppress.
pub fn detect(model: &impl Detector, image: &crate::tensor::Tensor, cfg: &RunConfig) -> Result<Vec<Detection>> {
    let (loc, logits) = model.raw_predict(image)?;
    let priors = model.priors();
    let k1 = model.num_classes() + 1;
    let scores = softmax_last_axis(&logits, k1);

    let mut candidates = Vec::new();
    for (p, prior) in priors.iter().enumerate() {
        let offsets = [loc[p * 4], loc[p * 4 + 1], loc[p * 4 + 2], loc[p * 4 + 3]];
        for class in 1..k1 {
            let score = scores[p * k1 + class];
            if score < cfg.score_threshold {
                continue;
            }
            let bbox = decode_box(&offsets, prior);
            if !bbox.is_valid() {
                continue; // clipped to nothing
            }
            candidates.push(Detection { class_id: class - 1, score, bbox });
        }
    }
    nms(&candidates, cfg.nms_iou_threshold, cfg.score_threshold, cfg.max_detections)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub class_name: String,
    /// None when the class has no ground truth in the test set (excluded
    /// from the mean).
    pub ap: Option<f64>,
    pub num_ground_truth: usize,
    pub num_detections: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassAp>,
    pub mean_ap: f64,
    pub evaluated_classes: usize,
    pub iou_threshold: f64,
}

/// A detection attributed to the image it came from.
#[derive(Debug, Clone)]
pub struct ImageDetections {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

pub fn detect_dataset(
    model: &impl Detector,
    dataset: &Dataset,
    cfg: &RunConfig,
) -> Result<Vec<ImageDetections>> {
    dataset
        .items
        .iter()
        .map(|item| {
            Ok(ImageDetections {
                image_id: item.id.clone(),
                detections: detect(model, &item.image, cfg)?,
            })
        })
        .collect()
}

/// All-points interpolated average precision from a TP/FP sequence sorted by
/// descending score.
fn average_precision(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tp_flags.len()); // (recall, precision)
    for &is_tp in tp_flags {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    // precision envelope from the right, integrated over recall steps
    let mut ap = 0.0;
    let mut best_precision = 0.0;
    for idx in (0..points.len()).rev() {
        let (recall, precision) = points[idx];
        if precision > best_precision {
            best_precision = precision;
        }
        let recall_before = if idx == 0 { 0.0 } else { points[idx - 1].0 };
        if recall > recall_before {
            ap += (recall - recall_before) * best_precision;
        }
    }
    ap
}

/// Evaluate detections against ground truth at the configured IoU threshold.
pub fn evaluate_map(
    per_image: &[ImageDetections],
    dataset: &Dataset,
    iou_threshold: f64,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(invalid_arg!("cannot evaluate on an empty dataset"));
    }
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(invalid_arg!("evaluation IoU threshold {iou_threshold} outside (0, 1)"));
    }
    if per_image.len() != dataset.len() {
        return Err(invalid_arg!(
            "{} detection lists for {} images",
            per_image.len(),
            dataset.len()
        ));
    }
    let num_classes = dataset.num_classes();
    let mut per_class = Vec::with_capacity(num_classes);
    let mut mean_acc = 0.0;
    let mut evaluated = 0usize;

    for class in 0..num_classes {
        // ground truth boxes of this class, keyed by image index
        let gts: Vec<Vec<&CornerBox>> = dataset
            .items
            .iter()
            .map(|item| {
                item.truth
                    .boxes
                    .iter()
                    .zip(&item.truth.labels)
                    .filter(|(_, &l)| l == class)
                    .map(|(b, _)| b)
                    .collect()
            })
            .collect();
        let num_gt: usize = gts.iter().map(|v| v.len()).sum();

        // detections of this class: (image index, detection order, score, box)
        let mut dets: Vec<(usize, usize, f64, CornerBox)> = Vec::new();
        for (img_idx, img) in per_image.iter().enumerate() {
            for (d_idx, d) in img.detections.iter().enumerate() {
                if d.class_id == class {
                    dets.push((img_idx, d_idx, d.score, d.bbox));
                }
            }
        }
        dets.sort_by(|a, b| {
            b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
        });

        let mut matched: Vec<Vec<bool>> = gts.iter().map(|v| vec![false; v.len()]).collect();
        let mut tp_flags = Vec::with_capacity(dets.len());
        for (img_idx, _, _, bbox) in &dets {
            let mut best: Option<(usize, f64)> = None;
            for (g_idx, g) in gts[*img_idx].iter().enumerate() {
                if matched[*img_idx][g_idx] {
                    continue;
                }
                let v = iou(bbox, g);
                if v >= iou_threshold && best.map(|(_, bv)| v > bv).unwrap_or(true) {
                    best = Some((g_idx, v));
                }
            }
            match best {
                Some((g_idx, _)) => {
                    matched[*img_idx][g_idx] = true;
                    tp_flags.push(true);
                }
                None => tp_flags.push(false),
            }
        }

        let ap = if num_gt == 0 { None } else { Some(average_precision(&tp_flags, num_gt)) };
        if let Some(v) = ap {
            mean_acc += v;
            evaluated += 1;
        }
        per_class.push(ClassAp {
            class_id: class,
            class_name: dataset.class_names[class].clone(),
            ap,
            num_ground_truth: num_gt,
            num_detections: dets.len(),
        });
    }

    Ok(EvalReport {
        per_class,
        mean_ap: if evaluated > 0 { mean_acc / evaluated as f64 } else { 0.0 },
        evaluated_classes: evaluated,
        iou_threshold,
    })
}

/// Export detections as CSV: image_id,class,score,xmin,ymin,xmax,ymax with
/// normalized coordinates at 6 decimal places.
pub fn write_detections_csv(
    path: &Path,
    per_image: &[ImageDetections],
    class_names: &[String],
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "image_id,class,score,xmin,ymin,xmax,ymax")?;
    for img in per_image {
        for d in &img.detections {
            let name = class_names
                .get(d.class_id)
                .map(|s| s.as_str())
                .unwrap_or("unknown");
            writeln!(
                f,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                img.image_id, name, d.score, d.bbox.xmin, d.bbox.ymin, d.bbox.xmax, d.bbox.ymax
            )?;
        }
    }
    Ok(())
}
