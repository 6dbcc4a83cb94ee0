//! Anchor-box geometry: prior generation, offset encoding, IoU, the
//! prior/ground-truth matching protocol, and non-maximum suppression.
//! Everything here is pure; the differentiable heads live in `detector`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};

/// Axis-aligned box in normalized corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl CornerBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = CornerBox { xmin, ymin, xmax, ymax };
        if !b.is_valid() {
            return Err(invalid_arg!(
                "degenerate box ({xmin}, {ymin}, {xmax}, {ymax}): corners must satisfy min < max"
            ));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        self.xmin < self.xmax
            && self.ymin < self.ymax
            && [self.xmin, self.ymin, self.xmax, self.ymax].iter().all(|v| v.is_finite())
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))
    }

    pub fn clip_unit(&self) -> CornerBox {
        CornerBox {
            xmin: self.xmin.clamp(0.0, 1.0),
            ymin: self.ymin.clamp(0.0, 1.0),
            xmax: self.xmax.clamp(0.0, 1.0),
            ymax: self.ymax.clamp(0.0, 1.0),
        }
    }
}

/// Intersection over union of two corner boxes, in [0, 1].
pub fn iou(a: &CornerBox, b: &CornerBox) -> f64 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Which predictor input a prior is served by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorSource {
    /// Cell (row, col) of the x^(l) feature map.
    FeatureMap { row: usize, col: usize },
    /// Slot of the reduced feature z (one per global scale).
    Global { slot: usize },
}

/// Fixed reference box in normalized center/size coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub source: PriorSource,
}

impl PriorBox {
    pub fn corners(&self) -> CornerBox {
        CornerBox {
            xmin: self.cx - 0.5 * self.w,
            ymin: self.cy - 0.5 * self.h,
            xmax: self.cx + 0.5 * self.w,
            ymax: self.cy + 0.5 * self.h,
        }
    }

    fn from_corners(c: CornerBox, source: PriorSource) -> PriorBox {
        let (cx, cy) = c.center();
        PriorBox { cx, cy, w: c.width(), h: c.height(), source }
    }

    /// Clip to the unit square; untouched priors keep their exact
    /// center/size representation.
    fn clipped_unit(self) -> PriorBox {
        let corners = self.corners();
        let clipped = corners.clip_unit();
        if clipped == corners {
            self
        } else {
            PriorBox::from_corners(clipped, self.source)
        }
    }
}

/// Prior scales and aspect ratios. Feature-map priors are small (low-level
/// features, fine localization); global priors are large (high-level
/// features, whole shapes), which the validation enforces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub scales_featmap: Vec<f64>,
    pub scales_global: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            scales_featmap: vec![0.15, 0.3],
            scales_global: vec![0.6, 0.85],
            aspect_ratios: vec![1.0, 2.0, 0.5],
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales_featmap.is_empty() || self.aspect_ratios.is_empty() {
            return Err(invalid_arg!("prior config needs at least one feature-map scale and one aspect ratio"));
        }
        for &s in self.scales_featmap.iter().chain(&self.scales_global) {
            if !(s > 0.0 && s <= 1.0) {
                return Err(invalid_arg!("prior scale {s} outside (0, 1]"));
            }
        }
        for &a in &self.aspect_ratios {
            if !(a > 0.0 && a.is_finite()) {
                return Err(invalid_arg!("aspect ratio {a} must be positive"));
            }
        }
        let max_feat = self.scales_featmap.iter().cloned().fold(0.0, f64::max);
        if let Some(&min_glob) =
            self.scales_global.iter().min_by(|a, b| a.partial_cmp(b).unwrap())
        {
            if min_glob <= max_feat {
                return Err(invalid_arg!(
                    "global prior scales ({min_glob}) must exceed feature-map scales ({max_feat})"
                ));
            }
        }
        Ok(())
    }

    /// Priors per feature-map cell.
    pub fn anchors_per_cell(&self) -> usize {
        self.scales_featmap.len() * self.aspect_ratios.len()
    }

    pub fn num_global(&self) -> usize {
        self.scales_global.len()
    }
}

/// Uniformly tile priors over an H×W feature map, then append the global
/// priors for z. One prior per (scale, aspect) pair sits at each cell center
/// ((col+0.5)/W, (row+0.5)/H) with width s·√a and height s/√a; each global
/// scale contributes a single centered square prior. All boxes are clipped
/// to the unit square.
pub fn generate_priors(
    featmap_h: usize,
    featmap_w: usize,
    config: &PriorConfig,
) -> Result<Vec<PriorBox>> {
    if featmap_h == 0 || featmap_w == 0 {
        return Err(invalid_arg!("feature map dims must be >= 1, got {featmap_h}x{featmap_w}"));
    }
    config.validate()?;
    let mut priors = Vec::with_capacity(
        featmap_h * featmap_w * config.anchors_per_cell() + config.num_global(),
    );
    for row in 0..featmap_h {
        for col in 0..featmap_w {
            let cx = (col as f64 + 0.5) / featmap_w as f64;
            let cy = (row as f64 + 0.5) / featmap_h as f64;
            for &s in &config.scales_featmap {
                for &a in &config.aspect_ratios {
                    let w = s * a.sqrt();
                    let h = s / a.sqrt();
                    let source = PriorSource::FeatureMap { row, col };
                    priors.push(PriorBox { cx, cy, w, h, source }.clipped_unit());
                }
            }
        }
    }
    for (slot, &s) in config.scales_global.iter().enumerate() {
        let source = PriorSource::Global { slot };
        priors.push(PriorBox { cx: 0.5, cy: 0.5, w: s, h: s, source }.clipped_unit());
    }
    Ok(priors)
}

/// SSD-style offsets of a ground-truth box relative to a prior:
/// ((gcx−pcx)/pw, (gcy−pcy)/ph, ln(gw/pw), ln(gh/ph)).
pub fn encode_box(gt: &CornerBox, prior: &PriorBox) -> Result<[f64; 4]> {
    if !gt.is_valid() {
        return Err(invalid_arg!(
            "cannot encode degenerate box ({}, {}, {}, {})",
            gt.xmin,
            gt.ymin,
            gt.xmax,
            gt.ymax
        ));
    }
    let (gcx, gcy) = gt.center();
    Ok([
        (gcx - prior.cx) / prior.w,
        (gcy - prior.cy) / prior.h,
        (gt.width() / prior.w).ln(),
        (gt.height() / prior.h).ln(),
    ])
}

/// Inverse of [`encode_box`]; the result is clipped to the unit square here
/// (never in the offsets) so encode/decode stays an exact inverse pair for
/// in-bounds boxes.
pub fn decode_box(offsets: &[f64; 4], prior: &PriorBox) -> CornerBox {
    let cx = prior.cx + offsets[0] * prior.w;
    let cy = prior.cy + offsets[1] * prior.h;
    let w = prior.w * offsets[2].exp();
    let h = prior.h * offsets[3].exp();
    CornerBox {
        xmin: cx - 0.5 * w,
        ymin: cy - 0.5 * h,
        xmax: cx + 0.5 * w,
        ymax: cy + 0.5 * h,
    }
    .clip_unit()
}

/// Per-image annotation: y_loc (boxes) and y_cls (labels), same length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<CornerBox>,
    pub labels: Vec<usize>,
}

impl GroundTruth {
    pub fn new(boxes: Vec<CornerBox>, labels: Vec<usize>) -> Result<Self> {
        if boxes.len() != labels.len() {
            return Err(invalid_arg!(
                "{} boxes but {} labels",
                boxes.len(),
                labels.len()
            ));
        }
        for b in &boxes {
            if !b.is_valid() {
                return Err(invalid_arg!(
                    "invalid ground-truth box ({}, {}, {}, {})",
                    b.xmin,
                    b.ymin,
                    b.xmax,
                    b.ymax
                ));
            }
        }
        Ok(GroundTruth { boxes, labels })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Per-prior matching outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Assignment {
    Background,
    Matched { gt_index: usize, class_id: usize, offsets: [f64; 4] },
}

impl Assignment {
    pub fn is_matched(&self) -> bool {
        matches!(self, Assignment::Matched { .. })
    }
}

/// Match priors against ground truth.
///
/// Every ground-truth box is first force-matched to its best prior by
/// bipartite greedy selection (globally highest IoU pair first, each prior
/// usable once; ties break toward the lower gt index, then lower prior
/// index), so no gt box is left unmatched even below the threshold. Every
/// remaining prior with IoU ≥ `iou_threshold` against some gt is then matched
/// to its best gt; all other priors are background.
pub fn match_priors(
    priors: &[PriorBox],
    gt: &GroundTruth,
    iou_threshold: f64,
) -> Result<Vec<Assignment>> {
    if priors.is_empty() {
        return Err(invalid_arg!("cannot match against an empty prior set"));
    }
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(invalid_arg!("matching threshold {iou_threshold} outside (0, 1)"));
    }
    let mut assignments = vec![Assignment::Background; priors.len()];
    if gt.is_empty() {
        return Ok(assignments);
    }

    let n_gt = gt.len();
    let mut table = vec![0.0; n_gt * priors.len()];
    for (g, gbox) in gt.boxes.iter().enumerate() {
        for (p, prior) in priors.iter().enumerate() {
            table[g * priors.len() + p] = iou(gbox, &prior.corners());
        }
    }

    // forced best matches, bipartite greedy
    let mut gt_unmatched: Vec<usize> = (0..n_gt).collect();
    let mut prior_forced = vec![false; priors.len()];
    while !gt_unmatched.is_empty() && prior_forced.iter().any(|f| !f) {
        let mut best = (f64::NEG_INFINITY, usize::MAX, usize::MAX);
        for &g in &gt_unmatched {
            for (p, &forced) in prior_forced.iter().enumerate() {
                if forced {
                    continue;
                }
                let v = table[g * priors.len() + p];
                if v > best.0 {
                    best = (v, g, p);
                }
            }
        }
        let (_, g, p) = best;
        assignments[p] = Assignment::Matched {
            gt_index: g,
            class_id: gt.labels[g],
            offsets: encode_box(&gt.boxes[g], &priors[p])?,
        };
        prior_forced[p] = true;
        gt_unmatched.retain(|&x| x != g);
    }

    // threshold matches for the rest
    for (p, _prior) in priors.iter().enumerate() {
        if prior_forced[p] {
            continue;
        }
        let mut best_g = 0;
        let mut best_v = f64::NEG_INFINITY;
        for g in 0..n_gt {
            let v = table[g * priors.len() + p];
            if v > best_v {
                best_v = v;
                best_g = g;
            }
        }
        if best_v >= iou_threshold {
            assignments[p] = Assignment::Matched {
                gt_index: best_g,
                class_id: gt.labels[best_g],
                offsets: encode_box(&gt.boxes[best_g], &priors[p])?,
            };
        }
    }
    Ok(assignments)
}

/// A scored, classified box emitted by inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: CornerBox,
}

/// Greedy per-class non-maximum suppression. Detections below
/// `score_threshold` are dropped; within a class, the highest-scoring box
/// suppresses any remaining box with IoU ≥ `iou_threshold`. The result is
/// sorted by descending score (ties: lower input index) and truncated to
/// `max_out` entries.
pub fn nms(
    detections: &[Detection],
    iou_threshold: f64,
    score_threshold: f64,
    max_out: usize,
) -> Result<Vec<Detection>> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(invalid_arg!("nms iou threshold {iou_threshold} outside (0, 1)"));
    }
    if !(score_threshold > 0.0 && score_threshold < 1.0) {
        return Err(invalid_arg!("nms score threshold {score_threshold} outside (0, 1)"));
    }
    let mut order: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].score >= score_threshold)
        .collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut suppressed = vec![false; detections.len()];
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order {
            if j == i || suppressed[j] || detections[j].class_id != detections[i].class_id {
                continue;
            }
            if detections[j].score > detections[i].score {
                continue; // already handled earlier in score order
            }
            if iou(&detections[i].bbox, &detections[j].bbox) >= iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    kept.truncate(max_out);
    Ok(kept.into_iter().map(|i| detections[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;
    use proptest::prelude::*;

    fn feat_only(scales: &[f64], aspects: &[f64]) -> PriorConfig {
        PriorConfig {
            scales_featmap: scales.to_vec(),
            scales_global: vec![],
            aspect_ratios: aspects.to_vec(),
        }
    }

    #[test]
    fn single_cell_single_prior() {
        let priors = generate_priors(1, 1, &feat_only(&[0.5], &[1.0])).unwrap();
        assert_eq!(priors.len(), 1);
        let p = priors[0];
        assert_eq!((p.cx, p.cy, p.w, p.h), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn two_by_two_centers() {
        let priors = generate_priors(2, 2, &feat_only(&[0.2], &[1.0])).unwrap();
        let centers: Vec<(f64, f64)> = priors.iter().map(|p| (p.cx, p.cy)).collect();
        assert_eq!(
            centers,
            vec![(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]
        );
    }

    #[test]
    fn aspect_ratio_shapes_prior() {
        let priors = generate_priors(1, 1, &feat_only(&[0.2], &[4.0])).unwrap();
        assert!((priors[0].w - 0.4).abs() < 1e-12);
        assert!((priors[0].h - 0.1).abs() < 1e-12);
    }

    #[test]
    fn global_priors_appended_centered() {
        let cfg = PriorConfig::default();
        let priors = generate_priors(2, 2, &cfg).unwrap();
        assert_eq!(priors.len(), 2 * 2 * cfg.anchors_per_cell() + 2);
        let g = priors[priors.len() - 2];
        assert_eq!(g.source, PriorSource::Global { slot: 0 });
        assert_eq!((g.cx, g.cy, g.w, g.h), (0.5, 0.5, 0.6, 0.6));
    }

    #[test]
    fn empty_scales_rejected() {
        assert!(generate_priors(2, 2, &feat_only(&[], &[1.0])).is_err());
        assert!(generate_priors(0, 2, &PriorConfig::default()).is_err());
    }

    #[test]
    fn global_must_exceed_featmap_scales() {
        let cfg = PriorConfig {
            scales_featmap: vec![0.5],
            scales_global: vec![0.4],
            aspect_ratios: vec![1.0],
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_identity_is_zero() {
        let prior = PriorBox { cx: 0.5, cy: 0.5, w: 0.2, h: 0.2, source: PriorSource::Global { slot: 0 } };
        let off = encode_box(&prior.corners(), &prior).unwrap();
        for d in off {
            assert!(d.abs() < 1e-12);
        }
    }

    #[test]
    fn encode_double_width_is_ln2() {
        let prior = PriorBox { cx: 0.5, cy: 0.5, w: 0.2, h: 0.2, source: PriorSource::Global { slot: 0 } };
        let gt = CornerBox::new(0.3, 0.4, 0.7, 0.6).unwrap();
        let off = encode_box(&gt, &prior).unwrap();
        assert!(off[0].abs() < 1e-12 && off[1].abs() < 1e-12);
        assert!((off[2] - 2f64.ln()).abs() < 1e-12);
        assert!(off[3].abs() < 1e-12);
    }

    #[test]
    fn encode_rejects_degenerate() {
        let prior = PriorBox { cx: 0.5, cy: 0.5, w: 0.2, h: 0.2, source: PriorSource::Global { slot: 0 } };
        let degenerate = CornerBox { xmin: 0.4, ymin: 0.4, xmax: 0.4, ymax: 0.6 };
        assert!(encode_box(&degenerate, &prior).is_err());
    }

    #[test]
    fn iou_cases() {
        let a = CornerBox::new(0.0, 0.0, 0.2, 0.2).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        let b = CornerBox::new(0.5, 0.5, 0.7, 0.7).unwrap();
        assert_eq!(iou(&a, &b), 0.0);
        // (0,0,2,2) vs (1,0,3,2) scaled to unit coords: areas 4 and 4, inter 2 → 1/3
        let c = CornerBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let d = CornerBox::new(0.25, 0.0, 0.75, 0.5).unwrap();
        assert!((iou(&c, &d) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn match_exact_prior() {
        let priors = generate_priors(2, 2, &feat_only(&[0.3], &[1.0])).unwrap();
        let gt = GroundTruth::new(vec![priors[0].corners()], vec![1]).unwrap();
        let a = match_priors(&priors, &gt, 0.5).unwrap();
        assert!(matches!(a[0], Assignment::Matched { gt_index: 0, class_id: 1, .. }));
        assert!(a[1..].iter().all(|x| !x.is_matched()));
    }

    #[test]
    fn low_iou_gt_still_force_matched() {
        let priors = generate_priors(2, 2, &feat_only(&[0.2], &[1.0])).unwrap();
        // tiny box overlapping nothing above threshold
        let gt =
            GroundTruth::new(vec![CornerBox::new(0.4, 0.4, 0.45, 0.45).unwrap()], vec![0]).unwrap();
        let a = match_priors(&priors, &gt, 0.5).unwrap();
        assert_eq!(a.iter().filter(|x| x.is_matched()).count(), 1);
    }

    #[test]
    fn match_rejects_bad_inputs() {
        let gt = GroundTruth::new(vec![], vec![]).unwrap();
        assert!(match_priors(&[], &gt, 0.5).is_err());
        let priors = generate_priors(1, 1, &feat_only(&[0.2], &[1.0])).unwrap();
        assert!(match_priors(&priors, &gt, 0.0).is_err());
        assert!(match_priors(&priors, &gt, 1.0).is_err());
    }

    /// Literal restatement of the matching protocol, kept deliberately naive.
    fn match_oracle(priors: &[PriorBox], gt: &GroundTruth, thr: f64) -> Vec<Assignment> {
        let mut out = vec![Assignment::Background; priors.len()];
        let mut forced: Vec<Option<usize>> = vec![None; priors.len()];
        let mut unmatched: Vec<usize> = (0..gt.len()).collect();
        loop {
            if unmatched.is_empty() || forced.iter().all(|f| f.is_some()) {
                break;
            }
            let mut best: Option<(f64, usize, usize)> = None;
            for &g in &unmatched {
                for p in 0..priors.len() {
                    if forced[p].is_some() {
                        continue;
                    }
                    let v = iou(&gt.boxes[g], &priors[p].corners());
                    let better = match best {
                        None => true,
                        Some((bv, _, _)) => v > bv,
                    };
                    if better {
                        best = Some((v, g, p));
                    }
                }
            }
            let (_, g, p) = best.unwrap();
            forced[p] = Some(g);
            unmatched.retain(|&x| x != g);
        }
        for p in 0..priors.len() {
            let chosen = if let Some(g) = forced[p] {
                Some(g)
            } else {
                let mut best_g = None;
                let mut best_v = f64::NEG_INFINITY;
                for g in 0..gt.len() {
                    let v = iou(&gt.boxes[g], &priors[p].corners());
                    if v > best_v {
                        best_v = v;
                        best_g = Some(g);
                    }
                }
                best_g.filter(|_| best_v >= thr)
            };
            if let Some(g) = chosen {
                out[p] = Assignment::Matched {
                    gt_index: g,
                    class_id: gt.labels[g],
                    offsets: encode_box(&gt.boxes[g], &priors[p]).unwrap(),
                };
            }
        }
        out
    }

    fn random_box(rng: &mut DetRng) -> CornerBox {
        let xmin = rng.range(0.0, 0.7);
        let ymin = rng.range(0.0, 0.7);
        let w = rng.range(0.05, 0.3);
        let h = rng.range(0.05, 0.3);
        CornerBox::new(xmin, ymin, (xmin + w).min(1.0), (ymin + h).min(1.0)).unwrap()
    }

    #[test]
    fn matching_equals_oracle() {
        let mut rng = DetRng::seed(17);
        let priors = generate_priors(2, 2, &feat_only(&[0.2, 0.4], &[1.0])).unwrap();
        for _ in 0..200 {
            let n_gt = 1 + rng.below(3);
            let boxes: Vec<CornerBox> = (0..n_gt).map(|_| random_box(&mut rng)).collect();
            let labels: Vec<usize> = (0..n_gt).map(|_| rng.below(3)).collect();
            let gt = GroundTruth::new(boxes, labels).unwrap();
            let fast = match_priors(&priors, &gt, 0.5).unwrap();
            let slow = match_oracle(&priors, &gt, 0.5);
            assert_eq!(fast, slow);
            let matched_gts: std::collections::BTreeSet<usize> = fast
                .iter()
                .filter_map(|a| match a {
                    Assignment::Matched { gt_index, .. } => Some(*gt_index),
                    _ => None,
                })
                .collect();
            assert_eq!(matched_gts.len(), n_gt, "some gt left unmatched");
        }
    }

    #[test]
    fn nms_keeps_single_survivor() {
        let b = CornerBox::new(0.1, 0.1, 0.4, 0.4).unwrap();
        let dets = vec![
            Detection { class_id: 0, score: 0.9, bbox: b },
            Detection { class_id: 0, score: 0.8, bbox: b },
        ];
        let kept = nms(&dets, 0.5, 0.1, 10).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        let single = nms(&dets[..1], 0.5, 0.1, 10).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn nms_respects_score_threshold_and_classes() {
        let b = CornerBox::new(0.1, 0.1, 0.4, 0.4).unwrap();
        let dets = vec![
            Detection { class_id: 0, score: 0.9, bbox: b },
            Detection { class_id: 1, score: 0.8, bbox: b },
            Detection { class_id: 0, score: 0.01, bbox: b },
        ];
        let kept = nms(&dets, 0.5, 0.05, 10).unwrap();
        assert_eq!(kept.len(), 2, "other class and low scores handled");
    }

    /// O(n²) exhaustive suppression oracle.
    fn nms_oracle(dets: &[Detection], iou_thr: f64, score_thr: f64, max_out: usize) -> Vec<Detection> {
        let mut idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].score >= score_thr).collect();
        idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
        let mut kept: Vec<usize> = Vec::new();
        'outer: for &i in &idx {
            for &k in &kept {
                if dets[k].class_id == dets[i].class_id
                    && iou(&dets[k].bbox, &dets[i].bbox) >= iou_thr
                {
                    continue 'outer;
                }
            }
            kept.push(i);
        }
        kept.truncate(max_out);
        kept.into_iter().map(|i| dets[i].clone()).collect()
    }

    #[test]
    fn nms_equals_oracle_on_random_instances() {
        let mut rng = DetRng::seed(23);
        for _ in 0..200 {
            let n = 1 + rng.below(6);
            let dets: Vec<Detection> = (0..n)
                .map(|_| Detection {
                    class_id: rng.below(2),
                    score: rng.range(0.01, 1.0),
                    bbox: random_box(&mut rng),
                })
                .collect();
            let fast = nms(&dets, 0.5, 0.05, 4).unwrap();
            let slow = nms_oracle(&dets, 0.5, 0.05, 4);
            assert_eq!(fast, slow);
        }
    }

    proptest! {
        #[test]
        fn decode_encode_round_trip(
            xmin in 0.0..0.8f64, ymin in 0.0..0.8f64,
            w in 0.05..0.2f64, h in 0.05..0.2f64,
            pcx in 0.2..0.8f64, pcy in 0.2..0.8f64,
            pw in 0.05..0.5f64, ph in 0.05..0.5f64,
        ) {
            let gt = CornerBox::new(xmin, ymin, (xmin + w).min(1.0), (ymin + h).min(1.0)).unwrap();
            let prior = PriorBox { cx: pcx, cy: pcy, w: pw, h: ph, source: PriorSource::Global { slot: 0 } };
            let off = encode_box(&gt, &prior).unwrap();
            let back = decode_box(&off, &prior);
            prop_assert!((back.xmin - gt.xmin).abs() < 1e-10);
            prop_assert!((back.ymin - gt.ymin).abs() < 1e-10);
            prop_assert!((back.xmax - gt.xmax).abs() < 1e-10);
            prop_assert!((back.ymax - gt.ymax).abs() < 1e-10);
        }

        #[test]
        fn nms_output_pairwise_below_threshold(seed in 0u64..500) {
            let mut rng = DetRng::seed(seed);
            let n = 2 + rng.below(6);
            let dets: Vec<Detection> = (0..n)
                .map(|_| Detection {
                    class_id: rng.below(3),
                    score: rng.range(0.01, 1.0),
                    bbox: random_box(&mut rng),
                })
                .collect();
            let kept = nms(&dets, 0.4, 0.05, 16).unwrap();
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    if kept[i].class_id == kept[j].class_id {
                        prop_assert!(iou(&kept[i].bbox, &kept[j].bbox) < 0.4);
                    }
                }
            }
            // kept is a subset of the input
            for d in &kept {
                prop_assert!(dets.iter().any(|x| x == d));
            }
        }
    }
}
