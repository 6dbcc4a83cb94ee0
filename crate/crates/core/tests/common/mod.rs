//! Independent reference implementations ("oracles") and helpers shared by
//! the integration tests. Everything here is deliberately naive and kept
//! separate from the library's implementation paths.

use podnet_core::boxes::{encode_box, Assignment, CornerBox, Detection, GroundTruth, PriorBox};
use podnet_core::rng::DetRng;

pub fn rand_vec(rng: &mut DetRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.range(lo, hi)).collect()
}

/// Central finite differences of a scalar function.
pub fn finite_diff(data: &[f64], step: f64, loss_fn: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut grads = vec![0.0; data.len()];
    let mut work = data.to_vec();
    for i in 0..data.len() {
        work[i] = data[i] + step;
        let up = loss_fn(&work);
        work[i] = data[i] - step;
        let down = loss_fn(&work);
        work[i] = data[i];
        grads[i] = (up - down) / (2.0 * step);
    }
    grads
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Eigenvalues of a symmetric matrix by classical two-sided Jacobi rotation
/// sweeps — an algorithm independent of the library's one-sided SVD.
/// Returns the eigenvalues sorted descending.
pub fn jacobi_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n);
    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s
    };
    let norm: f64 = a.iter().map(|v| v * v).sum();
    let tol = 1e-30 * norm.max(1e-300);
    for _sweep in 0..100 {
        if off(&a) <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    eig
}

pub fn random_box(rng: &mut DetRng) -> CornerBox {
    let xmin = rng.range(0.0, 0.7);
    let ymin = rng.range(0.0, 0.7);
    let w = rng.range(0.05, 0.3);
    let h = rng.range(0.05, 0.3);
    CornerBox::new(xmin, ymin, (xmin + w).min(1.0), (ymin + h).min(1.0)).unwrap()
}

/// IoU recomputed with explicit interval-overlap branches.
pub fn reference_iou(a: &CornerBox, b: &CornerBox) -> f64 {
    let overlap = |lo1: f64, hi1: f64, lo2: f64, hi2: f64| -> f64 {
        let lo = if lo1 > lo2 { lo1 } else { lo2 };
        let hi = if hi1 < hi2 { hi1 } else { hi2 };
        if hi > lo {
            hi - lo
        } else {
            0.0
        }
    };
    let iw = overlap(a.xmin, a.xmax, b.xmin, b.xmax);
    let ih = overlap(a.ymin, a.ymax, b.ymin, b.ymax);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// O(n²) exhaustive greedy suppression.
pub fn reference_nms(
    dets: &[Detection],
    iou_thr: f64,
    score_thr: f64,
    max_out: usize,
) -> Vec<Detection> {
    let mut idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].score >= score_thr).collect();
    idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    'outer: for &i in &idx {
        for &k in &kept {
            if dets[k].class_id == dets[i].class_id
                && reference_iou(&dets[k].bbox, &dets[i].bbox) >= iou_thr
            {
                continue 'outer;
            }
        }
        kept.push(i);
    }
    kept.truncate(max_out);
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// The matching protocol restated with exhaustive scans: bipartite greedy
/// forced matches (global best IoU pair first), then per-prior threshold
/// matches.
pub fn reference_match(priors: &[PriorBox], gt: &GroundTruth, thr: f64) -> Vec<Assignment> {
    let mut out = vec![Assignment::Background; priors.len()];
    let mut forced: Vec<Option<usize>> = vec![None; priors.len()];
    let mut unmatched: Vec<usize> = (0..gt.len()).collect();
    while !unmatched.is_empty() && forced.iter().any(|f| f.is_none()) {
        let mut best: Option<(f64, usize, usize)> = None;
        for &g in &unmatched {
            for p in 0..priors.len() {
                if forced[p].is_some() {
                    continue;
                }
                let v = reference_iou(&gt.boxes[g], &priors[p].corners());
                if best.map(|(bv, _, _)| v > bv).unwrap_or(true) {
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
                let v = reference_iou(&gt.boxes[g], &priors[p].corners());
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

/// Reference mAP: greedy TP assignment by score recomputed with full scans,
/// AP accumulated per TP rank as Δrecall · (suffix-max precision), walking
/// right to left so the summation order matches the library's exactly.
pub struct RefImage {
    pub dets: Vec<Detection>,
    pub gt: GroundTruth,
}

pub fn reference_map(images: &[RefImage], num_classes: usize, thr: f64) -> (Vec<Option<f64>>, f64) {
    let mut per_class: Vec<Option<f64>> = Vec::with_capacity(num_classes);
    let mut sum = 0.0;
    let mut counted = 0usize;
    for class in 0..num_classes {
        let num_gt: usize = images
            .iter()
            .map(|im| im.gt.labels.iter().filter(|&&l| l == class).count())
            .sum();
        // flatten detections of this class with (image, original index) keys
        let mut dets: Vec<(usize, usize, f64)> = Vec::new();
        for (ii, im) in images.iter().enumerate() {
            for (di, d) in im.dets.iter().enumerate() {
                if d.class_id == class {
                    dets.push((ii, di, d.score));
                }
            }
        }
        dets.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

        if num_gt == 0 {
            per_class.push(None);
            continue;
        }
        let mut used: Vec<Vec<bool>> =
            images.iter().map(|im| vec![false; im.gt.len()]).collect();
        let mut tp = vec![false; dets.len()];
        for (rank, (ii, di, _)) in dets.iter().enumerate() {
            let dbox = &images[*ii].dets[*di].bbox;
            let mut best: Option<(usize, f64)> = None;
            for (gi, gbox) in images[*ii].gt.boxes.iter().enumerate() {
                if images[*ii].gt.labels[gi] != class || used[*ii][gi] {
                    continue;
                }
                let v = reference_iou(dbox, gbox);
                if v >= thr && best.map(|(_, bv)| v > bv).unwrap_or(true) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                used[*ii][gi] = true;
                tp[rank] = true;
            }
        }
        // all-points AP via suffix-max precision
        let precision_at = |k: usize| -> f64 {
            let tps = tp[..=k].iter().filter(|&&t| t).count();
            tps as f64 / (k + 1) as f64
        };
        let mut ap = 0.0;
        let mut best_prec = 0.0;
        let mut tp_total = tp.iter().filter(|&&t| t).count();
        for k in (0..dets.len()).rev() {
            let p = precision_at(k);
            if p > best_prec {
                best_prec = p;
            }
            if tp[k] {
                let r_here = tp_total as f64 / num_gt as f64;
                let r_before = (tp_total - 1) as f64 / num_gt as f64;
                ap += (r_here - r_before) * best_prec;
                tp_total -= 1;
            }
        }
        per_class.push(Some(ap));
        sum += ap;
        counted += 1;
    }
    let mean = if counted > 0 { sum / counted as f64 } else { 0.0 };
    (per_class, mean)
}
