//! Predictor heads and the training loss.
//!
//! The predictor consumes exactly two inputs: the pre-model feature map
//! x^(l), served by 3×3 conv heads (one prior per (scale, aspect) pair at
//! every cell), and the reduced vector z, served by an affine head producing
//! the global priors' outputs. Outputs are concatenated in prior order:
//! feature-map priors first, then global slots — the same order
//! `generate_priors` emits.

use crate::autodiff::{NodeId, Param, Tape};
use crate::boxes::{Assignment, PriorConfig};
use crate::error::{invalid_arg, shape_err, Result};
use crate::rng::DetRng;
use crate::tensor::{log_sum_exp, Tensor};

/// 3×3 convolutional localization + classification heads over x^(l).
#[derive(Debug, Clone)]
pub struct ConvHeads {
    pub loc_weight: Param,
    pub loc_bias: Param,
    pub cls_weight: Param,
    pub cls_bias: Param,
}

/// Affine head mapping z (dim r) to the global priors' loc/cls outputs.
#[derive(Debug, Clone)]
pub struct GlobalHead {
    pub weight: Param,
    pub bias: Param,
}

/// The full predictor: conv heads on the feature map plus the affine head
/// on z, with the shapes they were built for.
#[derive(Debug, Clone)]
pub struct PredictorHeads {
    pub conv: ConvHeads,
    pub global: GlobalHead,
    pub featmap_shape: [usize; 3],
    pub z_dim: usize,
    pub num_classes: usize,
    pub anchors_per_cell: usize,
    pub num_global: usize,
}

impl PredictorHeads {
    /// Freshly initialized heads (He-uniform weights, zero biases) for a
    /// given feature-map shape, reduced dimension, and prior layout.
    pub fn new(
        featmap_shape: [usize; 3],
        z_dim: usize,
        num_classes: usize,
        prior_config: &PriorConfig,
        rng: &mut DetRng,
    ) -> Result<Self> {
        prior_config.validate()?;
        if num_classes == 0 {
            return Err(invalid_arg!("need at least one foreground class"));
        }
        let num_global = prior_config.num_global();
        if num_global == 0 {
            return Err(invalid_arg!(
                "the reduced-feature head needs at least one global prior scale"
            ));
        }
        if z_dim == 0 {
            return Err(invalid_arg!("reduced dimension must be >= 1"));
        }
        let a = prior_config.anchors_per_cell();
        let c = featmap_shape[0];
        let k1 = num_classes + 1;

        let he_conv = |rng: &mut DetRng, out_ch: usize| -> (Param, Param) {
            let fan_in = c * 9;
            let w: Vec<f64> = (0..out_ch * fan_in).map(|_| rng.he_uniform(fan_in)).collect();
            (
                Param::trainable(Tensor::new(vec![out_ch, c, 3, 3], w).expect("head shape")),
                Param::trainable(Tensor::zeros(vec![out_ch])),
            )
        };
        let (loc_weight, loc_bias) = he_conv(rng, 4 * a);
        let (cls_weight, cls_bias) = he_conv(rng, k1 * a);

        let g_out = num_global * (4 + k1);
        let gw: Vec<f64> = (0..z_dim * g_out).map(|_| rng.he_uniform(z_dim)).collect();
        let global = GlobalHead {
            weight: Param::trainable(Tensor::new(vec![z_dim, g_out], gw).expect("global shape")),
            bias: Param::trainable(Tensor::zeros(vec![g_out])),
        };

        Ok(PredictorHeads {
            conv: ConvHeads { loc_weight, loc_bias, cls_weight, cls_bias },
            global,
            featmap_shape,
            z_dim,
            num_classes,
            anchors_per_cell: a,
            num_global,
        })
    }

    /// Rebuild heads from stored tensors (deserialization path). Expects the
    /// six tensors in params() order: loc weight/bias, cls weight/bias,
    /// global weight/bias.
    pub fn from_parts(
        featmap_shape: [usize; 3],
        z_dim: usize,
        num_classes: usize,
        prior_config: &PriorConfig,
        tensors: Vec<Tensor>,
    ) -> Result<Self> {
        prior_config.validate()?;
        let a = prior_config.anchors_per_cell();
        let num_global = prior_config.num_global();
        let k1 = num_classes + 1;
        let c = featmap_shape[0];
        if tensors.len() != 6 {
            return Err(shape_err!("expected 6 head tensors, got {}", tensors.len()));
        }
        let expect: [(&str, Vec<usize>); 6] = [
            ("loc weight", vec![4 * a, c, 3, 3]),
            ("loc bias", vec![4 * a]),
            ("cls weight", vec![k1 * a, c, 3, 3]),
            ("cls bias", vec![k1 * a]),
            ("global weight", vec![z_dim, num_global * (4 + k1)]),
            ("global bias", vec![num_global * (4 + k1)]),
        ];
        for ((name, shape), t) in expect.iter().zip(&tensors) {
            if &t.shape != shape {
                return Err(shape_err!(
                    "{name} has shape {:?}, expected {:?}",
                    t.shape,
                    shape
                ));
            }
        }
        let mut it = tensors.into_iter().map(Param::new);
        Ok(PredictorHeads {
            conv: ConvHeads {
                loc_weight: it.next().unwrap(),
                loc_bias: it.next().unwrap(),
                cls_weight: it.next().unwrap(),
                cls_bias: it.next().unwrap(),
            },
            global: GlobalHead { weight: it.next().unwrap(), bias: it.next().unwrap() },
            featmap_shape,
            z_dim,
            num_classes,
            anchors_per_cell: a,
            num_global,
        })
    }

    /// Total priors served: H·W·A feature-map priors plus the global slots.
    pub fn num_priors(&self) -> usize {
        self.featmap_shape[1] * self.featmap_shape[2] * self.anchors_per_cell + self.num_global
    }

    pub fn params(&self) -> Vec<Param> {
        vec![
            self.conv.loc_weight.clone(),
            self.conv.loc_bias.clone(),
            self.conv.cls_weight.clone(),
            self.conv.cls_bias.clone(),
            self.global.weight.clone(),
            self.global.bias.clone(),
        ]
    }

    pub fn set_requires_grad(&self, flag: bool) {
        for p in self.params() {
            p.set_requires_grad(flag);
        }
    }

    pub fn deep_clone(&self) -> Self {
        let cp = |p: &Param| Param::new(p.snapshot());
        PredictorHeads {
            conv: ConvHeads {
                loc_weight: cp(&self.conv.loc_weight),
                loc_bias: cp(&self.conv.loc_bias),
                cls_weight: cp(&self.conv.cls_weight),
                cls_bias: cp(&self.conv.cls_bias),
            },
            global: GlobalHead { weight: cp(&self.global.weight), bias: cp(&self.global.bias) },
            ..self.clone()
        }
    }

    /// ŷ_loc, ŷ_cls = predictor(x^(l), z) over a batch.
    ///
    /// `x_l` is [B, C, H, W], `z` is [B, r]; returns ([B, P, 4], [B, P, K+1])
    /// with feature-map prior p = (row·W + col)·A + anchor, globals appended.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        x_l: NodeId,
        z: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let xs = tape.shape(x_l).to_vec();
        if xs.len() != 4 || xs[1..] != self.featmap_shape {
            return Err(shape_err!(
                "predictor expects x^(l) of [B, {}, {}, {}], got {:?}",
                self.featmap_shape[0],
                self.featmap_shape[1],
                self.featmap_shape[2],
                xs
            ));
        }
        let zs = tape.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.z_dim || zs[0] != xs[0] {
            return Err(shape_err!(
                "predictor expects z of [{}, {}], got {:?}",
                xs[0],
                self.z_dim,
                zs
            ));
        }
        let (batch, h, w) = (xs[0], xs[2], xs[3]);
        let a = self.anchors_per_cell;
        let k1 = self.num_classes + 1;

        // conv head output channel (anchor·D + d) → [B, HWA, D]
        let to_priors = |tape: &mut Tape, out: NodeId, d: usize| -> Result<NodeId> {
            let r = tape.reshape(out, vec![batch, a, d, h, w])?;
            let p = tape.permute(r, &[0, 3, 4, 1, 2])?;
            tape.reshape(p, vec![batch, h * w * a, d])
        };

        let lw = tape.param(&self.conv.loc_weight);
        let lb = tape.param(&self.conv.loc_bias);
        let loc_map = tape.conv2d(x_l, lw, lb, 1, 1)?;
        let loc_feat = to_priors(tape, loc_map, 4)?;

        let cw = tape.param(&self.conv.cls_weight);
        let cb = tape.param(&self.conv.cls_bias);
        let cls_map = tape.conv2d(x_l, cw, cb, 1, 1)?;
        let cls_feat = to_priors(tape, cls_map, k1)?;

        let gw = tape.param(&self.global.weight);
        let gb = tape.param(&self.global.bias);
        let g_out = tape.linear(z, gw, Some(gb))?;
        let g = tape.reshape(g_out, vec![batch, self.num_global, 4 + k1])?;
        let g_loc = tape.slice_last_dim(g, 0, 4)?;
        let g_cls = tape.slice_last_dim(g, 4, 4 + k1)?;

        let loc = tape.concat(loc_feat, g_loc, 1)?;
        let cls = tape.concat(cls_feat, g_cls, 1)?;
        Ok((loc, cls))
    }

    /// Single-image inference: returns (loc [P×4], cls logits [P×(K+1)])
    /// as flat row-major buffers.
    pub fn forward(&self, x_l: &Tensor, z: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut xs = vec![1];
        xs.extend_from_slice(&x_l.shape);
        let x_node = tape.constant(Tensor::new(xs, x_l.data.clone())?);
        let z_node = tape.constant(Tensor::new(vec![1, z.numel()], z.data.clone())?);
        let (loc, cls) = self.forward_tape(&mut tape, x_node, z_node)?;
        Ok((tape.data(loc).to_vec(), tape.data(cls).to_vec()))
    }
}

/// What the loss was built from, for logging and tests.
#[derive(Debug, Clone, Copy)]
pub struct MultiboxStats {
    pub num_positives: usize,
    pub num_negatives: usize,
    pub zero_positive_batch: bool,
}

/// MultiBox training loss: Smooth-L1 over matched priors' offsets plus
/// cross-entropy with hard-negative mining (`neg_pos_ratio` negatives per
/// positive, hardest first), normalized by the positive count.
///
/// With no positives in the batch the loss degrades to classification over
/// the top ceil(neg_pos_ratio) negatives, normalized by their count, and the
/// event is flagged.
pub fn multibox_loss(
    tape: &mut Tape,
    loc: NodeId,
    cls: NodeId,
    assignments: &[Vec<Assignment>],
    neg_pos_ratio: f64,
) -> Result<(NodeId, MultiboxStats)> {
    if !(neg_pos_ratio > 0.0 && neg_pos_ratio.is_finite()) {
        return Err(invalid_arg!("neg_pos_ratio must be positive, got {neg_pos_ratio}"));
    }
    let ls = tape.shape(loc).to_vec();
    let cs = tape.shape(cls).to_vec();
    if ls.len() != 3 || cs.len() != 3 || ls[0] != cs[0] || ls[1] != cs[1] || ls[2] != 4 {
        return Err(shape_err!(
            "multibox loss expects loc [B,P,4] and cls [B,P,K+1], got {:?} and {:?}",
            ls,
            cs
        ));
    }
    let (batch, num_priors, k1) = (cs[0], cs[1], cs[2]);
    if assignments.len() != batch {
        return Err(shape_err!(
            "{} assignment lists for a batch of {batch}",
            assignments.len()
        ));
    }
    for (b, asg) in assignments.iter().enumerate() {
        if asg.len() != num_priors {
            return Err(shape_err!(
                "image {b} has {} assignments for {num_priors} priors",
                asg.len()
            ));
        }
    }

    let loc_flat = tape.reshape(loc, vec![batch * num_priors, 4])?;
    let cls_flat = tape.reshape(cls, vec![batch * num_priors, k1])?;

    let mut pos_rows = Vec::new();
    let mut pos_targets = Vec::new();
    let mut pos_labels = Vec::new();
    let mut neg_candidates = Vec::new();
    for (b, asg) in assignments.iter().enumerate() {
        for (p, a) in asg.iter().enumerate() {
            let row = b * num_priors + p;
            match a {
                Assignment::Matched { class_id, offsets, .. } => {
                    if *class_id + 1 >= k1 {
                        return Err(invalid_arg!(
                            "class id {class_id} out of range for {} foreground classes",
                            k1 - 1
                        ));
                    }
                    pos_rows.push(row);
                    pos_targets.extend_from_slice(offsets);
                    pos_labels.push(class_id + 1);
                }
                Assignment::Background => neg_candidates.push(row),
            }
        }
    }

    // Hard negatives: rank background rows by their cross-entropy against
    // the background class, using the forward values.
    let cls_data = tape.data(cls_flat);
    let mut ranked: Vec<(f64, usize)> = neg_candidates
        .iter()
        .map(|&row| {
            let logits = &cls_data[row * k1..(row + 1) * k1];
            (log_sum_exp(logits) - logits[0], row)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let num_pos = pos_rows.len();
    let zero_positive_batch = num_pos == 0;
    let want_neg = if zero_positive_batch {
        (neg_pos_ratio.ceil() as usize).max(1)
    } else {
        (neg_pos_ratio * num_pos as f64).round() as usize
    };
    let num_neg = want_neg.min(ranked.len());
    let neg_rows: Vec<usize> = ranked[..num_neg].iter().map(|&(_, r)| r).collect();

    if zero_positive_batch {
        log::warn!(
            "multibox loss: batch has no positive priors; classification-only over {num_neg} negatives"
        );
        let mut rows = neg_rows;
        rows.sort_unstable();
        let picked = tape.gather_rows(cls_flat, rows.clone())?;
        let labels = vec![0usize; rows.len()];
        let ce = tape.cross_entropy_sum(picked, &labels)?;
        let total = tape.scale(ce, 1.0 / rows.len().max(1) as f64);
        return Ok((
            total,
            MultiboxStats { num_positives: 0, num_negatives: num_neg, zero_positive_batch },
        ));
    }

    let pos_loc = tape.gather_rows(loc_flat, pos_rows.clone())?;
    let pos_loc_flat = tape.reshape(pos_loc, vec![num_pos * 4])?;
    let loc_term = tape.smooth_l1_sum(pos_loc_flat, &pos_targets)?;

    let mut cls_rows = pos_rows;
    cls_rows.extend_from_slice(&neg_rows);
    let mut labels = pos_labels;
    labels.resize(labels.len() + num_neg, 0);
    let picked = tape.gather_rows(cls_flat, cls_rows)?;
    let cls_term = tape.cross_entropy_sum(picked, &labels)?;

    let summed = tape.add(loc_term, cls_term)?;
    let total = tape.scale(summed, 1.0 / num_pos as f64);
    Ok((
        total,
        MultiboxStats { num_positives: num_pos, num_negatives: num_neg, zero_positive_batch },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::{generate_priors, match_priors, CornerBox, GroundTruth};

    fn toy_heads(seed: u64) -> (PredictorHeads, PriorConfig) {
        let cfg = PriorConfig::default();
        let mut rng = DetRng::seed(seed);
        let heads = PredictorHeads::new([4, 3, 3], 5, 3, &cfg, &mut rng).unwrap();
        (heads, cfg)
    }

    fn zero_heads() -> (PredictorHeads, PriorConfig) {
        let (heads, cfg) = toy_heads(0);
        for p in heads.params() {
            let mut t = p.write();
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        (heads, cfg)
    }

    #[test]
    fn output_rows_equal_prior_count() {
        let (heads, cfg) = toy_heads(1);
        let priors = generate_priors(3, 3, &cfg).unwrap();
        assert_eq!(heads.num_priors(), priors.len());
        let x = Tensor::zeros(vec![4, 3, 3]);
        let z = Tensor::zeros(vec![5]);
        let (loc, cls) = heads.forward(&x, &z).unwrap();
        assert_eq!(loc.len(), priors.len() * 4);
        assert_eq!(cls.len(), priors.len() * 4); // K+1 = 4 classes
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let (heads, _) = zero_heads();
        let mut rng = DetRng::seed(9);
        let x = Tensor::new(vec![4, 3, 3], (0..36).map(|_| rng.uniform()).collect()).unwrap();
        let z = Tensor::new(vec![5], (0..5).map(|_| rng.uniform()).collect()).unwrap();
        let (loc, cls) = heads.forward(&x, &z).unwrap();
        assert!(loc.iter().all(|&v| v == 0.0));
        assert!(cls.iter().all(|&v| v == 0.0));
    }

    /// Frozen reference run: seed-0 heads on DetRng(7) inputs.
    #[test]
    fn golden_predictor_output() {
        let mut hrng = DetRng::seed(0);
        let heads =
            PredictorHeads::new([4, 2, 2], 5, 3, &PriorConfig::default(), &mut hrng).unwrap();
        let mut irng = DetRng::seed(7);
        let x = Tensor::new(vec![4, 2, 2], (0..16).map(|_| irng.range(-1.0, 1.0)).collect())
            .unwrap();
        let z = Tensor::new(vec![5], (0..5).map(|_| irng.range(-1.0, 1.0)).collect()).unwrap();
        let (loc, cls) = heads.forward(&x, &z).unwrap();
        assert_eq!(loc.len(), 104);
        assert_eq!(cls.len(), 104);
        assert_eq!(loc.iter().sum::<f64>(), 0.6214576996432374);
        assert_eq!(cls.iter().sum::<f64>(), -0.10554071183924352);
        assert_eq!(loc[0], -0.04417507091078592);
        assert_eq!(loc[1], 0.2685463041545633);
        assert_eq!(cls[103], -0.9501380396310777);
    }

    #[test]
    fn forward_rejects_wrong_shapes() {
        let (heads, _) = toy_heads(2);
        let x = Tensor::zeros(vec![3, 3, 3]); // wrong channels
        let z = Tensor::zeros(vec![5]);
        assert!(heads.forward(&x, &z).is_err());
        let x = Tensor::zeros(vec![4, 3, 3]);
        let z = Tensor::zeros(vec![6]); // wrong reduced dim
        assert!(heads.forward(&x, &z).is_err());
    }

    /// Saturated-correct predictions: loss collapses toward zero.
    #[test]
    fn perfect_prediction_loss_vanishes() {
        let cfg = PriorConfig::default();
        let priors = generate_priors(2, 2, &cfg).unwrap();
        let num_priors = priors.len();
        let gt = GroundTruth::new(vec![priors[0].corners()], vec![1]).unwrap();
        let assignments = vec![match_priors(&priors, &gt, 0.5).unwrap()];

        let mut last = f64::INFINITY;
        for magnitude in [0.0, 5.0, 10.0, 20.0] {
            let mut loc = vec![0.0; num_priors * 4];
            let mut cls = vec![0.0; num_priors * 4];
            for (p, a) in assignments[0].iter().enumerate() {
                match a {
                    Assignment::Matched { class_id, offsets, .. } => {
                        loc[p * 4..(p + 1) * 4].copy_from_slice(offsets);
                        cls[p * 4 + class_id + 1] = magnitude;
                    }
                    Assignment::Background => cls[p * 4] = magnitude,
                }
            }
            let mut tape = Tape::new();
            let loc_n = tape.constant(Tensor::new(vec![1, num_priors, 4], loc).unwrap());
            let cls_n = tape.constant(Tensor::new(vec![1, num_priors, 4], cls).unwrap());
            let (loss, stats) = multibox_loss(&mut tape, loc_n, cls_n, &assignments, 3.0).unwrap();
            let v = tape.value(loss);
            assert!(v <= last, "loss must fall as logits saturate");
            assert!(!stats.zero_positive_batch);
            last = v;
            if magnitude == 20.0 {
                assert!(v < 1e-3, "saturated loss {v} not below 1e-3");
            }
        }
    }

    #[test]
    fn smooth_l1_branch_value() {
        // One matched prior, loc error 0.5 in one offset → 0.5·0.5² = 0.125
        let num_priors = 8;
        let mut assignments = vec![vec![Assignment::Background; num_priors]];
        assignments[0][3] =
            Assignment::Matched { gt_index: 0, class_id: 0, offsets: [0.0; 4] };

        let mut loc = vec![0.0; num_priors * 4];
        loc[3 * 4] = 0.5; // the injected error on the matched prior
        let mut cls = vec![0.0; num_priors * 4];
        for p in 0..num_priors {
            if p == 3 {
                cls[p * 4 + 1] = 40.0; // saturated correct class
            } else {
                cls[p * 4] = 40.0; // saturated background
            }
        }
        let mut tape = Tape::new();
        let loc_n = tape.constant(Tensor::new(vec![1, num_priors, 4], loc).unwrap());
        let cls_n = tape.constant(Tensor::new(vec![1, num_priors, 4], cls).unwrap());
        let (loss, stats) = multibox_loss(&mut tape, loc_n, cls_n, &assignments, 3.0).unwrap();
        assert_eq!(stats.num_positives, 1);
        assert!((tape.value(loss) - 0.125).abs() < 1e-6);
    }

    #[test]
    fn more_negatives_never_decrease_classification() {
        let cfg = PriorConfig::default();
        let priors = generate_priors(2, 2, &cfg).unwrap();
        let num_priors = priors.len();
        let gt = GroundTruth::new(vec![priors[5].corners()], vec![2]).unwrap();
        let assignments = vec![match_priors(&priors, &gt, 0.5).unwrap()];
        let mut rng = DetRng::seed(11);
        let loc: Vec<f64> = (0..num_priors * 4).map(|_| rng.range(-0.1, 0.1)).collect();
        let cls: Vec<f64> = (0..num_priors * 4).map(|_| rng.range(-1.0, 1.0)).collect();

        let eval = |ratio: f64| -> f64 {
            let mut tape = Tape::new();
            let loc_n = tape.constant(Tensor::new(vec![1, num_priors, 4], loc.clone()).unwrap());
            let cls_n = tape.constant(Tensor::new(vec![1, num_priors, 4], cls.clone()).unwrap());
            let (loss, _) = multibox_loss(&mut tape, loc_n, cls_n, &assignments, ratio).unwrap();
            tape.value(loss)
        };
        let mut prev = eval(1.0);
        for ratio in [2.0, 4.0, 8.0, 16.0] {
            let cur = eval(ratio);
            assert!(cur >= prev - 1e-12, "ratio {ratio}: {cur} < {prev}");
            prev = cur;
        }
    }

    #[test]
    fn zero_positmarks_classification_only() {
        let cfg = PriorConfig::default();
        let priors = generate_priors(2, 2, &cfg).unwrap();
        let num_priors = priors.len();
        let assignments = vec![vec![Assignment::Background; num_priors]];
        let mut tape = Tape::new();
        let loc_n = tape.constant(Tensor::zeros(vec![1, num_priors, 4]));
        let cls_n = tape.constant(Tensor::zeros(vec![1, num_priors, 4]));
        let (loss, stats) = multibox_loss(&mut tape, loc_n, cls_n, &assignments, 3.0).unwrap();
        assert!(stats.zero_positive_batch);
        assert_eq!(stats.num_negatives, 3);
        // uniform logits over 4 classes → CE = ln 4 per negative, normalized
        assert!((tape.value(loss) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = PriorConfig::default();
        let priors = generate_priors(2, 2, &cfg).unwrap();
        let num_priors = priors.len();
        let gt = GroundTruth::new(
            vec![priors[0].corners(), CornerBox::new(0.1, 0.5, 0.5, 0.9).unwrap()],
            vec![0, 2],
        )
        .unwrap();
        let assignments = vec![match_priors(&priors, &gt, 0.5).unwrap()];
        let mut rng = DetRng::seed(29);
        let loc0: Vec<f64> = (0..num_priors * 4).map(|_| rng.range(-0.4, 0.4)).collect();
        let cls0: Vec<f64> = (0..num_priors * 4).map(|_| rng.range(-1.0, 1.0)).collect();

        let run = |locv: &[f64], clsv: &[f64], grad: bool| -> (f64, Param, Param) {
            let lp = Param::trainable(Tensor::new(vec![1, num_priors, 4], locv.to_vec()).unwrap());
            let cp = Param::trainable(Tensor::new(vec![1, num_priors, 4], clsv.to_vec()).unwrap());
            let mut tape = Tape::new();
            let l = tape.param(&lp);
            let c = tape.param(&cp);
            let (loss, _) = multibox_loss(&mut tape, l, c, &assignments, 3.0).unwrap();
            let v = tape.value(loss);
            if grad {
                tape.backward(loss).unwrap();
            }
            (v, lp, cp)
        };
        let (_, lp, cp) = run(&loc0, &cls0, true);
        let dl = lp.read().grad.clone().unwrap();
        let dc = cp.read().grad.clone().unwrap();

        let step = 1e-6;
        for i in 0..loc0.len() {
            let mut up = loc0.clone();
            up[i] += step;
            let mut dn = loc0.clone();
            dn[i] -= step;
            let num = (run(&up, &cls0, false).0 - run(&dn, &cls0, false).0) / (2.0 * step);
            assert!(
                (dl[i] - num).abs() / num.abs().max(1.0) < 1e-4,
                "loc grad {i}: {} vs {num}",
                dl[i]
            );
        }
        for i in 0..cls0.len() {
            let mut up = cls0.clone();
            up[i] += step;
            let mut dn = cls0.clone();
            dn[i] -= step;
            let num = (run(&loc0, &up, false).0 - run(&loc0, &dn, false).0) / (2.0 * step);
            assert!(
                (dc[i] - num).abs() / num.abs().max(1.0) < 1e-4,
                "cls grad {i}: {} vs {num}",
                dc[i]
            );
        }
    }
}
