//! End-to-end pipeline: baseline training of the full detector, construction
//! of the reduced detector (split → snapshots → POD → predictor), and
//! fine-tuning with the reduction layer frozen.

use std::time::Instant;

use crate::autodiff::{NodeId, Param, SgdMomentum, Tape};
use crate::boxes::{generate_priors, match_priors, Assignment, PriorBox, PriorConfig};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::detector::{multibox_loss, PredictorHeads};
use crate::error::{invalid_arg, shape_err, Error, Result};
use crate::net::{count_parameters, split_network, FullDetectorSpec, LayerNet};
use crate::pod::{assemble_snapshots, compute_pod_centered, select_rank, PodBasis, RankPolicy};
use crate::rng::DetRng;
use crate::tensor::Tensor;

/// The toy full detector: base net and auxiliary layers feeding conv heads
/// (on the base net output) and an affine head (on the flattened auxiliary
/// output).
#[derive(Debug, Clone)]
pub struct FullDetector {
    pub basenet: LayerNet,
    pub auxlayers: LayerNet,
    pub heads: PredictorHeads,
    pub prior_config: PriorConfig,
    pub priors: Vec<PriorBox>,
    pub num_classes: usize,
    pub seed: u64,
}

impl FullDetector {
    pub fn new(spec: FullDetectorSpec, num_classes: usize, seed: u64) -> Result<Self> {
        let featmap = spec.basenet.output_shape();
        let aux_out = spec.auxlayers.output_shape();
        if spec.auxlayers.input_shape() != featmap {
            return Err(shape_err!(
                "auxiliary layers expect {:?}, base net provides {:?}",
                spec.auxlayers.input_shape(),
                featmap
            ));
        }
        let z_dim = aux_out.iter().product();
        let mut rng = DetRng::substream(seed, 0x12);
        let heads = PredictorHeads::new(
            featmap,
            z_dim,
            num_classes,
            &spec.predictor_config,
            &mut rng,
        )?;
        let priors = generate_priors(featmap[1], featmap[2], &spec.predictor_config)?;
        if priors.len() != heads.num_priors() {
            return Err(shape_err!(
                "{} priors generated but heads serve {}",
                priors.len(),
                heads.num_priors()
            ));
        }
        Ok(FullDetector {
            basenet: spec.basenet,
            auxlayers: spec.auxlayers,
            heads,
            prior_config: spec.predictor_config,
            priors,
            num_classes,
            seed,
        })
    }

    /// All parameters in a stable order: base net, aux layers, heads.
    pub fn params(&self) -> Vec<Param> {
        let mut p = self.basenet.params();
        p.extend(self.auxlayers.params());
        p.extend(self.heads.params());
        p
    }

    pub fn count_parameters(&self) -> usize {
        count_parameters(&self.params())
    }

    fn forward_batch_tape(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
        let xb = self.basenet.forward_tape(tape, x)?;
        let xa = self.auxlayers.forward_tape(tape, xb)?;
        let za = tape.flatten(xa)?;
        self.heads.forward_tape(tape, xb, za)
    }

    /// Single-image raw predictions (loc offsets, class logits).
    pub fn raw_predict(&self, image: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut shape = vec![1];
        shape.extend_from_slice(&image.shape);
        let x = tape.constant(Tensor::new(shape, image.data.clone())?);
        let (loc, cls) = self.forward_batch_tape(&mut tape, x)?;
        Ok((tape.data(loc).to_vec(), tape.data(cls).to_vec()))
    }
}

/// The frozen POD projection stored as a linear layer: weights [n_l, r],
/// never updated by the optimizer.
#[derive(Debug, Clone)]
pub struct ReductionLayer {
    pub weights: Param,
    pub singular_values: Vec<f64>,
    pub mean: Option<Vec<f64>>,
}

impl ReductionLayer {
    pub fn from_basis(basis: &PodBasis) -> Self {
        ReductionLayer {
            weights: Param::frozen(basis.modes.clone()),
            singular_values: basis.singular_values.clone(),
            mean: basis.mean.clone(),
        }
    }

    pub fn snapshot_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.weights.shape()[1]
    }

    /// z = Ψ_rᵀ x over a batch node [B, n_l].
    pub fn project_tape(&self, tape: &mut Tape, x_flat: NodeId) -> Result<NodeId> {
        let x = match &self.mean {
            None => x_flat,
            Some(mean) => {
                let b = tape.shape(x_flat)[0];
                let mut tiled = Vec::with_capacity(b * mean.len());
                for _ in 0..b {
                    tiled.extend(mean.iter().map(|m| -m));
                }
                let neg = tape.constant(Tensor::new(vec![b, mean.len()], tiled)?);
                tape.add(x_flat, neg)?
            }
        };
        let w = tape.param(&self.weights);
        tape.linear(x, w, None)
    }
}

/// Reduced object detector: pre-model, frozen reduction layer, and fresh
/// predictor heads over {x^(l), z}.
#[derive(Debug, Clone)]
pub struct ReducedDetector {
    pub pre_model: LayerNet,
    pub reduction: ReductionLayer,
    pub heads: PredictorHeads,
    pub prior_config: PriorConfig,
    pub priors: Vec<PriorBox>,
    pub num_classes: usize,
    pub cut_index: usize,
    pub seed: u64,
}

impl ReducedDetector {
    /// Trainable parameters in a stable order: heads first, then the
    /// pre-model (which may be frozen). The reduction weights are excluded —
    /// they are frozen by construction.
    pub fn params(&self) -> Vec<Param> {
        let mut p = self.heads.params();
        p.extend(self.pre_model.params());
        p
    }

    pub fn count_parameters(&self) -> usize {
        count_parameters(&self.params())
    }

    pub fn set_pre_model_frozen(&self, frozen: bool) {
        self.pre_model.set_requires_grad(!frozen);
    }

    pub fn pre_model_frozen(&self) -> bool {
        self.pre_model.params().iter().all(|p| !p.requires_grad())
    }

    fn forward_batch_tape(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
        let x_l = self.pre_model.forward_tape(tape, x)?;
        let x_flat = tape.flatten(x_l)?;
        let z = self.reduction.project_tape(tape, x_flat)?;
        self.heads.forward_tape(tape, x_l, z)
    }

    pub fn raw_predict(&self, image: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut shape = vec![1];
        shape.extend_from_slice(&image.shape);
        let x = tape.constant(Tensor::new(shape, image.data.clone())?);
        let (loc, cls) = self.forward_batch_tape(&mut tape, x)?;
        Ok((tape.data(loc).to_vec(), tape.data(cls).to_vec()))
    }
}

/// Anything that can score an image against a prior set.
pub trait Detector {
    fn priors(&self) -> &[PriorBox];
    fn num_classes(&self) -> usize;
    fn raw_predict(&self, image: &Tensor) -> Result<(Vec<f64>, Vec<f64>)>;
}

impl Detector for FullDetector {
    fn priors(&self) -> &[PriorBox] {
        &self.priors
    }
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn raw_predict(&self, image: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        FullDetector::raw_predict(self, image)
    }
}

impl Detector for ReducedDetector {
    fn priors(&self) -> &[PriorBox] {
        &self.priors
    }
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn raw_predict(&self, image: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        ReducedDetector::raw_predict(self, image)
    }
}

/// Loss and wall-clock trace of one training run. Epoch times cover
/// forward + backward + optimizer step only.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct TrainHistory {
    pub epoch_losses: Vec<f64>,
    pub epoch_times_s: Vec<f64>,
    pub zero_positive_batches: usize,
}

trait BatchModel {
    fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)>;
}

impl BatchModel for FullDetector {
    fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
        self.forward_batch_tape(tape, x)
    }
}

impl BatchModel for ReducedDetector {
    fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
        self.forward_batch_tape(tape, x)
    }
}

fn stack_images(dataset: &Dataset, indices: &[usize]) -> Result<Tensor> {
    let shape = &dataset.items[indices[0]].image.shape;
    let mut data = Vec::with_capacity(indices.len() * dataset.items[indices[0]].image.numel());
    for &i in indices {
        data.extend_from_slice(&dataset.items[i].image.data);
    }
    let mut full = vec![indices.len()];
    full.extend_from_slice(shape);
    Tensor::new(full, data)
}

/// Shared SGD loop. With `learning_rate == 0` the loop runs forward/backward
/// but never steps, so parameters stay fixed (diagnostic mode); negative
/// rates are rejected by config validation upstream.
fn run_training<M: BatchModel>(
    model: &M,
    params: &[Param],
    priors: &[PriorBox],
    dataset: &Dataset,
    epochs: usize,
    cfg: &RunConfig,
    shuffle_stream: u64,
) -> Result<TrainHistory> {
    if dataset.is_empty() {
        return Err(invalid_arg!("training dataset is empty"));
    }
    // Matching depends only on priors and annotations; fix it once.
    let assignments: Vec<Vec<Assignment>> = dataset
        .items
        .iter()
        .map(|item| match_priors(priors, &item.truth, cfg.match_iou_threshold))
        .collect::<Result<_>>()?;

    let mut optimizer = if cfg.learning_rate > 0.0 {
        Some(SgdMomentum::new(cfg.learning_rate, cfg.momentum)?)
    } else {
        None
    };
    // One seeded shuffle, reused every epoch: batch composition is part of
    // the run's deterministic contract (and keeps per-epoch losses directly
    // comparable).
    let mut rng = DetRng::substream(cfg.seed, shuffle_stream);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    rng.shuffle(&mut indices);

    let mut history = TrainHistory::default();
    let mut checkpoint: Vec<Tensor> = params.iter().map(|p| p.snapshot()).collect();

    for epoch in 0..epochs {
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let mut elapsed = 0.0f64;

        for batch_idx in indices.chunks(cfg.batch_size.max(1)) {
            let batch_input = stack_images(dataset, batch_idx)?;
            let batch_assign: Vec<Vec<Assignment>> =
                batch_idx.iter().map(|&i| assignments[i].clone()).collect();

            let t0 = Instant::now();
            let mut tape = Tape::new();
            let x = tape.constant(batch_input);
            let (loc, cls) = model.forward(&mut tape, x)?;
            let (loss, stats) =
                multibox_loss(&mut tape, loc, cls, &batch_assign, cfg.neg_pos_ratio)?;
            let loss_value = tape.value(loss);
            if !loss_value.is_finite() {
                for (p, snap) in params.iter().zip(&checkpoint) {
                    *p.write() = snap.clone();
                }
                return Err(Error::Numerical(format!(
                    "training diverged (non-finite loss) at epoch {epoch}; parameters restored to last epoch checkpoint"
                )));
            }
            tape.backward(loss)?;
            if let Some(opt) = optimizer.as_mut() {
                opt.step(params);
            }
            elapsed += t0.elapsed().as_secs_f64();

            epoch_loss += loss_value;
            batches += 1;
            if stats.zero_positive_batch {
                history.zero_positive_batches += 1;
            }
        }

        history.epoch_losses.push(epoch_loss / batches as f64);
        history.epoch_times_s.push(elapsed);
        checkpoint = params.iter().map(|p| p.snapshot()).collect();
    }
    Ok(history)
}

/// Train the toy full detector from scratch (the pretrained input that the
/// reduction algorithm consumes).
pub fn train_baseline(
    spec: FullDetectorSpec,
    train: &Dataset,
    cfg: &RunConfig,
) -> Result<(FullDetector, TrainHistory)> {
    let detector = FullDetector::new(spec, train.num_classes(), cfg.seed)?;
    let params = detector.params();
    let history =
        run_training(&detector, &params, &detector.priors, train, cfg.epochs, cfg, 0x20)?;
    Ok((detector, history))
}

/// Construct the reduced detector: split the trained base net at `l`, assemble
/// snapshots from the training set, compute the POD basis, select the rank,
/// and attach fresh predictor heads to {x^(l), z}. The full detector's
/// auxiliary layers are discarded; its base net weights up to `l` are copied
/// into the pre-model.
pub fn build_reduced(
    full: &FullDetector,
    train: &Dataset,
    cut_index: usize,
    rank_policy: RankPolicy,
    cfg: &RunConfig,
) -> Result<ReducedDetector> {
    let split = split_network(&full.basenet, cut_index)?;
    let snapshots = assemble_snapshots(
        &split,
        train.items.iter().map(|item| (item.id.as_str(), &item.image)),
    )?;
    let basis_full = compute_pod_centered(&snapshots, cfg.mean_center_snapshots)?;
    let rank = select_rank(&basis_full, rank_policy)?;
    let basis = basis_full.truncate(rank)?;

    let pre_model = split.pre.deep_clone();
    pre_model.set_requires_grad(false);
    let featmap = pre_model.output_shape();

    let mut rng = DetRng::substream(cfg.seed, 0x13);
    let heads = PredictorHeads::new(featmap, rank, full.num_classes, &full.prior_config, &mut rng)?;
    if cfg.warm_start_heads {
        let copied_weights = warm_start_heads(&heads, &full.heads);
        if copied_weights == 0 {
            return Err(invalid_arg!(
                "warm start requested but no head weight of the full detector matches the reduced shapes (cut {cut_index}, rank {rank})"
            ));
        }
        log::info!("warm start: copied {copied_weights} head weight tensors from the full detector");
    }
    let priors = generate_priors(featmap[1], featmap[2], &full.prior_config)?;
    if priors.len() != heads.num_priors() {
        return Err(shape_err!(
            "{} priors generated but heads serve {}",
            priors.len(),
            heads.num_priors()
        ));
    }

    Ok(ReducedDetector {
        pre_model,
        reduction: ReductionLayer::from_basis(&basis),
        heads,
        prior_config: full.prior_config.clone(),
        priors,
        num_classes: full.num_classes,
        cut_index,
        seed: cfg.seed,
    })
}

/// Copy every head tensor whose shape matches; returns how many weight
/// matrices (rank ≥ 2 tensors — biases don't count as a meaningful match)
/// were copied.
fn warm_start_heads(target: &PredictorHeads, source: &PredictorHeads) -> usize {
    let mut copied_weights = 0;
    for (dst, src) in target.params().iter().zip(source.params().iter()) {
        let shape = src.shape();
        if dst.shape() == shape {
            let data = src.read().data.clone();
            dst.write().data = data;
            if shape.len() >= 2 {
                copied_weights += 1;
            }
        }
    }
    copied_weights
}

/// Train the constructed reduced net. Only the heads (and
/// the pre-model, when unfrozen) are updated; the reduction layer never is.
pub fn finetune(
    reduced: &ReducedDetector,
    train: &Dataset,
    cfg: &RunConfig,
) -> Result<TrainHistory> {
    reduced.set_pre_model_frozen(cfg.freeze_pre_model);
    let params = reduced.params();
    run_training(
        reduced,
        &params,
        &reduced.priors,
        train,
        cfg.finetune_epochs,
        cfg,
        0x22,
    )
}
