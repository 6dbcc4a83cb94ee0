//! Layer composition, the toy base net and auxiliary layers, and the
//! pre/post splitting machinery.
//!
//! A [`LayerNet`] is an ordered list of layers f_1..f_L validated so that
//! each layer's output shape feeds the next. [`split_network`] partitions the
//! list at a cut index into a [`SplitNet`] whose pre/post halves share the
//! original parameter storage, so composing them reproduces the unsplit
//! forward bit for bit.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Param, Tape};
use crate::boxes::PriorConfig;
use crate::error::{invalid_arg, shape_err, Result};
use crate::rng::DetRng;
use crate::tensor::{conv2d_forward, conv_out_dim, maxpool2d_forward, relu_forward, Tensor};

/// Architecture description of one layer; weights live separately in [`Layer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDesc {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        relu: bool,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv {
        desc: LayerDesc,
        weight: Param,
        bias: Param,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
}

impl Layer {
    /// Rebuild a layer from its description and (for convs) weight tensors.
    pub fn from_parts(desc: LayerDesc, weights: Option<(Tensor, Tensor)>) -> Result<Layer> {
        match desc {
            LayerDesc::Conv { in_ch, out_ch, kernel, .. } => {
                let (weight, bias) = weights
                    .ok_or_else(|| shape_err!("conv layer requires weight and bias tensors"))?;
                if weight.shape != [out_ch, in_ch, kernel, kernel] {
                    return Err(shape_err!(
                        "conv weight shape {:?} does not match desc [{out_ch}, {in_ch}, {kernel}, {kernel}]",
                        weight.shape
                    ));
                }
                if bias.shape != [out_ch] {
                    return Err(shape_err!("conv bias shape {:?}, expected [{out_ch}]", bias.shape));
                }
                Ok(Layer::Conv { desc, weight: Param::new(weight), bias: Param::new(bias) })
            }
            LayerDesc::MaxPool { kernel, stride } => {
                if weights.is_some() {
                    return Err(shape_err!("maxpool layer carries no weights"));
                }
                Ok(Layer::MaxPool { kernel, stride })
            }
        }
    }

    pub fn desc(&self) -> LayerDesc {
        match self {
            Layer::Conv { desc, .. } => desc.clone(),
            Layer::MaxPool { kernel, stride } => {
                LayerDesc::MaxPool { kernel: *kernel, stride: *stride }
            }
        }
    }

    fn out_shape(&self, in_shape: &[usize; 3]) -> Result<[usize; 3]> {
        match self.desc() {
            LayerDesc::Conv { in_ch, out_ch, kernel, stride, padding, .. } => {
                if in_shape[0] != in_ch {
                    return Err(shape_err!(
                        "conv expects {in_ch} input channels, previous layer provides {}",
                        in_shape[0]
                    ));
                }
                let h = conv_out_dim(in_shape[1], kernel, stride, padding)?;
                let w = conv_out_dim(in_shape[2], kernel, stride, padding)?;
                Ok([out_ch, h, w])
            }
            LayerDesc::MaxPool { kernel, stride } => {
                let h = conv_out_dim(in_shape[1], kernel, stride, 0)?;
                let w = conv_out_dim(in_shape[2], kernel, stride, 0)?;
                Ok([in_shape[0], h, w])
            }
        }
    }
}

/// Ordered composition f_L ∘ … ∘ f_1 over [C,H,W] feature volumes.
#[derive(Debug, Clone)]
pub struct LayerNet {
    layers: Vec<Layer>,
    input_shape: [usize; 3],
    /// Output shape after each layer, fixed at construction.
    layer_shapes: Vec<[usize; 3]>,
}

impl LayerNet {
    pub fn new(layers: Vec<Layer>, input_shape: [usize; 3]) -> Result<Self> {
        let mut shape = input_shape;
        let mut layer_shapes = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.out_shape(&shape).map_err(|e| {
                shape_err!("layer {} does not compose with its input: {e}", i + 1)
            })?;
            layer_shapes.push(shape);
        }
        Ok(LayerNet { layers, input_shape, layer_shapes })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn output_shape(&self) -> [usize; 3] {
        self.layer_shapes.last().copied().unwrap_or(self.input_shape)
    }

    /// Declared output shape of layer `l` (1-based), the shape of x^(l).
    pub fn shape_after(&self, l: usize) -> Option<[usize; 3]> {
        if l == 0 {
            Some(self.input_shape)
        } else {
            self.layer_shapes.get(l - 1).copied()
        }
    }

    pub fn descs(&self) -> Vec<LayerDesc> {
        self.layers.iter().map(Layer::desc).collect()
    }

    /// All parameters in layer order (conv weight then bias).
    pub fn params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Layer::Conv { weight, bias, .. } = layer {
                out.push(weight.clone());
                out.push(bias.clone());
            }
        }
        out
    }

    pub fn set_requires_grad(&self, flag: bool) {
        for p in self.params() {
            p.set_requires_grad(flag);
        }
    }

    /// New net with freshly allocated copies of all weights.
    pub fn deep_clone(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv { desc, weight, bias } => Layer::Conv {
                    desc: desc.clone(),
                    weight: Param::new(weight.snapshot()),
                    bias: Param::new(bias.snapshot()),
                },
                Layer::MaxPool { kernel, stride } => {
                    Layer::MaxPool { kernel: *kernel, stride: *stride }
                }
            })
            .collect();
        LayerNet { layers, input_shape: self.input_shape, layer_shapes: self.layer_shapes.clone() }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape.len() != 4 || x.shape[1..] != self.input_shape {
            return Err(shape_err!(
                "input {:?} does not match net input shape [N, {}, {}, {}]",
                x.shape,
                self.input_shape[0],
                self.input_shape[1],
                self.input_shape[2]
            ));
        }
        Ok(())
    }

    /// Inference forward over a [N,C,H,W] batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv { desc: LayerDesc::Conv { stride, padding, relu, .. }, weight, bias } => {
                    let out =
                        conv2d_forward(&cur, &weight.read(), &bias.read(), *stride, *padding)?;
                    if *relu {
                        Tensor::new(out.shape.clone(), relu_forward(&out.data))?
                    } else {
                        out
                    }
                }
                Layer::Conv { .. } => unreachable!("conv layer with non-conv desc"),
                Layer::MaxPool { kernel, stride } => maxpool2d_forward(&cur, *kernel, *stride)?.0,
            };
        }
        Ok(cur)
    }

    /// Training forward: records every layer onto the tape.
    pub fn forward_tape(&self, tape: &mut Tape, mut x: NodeId) -> Result<NodeId> {
        for layer in &self.layers {
            x = match layer {
                Layer::Conv { desc: LayerDesc::Conv { stride, padding, relu, .. }, weight, bias } => {
                    let w = tape.param(weight);
                    let b = tape.param(bias);
                    let out = tape.conv2d(x, w, b, *stride, *padding)?;
                    if *relu {
                        tape.relu(out)
                    } else {
                        out
                    }
                }
                Layer::Conv { .. } => unreachable!("conv layer with non-conv desc"),
                Layer::MaxPool { kernel, stride } => tape.maxpool2d(x, *kernel, *stride)?,
            };
        }
        Ok(x)
    }
}

/// Count of trainable scalars (weights with `requires_grad`).
pub fn count_parameters(params: &[Param]) -> usize {
    params.iter().filter(|p| p.requires_grad()).map(|p| p.numel()).sum()
}

impl LayerNet {
    pub fn count_parameters(&self) -> usize {
        count_parameters(&self.params())
    }
}

/// The (pre, post) halves of a base net cut at layer `l`.
#[derive(Debug, Clone)]
pub struct SplitNet {
    pub pre: LayerNet,
    pub post: LayerNet,
    pub cut_index: usize,
}

/// Cut a net after layer `l` (1-based, 1 ≤ l < L). Both halves share the
/// original parameter storage.
pub fn split_network(net: &LayerNet, l: usize) -> Result<SplitNet> {
    let total = net.len();
    if l < 1 || l >= total {
        return Err(invalid_arg!(
            "cut index {l} outside valid range [1, {}] for a {total}-layer net",
            total - 1
        ));
    }
    let pre = LayerNet::new(net.layers[..l].to_vec(), net.input_shape)?;
    let post = LayerNet::new(net.layers[l..].to_vec(), pre.output_shape())?;
    Ok(SplitNet { pre, post, cut_index: l })
}

impl SplitNet {
    /// x^(l) for a single [C,H,W] image, spatial structure preserved.
    pub fn forward_pre(&self, x0: &Tensor) -> Result<Tensor> {
        if x0.shape != self.pre.input_shape {
            return Err(shape_err!(
                "image shape {:?} does not match pre-model input {:?}",
                x0.shape,
                self.pre.input_shape
            ));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(&x0.shape);
        let batched = Tensor::new(shape, x0.data.clone())?;
        let out = self.pre.forward(&batched)?;
        Tensor::new(out.shape[1..].to_vec(), out.data)
    }
}

// ---------------------------------------------------------------------------
// Toy architectures
// ---------------------------------------------------------------------------

/// Input image shape for all toy detectors.
pub const INPUT_SHAPE: [usize; 3] = [3, 64, 64];

const BASE_CHANNELS: [usize; 6] = [6, 6, 12, 12, 24, 24];

/// Cut index sitting just after the 4th conv block (conv4 + its pool);
/// x^(l) there is [12, 16, 16].
pub const DEFAULT_CUT_INDEX: usize = 6;

/// Auxiliary layer channel widths of the toy full detector.
const AUX_CHANNELS: [usize; 2] = [48, 48];

fn he_conv(
    rng: &mut DetRng,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    relu: bool,
) -> Layer {
    let fan_in = in_ch * kernel * kernel;
    let w: Vec<f64> = (0..out_ch * fan_in).map(|_| rng.he_uniform(fan_in)).collect();
    let weight = Param::trainable(
        Tensor::new(vec![out_ch, in_ch, kernel, kernel], w).expect("conv weight shape"),
    );
    let bias = Param::trainable(Tensor::zeros(vec![out_ch]));
    Layer::Conv {
        desc: LayerDesc::Conv { in_ch, out_ch, kernel, stride, padding, relu },
        weight,
        bias,
    }
}

/// The toy base net: six 3×3 conv+ReLU blocks over a 3×64×64 input with 2×2
/// max-pools after blocks 2 and 4. Channel widths 6,6,12,12,24,24; He-uniform
/// weights drawn in layer order from the seeded generator, biases zero.
///
/// Layer indices (1-based): conv1=1, conv2=2, pool=3, conv3=4, conv4=5,
/// pool=6, conv5=7, conv6=8.
pub fn build_toy_basenet(seed: u64) -> LayerNet {
    let mut rng = DetRng::substream(seed, 0x10);
    let mut layers = Vec::new();
    let mut in_ch = INPUT_SHAPE[0];
    for (i, &out_ch) in BASE_CHANNELS.iter().enumerate() {
        layers.push(he_conv(&mut rng, in_ch, out_ch, 3, 1, 1, true));
        if i == 1 || i == 3 {
            layers.push(Layer::MaxPool { kernel: 2, stride: 2 });
        }
        in_ch = out_ch;
    }
    LayerNet::new(layers, INPUT_SHAPE).expect("toy base net composes")
}

/// Two stride-2 conv+ReLU auxiliary blocks mirroring the detector's
/// high-level-feature stage: 24→48 and 48→48, shrinking 16×16 to 4×4.
pub fn build_toy_auxlayers(seed: u64, in_shape: [usize; 3]) -> LayerNet {
    let mut rng = DetRng::substream(seed, 0x11);
    let mut layers = Vec::new();
    let mut in_ch = in_shape[0];
    for &out_ch in AUX_CHANNELS.iter() {
        layers.push(he_conv(&mut rng, in_ch, out_ch, 3, 2, 1, true));
        in_ch = out_ch;
    }
    LayerNet::new(layers, in_shape).expect("aux layers compose")
}

/// Architecture of the toy full detector: base net, auxiliary layers, and the
/// prior configuration its predictor heads are built from.
#[derive(Debug, Clone)]
pub struct FullDetectorSpec {
    pub basenet: LayerNet,
    pub auxlayers: LayerNet,
    pub predictor_config: PriorConfig,
}

impl FullDetectorSpec {
    pub fn toy(seed: u64, predictor_config: PriorConfig) -> Self {
        let basenet = build_toy_basenet(seed);
        let auxlayers = build_toy_auxlayers(seed, basenet.output_shape());
        FullDetectorSpec { basenet, auxlayers, predictor_config }
    }
}
