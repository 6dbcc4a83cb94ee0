//! Model container file: an 8-byte little-endian length, a JSON header
//! (architecture, shapes, seed, cut index, blob manifest), then the raw
//! little-endian f64 weight blobs in manifest order. Load → save reproduces
//! the file byte for byte.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{generate_priors, PriorConfig};
use crate::detector::PredictorHeads;
use crate::error::{shape_err, Error, Result};
use crate::net::{Layer, LayerDesc, LayerNet};
use crate::pipeline::{Detector, FullDetector, ReducedDetector, ReductionLayer};
use crate::tensor::Tensor;

const FORMAT_NAME: &str = "podnet-model";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlobInfo {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ModelKind {
    Full,
    Reduced,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    kind: ModelKind,
    seed: u64,
    num_classes: usize,
    input_shape: [usize; 3],
    featmap_shape: [usize; 3],
    z_dim: usize,
    prior_config: PriorConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    basenet: Option<Vec<LayerDesc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    auxlayers: Option<Vec<LayerDesc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pre_model: Option<Vec<LayerDesc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cut_index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    snapshot_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    singular_values: Option<Vec<f64>>,
    blobs: Vec<BlobInfo>,
}

/// A loadable/saveable detector of either kind.
#[derive(Debug, Clone)]
pub enum Model {
    Full(FullDetector),
    Reduced(ReducedDetector),
}

impl Model {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Model::Full(_) => "full",
            Model::Reduced(_) => "reduced",
        }
    }

    pub fn as_detector(&self) -> &dyn Detector {
        match self {
            Model::Full(m) => m,
            Model::Reduced(m) => m,
        }
    }

    pub fn count_parameters(&self) -> usize {
        match self {
            Model::Full(m) => m.count_parameters(),
            Model::Reduced(m) => m.count_parameters(),
        }
    }

    pub fn as_reduced(&self) -> Option<&ReducedDetector> {
        match self {
            Model::Reduced(m) => Some(m),
            Model::Full(_) => None,
        }
    }

    pub fn as_full(&self) -> Option<&FullDetector> {
        match self {
            Model::Full(m) => Some(m),
            Model::Reduced(_) => None,
        }
    }
}

fn net_blobs(prefix: &str, net: &LayerNet, out: &mut Vec<(BlobInfo, Vec<f64>)>) {
    for (i, layer) in net.layers().iter().enumerate() {
        if let Layer::Conv { weight, bias, .. } = layer {
            for (suffix, p) in [("weight", weight), ("bias", bias)] {
                let t = p.read();
                out.push((
                    BlobInfo {
                        name: format!("{prefix}.{i}.{suffix}"),
                        shape: t.shape.clone(),
                        trainable: t.requires_grad,
                    },
                    t.data.clone(),
                ));
            }
        }
    }
}

fn head_blobs(heads: &PredictorHeads, out: &mut Vec<(BlobInfo, Vec<f64>)>) {
    let names = [
        "heads.loc.weight",
        "heads.loc.bias",
        "heads.cls.weight",
        "heads.cls.bias",
        "heads.global.weight",
        "heads.global.bias",
    ];
    for (name, p) in names.iter().zip(heads.params()) {
        let t = p.read();
        out.push((
            BlobInfo { name: name.to_string(), shape: t.shape.clone(), trainable: t.requires_grad },
            t.data.clone(),
        ));
    }
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut blobs: Vec<(BlobInfo, Vec<f64>)> = Vec::new();
    let header = match model {
        Model::Full(m) => {
            net_blobs("basenet", &m.basenet, &mut blobs);
            net_blobs("auxlayers", &m.auxlayers, &mut blobs);
            head_blobs(&m.heads, &mut blobs);
            ModelHeader {
                format: FORMAT_NAME.to_string(),
                version: FORMAT_VERSION,
                kind: ModelKind::Full,
                seed: m.seed,
                num_classes: m.num_classes,
                input_shape: m.basenet.input_shape(),
                featmap_shape: m.heads.featmap_shape,
                z_dim: m.heads.z_dim,
                prior_config: m.prior_config.clone(),
                basenet: Some(m.basenet.descs()),
                auxlayers: Some(m.auxlayers.descs()),
                pre_model: None,
                cut_index: None,
                rank: None,
                snapshot_dim: None,
                singular_values: None,
                blobs: Vec::new(),
            }
        }
        Model::Reduced(m) => {
            net_blobs("pre_model", &m.pre_model, &mut blobs);
            {
                let t = m.reduction.weights.read();
                blobs.push((
                    BlobInfo {
                        name: "reduction.weights".to_string(),
                        shape: t.shape.clone(),
                        trainable: t.requires_grad,
                    },
                    t.data.clone(),
                ));
            }
            if let Some(mean) = &m.reduction.mean {
                blobs.push((
                    BlobInfo {
                        name: "reduction.mean".to_string(),
                        shape: vec![mean.len()],
                        trainable: false,
                    },
                    mean.clone(),
                ));
            }
            head_blobs(&m.heads, &mut blobs);
            ModelHeader {
                format: FORMAT_NAME.to_string(),
                version: FORMAT_VERSION,
                kind: ModelKind::Reduced,
                seed: m.seed,
                num_classes: m.num_classes,
                input_shape: m.pre_model.input_shape(),
                featmap_shape: m.heads.featmap_shape,
                z_dim: m.heads.z_dim,
                prior_config: m.prior_config.clone(),
                basenet: None,
                auxlayers: None,
                pre_model: Some(m.pre_model.descs()),
                cut_index: Some(m.cut_index),
                rank: Some(m.reduction.rank()),
                snapshot_dim: Some(m.reduction.snapshot_dim()),
                singular_values: Some(m.reduction.singular_values.clone()),
                blobs: Vec::new(),
            }
        }
    };

    let mut header = header;
    header.blobs = blobs.iter().map(|(info, _)| info.clone()).collect();
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("model header serialization failed: {e}")))?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    for (_, data) in &blobs {
        for v in data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

struct BlobReader {
    infos: Vec<BlobInfo>,
    tensors: Vec<Tensor>,
    cursor: usize,
}

impl BlobReader {
    fn next(&mut self, expect_prefix: &str) -> Result<(BlobInfo, Tensor)> {
        if self.cursor >= self.infos.len() {
            return Err(Error::Format(format!(
                "model file ends before blob '{expect_prefix}…'"
            )));
        }
        let info = self.infos[self.cursor].clone();
        if !info.name.starts_with(expect_prefix) {
            return Err(Error::Format(format!(
                "expected blob '{expect_prefix}…', found '{}'",
                info.name
            )));
        }
        let t = self.tensors[self.cursor].clone();
        self.cursor += 1;
        Ok((info, t))
    }

    fn peek_name(&self) -> Option<&str> {
        self.infos.get(self.cursor).map(|i| i.name.as_str())
    }
}

fn read_net(
    reader: &mut BlobReader,
    prefix: &str,
    descs: &[LayerDesc],
    input_shape: [usize; 3],
) -> Result<LayerNet> {
    let mut layers = Vec::with_capacity(descs.len());
    for desc in descs {
        match desc {
            LayerDesc::Conv { .. } => {
                let (winfo, mut weight) = reader.next(prefix)?;
                let (binfo, mut bias) = reader.next(prefix)?;
                weight.requires_grad = winfo.trainable;
                bias.requires_grad = binfo.trainable;
                layers.push(Layer::from_parts(desc.clone(), Some((weight, bias)))?);
            }
            LayerDesc::MaxPool { .. } => {
                layers.push(Layer::from_parts(desc.clone(), None)?);
            }
        }
    }
    LayerNet::new(layers, input_shape)
}

fn read_heads(reader: &mut BlobReader, header: &ModelHeader) -> Result<PredictorHeads> {
    let mut tensors = Vec::with_capacity(6);
    let mut trainable = Vec::with_capacity(6);
    for _ in 0..6 {
        let (info, t) = reader.next("heads.")?;
        trainable.push(info.trainable);
        tensors.push(t);
    }
    let heads = PredictorHeads::from_parts(
        header.featmap_shape,
        header.z_dim,
        header.num_classes,
        &header.prior_config,
        tensors,
    )?;
    for (p, flag) in heads.params().iter().zip(trainable) {
        p.set_requires_grad(flag);
    }
    Ok(heads)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < 8 {
        return Err(Error::Format(format!("{}: not a model file", path.display())));
    }
    let header_len = u64::from_le_bytes(raw[..8].try_into().unwrap()) as usize;
    if raw.len() < 8 + header_len {
        return Err(Error::Format(format!("{}: truncated header", path.display())));
    }
    let header: ModelHeader = serde_json::from_slice(&raw[8..8 + header_len])
        .map_err(|e| Error::Format(format!("{}: bad model header: {e}", path.display())))?;
    if header.format != FORMAT_NAME {
        return Err(Error::Format(format!("{}: unrecognized format", path.display())));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported model version {}",
            path.display(),
            header.version
        )));
    }

    let expected: usize = header.blobs.iter().map(|b| b.shape.iter().product::<usize>()).sum();
    let payload = &raw[8 + header_len..];
    if payload.len() != expected * 8 {
        return Err(Error::Format(format!(
            "{}: expected {} weight bytes, found {}",
            path.display(),
            expected * 8,
            payload.len()
        )));
    }
    let mut tensors = Vec::with_capacity(header.blobs.len());
    let mut offset = 0usize;
    for info in &header.blobs {
        let numel: usize = info.shape.iter().product();
        let data: Vec<f64> = payload[offset * 8..(offset + numel) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += numel;
        let mut t = Tensor::new(info.shape.clone(), data)?;
        t.requires_grad = info.trainable;
        tensors.push(t);
    }
    let mut reader = BlobReader { infos: header.blobs.clone(), tensors, cursor: 0 };

    match header.kind {
        ModelKind::Full => {
            let basenet_descs = header
                .basenet
                .as_ref()
                .ok_or_else(|| Error::Format("full model without basenet descs".into()))?;
            let aux_descs = header
                .auxlayers
                .as_ref()
                .ok_or_else(|| Error::Format("full model without auxlayer descs".into()))?;
            let basenet = read_net(&mut reader, "basenet.", basenet_descs, header.input_shape)?;
            let auxlayers =
                read_net(&mut reader, "auxlayers.", aux_descs, basenet.output_shape())?;
            let heads = read_heads(&mut reader, &header)?;
            let priors = generate_priors(
                header.featmap_shape[1],
                header.featmap_shape[2],
                &header.prior_config,
            )?;
            if priors.len() != heads.num_priors() {
                return Err(shape_err!("prior count mismatch in stored model"));
            }
            Ok(Model::Full(FullDetector {
                basenet,
                auxlayers,
                heads,
                prior_config: header.prior_config,
                priors,
                num_classes: header.num_classes,
                seed: header.seed,
            }))
        }
        ModelKind::Reduced => {
            let pre_descs = header
                .pre_model
                .as_ref()
                .ok_or_else(|| Error::Format("reduced model without pre-model descs".into()))?;
            let pre_model = read_net(&mut reader, "pre_model.", pre_descs, header.input_shape)?;
            let (winfo, mut wt) = reader.next("reduction.weights")?;
            wt.requires_grad = winfo.trainable;
            let singular_values = header
                .singular_values
                .clone()
                .ok_or_else(|| Error::Format("reduced model without singular values".into()))?;
            let mean = if reader.peek_name() == Some("reduction.mean") {
                Some(reader.next("reduction.mean")?.1.data)
            } else {
                None
            };
            let reduction = ReductionLayer {
                weights: crate::autodiff::Param::new(wt),
                singular_values,
                mean,
            };
            let heads = read_heads(&mut reader, &header)?;
            let priors = generate_priors(
                header.featmap_shape[1],
                header.featmap_shape[2],
                &header.prior_config,
            )?;
            let cut_index = header
                .cut_index
                .ok_or_else(|| Error::Format("reduced model without cut index".into()))?;
            Ok(Model::Reduced(ReducedDetector {
                pre_model,
                reduction,
                heads,
                prior_config: header.prior_config,
                priors,
                num_classes: header.num_classes,
                cut_index,
                seed: header.seed,
            }))
        }
    }
}
