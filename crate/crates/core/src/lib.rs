//! Core library: tensors with reverse-mode autodiff, layer networks and
//! splitting, POD reduction, anchor-box detection heads, the synthetic
//! dataset, and the train/reduce/finetune/evaluate pipeline.

pub mod autodiff;
pub mod boxes;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod model_io;
pub mod net;
pub mod pipeline;
pub mod pod;
pub mod report;
pub mod rng;
pub mod tensor;

pub use autodiff::{Param, SgdMomentum, Tape};
pub use boxes::{CornerBox, Detection, GroundTruth, PriorBox, PriorConfig};
pub use config::RunConfig;
pub use data::{Dataset, Split};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use model_io::Model;
pub use net::{FullDetectorSpec, LayerNet, SplitNet};
pub use pipeline::{FullDetector, ReducedDetector, TrainHistory};
pub use pod::{PodBasis, RankPolicy, SnapshotMatrix};
pub use report::{RunReport, TimingReport};
pub use rng::DetRng;
pub use tensor::Tensor;
