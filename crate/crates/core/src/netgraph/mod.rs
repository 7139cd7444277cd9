//! Network description, tensor kernels, executors and checkpoints.

mod checkpoint;
mod graph;
mod kernels;
mod model;
mod params;
mod spec;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use graph::{BnMode, Eager, Exec, Graph, NodeId};
pub use kernels::{ConvGeom, BN_EPS};
pub use model::{depth_from_logits, image_tensor, softmax_channels, ForwardOutputs, Model};
pub use params::{BnBatchStats, BnId, BnLayer, ParamId, ParamStore};
pub use spec::{
    build_decoder, build_encoder, Branch, Branches, DecoderStage, EncoderBlock, LayerKind, LayerSpec, NetworkOptions,
    NetworkSpec, ShapeReport, Variant,
};
pub use tensor::Tensor;
