//! Encoder classifier and U-Net for 64x64 void segmentation.
//!
//! Training runs in two stages: the encoder is first trained with a dense
//! void/non-void head, then its weights seed the encoder half of a U-Net
//! that is trained end to end on per-pixel masks.

pub mod arch;
pub mod checkpoint;
pub mod model;
pub mod ops;
pub mod train;

#[cfg(test)]
mod gradcheck;

pub use arch::{classifier_layers, encoder_layers, unet_layers, Architecture, LayerKind, LayerSpec};
pub use checkpoint::{CheckpointMeta, NetworkParams};
pub use model::{images_to_tensor, predict_mask, Network, Param, ProbMap, ShapeTrace, Stage};
pub use train::{
    classifier_loss, segmentation_loss, split_indices, train_classifier, train_classifier_split, train_unet,
    train_unet_split, EpochRecord, LabeledCrop, SegSample, TrainConfig, TrainOutcome,
};
