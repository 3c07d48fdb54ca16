//! Exemplar-guided image-to-image translation.
//!
//! The pipeline matches feature patches between an input and a reference
//! image by cosine similarity, assembles an auxiliary mosaic of reference
//! blocks at the input's positions, then trains a multi-task generator
//! (image + segmentation decoders, non-local bottleneck) against a
//! spectrally-normalized patch discriminator under six combined objectives.
//! Training is self-supervised: the paired target doubles as a fake
//! reference and the auxiliary is corrupted to mimic real-reference
//! mismatch.

pub mod checkpoint;
pub mod data_pipeline;
pub mod evaluation;
pub mod features;
pub mod losses;
pub mod nn;
pub mod segt;
pub mod semantic_match;
pub mod trainer;

pub use data_pipeline::{DatasetManifest, ForegroundPolicy, PostProcessConfig, Split, TrainingSample};
pub use features::{extract_features, ExtractorKind, FeatureExtractor, FeatureExtractorConfig, FeatureMap};
pub use losses::{LossReport, LossWeights};
pub use semantic_match::{
    build_auxiliary, compute_correspondence, semantic_match, vectorize_patches, AuxiliarySample,
    CorrespondenceMap, PatchSpec,
};
pub use trainer::{label_schedule, PreparedDataset, TrainConfig, Trainer};
