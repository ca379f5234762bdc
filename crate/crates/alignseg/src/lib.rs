//! Single-stage weakly supervised semantic segmentation on a synthetic
//! shapes corpus, trained with dual-level dense image-text alignment.
//!
//! The pipeline: a compact patch-token encoder produces a class token, patch
//! tokens, and an intermediate feature tap. Intermediate class activation
//! maps thresholded at `beta` give an object-aware mask that splits patch
//! tokens into foreground and background. A frozen prompt-derived text bank
//! provides per-class and background embeddings; learnable projection heads
//! map both modalities into a shared space where a global class-token loss
//! and a local per-patch InfoNCE loss cross-contrast foreground and
//! background. Final CAMs are thresholded into pseudo labels, refined by
//! color-affinity smoothing, and supervise a small convolutional
//! segmentation head, all trained end to end from image-level labels only.
//!
//! Start from the runnable examples (`cargo run --example ...`) or the
//! `alignseg` binary (`make-data`, `train`, `eval`, `ablate`, `export-cams`,
//! `plot`).

pub mod align;
pub mod cam;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod objective;
pub mod pngio;
pub mod segmentor;
pub mod textbank;
pub mod util;
pub mod viz;

pub use align::{
    cosine, global_align_loss, local_align_loss, local_similarities, AlignmentInputs,
    LocalSimilarities,
};
pub use cam::{compute_cam, object_mask, split_patches, CamStack, ClassifierWeights, ObjectMask};
pub use config::AppConfig;
pub use data::{augment, generate, load_corpus, save_corpus, Corpus, CorpusConfig, Sample};
pub use encoder::{encode, resize_pos_embed, EncoderConfig, EncoderParams, FeatureBundle};
pub use error::{Error, Result};
pub use harness::{
    ablate, evaluate, load_checkpoint, lr_at, save_checkpoint, train_model, EvalReport,
    EvalSource, Model, TrainConfig,
};
pub use objective::{
    assemble, global_max_pool_logits, multilabel_soft_margin, token_contrast_loss, LossBreakdown,
    LossTerms, LossWeights,
};
pub use segmentor::{
    pixel_adaptive_refine, pseudo_labels, reg_loss, seg_forward, seg_loss, PseudoLabelMap,
    SegHeadConfig,
};
pub use textbank::{build_bank, load_bank, save_bank, ProjectionHeads, TextEmbeddingBank};
