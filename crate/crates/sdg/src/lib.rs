//! Toy-scale structured cross-attention guidance for text-to-image
//! diffusion: span extraction, embedding re-alignment, multi-value and
//! multi-key attention fusion, a trainable toy latent diffusion pipeline,
//! and contrast-set benchmark construction.

pub mod alignment;
pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod embedding;
pub mod encoder;
pub mod imageio;
pub mod error;
pub mod mat;
pub mod oracle;
pub mod parse_tree;
pub mod pipeline;
pub mod prompt;
pub mod record;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod scene_graph;
pub mod tape;
pub mod train;
pub mod unet;
pub mod vocab;

pub use error::{Result, SdgError};

/// Element type used by the concrete pipeline.
pub type Real = f32;
pub type RealMat = mat::Mat<Real>;
pub type RealTensor3 = mat::Tensor3<Real>;
