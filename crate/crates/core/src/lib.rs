//! Video pose estimation with a weight-shared recurrent convolutional network.
//!
//! The engine is self-contained: a dense tensor type with reverse-mode
//! autodiff (`tensor`, `tape`, `ops`), a convolutional LSTM cell
//! (`conv_lstm`), the recurrent pose model and its ablation variants
//! (`model`), heatmap encoding/decoding (`heatmap`), a deterministic
//! synthetic video benchmark (`synth`), sequence-consistent augmentation
//! (`augment`), an SGD training loop (`trainer`), PCK evaluation
//! (`evaluator`), and a speed/memory-visualization harness (`bench_viz`).

pub mod augment;
pub mod bench_viz;
pub mod checkpoint;
pub mod config;
pub mod conv_lstm;
pub mod error;
pub mod evaluator;
pub mod heatmap;
pub mod kernels;
pub mod model;
pub mod ops;
pub mod rng;
pub mod skeleton;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use heatmap::JointSet;
pub use model::{ModelConfig, ModelParams, Variant};
pub use ops::Cx;
pub use synth::{PoseSequence, SynthConfig};
pub use tensor::{Scalar, Tensor};
