//! Style-transfer text-to-mel synthesis.
//!
//! The model encodes phonemes with a feed-forward transformer, removes
//! speaker and emotion cues from the content with mix-style layer
//! normalization, and re-injects style at three granularities: a global
//! speaker/emotion vector, vector-quantized frame/phoneme/word local styles
//! aligned to the content by attention, and a wavelet pitch model. A
//! conditional Glow post-net refines the coarse decoder output.
//!
//! All computation runs in `f64` on a small reverse-mode tape provided by
//! [`autograd`].

pub use melstyle_autograd as autograd;

pub mod backbone;
pub mod config;
pub mod content_adaptor;
pub mod error;
pub mod flow_postnet;
pub mod nn;
pub mod pipeline;
pub mod pitch_cwt;
pub mod style_adaptor;

pub use error::{Error, Result};
