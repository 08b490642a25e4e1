//! Random-projection-quantizer pretraining for speech encoders on raw
//! waveforms or log-Mel features, with probing and target diagnostics.

pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod features;
pub mod masking;
pub mod model;
pub mod nn;
pub mod params;
pub mod probe;
pub mod quantizer;
pub mod rng;
pub mod synth;
pub mod train;

pub use audio::{AudioBatch, MixConfig, Waveform};
pub use config::{load_config, RunConfig};
pub use encoder::{Encoder, EncoderConfig, EncoderOutput};
pub use error::{Error, Result};
pub use features::{FeatureFrames, FeatureSource};
pub use masking::{MaskParams, MaskSpec};
pub use model::{count_params, Model, ParamReport};
pub use probe::{ProbeConfig, ProbeReport};
pub use quantizer::{LabelFrames, QuantizerConfig, RandomQuantizer};
pub use train::{TrainConfig, TrainState};
