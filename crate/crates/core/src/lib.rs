//! Multimodal tactile-sequence fusion toolkit: synchronized ingestion of
//! vision-based tactile frames, two audio streams, and proprioception; PSD,
//! optical-flow, and raw-image feature representations; an attention-based
//! multimodal sequence classifier with multi-task property heads; and the
//! evaluation/statistics harness, all verifiable end-to-end on a bundled
//! synthetic data generator.

pub mod aligner;
pub mod dataset;
pub mod dsp;
pub mod features;
pub mod frame;
pub mod neural;
pub mod optflow;
pub mod stats;
pub mod synth;
pub mod trainer;
pub mod wav;

pub use aligner::{AudioRing, SAMPLE_RATE, WINDOW_LEN};
pub use dataset::{
    load_trial, partition_sequences, split_by_trial, write_trial, DatasetError, FabricClass,
    PropertyLabels, SequenceBatch, SplitPolicy, TimeSample, Trial, PROPRIO_DIM, SEQUENCE_LEN,
};
pub use dsp::{mix_noise, truncate_bandwidth, welch_psd, welch_psd_i16, DspError, PsdFeature};
pub use features::{
    extract_trial, sequences_from, ExtractSelection, FeatureError, FeatureParams, SeqRef,
    TrialFeatures,
};
pub use frame::{Frame8, FrameF32, ImageVariant};
pub use neural::{
    BackboneKind, HeadId, HeadSpec, ImageInputKind, ModelConfig, ModelState, NeuralError,
};
pub use optflow::{
    farneback_flow, patch_pool, percentile_filter, DenseFlow, FarnebackParams, FlowError,
    FlowFeature,
};
pub use stats::{
    confusion_matrix, evaluate_properties, export_latents, wilcoxon_signed_rank, StatsError,
};
pub use synth::{generate_trial, SynthFabricSpec};
pub use trainer::{train, TrainData, TrainError, TrainParams};
