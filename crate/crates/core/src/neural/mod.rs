//! Differentiable computation stack and the multimodal sequence classifier:
//! per-modality encoders, feature fusion with per-sequence normalization,
//! attention / TCN backbones, and the classification heads.

pub mod model;
pub mod tensor;

pub use model::{
    argmax, finite_difference_check, forward, init_params, init_params_t, multitask_loss,
    random_inputs, random_targets, BackboneKind, BoundParams, ForwardOutput, GradCheckReport,
    HeadId, HeadSpec, ImageInputKind, ModelConfig, ModelState, NeuralError, ParamSet, SeqTensors,
    Targets,
};
pub use tensor::{Gradients, Graph, Real, TensorData, Var};
