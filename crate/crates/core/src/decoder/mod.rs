//! Multimodal causal decoder with a per-layer token-reduction hook.

pub mod checkpoint;
mod config;
mod gradcheck;
mod layout;
mod lora;
mod model;
mod params;
mod reference;

pub use config::{ModelConfig, PositionEncoding};
pub use gradcheck::{grad_check, grad_check_with_fault, relative_error, GradCheckReport};
pub use layout::{prune_states, SequenceLayout};
pub use lora::lora_merge;
pub use model::{
    response_loss, Decoder, ForwardOptions, ForwardPass, ForwardTrace, LayerContext, LayerTrace, NoReduction,
    Reduction, Sample, ScheduleReducer, TokenReducer,
};
pub use params::{Gradients, LayerSlots, LoraSlots, ParamEntry, ParamIndex, Parameters, TensorKind, TrainMode, ADAPTED};
pub use reference::{masked_reference, ReferenceOutput};

#[cfg(test)]
mod tests;
