//! The fusion architecture: key-value generators, the cross-modal transformer, per-modality
//! cross-attention injection, the iterative driver, comparison variants and task heads.

mod blocks;
mod config;
mod forward;
mod head;
mod model;

pub use blocks::{
    cross_attention_inject, cross_modal_forward, generate_kv, init_cross_attention, init_kv_generator,
    init_self_attention, self_attention_block, ForwardCtx,
};
pub use config::{FusionConfig, TaskKind, TaskSpec, Variant};
pub use forward::{
    ca_prefix, cm_prefix, init_fusion_params, kv_prefix, tf_prefix, FusionInputs, FusionNet, FusionTrace,
};
pub use head::{init_task_head, keypoints_from_row, task_head_forward, token_mean, HEAD_FC1, HEAD_FC2};
pub(crate) use model::batch_size;
pub use model::{init_rng, stub_rng, ModelOutput, ModelSpec, TaskModel, XFiModel};
