//! Training-free multi-instance binding for joint-attention diffusion transformers.
//!
//! Text, image and bridge tokens live in one sequence. Instance text is bound to
//! bridge copies of the instance's image tokens so it only ever sees a
//! single-instance context; image tokens are hard-bound to their own instance in a
//! band of vital layers and soft-bound everywhere else.
//!
//! Modules, bottom-up: [`numerics`], [`scene`], [`maskgen`], [`model`], [`analysis`].

pub mod analysis;
pub mod channels;
pub mod error;
pub mod imageio;
pub mod maskgen;
pub mod model;
pub mod numerics;
pub mod scene;

pub use error::{Error, Result};
pub use maskgen::{
    assemble_layer_mask, default_schedule, BindingMode, BindingSchedule, BridgeMode, LayerMask, SchedulePolicy,
};
pub use model::{ModelConfig, ModelWeights, TokenState, WeightMode};
pub use numerics::{Mat, RngStream};
pub use scene::{parse_scene, CellAssignment, SceneSpec, TokenLayout};
