//! Network building blocks. Each block declares its tensors as
//! [`ParamSpec`]s under a hierarchical name prefix and reads them back
//! through a [`Ctx`] during the forward pass.

mod fusion;
mod layers;
mod lstm;
mod mbconv;
mod params;

pub use fusion::{age_bin, CrossAttentionConfig, CrossAttentionFusion, Embedding};
pub use layers::{BatchNorm, Conv1d, Dense, DepthwiseConv1d, Dropout};
pub use lstm::{LstmAutoencoder, LstmCell};
pub use mbconv::{MbConv, MbConvConfig, SeBlock, StageConfig};
pub use params::{init_tensor, BnUpdate, Ctx, Init, Mode, ParamSpec, ParamStore};
