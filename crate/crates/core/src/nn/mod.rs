//! Layers, losses and model assembly.

mod layer;
mod loss;
mod model;
mod presets;

pub use layer::{
    batchnorm_forward, dropout_forward, ema, normal, BatchNorm, Conv2d, Dense, Dropout, Layer, NormRole, ParamKind,
    ParamVar, BN_EPS, BN_MOMENTUM,
};
pub use loss::{binary_ce_loss, cross_entropy_loss, softmax};
pub use model::{DropoutPosition, ForwardOutput, Head, Model, Phase};
pub use presets::{build_model, ModelSpec, Preset};
