//! Small sequential networks (MLPs and a two-block CNN) with an optional
//! batch-norm toggle, plus checkpoint IO.

mod checkpoint;
mod model;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_HEADER};
pub use model::{
    argmax_rows, build_mlp, build_small_cnn, mlp_specs, small_cnn_specs, BatchNormState,
    CnnOptions, Layer, LayerSpec, MlpOptions, Mode, Model, BN_EPSILON, BN_MOMENTUM,
};
pub use params::{global_norm, Param, ParamKind, ParamSet};
