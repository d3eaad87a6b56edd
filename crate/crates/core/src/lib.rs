//! Batch-normalized convolutional network training at desk scale.
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod netdef;
pub mod solver;
pub mod tensor;
pub mod transform;
pub use layers::{BatchNormState, BnMode, LayerError, ParamSet};
pub use netdef::{LayerKind, LayerSpec, NetDef};
pub use tensor::{Real, Shape4, Tensor};
