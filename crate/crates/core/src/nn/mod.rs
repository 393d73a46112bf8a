//! Minimal feed-forward network engine with maskable weights.

mod arch;
mod engine;
mod sgd;
mod store;

pub use arch::{ArchSpec, ClassifierSpec, ConvGeometry, LayerSpec, Plan, Stage};
pub use engine::{
    softmax_cross_entropy, softmax_rows, ste_conv_score_grads, ste_score_grads, Cache, Gradients, Mode, WeightMask,
};
pub use sgd::{sgd_step, LrSchedule, SgdState};
pub use store::{
    init_network, BatchNormVariant, ClassifierHead, LayerInfo, LayerKind, StoreLayout, Variant, WeightStore,
    BN_EPSILON, BN_MOMENTUM,
};
