//! Minimal neural-network engine: tensors, a differentiation tape, Adam and
//! a conditional U-Net.

mod graph;
mod optim;
mod tensor;
mod train;
pub mod unet;

pub use graph::{Grads, Graph, Var};
pub use optim::{Adam, AdamConfig, Ema};
pub use tensor::{nchw_to_nhwc, nhwc_to_nchw, ParamSet, Real, Tensor};
pub(crate) use tensor::{constant, kaiming_uniform, normal_init};
pub(crate) use unet::{conv_init, linear_init};
pub use train::{ema_decay_at, fit, write_curve_csv, CurvePoint, Gradients, TrainConfig};
pub use unet::{sinusoidal, UNet, UNetConfig};
