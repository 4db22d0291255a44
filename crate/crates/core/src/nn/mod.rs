//! Parameter storage, initialization, and optimization.

mod init;
mod params;
mod sgd;

pub use init::{he_conv, he_linear, normal, standard_normal, zeros};
pub use params::{grads_by_name, Params, TapeParams};
pub use sgd::{Sgd, SgdConfig};
