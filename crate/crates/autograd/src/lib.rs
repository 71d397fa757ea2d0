//! Minimal reverse-mode automatic differentiation over dense `f64` tensors,
//! plus the optimizer, sampling and checking utilities the model is built on.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod linalg;
pub mod params;
pub mod rng;
pub mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, Moments};
pub use error::{Error, Result};
pub use gradcheck::{check_param_gradients, check_selected_param_gradients, finite_difference_check, ParamCheckReport};
pub use graph::{mean_std, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use rng::{sample_beta, RngStream};
pub use tensor::Tensor;

/// Per-vector mean and standard deviation over the last dimension.
///
/// The deviation is the plain population value; callers that divide by it
/// add their own epsilon.
pub fn layer_norm_stats(x: &Tensor) -> (Tensor, Tensor) {
    let (mut mu, mut sigma) = (Vec::with_capacity(x.rows()), Vec::with_capacity(x.rows()));
    for r in 0..x.rows() {
        let (m, s) = mean_std(x.row(r));
        mu.push(m);
        sigma.push(s);
    }
    (Tensor::vector(mu), Tensor::vector(sigma))
}
