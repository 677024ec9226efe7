//! Dense tensors and the small closed set of differentiable layers the
//! autoencoder needs. Every forward function has a matching analytic
//! backward; [`grad_check`] validates them against central differences.

mod gradcheck;
mod layers;
mod similarity;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{
    affine_backward, affine_forward, conv2d_backward, conv2d_forward, dropout_backward,
    dropout_forward, matvec, matvec_transposed, relu_backward, relu_forward, AffineGrads,
    ConvGrads,
};
pub use similarity::{cosine_sim, cosine_sim_backward, l2_norm};
pub use tensor::Tensor;
