//! Dense double-precision kernels with hand-written backward passes.

pub mod act;
pub mod conv;
pub mod dense;
pub mod gradcheck;
pub mod init;
pub mod pool;
pub mod tensor;

pub use act::{cross_entropy_loss, relu, relu_backward, relu_forward, softmax_forward};
pub use conv::{
    conv2d_backward, conv2d_forward, deconv_backward, deconv_forward, deconv_upsample_forward, ConvGrads,
    ConvParams,
};
pub use dense::{Dense, DenseGrads};
pub use gradcheck::{check_gradient, finite_diff_grad, GradCheckReport};
pub use init::xavier_uniform;
pub use pool::global_average_pool_unpool;
pub use tensor::FeatureMap;
