//! Minimal 3D convolutional network engine: tensors, layers with explicit
//! backward passes, the residual classifier, loss and optimizers.

pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod params;
pub mod resnet;
pub mod tensor;

pub use layers::Mode;
pub use loss::{cross_entropy_batch, cross_entropy_grad, cross_entropy_loss};
pub use network::{ForwardPass, GradTarget, Layer, Network, NetworkBuilder, Tape};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{EntryKind, Grads, ParamStore};
pub use resnet::{softmax2, Classifier, Depth, LoadReport, ModelConfig, Prediction};
pub use tensor::{Real, Tensor};
