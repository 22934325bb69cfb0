//! Siamese patch-similarity network with hand-written backpropagation.

mod adam;
mod gradcheck;
mod io;
mod layers;
mod loss;
mod model;
mod tensor;

pub use adam::{adam_update, optimizer_step, AdamHyper, AdamState};
pub use gradcheck::{grad_check, grad_check_against, relative_error, GradCheckReport, LayerCheck};
pub use io::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use layers::{global_avg_pool, maxpool2, sigmoid, Conv2d, Dense};
pub use loss::{batch_loss, bce, contrastive, loss_and_grad, loss_grad_probs, Gradients, LossConfig, PROB_CLAMP};
pub use model::{energy, ArchConfig, Head, SiameseModel, Tower, MIN_PATCH_SIDE};
pub use tensor::Tensor;
