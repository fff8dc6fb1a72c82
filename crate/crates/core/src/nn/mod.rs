//! Dense networks with exact reverse-mode gradients, stable losses and Adam.

mod adam;
mod checkpoint;
mod loss;
mod matrix;
mod mlp;
mod norm;

pub use adam::{adam_step, AdamConfig, OptState};
pub use checkpoint::{format_f64, load_params, parse_f64, save_params, MlpDocument};
pub use loss::{
    bce_with_logits, bce_with_logits_const, mse_loss, weighted_bce_with_logits,
    weighted_mse_loss,
};
pub use matrix::Matrix;
pub use mlp::{sigmoid, Gradients, HiddenActivation, Mlp, OutputActivation, Tape};
pub use norm::Standardizer;
