//! The three learnable networks: conditional denoiser, classifier and
//! instance encoder.

mod classifier;
mod denoiser;
mod encoder;
mod layers;

use rand::Rng;

pub use classifier::{argmax, BoundClassifier, Classifier, ClassifierOutput, ClassifierShape};
pub use denoiser::{time_features, BoundDenoiser, Denoiser, DenoiserShape};
pub use encoder::{embed_instance, EncoderShape, InstanceEncoder};
pub use layers::{Activation, BoundLinear, BoundMlp, Linear, Mlp, Module};

use crate::ndiff::NdiffError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("class {class} out of range for {classes} classes")]
    BadClass { class: usize, classes: usize },
    #[error("dropout probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error(transparent)]
    Tape(#[from] NdiffError),
}

/// Zeroes each coordinate independently with probability `p`. Survivors are
/// not rescaled. Always draws one uniform per coordinate, so the caller's RNG
/// advances identically for every `p`.
pub fn apply_embedding_dropout<R: Rng + ?Sized>(
    z: &[f64],
    p: f64,
    rng: &mut R,
) -> Result<Vec<f64>, ModelError> {
    let mask = dropout_mask(z.len(), p, rng)?;
    Ok(z.iter().zip(&mask).map(|(v, m)| v * m).collect())
}

/// The keep-mask used by [`apply_embedding_dropout`]: 1 keeps, 0 drops.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Result<Vec<f64>, ModelError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(ModelError::BadProbability(p));
    }
    Ok((0..len).map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 }).collect())
}
