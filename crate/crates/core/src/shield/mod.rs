//! Defense: a recurrent VAE detector flags perturbed observations and a
//! second one, trained on attacked/clean pairs, replaces them.

mod defense;
mod train;
mod vae;

pub use defense::{
    detect, robustness_regularizer, score_sequence, threshold_point, tune_c_anomaly, AnomalyVerdict, CalibrationReport, DefendedActor,
    DefendedPolicy, DefenseHook, DefenseState, DefenseStep, DenoisedStep, ThresholdPoint,
};
pub use train::{train_denoiser, train_detector, Regularizer, ShieldConfig, ShieldTrainReport};
pub use vae::{elbo_loss, GruVae, LatentMode, StepVars, VaeState, VaeStep};
