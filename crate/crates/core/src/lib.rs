//! Detection and attribution of images from autoregressive image generators
//! using the ratio of conditional to unconditional token likelihoods.
//!
//! The pipeline works on token-likelihood records (one per image and
//! generator, see [`record`]). A small per-generator [`ScoreModel`] is
//! calibrated on a few hundred labelled images ([`calibration`]) and scores
//! unseen images; scores from several generators feed ensemble detection
//! and attribution ([`evaluation`]).

pub mod adamw;
pub mod autodiff;
pub mod calibration;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod record;
pub mod scores;
pub mod synth;

pub use calibration::{calibrate, calibrate_detailed, calibrate_runs, Calibration, RunSet, Split};
pub use config::CalibrationConfig;
pub use error::{Error, RecordProblem, Result};
pub use evaluation::{
    attribute, auroc, confusion, ensemble_detect, Confusion, EvalReport, ScoreTable, Verdict,
};
pub use record::{read_records, write_records, ScaleBlock, TokenLikelihoodRecord, REAL_LABEL};
pub use scores::{
    delta, delta_alpha, icas_image, icas_token, prada_score, InputMode, Mlp, ScoreModel,
};
pub use synth::{builtin_profile, builtin_profiles, generate, SynthProfile};
