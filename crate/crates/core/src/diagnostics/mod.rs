//! Prediction certainty under Monte Carlo dropout and t-SNE projections of
//! `[CLS]` states.

mod mc;
pub mod svg;
pub mod tsne;

use thiserror::Error;

use crate::model::ModelError;

pub use mc::{extract_cls, mc_dropout, write_certainty_csv, CertaintyRecord, McDropoutRun, DEFAULT_SAMPLES};
pub use tsne::{
    calibrate, joint_probabilities, kl_divergence, silhouette, tsne, Calibration, Projection2D, TsneConfig,
};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("Monte Carlo dropout needs at least one sample")]
    SampleCount,
    #[error("no inputs")]
    Empty,
    #[error("{0}")]
    Dimension(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("t-SNE needs more than 3 × perplexity points: n = {n}, perplexity = {perplexity}")]
    TooFewPoints { n: usize, perplexity: f64 },
    #[error(
        "only {distinct} distinct points for perplexity {perplexity}; add small jitter to duplicates or lower the perplexity"
    )]
    TooFewDistinct { distinct: usize, perplexity: f64 },
    #[error(
        "bandwidth search for row {row} did not reach perplexity {perplexity}; add small jitter to duplicate points"
    )]
    Calibration { row: usize, perplexity: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}
