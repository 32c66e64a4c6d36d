//! Core numerics for boosting paired-comparison studies with absolute
//! category ratings: matrix construction, scaling models, information-gain
//! batch selection, the fusion loop and a Monte Carlo harness.

pub mod error;
pub mod fusion;
pub mod metrics;
pub mod normal;
pub mod optim;
pub mod pcm;
pub mod quadrature;
pub mod sampler;
pub mod scale;
pub mod sim;

pub use error::{Error, Result};
pub use fusion::{init_state, step, IterationRecord, LoopConfig, StudyState};
pub use metrics::{agreement_proportion, srocc, Agreement};
pub use pcm::{pcm_from_acr, pcm_merge, AcrRatingTable, PairComparisonMatrix};
pub use quadrature::{gauss_hermite_rule, QuadratureRule};
pub use sampler::{select_batch, select_batch_with, BatchMode, SampledPair, SamplingBatch};
pub use scale::{fit, FitOptions, ModelKind, QualityEstimate};
pub use sim::{run_simulation, GroundTruth, NoiseModel, SimulationConfig, SimulationReport};
