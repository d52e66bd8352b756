//! Mini-batch MCMC-SAEM for exponential-family latent-variable models.
//!
//! The generic loop lives in [`engine`]; a model plugs in by implementing
//! [`model::LatentModel`]. Three models ship with the crate: a directed
//! stochastic block model ([`sbm`]), a one-compartment pharmacokinetic
//! mixed-effects model ([`pk`]) and a Weibull shared-frailty survival model
//! ([`frailty`]). [`analysis`] and [`experiment`] hold the replicate-level
//! statistics and the experiment drivers used by the `mbsaem` CLI.

pub mod analysis;
pub mod datafile;
pub mod engine;
pub mod experiment;
pub mod frailty;
pub mod kernels;
pub mod model;
pub mod pk;
pub mod rng;
pub mod sbm;

pub use engine::{run, Init, InitTheta, SaTrace, SaemConfig, SaemRun, StepSizeSchedule};
pub use model::{LatentModel, ModelError, SuffStat};
pub use rng::RngStream;
