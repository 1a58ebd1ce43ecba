//! Quantum detector tomography for loop-multiplexed click detectors.
//!
//! A single click detector placed behind a fibre loop with a partially
//! reflecting coupler sees every input pulse as a train of exponentially
//! decaying copies, one per time-bin. The detector outcome is the number of
//! occupied time-bins. This crate covers the full chain around that device:
//!
//! 1. [`probe_states`]: coherent probe ensembles and their Fock-basis matrix.
//! 2. [`detector_model`]: the loop model, the Poisson-binomial outcome
//!    transform, model POVMs and a stochastic click simulator.
//! 3. [`ingest`]: time-tagger histograms to per-bin click probabilities and
//!    outcome matrices.
//! 4. [`tomography`]: smoothed, constrained least-squares POVM reconstruction
//!    with an independent log-barrier reference solver.
//! 5. [`model_fit`]: three-parameter model fit and POVM extrapolation.
//! 6. [`estimation`]: mean photon number of a bright coherent state.
//!
//! Dense matrices are [`nalgebra::DMatrix`] throughout. Everything that uses
//! randomness takes an explicit seed and is reproducible bit for bit,
//! independent of the rayon thread count.

pub mod detector_model;
pub mod error;
pub mod estimation;
pub mod ingest;
pub mod model_fit;
pub mod povm;
pub mod probe_states;
pub mod rng;
pub mod tomography;

pub use error::{Error, Result};
pub use povm::PovmSet;
