//! Decoy-state BB84 over a double-pulse phase encoding: finite-key bounds,
//! an honest-channel simulator, GF(2) post-processing, the two-party
//! protocol machines and Monte-Carlo validators for all of them.

pub mod bounds;
pub mod channel;
pub mod error;
pub mod oracle;
pub mod params;
pub mod postprocessing;
pub mod protocol;
pub mod rng;

pub use error::{Error, Result};
pub use params::{
    entropy_h, p_int_cond, p_int_joint, poisson_pcs, truncation_n_max, Basis, Intensity, PerBasis,
    PerIntensity, PhaseTable, PhotonDistributions, ProtocolConstants,
};
