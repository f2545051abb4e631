//! Numerical machinery for energy transfer along weakly coupled pendulum
//! lattices: decay-weighted sequence spaces, invariant manifolds of hyperbolic
//! tori via the graph transform, Melnikov theory for homoclinic splitting,
//! transition chains of heteroclinic connections, and shadowing trajectories.
//!
//! The lattice Hamiltonian is `H = sum_j E_j + eps*H1` with per-site pendulum
//! energies `E_j = p_j^2/2 + cos(q_j) - 1` and a short-range coupling `H1`
//! built from products of `(1 - cos q)` factors, so that the finite
//! dimensional subspaces spanned by a few consecutive sites stay exactly
//! invariant.

pub mod chain;
pub mod config;
pub mod decay;
pub mod flow;
pub mod lattice;
pub mod manifold;
pub mod melnikov;
pub mod pendulum;
pub mod runner;
pub mod shadow;

mod quad;

pub use decay::{DecayFunction, DecayOperator, DecayVector, SiteWindow};

/// Library-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid decay function: {0}")]
    InvalidDecay(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("model rejected: {0}")]
    ModelRejected(String),
    #[error("integration failure: {0}")]
    Integration(String),
    #[error("chart domain error: {0}")]
    ChartDomain(String),
    #[error("hyperbolicity failure: {0}")]
    Hyperbolicity(String),
    #[error("fixed point did not contract: {0}")]
    Divergence(String),
    #[error("quadrature cutoff too small: {0}")]
    IncreaseCutoff(String),
    #[error("hypothesis failed: {0}")]
    Hypothesis(String),
    #[error("newton did not converge: {0}")]
    NewtonDivergence(String),
    #[error("transversality failure: {0}")]
    Transversality(String),
    #[error("section miss: {0}")]
    SectionMiss(String),
    #[error("shooting refinement failed: {0}")]
    RefineShooting(String),
    #[error("disk escaped the chart: {0}")]
    DiskEscape(String),
    #[error("requested accuracy unattainable: {0}")]
    EtaFloor(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
