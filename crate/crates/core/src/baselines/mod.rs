//! Reference methods the self-dictionary solvers are compared against.

pub mod fcls;
pub mod nfindr;

pub use fcls::{fcls, fcls_pixel, simplex_kkt_residual, FclsResult, FCLS_KKT_TOLERANCE};
pub use nfindr::{nfindr, NfindrResult, DEFAULT_MAX_SWEEPS};
