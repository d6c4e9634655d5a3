//! Tile-granular communication/computation overlap for tensor-parallel GEMMs.
//!
//! The crate has three layers:
//!
//! - [`engine`] runs the fused GEMM-ReduceScatter and AllGather-GEMM schedules
//!   on simulated ranks (threads sharing a buffer directory), next to the
//!   non-overlapped and chunked reference strategies, and checks them against
//!   the dense [`oracle`].
//! - [`sim`] costs the same schedules on a parameterized machine with a
//!   deterministic discrete-event loop and derives effective communication
//!   time and overlap efficiency.
//! - [`tune`] searches the knob space (transfer mode, communication tile
//!   size, tile swizzle, GEMM tile shape, epilogue write mode).

pub mod engine;
pub mod error;
pub mod exec;
pub mod matrix;
pub mod oracle;
pub mod problem;
pub mod sim;
pub mod swizzle;
pub mod tune;
pub mod workspace;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use problem::{tile_grid, GridDims, Pattern, ProblemSpec, TileCoord, TileShape};
pub use workspace::ShardedWorkspace;
