//! Learning and evaluating SE(3)-equivariant occupancy fields from sparse,
//! unoriented point clouds.
//!
//! The pipeline is split into the following layers, bottom-up:
//!
//! - [`so3`]: rotations, real spherical harmonics, real Wigner D-matrices,
//!   Clebsch-Gordan intertwiners and the angular kernel basis.
//! - [`geometry`]: point clouds, rigid motions, tie-inclusive k-NN
//!   neighborhoods and the hand-designed type-1 input/query features.
//! - [`fibers`]: typed feature vectors and the equivariant linear maps,
//!   tensor-field kernels and layer norm built on top of them.
//! - [`autodiff`]: a coarse-grained reverse-mode tape specialised to the
//!   batched operations the network needs.
//! - [`attention`]: equivariant self- and cross-attention blocks.
//! - [`model`]: the encoder/decoder occupancy network.
//! - [`training`]: loss, Adam, the training loop and gradient checking.
//! - [`recon`]: marching cubes and reconstruction metrics.
//! - [`data_io`]: analytic shape oracles, scenes and file formats.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data_io;
pub mod error;
pub mod fibers;
pub mod geometry;
pub mod model;
pub mod params;
pub mod real;
pub mod recon;
pub mod rng;
pub mod so3;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use fibers::{FiberType, FiberVec};
pub use geometry::{PointCloud, SE3Transform};
pub use model::{ModelConfig, ModelParams, OccupancyModel};
pub use real::Real;
pub use so3::Rotation;
pub use training::TrainConfig;
