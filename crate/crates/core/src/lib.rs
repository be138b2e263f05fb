//! Weight quantization by differentiable soft k-means.
//!
//! Network weights are clustered into a small codebook by soft k-means, posed
//! as a fixed point `C* = F(C*, W)`. Training differentiates through the
//! clustering with one of three backends (see [`grad`]): an unrolled reverse
//! sweep whose memory grows with the iteration count, implicit differentiation
//! at the fixed point, or its Jacobian-free approximation.
//!
//! All numeric code is generic over [`Real`]; the aliases below fix `f64`,
//! which is what training and the tests use.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod grad;
pub mod gradcheck;
pub mod kmeans;
pub mod matrix;
pub mod nn;
pub mod pq;
pub mod report;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use grad::{BackendKind, ClusterJacobians, GradBackend};
pub use kmeans::{FixedPointResult, InitKind, InitStrategy};
pub use matrix::Matrix;
pub use nn::{LayerSpec, LossKind, Network, NetworkSpec, Params};
pub use pq::{AttentionMatrix, Codebook, DistanceMatrix, QuantizeMode, WeightMatrix};
pub use scalar::Real;
pub use train::{StepMetrics, TrainConfig};

pub type WeightMatrix64 = WeightMatrix<f64>;
pub type WeightMatrix32 = WeightMatrix<f32>;
pub type Codebook64 = Codebook<f64>;
pub type Codebook32 = Codebook<f32>;
pub type Matrix64 = Matrix<f64>;
pub type FixedPointResult64 = FixedPointResult<f64>;
