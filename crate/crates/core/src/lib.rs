//! Pose-conditioned neural implicit surfaces for articulated bodies.
//!
//! A posed query point is mapped to a canonical frame through learned blend
//! weights and an inverse blended rigid transform, displaced by a
//! pose-dependent field, and evaluated by a canonical signed distance network.
//! The crate also ships the synthetic capsule body used as exact ground truth,
//! the training schedule, marching-cubes reconstruction and evaluation metrics.
//!
//! Numeric code is generic over [`Real`]; the aliases below fix the width.

pub mod error;
pub mod fields;
pub mod data;
pub mod geometry;
pub mod kv;
pub mod mesh;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod recon;
pub mod scalar;
pub mod skeleton;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{Aabb, Mat3, Mat4, Vec3};
pub use mesh::{Mesh, MeshFormat, MeshIndex};
pub use scalar::Real;
pub use skeleton::{BlendWeights, JointTransforms, Pose, PoseEncoding, Skeleton};

/// Single precision, used for training and inference.
pub type Model = fields::NeuralGif<f32>;
/// Double precision, used for gradient checks and oracles.
pub type Model64 = fields::NeuralGif<f64>;
pub type Vec3f = Vec3<f32>;
pub type Vec3d = Vec3<f64>;
pub type Mat4f = Mat4<f32>;
pub type Mat4d = Mat4<f64>;
pub type MeshF = Mesh<f32>;
pub type MeshD = Mesh<f64>;
pub type PoseF = Pose<f32>;
pub type PoseD = Pose<f64>;
pub type SkeletonF = Skeleton<f32>;
pub type SkeletonD = Skeleton<f64>;
pub type Body = data::CapsuleBody<f64>;
