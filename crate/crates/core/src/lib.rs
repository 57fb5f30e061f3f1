//! Auto-annotation of 3D cuboids on LiDAR sweeps from 2D detections.
//!
//! Geometry, frustum extraction, aggregation, the hypothesis search and the
//! occupancy score are generic over [`Real`] (`f32` or `f64`). I/O,
//! evaluation and tracking work in `f64`.

pub mod aggregate;
pub mod eval;
pub mod frustum;
pub mod geom;
pub mod ingest;
pub mod mht;
pub mod pipeline;
pub mod prior;
pub mod refine;
pub mod scalar;
pub mod score;
pub mod synth;
pub mod taxonomy;

pub use scalar::Real;

pub type Point3 = geom::Vec3<f64>;
pub type Point3f32 = geom::Vec3<f32>;
pub type Cuboid = geom::Cuboid3D<f64>;
pub type Cuboid32 = geom::Cuboid3D<f32>;
pub type Box2 = geom::Box2D<f64>;
pub type Box2f32 = geom::Box2D<f32>;
pub type Transform = geom::RigidTransform<f64>;
pub type Transform32 = geom::RigidTransform<f32>;
pub type Intrinsics = geom::CameraIntrinsics<f64>;
pub type Intrinsics32 = geom::CameraIntrinsics<f32>;
pub type Prior = prior::SemanticPrior<f64>;
pub type Prior32 = prior::SemanticPrior<f32>;
pub type Hypothesis = mht::Hypothesis<f64>;
pub type Hypothesis32 = mht::Hypothesis<f32>;
