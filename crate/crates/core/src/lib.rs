//! Capsule networks with dynamic routing on pseudo-hyperboloids.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod experiment;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod policy;
pub mod routing;
pub mod seed;
pub mod training;
