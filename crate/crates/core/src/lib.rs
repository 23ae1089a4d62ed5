//! Metric 3D pose and wireframe shape estimation of vehicles seen by a
//! single moving camera on arbitrarily sloped or banked roads.
//!
//! The pipeline couples a shape-prior reprojection objective with local
//! ground-plane consistency terms, solved jointly by a robust
//! Levenberg-Marquardt schedule, and recovers metric scale from multi-view
//! road-point triangulation plus the known camera height.

pub mod geometry;
pub mod shape_model;
pub mod residuals;
pub mod solver;
pub mod multiview;
pub mod pipeline;
pub mod synthbench;
