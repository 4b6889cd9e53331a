//! Multi-view active 6-DoF pose estimation for known objects.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod geom;
pub mod measure;
pub mod rng;
pub mod scene;
pub mod template;
pub mod translation;
pub mod active;
pub mod metrics;
pub mod orientation;
pub mod uncertainty;
pub mod harness;
