// Negated comparisons are used on purpose so that NaN fails every check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod box_tracker;
pub mod depth_clustering;
pub mod geometry;
pub mod object_probability;
pub mod keypoint_probability;
pub mod pose_optimizer;
pub mod io_eval;
pub mod pipeline;
pub mod synth;
