//! Keyframe object detection with compressed-domain box propagation.
//!
//! An expensive detector runs only on scheduled keyframes. In between, each
//! box is carried forward with the codec's block motion vectors, and the
//! detector is called early when propagation breaks down or a box grows
//! implausibly fast.

pub mod detector;
pub mod evalkit;
pub mod geometry;
pub mod mvstream;
pub mod propagate;
pub mod scheduler;
pub mod synth;
