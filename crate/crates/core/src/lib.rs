//! Orchestration toolkit for few-shot paraspinal muscle segmentation.
//!
//! The crate covers the whole workflow around (but not including) the neural
//! models: volume I/O and preprocessing, interleaved prompt-propagation
//! planning, a file-based protocol for external segmentation / feature /
//! training backends, confidence-filtered pseudo-label refinement, muscle
//! quantification and the agreement statistics used to compare AI-derived
//! measurements with manual ones.
//!
//! Neural models are never linked in. They run as separate processes that
//! speak the wire contract in [`backend`]. The [`phantom`] module provides
//! synthetic data and deterministic stand-in backends so the full cascade can
//! be exercised without model weights.

pub mod backend;
pub mod mask;
pub mod phantom;
pub mod pipeline;
pub mod plan;
pub mod quant;
pub mod report;
pub mod selection;
pub mod stats;
pub mod volume;

pub use mask::{Side, SliceMask};
pub use volume::{Dims, LabelVolume, Modality, ScalarVolume, VoxelSpacing};
