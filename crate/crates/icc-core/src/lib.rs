//! Measures of intraclass clustering in neural-network activations.
//!
//! The library is organized around a simple pipeline: activation dumps on
//! disk (`store`) are loaded into memory, distance/silhouette kernels
//! (`geometry`) and the four clustering measures c1-c4 (`measures`) are
//! computed over them, and sweep results are scored against generalization
//! with a granulated rank correlation (`ranking`). A self-contained MLP
//! trainer (`toytrain`) produces dumps end to end for testing and demos, and
//! `plot` renders the standard result charts as SVG.
//!
//! All computation is done in f64 and is deterministic for a fixed seed:
//! identical inputs produce identical outputs across runs and thread counts.

pub mod geometry;
pub mod measures;
pub mod plot;
pub mod ranking;
pub mod stats;
pub mod store;
pub mod toytrain;
