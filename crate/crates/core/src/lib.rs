//! Locality-aware attention neural operator.
//!
//! Points of a discretized domain are grouped into K-nearest-neighbor
//! patches; every layer fuses a linear-cost global attention branch with a
//! per-patch softmax attention branch whose neighbor features are attenuated
//! by a learnable soft mask. Everything runs on the small reverse-mode engine
//! in [`tensor`].

pub mod attention;
pub mod bench;
pub mod data;
pub mod diagnostics;
pub mod format;
pub mod geometry;
pub mod gradcheck;
pub mod model;
mod params;
pub mod properties;
pub mod tensor;
pub mod training;
