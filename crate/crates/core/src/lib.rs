//! Image harmonization with region-aware and semantic-guided normalization,
//! built on a small reverse-mode autodiff core.

pub mod btrank;
pub mod generator;
pub mod imaging;
pub mod norm;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod verify;
