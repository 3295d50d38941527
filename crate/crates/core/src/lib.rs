//! Linear-complexity dual-axis encoder for tabular in-context learning.

pub mod embed;
pub mod error;
pub mod featureaxis;
pub mod model;
pub mod numerics;
pub mod sampleaxis;
pub mod scmgen;
pub mod train;

pub use error::{FeatError, Result};
