//! Cross-sample modeling along the `N` axis of the cell tensor.

pub mod kernels;
pub mod layers;
pub mod probes;

pub use kernels::{depthwise_conv, gla_scan, selective_scan, GlaMemory};
pub use layers::{AfbmLayer, AfbmOptions, ConvGlaLayer, SampleAxisBlock, SampleAxisOptions, ScanMode};
