//! Segmentation network building blocks.

pub mod kernels;
pub mod net;
pub mod params;

pub use kernels::{Act, ConvKind};
pub use net::{init_triplet, volume_input, Features, ForwardMode, ForwardTaps, NetCache, NetConfig, Prefix, SegNet};
pub use params::{ParamEntry, ParamLayout};
