//! Robust reversible watermarking: an integer invertible network embeds a
//! watermark map into an 8-bit image, and a reversible second stage carries
//! everything needed to undo the embedding bit-exactly.

pub mod codec;
pub mod error;
pub mod experiments;
pub mod harness;
pub mod iflow;
pub mod noisepool;
pub mod numerics;
pub mod pipeline;
pub mod rdh;
pub mod subnets;
pub mod training;

pub use error::{Error, Result};
