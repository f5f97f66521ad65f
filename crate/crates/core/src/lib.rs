//! Feed-forward segmentation and ejection-fraction classification for
//! cardiac cine volumes: Saab encoder, boosted-tree decoders, metrics,
//! file formats and synthetic phantoms.

pub mod census;
pub mod cls;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gbt;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod saab;
pub mod seg;
pub mod volume;

pub use error::{Error, ErrorCategory, Result};
