//! Text-driven object-centric style transfer.
//!
//! A small U-Net is optimised per scene so that only the object named by a
//! source text is restyled towards a style text, while the rest of the image
//! is held in place. Region grounding works on image patches scored by a
//! joint image–text embedder; a masked metric battery scores the results.

pub mod backends;
pub mod config;
pub mod error;
pub mod grounding;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod stylenet;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{BinaryMask, Image, Rect};
