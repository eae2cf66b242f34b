//! Face forgery detection by local relation learning.
//!
//! The pipeline turns an RGB face into a high-pass frequency cue, runs RGB and
//! frequency streams through a small backbone fused by spatial attention at
//! three depths, and classifies the image from the pairwise cosine similarity
//! of multi-scale feature patches. Training supervises that similarity pattern
//! with a target derived from the manipulation mask.

pub mod datagen;
pub mod diff;
pub mod error;
pub mod frequency;
pub mod mpsm;
pub mod net;
pub mod nn;
pub mod objective;
pub mod raster;
pub mod supervision;
pub mod train;

pub use error::{Error, Result};
pub use raster::Image;
