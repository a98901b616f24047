//! Global-local masked autoencoder pre-training for volumetric images.
//!
//! The crate covers the whole desk-scale pipeline: synthetic and raw-grid
//! volumes ([`volume`]), multi-crop view sampling ([`views`]), patch masking
//! ([`patch`]), the 3D ViT student/teacher ([`vit`]), the reconstruction and
//! consistency objectives ([`objectives`]), momentum schedules ([`teacher`]),
//! the pre-training loop ([`pretrain`]) and downstream evaluation ([`eval`]).

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod interp;
pub mod objectives;
pub mod optim;
pub mod patch;
pub mod plot;
pub mod pretrain;
pub mod teacher;
pub mod views;
pub mod vit;
pub mod volume;

pub use error::{Error, Result};
