//! Domain prompt learning over a toy frozen dual encoder, from first
//! principles: a dense-tensor reverse-mode autodiff core, quaternion layers
//! that generate cross-modal prompts, cross-modal low-rank adaptation, and a
//! seeded base-to-novel benchmark harness.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod episode;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod optim;
pub mod params;
pub mod prompt;
pub mod quat;
pub mod rng;
pub mod svg;
pub mod tape;

pub use error::{Error, Result};
pub use optim::SgdConfig;
pub use params::ParamStore;
pub use quat::{QuatFeature, Quaternion, SlotPattern};
pub use tape::{Tape, TensorId};
