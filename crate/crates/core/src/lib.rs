//! Dynamic view synthesis from monocular video: a static radiance field, a
//! time-varying dynamic field with scene flow, volume rendering, the
//! regularized training objective, and the data and checkpoint formats
//! around them.

pub mod camera;
pub mod data;
pub mod encoding;
pub mod error;
pub mod fields;
pub mod losses;
pub mod metrics;
pub mod optimize;
pub mod raster;
pub mod render;
pub mod sceneflow;
pub mod view;

pub use error::{Error, Result};
