//! Event-camera neural radiance fields with learned pose correction.

pub mod checkpoint;
pub mod color;
pub mod dual;
pub mod error;
pub mod events;
pub mod field;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod pose_net;
pub mod presets;
pub mod raster;
pub mod rendering;
pub mod sampling;
pub mod scene;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod trajectory;

pub use error::{Error, Result};
