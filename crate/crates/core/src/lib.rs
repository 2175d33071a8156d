//! Train a small 3D convolutional classifier on quantitative brain volumes and
//! optimize occluding masks that show which regions drive its decisions.

pub mod dataio;
pub mod error;
pub mod masker;
pub mod metrics;
pub mod network;
pub mod seed;
pub mod trainer;
pub mod volgrad;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{LabelVolume, Volume};
