pub mod analysis;
pub mod audio;
pub mod corpus;
pub mod error;
pub mod masks;
pub mod metrics;
pub mod oracle;
pub mod saliency;
pub mod segmentation;

pub use error::{Error, Result};
