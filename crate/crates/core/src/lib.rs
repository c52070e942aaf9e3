pub mod checkpoint;
pub mod config;
pub mod degrade;
pub mod error;
pub mod freq;
pub mod gradcheck;
pub mod hflora;
pub mod io;
pub mod lhvae;
pub mod nn;
pub mod pipeline;
pub mod restorer;
pub mod tensor;
pub mod training;

pub use checkpoint::{CheckpointBundle, Stage};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use tensor::{HwcTensor, ImageTensor, LatentTensor};
