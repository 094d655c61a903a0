pub mod curation;
pub mod dataset;
pub mod embedder;
pub mod error;
pub mod model;
pub mod segmenter;
pub mod slide;
pub mod train_eval;
pub mod verifysvc;
pub mod vindex;

pub use error::{Error, Result};
