pub mod ablation;
pub mod augment;
pub mod cluster;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod matching;
pub mod grad;
pub mod optim;
pub mod persist;
pub mod refine;
pub mod trainer;

pub use error::{Error, Result};
