//! Drug-disease association prediction with two-tower autoencoders whose
//! drug encoder is also trained on a contrastive task over SMILES and InChI
//! views of each drug.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod featurize;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
