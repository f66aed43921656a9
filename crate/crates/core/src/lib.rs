pub mod archive;
pub mod audio;
pub mod config;
pub mod convert;
pub mod data;
pub mod embedding;
pub mod error;
pub mod f0;
pub mod features;
pub mod mcd;
pub mod mcep;
pub mod nn;
pub mod tape;
pub mod ser;
pub mod stargan;
pub mod toy_corpus;
pub mod train;
pub mod vocoder;
pub mod workflow;

pub use error::{EvcError, Result};
