pub mod adapter;
pub mod analysis;
pub mod backbone;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
