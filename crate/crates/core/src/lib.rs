pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gcn;
pub mod head;
pub mod kge;
pub mod model;
pub mod numerics;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
