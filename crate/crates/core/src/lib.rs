pub mod corpus;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod pipeline;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod uq2i;
pub mod vocab;
pub mod world;

pub use error::{Error, Result};
