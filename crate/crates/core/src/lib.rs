pub mod corpus;
pub mod distill;
pub mod error;
pub mod exec;
pub mod forge;
pub mod functional;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod selfsup;
pub mod teacher;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Real, Tensor};
