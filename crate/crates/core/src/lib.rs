pub mod model;
pub mod segmentation;
pub mod retrieval;
pub mod gateway;
pub mod evaluation;
pub mod corpus;
pub mod pipeline;
pub mod cli;
