pub mod analysis;
pub mod corpus;
pub mod generation;
pub mod llmclient;
pub mod metrics;
pub mod promptkit;
pub mod ranking;
pub mod retrieval;
mod par;
mod seed;
