//! Qualitative coding of conversation data with LLM-backed coders.

pub mod corpus;
pub mod gateway;
pub mod grammar;
pub mod segmenter;
pub mod codebook;
pub mod pipelines;
pub mod topic;
pub mod evaluation;
pub mod fixtures;
pub mod runner;
