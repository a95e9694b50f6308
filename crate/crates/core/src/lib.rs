//! Balanced synthetic chest X-ray image-text corpus generation, curation and
//! auditing.

pub mod audit;
pub mod catalog;
pub mod config;
pub mod curation;
pub mod distribution;
pub mod entity;
pub mod fixtures;
pub mod image;
pub mod pipeline;
pub mod providers;
pub mod report;
pub mod rng;
pub mod sampler;
pub mod similarity;
pub mod store;
