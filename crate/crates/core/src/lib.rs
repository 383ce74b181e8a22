//! Condition-routed global image descriptors and retrieval-based visual
//! localization on a synthetic benchmark.

pub mod numerics;
pub mod synthworld;
pub mod model;
pub mod seeding;
pub mod mining;
pub mod training;
pub mod retrieval;
pub mod evaluation;
pub mod cli;
