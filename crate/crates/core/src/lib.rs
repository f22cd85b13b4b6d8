//! Task model, output checking, sandboxed execution, scheduling,
//! evaluation and durable storage for the submission service.

pub mod archive;
pub mod checker;
pub mod evaluator;
pub mod manifest;
pub mod materials;
pub mod model;
pub mod sandbox;
pub mod scheduler;
pub mod store;
pub mod worker;
