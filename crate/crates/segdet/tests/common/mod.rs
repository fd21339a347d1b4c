//! Helpers shared between integration test targets.

pub mod gradsuite;
