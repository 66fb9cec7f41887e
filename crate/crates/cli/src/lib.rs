//! Command-line front end for the checkpoint-averaging toolkit and the
//! scripted experiments that exercise it.

pub mod app;
pub mod recipes;
