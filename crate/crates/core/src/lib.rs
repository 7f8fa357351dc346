pub mod assistant;
pub mod chat;
pub mod cli;
pub mod deck;
pub mod microdose;
pub mod plotsvg;
pub mod postproc;
pub mod runner;
pub mod stats;
pub mod workflow;
