//! The buildherd CI server: everything around the core state machine that
//! touches the outside world.
//!
//! - [`runner`]: build steps as child processes, the wall clock
//! - [`repo`]: shared in-memory and content-hashed directory repositories
//! - [`history`]: the append-only run history file
//! - [`config`], [`server`], [`service`]: the event loop and its HTTP API
//! - [`client`], [`cli`]: the `buildherd` command
//! - [`trace`]: commit traces for simulation

pub mod cli;
pub mod client;
pub mod config;
pub mod history;
pub mod repo;
pub mod runner;
pub mod server;
pub mod service;
pub mod trace;

pub use buildherd_core as core;
