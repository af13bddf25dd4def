//! Indoor positioning from channel state information: a channel simulator,
//! hand-designed and learned CSI features, a probability-map positioning
//! network, time-series fusion, and the file formats and experiment
//! drivers around them.

pub mod channel_sim;
pub mod config;
pub mod error;
pub mod experiment;
pub mod features;
pub mod frontend;
pub mod fusion;
pub mod io;
pub mod model;
pub mod numerics;
pub mod posnet;
pub mod probmap;
pub mod train;

pub use error::{Error, Result};
