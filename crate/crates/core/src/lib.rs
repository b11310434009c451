pub mod amim;
pub mod autodiff;
pub mod bench;
pub mod checks;
pub mod cli;
pub mod config;
pub mod energy;
pub mod error;
pub mod head;
pub mod imaging;
pub mod model;
pub mod nn;
pub mod optim;
pub mod sched;
pub mod seqio;
pub mod snn;
pub mod track;
pub mod train;

pub use error::{Error, Result};
