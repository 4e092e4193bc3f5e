//! A referential numerosity game: dot-pattern stimuli, paired neural agents
//! that invent a code over a discrete token channel or a drawn sketch
//! channel, training and evaluation loops, code-analysis metrics, and the
//! experiment presets that tie them together.

pub mod agents;
pub mod exp;
pub mod game;
pub mod metrics;
pub mod raster;
pub mod stimuli;
