//! Execution of linked images and of IR directly.

pub mod reference;
pub mod machine;
pub mod stats;

pub use machine::{
    frame_chain, load_image, run, run_traced, run_with, step, CallEvent, Control, EmuError, MachineState, RunEnd,
    Trace, TraceEvent,
};
pub use stats::{quartiles, stack_stats, Quartiles, StackStats};
