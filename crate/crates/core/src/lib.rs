//! Functional and cycle-approximate model of an FPGA-style CNN inference
//! accelerator that runs convolutions of any kernel size.
//!
//! The crate is organised bottom-up:
//!
//! - [`netmodel`]: layer, block, network and accelerator configuration types.
//! - [`zflow`]: serpentine register dataflow, executed functionally on int8 data.
//! - [`kseg`]: segmentation of wide kernels into sub-kernels and partial-sum composition.
//! - [`memsys`]: buffers, DRAM transfer costs, row tiling, DRAM traffic.
//! - [`sched`]: timed schedules for layer-by-layer, vertical-fused and horizontal-fused execution.
//! - [`perf`]: reference convolution, metrics, baseline split-kernel comparator.
//! - [`verify`]: seeded randomized equivalence harness.
//! - [`builtins`]: network configurations shipped as JSON assets.
//! - [`cli`]: command-line frontend.

pub mod builtins;
pub mod cli;
pub mod error;
pub mod kseg;
pub mod memsys;
pub mod netmodel;
pub mod par;
pub mod perf;
pub mod sched;
pub mod verify;
pub mod zflow;

pub use error::{Result, SimError};
pub use netmodel::{AcceleratorConfig, BlockSpec, LayerSpec, NetworkSpec, TensorI8, Weights};
