//! Int8 inference engine for the Squeezed Edge YOLO detector, together with
//! the tooling needed to deploy it on a three-level scratchpad microcontroller:
//!
//! - [`qtensor`]: float and int8 tensors, affine quantization, fixed-point requantize.
//! - [`kernels`]: conv / SE / pool / upsample / route / leaky ReLU in float and int8.
//! - [`graph`]: the 31-layer network, shape inference, parameter and op counts, execution.
//! - [`detect`]: YOLO head decoding, IoU and greedy NMS.
//! - [`memplan`]: hardware model, tile planner, latency model, occupancy traces.
//! - [`evalkit`]: synthetic shapes dataset, PPM/label I/O, AP and mAP.
//! - [`modelio`]: the SEYW weight archive.
//! - [`cli`]: the `seyolo` command surface and bench arithmetic.

pub mod cli;
pub mod detect;
pub mod error;
pub mod evalkit;
pub mod graph;
pub mod kernels;
pub mod memplan;
pub mod modelio;
pub mod qtensor;

pub use error::{Error, Result};
