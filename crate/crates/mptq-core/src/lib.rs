//! Post-training quantization toolkit for small transformer encoders:
//! activation redistribution fused into LayerNorm/linear pairs, a
//! three-region post-GeLU quantizer, and greedy mixed-precision bit-width
//! allocation, evaluated end to end on a deterministic toy encoder.
//!
//! ```
//! use mptq_core::model::{ModelConfig, ToyViT};
//! use mptq_core::pipeline::{run_mptq, Mode, PipelineConfig};
//! use mptq_core::redistribute::Strategy;
//! use mptq_core::synthetic;
//!
//! let model = ToyViT::seeded(ModelConfig::default(), 7)?;
//! let data = synthetic::calibration_tokens(8, 8, 32, 7)?;
//! let config = PipelineConfig {
//!     mode: Mode::Mp,
//!     weight_bits: 6.0,
//!     act_bits: 6.0,
//!     strategy: Strategy::SqB,
//!     sample_count: 4,
//!     ..PipelineConfig::default()
//! };
//! let run = run_mptq(&model, &data, &config)?;
//! assert!(run.report.end_to_end_sqnr_db.0 > 0.0);
//! # Ok::<(), mptq_core::Error>(())
//! ```

pub mod alloc;
pub mod calibrate;
pub mod container;
pub mod error;
pub mod floats;
pub mod gelu_quant;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod redistribute;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
